"""Kernel seeds and their germination into weight-distribution parameters.

A seeded layer stores a compressed latent tensor (the seed) whose channel
count is a delta-scaled fraction of the layer's smaller channel dimension.
Two 1x1 channel-mixing decoders (the germinators) expand the seed into the
mean map and, in variational mode, the pre-softplus spread map of the layer's
weight distribution. Decoded maps are oriented to [c_in x c_out (x k x k)]
regardless of which channel dimension is larger.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple

import math

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import (
    Tensor, channel_map_1x1, clamp_min, gaussian_sample, reshape, softplus,
    transpose,
)

# Decoded spread values are clamped at this floor before softplus so the
# posterior entropy term cannot overflow as sigma collapses.
RHO_FLOOR = -20.0

# Initial value of the learnable scalar offset on the decoded rho map;
# softplus(-5) ~ 0.0067 keeps the starting weight noise small.
RHO_OFFSET_INIT = -5.0


class LayerMode(Enum):
    VARIATIONAL = "variational"      # fresh epsilon per forward
    FIXED_POINT = "fixed_point"      # mu decode only, no rho path
    POSTERIOR_MEAN = "posterior_mean"  # epsilon forced to zero


@dataclass(frozen=True)
class SeedSpec:
    """Derived shape parameters of one seeded layer.

    ``c_pip = max(1, round_half_up(delta * c_f))`` is the compressed channel
    count; ``oriented_transpose`` records whether the larger channel dimension
    is the output side (ties count as output, so the flag is deterministic).
    """

    c_in: int
    c_out: int
    k: int
    delta: float
    c_f: int = field(init=False)
    c_F: int = field(init=False)
    c_pip: int = field(init=False)
    oriented_transpose: bool = field(init=False)

    def __post_init__(self):
        if self.c_in < 1 or self.c_out < 1 or self.k < 1:
            raise ParameterError(
                f"channel/kernel dims must be >= 1, got ({self.c_in}, {self.c_out}, {self.k})")
        if not 0.0 < self.delta <= 1.0:
            raise ParameterError(f"delta must be in (0, 1], got {self.delta}")
        object.__setattr__(self, "c_f", min(self.c_in, self.c_out))
        object.__setattr__(self, "c_F", max(self.c_in, self.c_out))
        object.__setattr__(self, "c_pip", max(1, math.floor(self.delta * self.c_f + 0.5)))
        object.__setattr__(self, "oriented_transpose", self.c_F == self.c_out)

    def seed_shape(self) -> Tuple[int, ...]:
        if self.k == 1:
            return (self.c_pip, self.c_F)
        return (self.c_pip, self.c_F, self.k, self.k)


def make_seed_spec(c_in: int, c_out: int, k: int, delta: float) -> SeedSpec:
    return SeedSpec(c_in, c_out, k, delta)


@dataclass
class KernelSeed:
    spec: SeedSpec
    psi: Tensor

    def __post_init__(self):
        if self.psi.shape != self.spec.seed_shape():
            raise DimensionError(
                f"seed shape {self.psi.shape} != spec shape {self.spec.seed_shape()}")


@dataclass
class Germinator:
    """The 1x1 decoders owned by a seeded layer; no bias terms.

    ``g_rho`` and ``rho_offset`` are absent in fixed-point mode.
    """

    g_mu: Tensor
    g_rho: Optional[Tensor] = None
    rho_offset: Optional[Tensor] = None

    def __post_init__(self):
        if self.g_rho is not None and self.g_rho.shape != self.g_mu.shape:
            raise DimensionError(
                f"g_rho shape {self.g_rho.shape} != g_mu shape {self.g_mu.shape}")


def glorot_uniform(shape: Tuple[int, ...], fan_in: int, fan_out: int,
                   rng: np.random.Generator) -> Tensor:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-a, a, size=shape).astype(np.float32)
    return Tensor(data, requires_grad=True)


def init_seed(spec: SeedSpec, rng: np.random.Generator) -> KernelSeed:
    """Glorot-uniform seed; fans are taken over the seed's own channel dims."""
    kk = spec.k * spec.k
    psi = glorot_uniform(spec.seed_shape(), spec.c_pip * kk, spec.c_f * kk, rng)
    return KernelSeed(spec, psi)


def _decode(seed: KernelSeed, mixer: Tensor) -> Tensor:
    spec = seed.spec
    flat = reshape(seed.psi, (spec.c_pip, spec.c_F * spec.k * spec.k))
    mixed = channel_map_1x1(flat, mixer)
    if spec.k == 1:
        decoded = reshape(mixed, (spec.c_f, spec.c_F))
        # decode rows are the min-channel axis, so the matrix is already
        # input-major when c_out is the larger side
        return decoded if spec.oriented_transpose else transpose(decoded, (1, 0))
    decoded = reshape(mixed, (spec.c_f, spec.c_F, spec.k, spec.k))
    return decoded if spec.oriented_transpose else transpose(decoded, (1, 0, 2, 3))


def germinate(seed: KernelSeed, germ: Germinator) -> Tuple[Tensor, Optional[Tensor]]:
    """Decode the seed into (W_mu, W_rho); W_rho is None without a rho path.

    Output shape is [c_in x c_out] for linear seeds and
    [c_in x c_out x k x k] for convolutional seeds.
    """
    spec = seed.spec
    if germ.g_mu.shape != (spec.c_f, spec.c_pip):
        raise DimensionError(
            f"germinator shape {germ.g_mu.shape} != ({spec.c_f}, {spec.c_pip})")
    w_mu = _decode(seed, germ.g_mu)
    if germ.g_rho is None:
        return w_mu, None
    w_rho = _decode(seed, germ.g_rho) + germ.rho_offset
    return w_mu, w_rho


def sample_weights(w_mu: Tensor, w_rho: Tensor, mode: LayerMode,
                   rng: Optional[np.random.Generator]) -> Tuple[Tensor, Tensor]:
    """Reparameterized draw w = mu + softplus(rho) * eps; returns (w, sigma).

    Posterior-mean mode returns mu itself (the zero-epsilon draw).
    """
    if mode is LayerMode.FIXED_POINT:
        raise ParameterError("fixed-point layers have no weight distribution to sample")
    if w_mu.shape != w_rho.shape:
        raise DimensionError(f"mu shape {w_mu.shape} != rho shape {w_rho.shape}")
    sigma = softplus(clamp_min(w_rho, RHO_FLOOR))
    if mode is LayerMode.POSTERIOR_MEAN:
        return w_mu, sigma
    eps = gaussian_sample(w_mu.shape, rng)
    return w_mu + sigma * eps, sigma


def param_count(spec: SeedSpec, mode: str) -> int:
    """Trainable element count of one layer's weight path (biases excluded).

    ``mode`` is one of baseline, bnn, ksn, fksn; baseline and bnn counts
    describe the direct re-parameterizations the seeded modes are compared
    against.
    """
    kk = spec.k * spec.k
    dense = spec.c_in * spec.c_out * kk
    seeded = spec.c_pip * spec.c_F * kk
    if mode == "baseline":
        return dense
    if mode == "bnn":
        return 2 * dense
    if mode == "ksn":
        return seeded + 2 * spec.c_f * spec.c_pip + 1
    if mode == "fksn":
        return seeded + spec.c_f * spec.c_pip
    raise ParameterError(f"unknown counting mode {mode!r}")
