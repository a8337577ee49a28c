"""Network layers spanning the baseline, dropout, BNN, KSN and FKSN modes.

Every layer exposes ``forward(x, ctx)`` and ``named_params()``; variational
layers append a :class:`SampleRecord` per forward so the training objective
can evaluate posterior and prior log-densities of the drawn weights. Random
draws come from per-site streams keyed by layer name, so layers never
interfere with each other's randomness.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .rng import StreamHub
from .seeds import (
    Germinator, KernelSeed, LayerMode, RHO_OFFSET_INIT, SeedSpec,
    germinate, glorot_uniform, init_seed, sample_weights,
)
from .tensor import (
    Tensor, batchnorm2d_eval, batchnorm2d_train, conv2d, dropout, matmul,
    transpose,
)


@dataclass
class SampleRecord:
    """One variational layer's draw: the sampled weights with their mu/sigma."""

    name: str
    w: Tensor
    mu: Tensor
    sigma: Tensor


@dataclass
class ForwardContext:
    """Per-forward state: random streams, phase flags, and collected records.

    ``train`` controls batch-norm statistics and plain dropout;
    ``sample`` controls epsilon draws and Monte-Carlo dropout masks.
    """

    streams: StreamHub
    step: int = 0
    train: bool = False
    sample: bool = True
    phase: str = "train"
    dropout_rate: Optional[float] = None
    records: List[SampleRecord] = field(default_factory=list)

    def rng(self, site: str) -> np.random.Generator:
        return self.streams.stream(f"{self.phase}/{site}", self.step)

    @property
    def layer_mode(self) -> LayerMode:
        return LayerMode.VARIATIONAL if self.sample else LayerMode.POSTERIOR_MEAN


class DenseLinear:
    """Fixed-point linear layer y = x @ W + b."""

    mode_tag = "baseline"

    def __init__(self, name: str, c_in: int, c_out: int, hub: StreamHub,
                 bias: bool = True):
        self.name = name
        self.w = glorot_uniform((c_in, c_out), c_in, c_out,
                                hub.stream(f"init/{name}.w"))
        self.b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True) if bias else None

    def named_params(self):
        out = {f"{self.name}.w": self.w}
        if self.b is not None:
            out[f"{self.name}.b"] = self.b
        return out

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        y = matmul(x, self.w)
        return y + self.b if self.b is not None else y


class DenseConv:
    """Fixed-point convolution, no bias (batch-norm follows in the backbones)."""

    mode_tag = "baseline"

    def __init__(self, name: str, c_in: int, c_out: int, k: int, stride: int,
                 padding: int, hub: StreamHub):
        self.name = name
        self.stride = stride
        self.padding = padding
        kk = k * k
        self.w = glorot_uniform((c_out, c_in, k, k), c_in * kk, c_out * kk,
                                hub.stream(f"init/{name}.w"))

    def named_params(self):
        return {f"{self.name}.w": self.w}

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return conv2d(x, self.w, self.stride, self.padding)


class _VariationalBias:
    """Directly parameterized (mu, rho) bias vector; too small to seed."""

    def __init__(self, name: str, n: int):
        self.name = name
        self.mu = Tensor(np.zeros(n, dtype=np.float32), requires_grad=True)
        self.rho = Tensor(np.full(n, RHO_OFFSET_INIT, dtype=np.float32),
                          requires_grad=True)

    def named_params(self):
        return {f"{self.name}.b_mu": self.mu, f"{self.name}.b_rho": self.rho}

    def sample(self, ctx: ForwardContext):
        w, sigma = sample_weights(self.mu, self.rho, ctx.layer_mode,
                                  ctx.rng(f"{self.name}/eps_b"))
        ctx.records.append(SampleRecord(f"{self.name}.bias", w, self.mu, sigma))
        return w


class BnnLinear:
    """Bayes-by-backprop linear layer: every weight carries its own (mu, rho)."""

    mode_tag = "bnn"

    def __init__(self, name: str, c_in: int, c_out: int, hub: StreamHub,
                 bias: bool = True):
        self.name = name
        self.mu = glorot_uniform((c_in, c_out), c_in, c_out,
                                 hub.stream(f"init/{name}.mu"))
        self.rho = Tensor(np.full((c_in, c_out), RHO_OFFSET_INIT, dtype=np.float32),
                          requires_grad=True)
        self.bias = _VariationalBias(name, c_out) if bias else None

    def named_params(self):
        out = {f"{self.name}.mu": self.mu, f"{self.name}.rho": self.rho}
        if self.bias is not None:
            out.update(self.bias.named_params())
        return out

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        w, sigma = sample_weights(self.mu, self.rho, ctx.layer_mode,
                                  ctx.rng(f"{self.name}/eps"))
        ctx.records.append(SampleRecord(self.name, w, self.mu, sigma))
        y = matmul(x, w)
        if self.bias is not None:
            y = y + self.bias.sample(ctx)
        return y


class BnnConv:
    mode_tag = "bnn"

    def __init__(self, name: str, c_in: int, c_out: int, k: int, stride: int,
                 padding: int, hub: StreamHub):
        self.name = name
        self.stride = stride
        self.padding = padding
        kk = k * k
        self.mu = glorot_uniform((c_out, c_in, k, k), c_in * kk, c_out * kk,
                                 hub.stream(f"init/{name}.mu"))
        self.rho = Tensor(np.full((c_out, c_in, k, k), RHO_OFFSET_INIT,
                                  dtype=np.float32), requires_grad=True)

    def named_params(self):
        return {f"{self.name}.mu": self.mu, f"{self.name}.rho": self.rho}

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        w, sigma = sample_weights(self.mu, self.rho, ctx.layer_mode,
                                  ctx.rng(f"{self.name}/eps"))
        ctx.records.append(SampleRecord(self.name, w, self.mu, sigma))
        return conv2d(x, w, self.stride, self.padding)


class KsnLinear:
    """Seeded linear layer; ``variational`` selects KSN vs FKSN behaviour."""

    def __init__(self, name: str, c_in: int, c_out: int, delta: float,
                 variational: bool, hub: StreamHub, bias: bool = True):
        self.name = name
        self.variational = variational
        self.mode_tag = "ksn" if variational else "fksn"
        self.spec = SeedSpec(c_in, c_out, 1, delta)
        self.seed = init_seed(self.spec, hub.stream(f"init/{name}.psi"))
        self.germ = _make_germ(self.spec, name, hub, variational)
        if bias:
            self.bias = (_VariationalBias(name, c_out) if variational
                         else Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True))
        else:
            self.bias = None

    def named_params(self):
        out = _seed_params(self.name, self.seed, self.germ)
        if isinstance(self.bias, _VariationalBias):
            out.update(self.bias.named_params())
        elif self.bias is not None:
            out[f"{self.name}.b"] = self.bias
        return out

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        w_mu, w_rho = germinate(self.seed, self.germ)
        if self.variational:
            w, sigma = sample_weights(w_mu, w_rho, ctx.layer_mode,
                                      ctx.rng(f"{self.name}/eps"))
            ctx.records.append(SampleRecord(self.name, w, w_mu, sigma))
        else:
            w = w_mu
        y = matmul(x, w)
        if isinstance(self.bias, _VariationalBias):
            y = y + self.bias.sample(ctx)
        elif self.bias is not None:
            y = y + self.bias
        return y


class KsnConv:
    def __init__(self, name: str, c_in: int, c_out: int, k: int, stride: int,
                 padding: int, delta: float, variational: bool, hub: StreamHub):
        self.name = name
        self.stride = stride
        self.padding = padding
        self.variational = variational
        self.mode_tag = "ksn" if variational else "fksn"
        self.spec = SeedSpec(c_in, c_out, k, delta)
        self.seed = init_seed(self.spec, hub.stream(f"init/{name}.psi"))
        self.germ = _make_germ(self.spec, name, hub, variational)

    def named_params(self):
        return _seed_params(self.name, self.seed, self.germ)

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        w_mu, w_rho = germinate(self.seed, self.germ)
        if self.variational:
            w, sigma = sample_weights(w_mu, w_rho, ctx.layer_mode,
                                      ctx.rng(f"{self.name}/eps"))
            ctx.records.append(SampleRecord(self.name, w, w_mu, sigma))
        else:
            w = w_mu
        # decoded maps are input-major; conv2d wants [c_out, c_in, k, k]
        return conv2d(x, transpose(w, (1, 0, 2, 3)), self.stride, self.padding)


def _make_germ(spec: SeedSpec, name: str, hub: StreamHub, variational: bool) -> Germinator:
    shape = (spec.c_f, spec.c_pip)

    def mixer(site: str) -> Tensor:
        # a 1x1 mixer is a bare scale on the seed; Glorot-uniform scalars land
        # near zero often enough to dead-start the layer, so pin it at identity
        if shape == (1, 1):
            return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)
        return glorot_uniform(shape, spec.c_pip, spec.c_f, hub.stream(f"init/{site}"))

    g_mu = mixer(f"{name}.g_mu")
    if not variational:
        return Germinator(g_mu)
    g_rho = mixer(f"{name}.g_rho")
    offset = Tensor(np.float32(RHO_OFFSET_INIT), requires_grad=True)
    return Germinator(g_mu, g_rho, offset)


def _seed_params(name: str, seed: KernelSeed, germ: Germinator) -> Dict[str, Tensor]:
    out = {f"{name}.psi": seed.psi, f"{name}.g_mu": germ.g_mu}
    if germ.g_rho is not None:
        out[f"{name}.g_rho"] = germ.g_rho
        out[f"{name}.rho_offset"] = germ.rho_offset
    return out


class BatchNorm2d:
    """Per-channel batch normalization; scale/shift stay deterministic in all modes."""

    mode_tag = "batchnorm"

    def __init__(self, name: str, c: int, momentum: float = 0.1, eps: float = 1e-5):
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(c, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(c, dtype=np.float32)
        self.running_var = np.ones(c, dtype=np.float32)

    def named_params(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def state_arrays(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        if ctx.train:
            y, m, v = batchnorm2d_train(x, self.gamma, self.beta, self.eps)
            n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
            unbiased = v * (n / max(n - 1, 1))
            self.running_mean += self.momentum * (m - self.running_mean)
            self.running_var += self.momentum * (unbiased - self.running_var)
            return y
        return batchnorm2d_eval(x, self.gamma, self.beta,
                                self.running_mean, self.running_var, self.eps)


class DropoutWrapped:
    """Dropout applied to a layer's input.

    ``monte_carlo`` layers keep their masks active whenever the forward is
    sampling (the defining property of MC dropout); plain dropout masks only
    during training.
    """

    def __init__(self, inner, rate: float, monte_carlo: bool):
        self.inner = inner
        self.rate = rate
        self.monte_carlo = monte_carlo
        self.name = inner.name
        self.mode_tag = "mcdrop" if monte_carlo else "baseline_dropout"

    def named_params(self):
        return self.inner.named_params()

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        rate = self.rate if ctx.dropout_rate is None else ctx.dropout_rate
        active = (ctx.train or ctx.sample) if self.monte_carlo else ctx.train
        x = dropout(x, rate, ctx.rng(f"{self.name}/drop"), active)
        return self.inner.forward(x, ctx)
