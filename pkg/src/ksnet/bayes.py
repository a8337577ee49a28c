"""The variational training objective: prior, posterior density, ELBO, steps.

Training minimizes ``kl_weight * (log q(w) - log P(w)) + NLL(data)`` where q
is the diagonal Gaussian implied by the reparameterized draws and P is a
two-component zero-mean scale-mixture Gaussian. One epsilon set is drawn per
step; the KL term is weighted once per minibatch.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from .errors import ContractError, ParameterError
from .layers import ForwardContext, SampleRecord
from .tensor import Tensor, _make, backward, log, log_softmax, nll_loss, tsum, zero_grads

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ScaleMixturePrior:
    """Two-component zero-mean Gaussian mixture over every weight.

    Defaults follow the training recipe: mixing weight 1/4, unit first
    variance, second variance e^-6.
    """

    pi: float = 0.25
    log_var1: float = 0.0
    log_var2: float = -6.0

    def __post_init__(self):
        if not 0.0 < self.pi < 1.0:
            raise ParameterError(f"mixture weight must be in (0, 1), got {self.pi}")

    @property
    def var1(self) -> float:
        return math.exp(self.log_var1)

    @property
    def var2(self) -> float:
        return math.exp(self.log_var2)


def prior_log_prob(w: Tensor, prior: ScaleMixturePrior) -> Tensor:
    """Summed log-density of all elements of ``w`` under the mixture prior.

    Evaluated in float64 through a log-sum-exp of the two component
    log-densities; the gradient uses the component responsibilities.
    """
    x = w.data.astype(np.float64)
    v1, v2 = prior.var1, prior.var2
    la = math.log(prior.pi) - 0.5 * (LOG_2PI + math.log(v1)) - x * x / (2.0 * v1)
    lb = math.log1p(-prior.pi) - 0.5 * (LOG_2PI + math.log(v2)) - x * x / (2.0 * v2)
    lp = np.logaddexp(la, lb)
    total = np.asarray(np.float32(lp.sum()))

    def back(g):
        r1 = 1.0 / (1.0 + np.exp(-(la - lb)))
        dx = -x * (r1 / v1 + (1.0 - r1) / v2)
        return ((g * dx).astype(np.float32),)

    return _make(total, (w,), "scale_mixture_log_prob", back)


def posterior_log_prob(records: Sequence[SampleRecord]) -> Tensor:
    """log q(w | mu, sigma) summed over every element of every record."""
    total = Tensor(np.float32(0.0))
    n_elements = 0
    for rec in records:
        if (rec.sigma.data <= 0).any():
            raise ContractError(f"non-positive sigma in record {rec.name!r}")
        n_elements += rec.w.size
        d = rec.w - rec.mu
        total = total - tsum(log(rec.sigma)) - tsum((d * d) / (rec.sigma * rec.sigma * 2.0))
    return total + Tensor(np.float32(-0.5 * LOG_2PI * n_elements))


@dataclass
class ElboBreakdown:
    """One step's loss decomposition; ``total`` is the differentiable objective."""

    log_q: Tensor
    log_prior: Tensor
    nll_data: Tensor
    kl_weight: float
    total: Tensor

    def floats(self) -> Dict[str, float]:
        return {
            "log_q": self.log_q.item(),
            "log_prior": self.log_prior.item(),
            "nll": self.nll_data.item(),
            "kl_weight": self.kl_weight,
            "total": self.total.item(),
        }


def elbo_loss(logits: Tensor, labels: np.ndarray, records: Sequence[SampleRecord],
              prior: ScaleMixturePrior, kl_weight: float) -> ElboBreakdown:
    """Assemble the minibatch objective from logits and this forward's draws."""
    if kl_weight < 0:
        raise ParameterError(f"kl_weight must be >= 0, got {kl_weight}")
    nll = nll_loss(log_softmax(logits), labels)
    log_q = posterior_log_prob(records)
    log_p = Tensor(np.float32(0.0))
    for rec in records:
        log_p = log_p + prior_log_prob(rec.w, prior)
    total = (log_q - log_p) * kl_weight + nll
    return ElboBreakdown(log_q, log_p, nll, kl_weight, total)


def mc_dropout_forward(model, x: Tensor, rate: float, streams, step: int = 0) -> Tensor:
    """One stochastic forward with dropout masks forced active (any phase)."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    ctx = ForwardContext(streams, step=step, train=False, sample=True,
                         phase="mcdrop", dropout_rate=rate)
    return model.forward(x, ctx)


def train_step(model, batch, optimizer, prior: ScaleMixturePrior,
               kl_weight: float, streams, step: int) -> ElboBreakdown:
    """One draw, one backward, one optimizer update; returns the loss parts."""
    x, y = batch
    ctx = ForwardContext(streams, step=step, train=True, sample=True, phase="train")
    logits = model.forward(x, ctx)
    breakdown = elbo_loss(logits, y, ctx.records, prior, kl_weight)
    params = list(model.named_params().items())
    zero_grads(p for _, p in params)
    backward(breakdown.total)
    optimizer.step()
    return breakdown


__all__ = [
    "ScaleMixturePrior", "SampleRecord", "ElboBreakdown",
    "prior_log_prob", "posterior_log_prob", "elbo_loss",
    "mc_dropout_forward", "train_step",
]
