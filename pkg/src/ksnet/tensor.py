"""Dense float32 tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy float32 array plus the bookkeeping needed to run
backpropagation: parent links and a backward rule per operation. Gradients
are computed by :func:`backward` in reverse topological order and accumulate
additively into leaf tensors' ``grad`` arrays.

Convolution is implemented as im2col + matmul so the convolutional path and
the 1x1 channel-mixing decode path share one GEMM primitive.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DataError, DimensionError, ParameterError

Array = np.ndarray


def _as_f32(data) -> Array:
    arr = np.asarray(data, dtype=np.float32)
    return arr


class Tensor:
    """A float32 value array, optionally tracked for gradients.

    ``grad`` is populated on leaf tensors (no parents) by :func:`backward`
    and accumulates across calls until :func:`zero_grads` resets it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _op: str = ""):
        self.data = _as_f32(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None
        self._parents = _parents
        self._backward_fn: Optional[Callable[[Array], tuple]] = None
        self._op = _op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def is_leaf(self) -> bool:
        return not self._parents

    def backward(self) -> None:
        backward(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op!r})"

    def __add__(self, other): return add(self, _wrap(other))
    def __radd__(self, other): return add(_wrap(other), self)
    def __sub__(self, other): return sub(self, _wrap(other))
    def __rsub__(self, other): return sub(_wrap(other), self)
    def __mul__(self, other): return mul(self, _wrap(other))
    def __rmul__(self, other): return mul(_wrap(other), self)
    def __truediv__(self, other): return div(self, _wrap(other))
    def __rtruediv__(self, other): return div(_wrap(other), self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: Array, parents: Sequence[Tensor], op: str,
          backward_fn: Callable[[Array], tuple]) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents),
                 _parents=tuple(parents), _op=op)
    if out.requires_grad:
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum out axes that numpy broadcasting introduced, back to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _make(data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    return _make(data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return _make(data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data
    return _make(data, (a, b), "div",
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _make(data, (a,), "exp", lambda g: (g * data,))


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)
    return _make(data, (a,), "relu",
                 lambda g: (g * (a.data > 0),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) in the overflow-safe form max(x, 0) + log1p(exp(-|x|)).

    The output is floored at the smallest positive normal float so it stays
    strictly positive even where exp(x) underflows.
    """
    x = a.data
    data = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    data = np.maximum(data, np.finfo(np.float32).tiny)

    def back(g):
        return (g * _sigmoid(x),)

    return _make(data, (a,), "softplus", back)


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def clamp_min(a: Tensor, lo: float) -> Tensor:
    data = np.maximum(a.data, np.float32(lo))
    return _make(data, (a,), "clamp_min",
                 lambda g: (g * (a.data > lo),))


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    data = np.logaddexp(a.data, b.data)

    def back(g):
        sa = _sigmoid(a.data - b.data)
        return (_unbroadcast(g * sa, a.shape), _unbroadcast(g * (1.0 - sa), b.shape))

    return _make(data, (a, b), "logaddexp", back)


# ---------------------------------------------------------------------------
# reductions and shape ops

def tsum(a: Tensor) -> Tensor:
    data = np.float32(a.data.sum(dtype=np.float64))
    return _make(np.asarray(data), (a,), "sum",
                 lambda g: (np.broadcast_to(g, a.shape).astype(np.float32),))


def tmean(a: Tensor) -> Tensor:
    data = np.float32(a.data.mean(dtype=np.float64))
    n = a.data.size
    return _make(np.asarray(data), (a,), "mean",
                 lambda g: ((np.broadcast_to(g, a.shape) / n).astype(np.float32),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    data = a.data.reshape(shape)
    return _make(data, (a,), "reshape",
                 lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[tuple] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))
    return _make(data, (a,), "transpose",
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose2d expects a matrix, got shape {a.shape}")
    return transpose(a, (1, 0))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def back(g):
        return (np.matmul(g, b.data.T), np.matmul(a.data.T, g))

    return _make(data, (a, b), "matmul", back)


def channel_map_1x1(seed: Tensor, mixer: Tensor) -> Tensor:
    """Mix channels at every position: out[:, l] = mixer @ seed[:, l].

    ``seed`` is [C_pip x L], ``mixer`` is [C_f x C_pip]; all non-channel
    dimensions of a decoded kernel are absorbed into L. This is the shared
    decode primitive for both the linear and convolutional paths, and it is
    the same GEMM conv2d reduces to for a 1x1 kernel.
    """
    if seed.data.ndim != 2 or mixer.data.ndim != 2:
        raise DimensionError(
            f"channel_map_1x1 expects matrices, got {seed.shape} and {mixer.shape}")
    if mixer.shape[1] != seed.shape[0]:
        raise DimensionError(
            f"mixer columns ({mixer.shape[1]}) must equal seed channels ({seed.shape[0]})")
    return matmul(mixer, seed)


# ---------------------------------------------------------------------------
# convolution

def _conv_geometry(h: int, w: int, k: int, stride: int, padding: int) -> tuple:
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    return ho, wo


def _im2col(xp: Array, k: int, stride: int, ho: int, wo: int) -> Array:
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (n, c, k, k, ho, wo), (s0, s1, s2, s3, stride * s2, stride * s3))
    return win.reshape(n, c * k * k, ho * wo)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 2-D cross-correlation (no kernel flip), NCHW layout.

    Forward and backward both route through im2col + matmul; the kernel
    gradient and the input gradient are the usual col2im scatter.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects NCHW input and OIKK kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = kernel.shape
    if c_in != c or kh != kw:
        raise DimensionError(
            f"kernel {kernel.shape} incompatible with input {x.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride={stride} padding={padding}")
    k = kh
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(
            f"kernel size {k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    ho, wo = _conv_geometry(h, w, k, stride, padding)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, k, stride, ho, wo)              # (N, C*k*k, L)
    wmat = kernel.data.reshape(c_out, c * k * k)
    out = np.matmul(wmat, cols).reshape(n, c_out, ho, wo)

    def back(g):
        gflat = g.reshape(n, c_out, ho * wo)
        dwmat = np.matmul(gflat, cols.transpose(0, 2, 1)).sum(axis=0)
        dcols = np.matmul(wmat.T, gflat)               # (N, C*k*k, L)
        d6 = dcols.reshape(n, c, k, k, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d6[:, :, i, j]
        if padding:
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
        else:
            dx = dxp
        return (np.ascontiguousarray(dx), dwmat.reshape(kernel.shape))

    return _make(out, (x, kernel), "conv2d", back)


# ---------------------------------------------------------------------------
# pooling

def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first max."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2x2 expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    win = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(n, c, ho, wo, 4)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def back(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        dx = dflat.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (np.ascontiguousarray(dx.reshape(n, c, h, w)),)

    return _make(np.ascontiguousarray(out), (x,), "maxpool2x2", back)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def back(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(np.float32),)

    return _make(out, (x,), "global_avg_pool", back)


# ---------------------------------------------------------------------------
# normalization

def batchnorm2d_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Batch normalization over (N, H, W) per channel, training statistics.

    Returns ``(y, batch_mean, batch_var)``; the caller owns any running-stat
    update. Gradients flow through the batch statistics.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm2d expects NCHW, got {x.shape}")
    axes = (0, 2, 3)
    m = x.data.mean(axis=axes)
    v = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - m[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def back(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data[None, :, None, None]
        mean_dxhat = dxhat.mean(axis=axes)[None, :, None, None]
        mean_dxhat_xhat = (dxhat * xhat).mean(axis=axes)[None, :, None, None]
        dx = inv[None, :, None, None] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
        return (dx.astype(np.float32), dgamma.astype(np.float32), dbeta.astype(np.float32))

    y = _make(out.astype(np.float32), (x, gamma, beta), "batchnorm_train", back)
    return y, m.astype(np.float32), v.astype(np.float32)


def batchnorm2d_eval(x: Tensor, gamma: Tensor, beta: Tensor,
                     mean: Array, var: Array, eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm2d expects NCHW, got {x.shape}")
    inv = (1.0 / np.sqrt(var + eps)).astype(np.float32)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def back(g):
        axes = (0, 2, 3)
        dgamma = (g * xhat).sum(axis=axes).astype(np.float32)
        dbeta = g.sum(axis=axes).astype(np.float32)
        dx = g * (gamma.data * inv)[None, :, None, None]
        return (dx.astype(np.float32), dgamma, dbeta)

    return _make(out.astype(np.float32), (x, gamma, beta), "batchnorm_eval", back)


# ---------------------------------------------------------------------------
# classification heads

def log_softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"log_softmax expects [N x C] logits, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def back(g):
        return (g - np.exp(ls) * g.sum(axis=1, keepdims=True),)

    return _make(ls.astype(np.float32), (x,), "log_softmax", back)


def nll_loss(logp: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under row log-probabilities."""
    if logp.data.ndim != 2:
        raise DimensionError(f"nll_loss expects [N x C], got {logp.shape}")
    labels = np.asarray(labels)
    n, c = logp.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"label out of range [0, {c}): {labels.min()}..{labels.max()}")
    picked = logp.data[np.arange(n), labels]
    out = np.asarray(np.float32(-picked.mean(dtype=np.float64)))

    def back(g):
        d = np.zeros_like(logp.data)
        d[np.arange(n), labels] = -g / n
        return (d,)

    return _make(out, (logp,), "nll_loss", back)


# ---------------------------------------------------------------------------
# stochastic ops

def dropout(x: Tensor, rate: float, rng: np.random.Generator, active: bool = True) -> Tensor:
    """Inverted dropout: zero units with probability ``rate``, scale by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not active or rate == 0.0:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= rate)
    mask = keep.astype(np.float32) / np.float32(1.0 - rate)
    return _make(x.data * mask, (x,), "dropout", lambda g: (g * mask,))


def gaussian_sample(shape: tuple, rng: np.random.Generator) -> Tensor:
    """A fresh N(0, 1) draw; a constant leaf as far as autograd is concerned."""
    return Tensor(rng.standard_normal(shape, dtype=np.float32))


# ---------------------------------------------------------------------------
# backward pass

def _topo_order(root: Tensor) -> list:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tracked leaf reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward on a tensor with no tracked inputs")
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf() and node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward_fn is None:
            continue
        for parent, pg in zip(node._parents, node._backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
