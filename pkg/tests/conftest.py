import os
from pathlib import Path

import numpy as np
import pytest

from ksnet.tensor import Tensor, backward, zero_grads


def data_root() -> Path:
    return Path(os.environ.get("KSNET_DATA_DIR", "data"))


def mnist_paths():
    root = data_root() / "mnist"
    pairs = {}
    for key, stem in (("train_images", "train-images-idx3-ubyte"),
                      ("train_labels", "train-labels-idx1-ubyte"),
                      ("test_images", "t10k-images-idx3-ubyte"),
                      ("test_labels", "t10k-labels-idx1-ubyte")):
        for cand in (root / stem, root / f"{stem}.gz"):
            if cand.exists():
                pairs[key] = str(cand)
                break
    return pairs if len(pairs) == 4 else None


requires_mnist = pytest.mark.skipif(
    mnist_paths() is None,
    reason="MNIST IDX files not found; place train-images-idx3-ubyte[.gz] etc. "
           "under $KSNET_DATA_DIR/mnist (default ./data/mnist)")


def finite_difference_grads(build_loss, params, h=5e-3):
    """Central finite differences of a scalar loss over flat parameter arrays.

    ``build_loss()`` must rebuild the graph from the current parameter data
    and return the loss tensor. Perturbs each element in place.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data, dtype=np.float64)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(build_loss().data)
            flat[i] = orig - h
            down = float(build_loss().data)
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def check_grads(build_loss, params, rtol=1e-2, atol=1e-4, h=5e-3):
    """Assert analytic gradients match finite differences for every param."""
    zero_grads(params)
    loss = build_loss()
    backward(loss)
    fd = finite_difference_grads(build_loss, params, h=h)
    for p, g_num in zip(params, fd):
        assert p.grad is not None, "gradient missing"
        g_ana = p.grad.astype(np.float64)
        denom = np.maximum(np.abs(g_num), np.abs(g_ana))
        err = np.abs(g_ana - g_num)
        bad = err > atol + rtol * denom
        assert not bad.any(), (
            f"gradcheck failed: max abs err {err.max():.3e}, "
            f"worst rel {(err / np.maximum(denom, 1e-12)).max():.3e}")


def leaf(data, requires_grad=True) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=requires_grad)
