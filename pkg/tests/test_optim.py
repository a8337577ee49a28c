"""Optimizer update rules: first-step identities and convergence runs."""

import numpy as np
import pytest

from ksnet.errors import ContractError
from ksnet.optim import SGD, Adam, make_optimizer
from ksnet.tensor import Tensor, backward, tsum, zero_grads


def scalar_param(value: float) -> Tensor:
    return Tensor(np.array(value, dtype=np.float32), requires_grad=True)


class TestAdam:
    def test_bias_corrected_first_step_moves_by_lr(self):
        p = scalar_param(1.0)
        p.grad = np.array(1.0, dtype=np.float32)
        Adam([("p", p)], lr=1e-3).step()
        np.testing.assert_allclose(float(p.data), 0.999, atol=1e-6)

    def test_zero_grad_leaves_param_unchanged(self):
        p = scalar_param(2.5)
        opt = Adam([("p", p)], lr=1e-3)
        p.grad = np.array(0.0, dtype=np.float32)
        opt.step()
        assert float(p.data) == 2.5

    def test_moments_decay_after_nonzero_history(self):
        p = scalar_param(1.0)
        opt = Adam([("p", p)], lr=1e-3)
        p.grad = np.array(1.0, dtype=np.float32)
        opt.step()
        m_before = float(opt.m["p"])
        p.grad = np.array(0.0, dtype=np.float32)
        opt.step()
        assert abs(float(opt.m["p"])) < abs(m_before)

    def test_quadratic_converges_in_100_steps(self):
        # direct optimization run as its own oracle: f(p) = (p - 3)^2
        p = scalar_param(0.0)
        opt = Adam([("p", p)], lr=0.1)
        for _ in range(100):
            zero_grads([p])
            backward(tsum((p - 3.0) * (p - 3.0)))
            opt.step()
        assert abs(float(p.data) - 3.0) < 0.5

    def test_missing_grad_is_contract_error(self):
        p = scalar_param(1.0)
        opt = Adam([("p", p)], lr=1e-3)
        with pytest.raises(ContractError, match="p"):
            opt.step()

    def test_state_persists_across_calls(self):
        p = scalar_param(1.0)
        opt = Adam([("p", p)], lr=1e-3)
        for expected_t in (1, 2, 3):
            p.grad = np.array(0.5, dtype=np.float32)
            opt.step()
            assert opt.t == expected_t
        assert float(opt.v["p"]) > 0


class TestSGD:
    def test_plain_step(self):
        p = scalar_param(1.0)
        opt = SGD([("p", p)], lr=0.1)
        p.grad = np.array(2.0, dtype=np.float32)
        opt.step()
        np.testing.assert_allclose(float(p.data), 0.8, rtol=1e-6)

    def test_factory(self):
        p = scalar_param(0.0)
        assert isinstance(make_optimizer("adam", [("p", p)], 1e-3), Adam)
        assert isinstance(make_optimizer("sgd", [("p", p)], 1e-3), SGD)
        with pytest.raises(ContractError):
            make_optimizer("lbfgs", [("p", p)], 1e-3)
