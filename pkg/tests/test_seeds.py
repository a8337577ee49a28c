"""Seed shape algebra, initialization statistics, germination, counting."""

import math

import numpy as np
import pytest

from ksnet.errors import DimensionError, ParameterError
from ksnet.rng import StreamHub
from ksnet.seeds import (
    Germinator, KernelSeed, LayerMode, SeedSpec, germinate, init_seed,
    make_seed_spec, param_count, sample_weights,
)
from ksnet.tensor import Tensor, backward, tsum, zero_grads


class TestSeedSpec:
    def test_square_512(self):
        s = make_seed_spec(512, 512, 3, 1.0)
        assert (s.c_f, s.c_F, s.c_pip) == (512, 512, 512)

    def test_stem_delta_quarter_rounds_up_to_one(self):
        s = make_seed_spec(3, 64, 3, 0.25)
        assert (s.c_f, s.c_F, s.c_pip) == (3, 64, 1)
        assert s.oriented_transpose

    def test_symmetric_half(self):
        s = make_seed_spec(64, 64, 1, 0.5)
        assert s.c_pip == 32
        assert s.oriented_transpose  # tie counts as output-major

    def test_round_half_up(self):
        assert make_seed_spec(10, 20, 1, 0.25).c_pip == 3   # 2.5 -> 3
        assert make_seed_spec(10, 20, 1, 0.75).c_pip == 8   # 7.5 -> 8
        assert make_seed_spec(3, 8, 1, 0.5).c_pip == 2      # 1.5 -> 2

    def test_pip_floor_of_one(self):
        assert make_seed_spec(1, 64, 3, 0.25).c_pip == 1

    def test_ordering_invariant(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            ci, co = rng.integers(1, 100, 2)
            k = int(rng.choice([1, 3, 5]))
            delta = float(rng.uniform(0.05, 1.0))
            s = make_seed_spec(int(ci), int(co), k, delta)
            assert 1 <= s.c_pip <= s.c_f <= s.c_F
            assert s.oriented_transpose == (s.c_F == s.c_out)

    def test_delta_out_of_range(self):
        with pytest.raises(ParameterError):
            make_seed_spec(4, 4, 1, 0.0)
        with pytest.raises(ParameterError):
            make_seed_spec(4, 4, 1, 1.5)

    def test_bad_dims(self):
        with pytest.raises(ParameterError):
            make_seed_spec(0, 4, 1, 1.0)


class TestInitSeed:
    def test_bounds_and_mean(self):
        spec = make_seed_spec(64, 128, 3, 1.0)  # 73728 elements
        seed = init_seed(spec, StreamHub(0).stream("init/test"))
        kk = spec.k * spec.k
        a = math.sqrt(6.0 / (spec.c_pip * kk + spec.c_f * kk))
        assert np.abs(seed.psi.data).max() <= a
        assert abs(seed.psi.data.mean()) < a / 10

    def test_deterministic_under_fixed_stream(self):
        spec = make_seed_spec(8, 16, 3, 0.5)
        a = init_seed(spec, StreamHub(4).stream("init/x"))
        b = init_seed(spec, StreamHub(4).stream("init/x"))
        np.testing.assert_array_equal(a.psi.data, b.psi.data)

    def test_variance_matches_uniform_moment(self):
        spec = make_seed_spec(64, 64, 3, 1.0)
        seed = init_seed(spec, StreamHub(1).stream("init/var"))
        a = math.sqrt(6.0 / (spec.c_pip * 9 + spec.c_f * 9))
        var = seed.psi.data.var()
        assert abs(var - a * a / 3) < 0.1 * (a * a / 3)

    def test_shape_checked(self):
        spec = make_seed_spec(4, 8, 3, 1.0)
        with pytest.raises(DimensionError):
            KernelSeed(spec, Tensor(np.zeros((4, 8))))


def loop_decode(psi: np.ndarray, g: np.ndarray, spec: SeedSpec) -> np.ndarray:
    """Independent scalar-loop decoder with explicit orientation."""
    if spec.k == 1:
        decoded = np.zeros((spec.c_f, spec.c_F), dtype=np.float64)
        for f in range(spec.c_f):
            for big in range(spec.c_F):
                acc = 0.0
                for p in range(spec.c_pip):
                    acc += float(g[f, p]) * float(psi[p, big])
                decoded[f, big] = acc
        return decoded if spec.oriented_transpose else decoded.T
    decoded = np.zeros((spec.c_f, spec.c_F, spec.k, spec.k), dtype=np.float64)
    for f in range(spec.c_f):
        for big in range(spec.c_F):
            for i in range(spec.k):
                for j in range(spec.k):
                    acc = 0.0
                    for p in range(spec.c_pip):
                        acc += float(g[f, p]) * float(psi[p, big, i, j])
                    decoded[f, big, i, j] = acc
    return decoded if spec.oriented_transpose else decoded.transpose(1, 0, 2, 3)


class TestGerminate:
    def test_identity_mixer_returns_reoriented_seed(self):
        spec = make_seed_spec(4, 4, 3, 1.0)
        psi = np.random.default_rng(2).standard_normal(spec.seed_shape()).astype(np.float32)
        seed = KernelSeed(spec, Tensor(psi, requires_grad=True))
        germ = Germinator(Tensor(np.eye(4, dtype=np.float32), requires_grad=True))
        w_mu, w_rho = germinate(seed, germ)
        assert w_rho is None
        np.testing.assert_array_equal(w_mu.data, psi)

    def test_linear_hand_case(self):
        spec = make_seed_spec(3, 1, 1, 1.0)
        assert (spec.c_f, spec.c_F, spec.c_pip) == (1, 3, 1)
        assert not spec.oriented_transpose
        seed = KernelSeed(spec, Tensor([[1., 2., 3.]], requires_grad=True))
        germ = Germinator(Tensor([[2.]], requires_grad=True))
        w_mu, _ = germinate(seed, germ)
        assert w_mu.shape == (3, 1)
        np.testing.assert_array_equal(w_mu.data, [[2.], [4.], [6.]])

    def test_twenty_random_specs_against_loop_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            ci = int(rng.integers(1, 12))
            co = int(rng.integers(1, 12))
            k = int(rng.choice([1, 3]))
            delta = float(rng.uniform(0.2, 1.0))
            spec = make_seed_spec(ci, co, k, delta)
            psi = rng.standard_normal(spec.seed_shape()).astype(np.float32)
            g_mu = rng.standard_normal((spec.c_f, spec.c_pip)).astype(np.float32)
            g_rho = rng.standard_normal((spec.c_f, spec.c_pip)).astype(np.float32)
            germ = Germinator(Tensor(g_mu), Tensor(g_rho), Tensor(np.float32(-5.0)))
            w_mu, w_rho = germinate(KernelSeed(spec, Tensor(psi)), germ)
            want_shape = (ci, co) if k == 1 else (ci, co, k, k)
            assert w_mu.shape == want_shape and w_rho.shape == want_shape
            np.testing.assert_allclose(w_mu.data, loop_decode(psi, g_mu, spec),
                                       rtol=1e-5, atol=1e-6)
            np.testing.assert_allclose(w_rho.data, loop_decode(psi, g_rho, spec) - 5.0,
                                       rtol=1e-5, atol=1e-5)

    def test_mismatched_germinator_rejected(self):
        spec = make_seed_spec(4, 8, 3, 1.0)
        seed = init_seed(spec, StreamHub(0).stream("s"))
        with pytest.raises(DimensionError):
            germinate(seed, Germinator(Tensor(np.zeros((3, 3), dtype=np.float32))))

    def test_gradients_reach_seed_and_decoders(self):
        spec = make_seed_spec(3, 5, 3, 1.0)
        rng = np.random.default_rng(3)
        psi = Tensor(rng.standard_normal(spec.seed_shape()).astype(np.float32),
                     requires_grad=True)
        g_mu = Tensor(rng.standard_normal((3, 3)).astype(np.float32), requires_grad=True)
        g_rho = Tensor(rng.standard_normal((3, 3)).astype(np.float32), requires_grad=True)
        off = Tensor(np.float32(-5.0), requires_grad=True)
        germ = Germinator(g_mu, g_rho, off)
        seed = KernelSeed(spec, psi)
        w_mu, w_rho = germinate(seed, germ)
        w, _ = sample_weights(w_mu, w_rho, LayerMode.VARIATIONAL,
                              StreamHub(0).stream("eps"))
        zero_grads([psi, g_mu, g_rho, off])
        backward(tsum(w * w))
        for p in (psi, g_mu, g_rho, off):
            assert p.grad is not None and np.any(p.grad != 0)


class TestSampleWeights:
    def test_posterior_mean_is_mu_bitwise(self):
        rng = np.random.default_rng(5)
        mu = Tensor(rng.standard_normal((4, 4)).astype(np.float32))
        rho = Tensor(rng.standard_normal((4, 4)).astype(np.float32))
        w, _ = sample_weights(mu, rho, LayerMode.POSTERIOR_MEAN, None)
        assert w is mu

    def test_tiny_rho_collapses_to_mu(self):
        rng = np.random.default_rng(6)
        mu = Tensor(rng.standard_normal(16).astype(np.float32))
        rho = Tensor(np.full(16, -50.0, dtype=np.float32))
        w, _ = sample_weights(mu, rho, LayerMode.VARIATIONAL, StreamHub(0).stream("e"))
        np.testing.assert_allclose(w.data, mu.data, atol=1e-6)

    def test_monte_carlo_moments_at_rho_zero(self):
        mu = Tensor(np.zeros(1, dtype=np.float32))
        rho = Tensor(np.zeros(1, dtype=np.float32))
        hub = StreamHub(11)
        n = 100_000
        draws = np.empty(n, dtype=np.float32)
        for i in range(n):
            w, _ = sample_weights(mu, rho, LayerMode.VARIATIONAL, hub.stream("mc", i))
            draws[i] = w.data[0]
        ln2 = math.log(2.0)
        assert abs(draws.mean()) < 3 * ln2 / math.sqrt(n)
        assert abs(draws.std() - ln2) < 0.02 * ln2

    def test_fixed_point_mode_rejected(self):
        mu = Tensor(np.zeros(3, dtype=np.float32))
        with pytest.raises(ParameterError):
            sample_weights(mu, mu, LayerMode.FIXED_POINT, None)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            sample_weights(Tensor(np.zeros(3)), Tensor(np.zeros(4)),
                           LayerMode.VARIATIONAL, StreamHub(0).stream("e"))

    def test_sigma_strictly_positive(self):
        rho = Tensor(np.array([-1e4, -50.0, 0.0, 50.0], dtype=np.float32))
        mu = Tensor(np.zeros(4, dtype=np.float32))
        _, sigma = sample_weights(mu, rho, LayerMode.POSTERIOR_MEAN, None)
        assert (sigma.data > 0).all()


class TestParamCount:
    def test_conv_512_table_examples(self):
        spec = make_seed_spec(512, 512, 3, 1.0)
        assert param_count(spec, "ksn") == 2_883_585
        assert param_count(spec, "baseline") == 2_359_296
        assert param_count(spec, "bnn") == 4_718_592
        assert param_count(spec, "fksn") == 2_621_440

    def test_delta_monotonicity(self):
        for ci, co, k in ((64, 128, 3), (32, 32, 1), (3, 64, 3)):
            counts = [param_count(make_seed_spec(ci, co, k, d), "ksn")
                      for d in np.linspace(0.05, 1.0, 20)]
            assert all(a <= b for a, b in zip(counts, counts[1:]))

    def test_formula_matches_allocation(self):
        # allocation check lives in test_layers (it needs built layers); here
        # the closed forms are cross-checked against their definitions
        rng = np.random.default_rng(8)
        for _ in range(50):
            ci = int(rng.integers(1, 64))
            co = int(rng.integers(1, 64))
            k = int(rng.choice([1, 3, 5]))
            s = make_seed_spec(ci, co, k, float(rng.uniform(0.1, 1.0)))
            kk = k * k
            assert param_count(s, "ksn") == s.c_pip * s.c_F * kk + 2 * s.c_f * s.c_pip + 1
            assert param_count(s, "fksn") == s.c_pip * s.c_F * kk + s.c_f * s.c_pip
            assert param_count(s, "baseline") == ci * co * kk
            assert param_count(s, "bnn") == 2 * ci * co * kk
