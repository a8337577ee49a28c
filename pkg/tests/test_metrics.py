"""Calibration metrics against a quadratic-time brute-force reference."""

import math

import numpy as np
import pytest

from ksnet.errors import DataError, ParameterError
from ksnet.metrics import (
    CalibrationReport, PredictionSet, evaluate, reliability_data,
    write_reliability_csv,
)

RNG = np.random.default_rng(41)


def random_prediction_set(rng, n=None, c=None) -> PredictionSet:
    n = n or int(rng.integers(1, 65))
    c = c or int(rng.integers(2, 11))
    raw = rng.random((n, c)) + 1e-3
    probs = raw / raw.sum(axis=1, keepdims=True)
    labels = rng.integers(0, c, n)
    return PredictionSet(probs, labels)


def brute_force_report(preds: PredictionSet, ece_bins=15, ace_bins=15):
    """Loop-based reference implementing the declared binning conventions."""
    probs = preds.probs.astype(np.float64)
    n, c = probs.shape
    pred = np.array([int(np.argmax(probs[i])) for i in range(n)])
    conf = np.array([float(probs[i].max()) for i in range(n)])
    correct = (pred == preds.labels).astype(np.float64)

    acc = float(correct.mean())
    nll = -np.mean([math.log(max(probs[i, preds.labels[i]], 1e-12)) for i in range(n)])

    # equal-width bins over (0, 1]
    ece = 0.0
    mce = 0.0
    for b in range(ece_bins):
        lo, hi = b / ece_bins, (b + 1) / ece_bins
        member = [i for i in range(n) if (lo < conf[i] <= hi) or (b == 0 and conf[i] <= lo)]
        if not member:
            continue
        gap = abs(np.mean([correct[i] for i in member]) -
                  np.mean([conf[i] for i in member]))
        ece += len(member) / n * gap
        mce = max(mce, gap)

    # equal-frequency bins: quantile edges over sorted confidences
    sorted_conf = np.sort(conf)
    edges = [sorted_conf[int(np.ceil(n * (b + 1) / ace_bins)) - 1]
             for b in range(ace_bins)]
    gaps = []
    for b in range(ace_bins):
        member = [i for i in range(n)
                  if min(bb for bb in range(ace_bins) if conf[i] <= edges[bb]) == b]
        if member:
            gaps.append(abs(np.mean([correct[i] for i in member]) -
                            np.mean([conf[i] for i in member])))
    ace = float(np.mean(gaps)) if gaps else 0.0
    return acc, nll, float(ece), ace, float(mce)


class TestHandExamples:
    def test_four_sample_example(self):
        probs = np.array([[0.9, 0.1], [0.8, 0.2], [0.6, 0.4], [0.7, 0.3]])
        labels = np.array([0, 0, 1, 0])
        rep = evaluate(PredictionSet(probs, labels))
        assert rep.acc == 0.75
        np.testing.assert_allclose(rep.ece, 0.30, atol=1e-12)
        np.testing.assert_allclose(rep.mce, 0.60, atol=1e-12)

    def test_perfect_one_hot(self):
        n, c = 10, 4
        labels = RNG.integers(0, c, n)
        probs = np.zeros((n, c))
        probs[np.arange(n), labels] = 1.0
        rep = evaluate(PredictionSet(probs, labels))
        assert rep.acc == 1.0 and rep.nll == 0.0
        assert rep.ece == rep.ace == rep.mce == 0.0

    def test_exact_calibration_point(self):
        probs = np.full((20, 2), 0.5)
        labels = np.array([0] * 10 + [1] * 10)
        rep = evaluate(PredictionSet(probs, labels))
        assert rep.acc == 0.5
        assert rep.ece == 0.0 and rep.mce == 0.0


class TestBruteForceAgreement:
    def test_two_hundred_random_sets(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            preds = random_prediction_set(rng)
            rep = evaluate(preds)
            acc, nll, ece, ace, mce = brute_force_report(preds)
            assert rep.acc == acc
            np.testing.assert_allclose(rep.nll, nll, atol=1e-9)
            np.testing.assert_allclose(rep.ece, ece, atol=1e-9)
            np.testing.assert_allclose(rep.ace, ace, atol=1e-9)
            np.testing.assert_allclose(rep.mce, mce, atol=1e-9)


class TestInvariants:
    def test_row_permutation_invariance(self):
        rng = np.random.default_rng(11)
        preds = random_prediction_set(rng, n=50, c=5)
        rep = evaluate(preds)
        perm = rng.permutation(50)
        rep2 = evaluate(PredictionSet(preds.probs[perm], preds.labels[perm]))
        for field in ("acc", "nll", "ece", "ace", "mce"):
            np.testing.assert_allclose(getattr(rep, field), getattr(rep2, field),
                                       atol=1e-12, err_msg=field)

    def test_class_relabeling_invariance(self):
        rng = np.random.default_rng(12)
        preds = random_prediction_set(rng, n=40, c=6)
        rep = evaluate(preds)
        cperm = rng.permutation(6)
        inv = np.argsort(cperm)
        rep2 = evaluate(PredictionSet(preds.probs[:, cperm], inv[preds.labels]))
        np.testing.assert_allclose(rep.ece, rep2.ece, atol=1e-12)
        np.testing.assert_allclose(rep.mce, rep2.mce, atol=1e-12)
        np.testing.assert_allclose(rep.acc, rep2.acc, atol=1e-12)

    def test_duplication_invariance(self):
        rng = np.random.default_rng(13)
        preds = random_prediction_set(rng, n=33, c=4)
        rep = evaluate(preds)
        doubled = PredictionSet(np.repeat(preds.probs, 2, axis=0),
                                np.repeat(preds.labels, 2))
        rep2 = evaluate(doubled)
        np.testing.assert_allclose(rep.ece, rep2.ece, atol=1e-12)
        np.testing.assert_allclose(rep.ace, rep2.ace, atol=1e-12)
        np.testing.assert_allclose(rep.mce, rep2.mce, atol=1e-12)

    def test_ece_bounded_by_mce_and_all_finite(self):
        rng = np.random.default_rng(14)
        for _ in range(50):
            rep = evaluate(random_prediction_set(rng))
            assert rep.ece <= rep.mce + 1e-12
            for field in ("acc", "nll", "ece", "ace", "mce"):
                v = getattr(rep, field)
                assert np.isfinite(v), field
            assert 0.0 <= rep.acc <= 1.0
            for field in ("ece", "ace", "mce"):
                assert 0.0 <= getattr(rep, field) <= 1.0

    def test_nll_clamped_for_overconfident_errors(self):
        probs = np.array([[1.0, 0.0], [0.0, 1.0]])
        labels = np.array([1, 1])  # first row confidently wrong
        rep = evaluate(PredictionSet(probs, labels))
        assert np.isfinite(rep.nll)
        np.testing.assert_allclose(rep.nll, -math.log(1e-12) / 2, rtol=1e-9)


class TestReliabilityData:
    def test_counts_sum_to_n_both_schemes(self):
        rng = np.random.default_rng(15)
        for _ in range(20):
            preds = random_prediction_set(rng)
            n = len(preds.labels)
            for scheme in ("equal_width", "equal_frequency"):
                table = reliability_data(preds, 15, scheme)
                assert sum(b.count for b in table) == n

    def test_singleton_bins_when_bins_equals_n(self):
        rng = np.random.default_rng(16)
        preds = random_prediction_set(rng, n=10, c=5)
        table = reliability_data(preds, 10, "equal_frequency")
        occupied = [b for b in table if b.count]
        assert all(b.count == 1 for b in occupied)
        assert sum(b.count for b in occupied) == 10

    def test_bins_below_one_rejected(self):
        preds = random_prediction_set(np.random.default_rng(17), n=5, c=3)
        with pytest.raises(ParameterError):
            reliability_data(preds, 0, "equal_width")
        with pytest.raises(ParameterError):
            reliability_data(preds, 5, "quantile")

    def test_csv_round_trip(self, tmp_path):
        preds = random_prediction_set(np.random.default_rng(18), n=30, c=4)
        table = reliability_data(preds, 15, "equal_width")
        path = tmp_path / "rel.csv"
        write_reliability_csv(table, str(path))
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "bin_lo,bin_hi,count,conf,acc"
        assert len(lines) == 16


class TestValidation:
    def test_empty_set_rejected(self):
        with pytest.raises(DataError):
            PredictionSet(np.zeros((0, 3)), np.zeros(0, dtype=int))

    def test_bad_simplex_row_rejected(self):
        probs = np.array([[0.5, 0.6], [0.5, 0.5]])
        with pytest.raises(DataError, match="row 0"):
            PredictionSet(probs, np.array([0, 1]))

    def test_negative_entry_rejected(self):
        probs = np.array([[1.2, -0.2]])
        with pytest.raises(DataError):
            PredictionSet(probs, np.array([0]))

    def test_label_range_checked(self):
        probs = np.array([[0.5, 0.5]])
        with pytest.raises(DataError):
            PredictionSet(probs, np.array([2]))

    def test_report_serialization_fixed_keys(self):
        preds = random_prediction_set(np.random.default_rng(19), n=12, c=3)
        rep = evaluate(preds)
        text = rep.to_json()
        order = [line.split('"')[1] for line in text.splitlines() if '":' in line]
        assert order == ["acc", "nll", "ece", "ace", "mce", "n", "ece_bins", "ace_bins"]
        assert rep.csv_header() == "acc,nll,ece,ace,mce"
        assert len(rep.csv_row().split(",")) == 5
