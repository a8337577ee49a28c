"""Accuracy, negative log-likelihood, and binned calibration errors.

Confidence is the max class probability. ECE and MCE are computed on
equal-width confidence bins over (0, 1]; ACE averages the per-bin gap over
equal-frequency (adaptive) bins of the confidence-sorted predictions. Ties in
confidence are ordered by correctness so every metric is invariant under row
permutation of the inputs.
"""

import csv
import json
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .errors import DataError, ParameterError

NLL_FLOOR = 1e-12


@dataclass
class PredictionSet:
    """Rows of class probabilities with their true labels."""

    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.probs.ndim != 2 or self.probs.shape[0] == 0:
            raise DataError(f"prediction set must be a non-empty [N x C] array, "
                            f"got shape {self.probs.shape}")
        n, c = self.probs.shape
        if self.labels.shape != (n,):
            raise DataError(f"labels shape {self.labels.shape} != ({n},)")
        if self.labels.min() < 0 or self.labels.max() >= c:
            raise DataError(f"labels must lie in [0, {c})")
        if (self.probs < 0).any():
            raise DataError("negative probability entry")
        sums = self.probs.sum(axis=1)
        bad = np.abs(sums - 1.0) > 1e-4
        if bad.any():
            raise DataError(f"row {int(np.argmax(bad))} does not sum to 1 "
                            f"(sum={sums[np.argmax(bad)]:.6f})")


@dataclass
class BinStat:
    lo: float
    hi: float
    count: int
    conf: float
    acc: float


@dataclass
class CalibrationReport:
    acc: float
    nll: float
    ece: float
    ace: float
    mce: float
    n: int
    ece_bins: int
    ace_bins: int
    bins: Dict[str, List[BinStat]]

    def to_json(self) -> str:
        """Flat JSON object with fixed key order."""
        flat = {"acc": self.acc, "nll": self.nll, "ece": self.ece,
                "ace": self.ace, "mce": self.mce, "n": self.n,
                "ece_bins": self.ece_bins, "ace_bins": self.ace_bins}
        return json.dumps(flat, indent=2)

    def csv_header(self) -> str:
        return "acc,nll,ece,ace,mce"

    def csv_row(self) -> str:
        return ",".join(f"{v:.10g}" for v in (self.acc, self.nll, self.ece,
                                              self.ace, self.mce))


def _conf_correct(preds: PredictionSet) -> Tuple[np.ndarray, np.ndarray]:
    # argmax breaks ties toward the lowest class index
    pred = preds.probs.argmax(axis=1)
    conf = preds.probs.max(axis=1)
    correct = (pred == preds.labels).astype(np.float64)
    return conf, correct


def reliability_data(preds: PredictionSet, bins: int, scheme: str) -> List[BinStat]:
    """Per-bin counts, mean confidence and empirical accuracy.

    ``equal_width`` partitions (0, 1] into fixed intervals; ``equal_frequency``
    splits the confidence-sorted predictions into contiguous runs whose sizes
    differ by at most one (the leading runs take the extra items).
    """
    if bins < 1:
        raise ParameterError(f"bins must be >= 1, got {bins}")
    conf, correct = _conf_correct(preds)
    out: List[BinStat] = []
    if scheme == "equal_width":
        idx = np.clip(np.ceil(conf * bins).astype(int) - 1, 0, bins - 1)
        for b in range(bins):
            sel = idx == b
            cnt = int(sel.sum())
            out.append(BinStat(b / bins, (b + 1) / bins, cnt,
                               float(conf[sel].mean()) if cnt else 0.0,
                               float(correct[sel].mean()) if cnt else 0.0))
        return out
    if scheme == "equal_frequency":
        # quantile edges taken from the sorted confidences; assignment is by
        # value, so tied confidences share a bin and the partition depends
        # only on the empirical distribution (row order and duplication
        # cannot move items across bins)
        n = len(conf)
        sconf = np.sort(conf)
        positions = np.ceil(n * (np.arange(bins) + 1) / bins).astype(int) - 1
        edges = sconf[positions]
        idx = np.searchsorted(edges, conf, side="left")
        for b in range(bins):
            sel = idx == b
            cnt = int(sel.sum())
            if cnt:
                out.append(BinStat(float(conf[sel].min()), float(conf[sel].max()),
                                   cnt, float(conf[sel].mean()),
                                   float(correct[sel].mean())))
            else:
                out.append(BinStat(0.0, 0.0, 0, 0.0, 0.0))
        return out
    raise ParameterError(f"unknown binning scheme {scheme!r}")


def evaluate(preds: PredictionSet, ece_bins: int = 15,
             ace_bins: int = 15) -> CalibrationReport:
    """Full calibration report over one prediction set."""
    conf, correct = _conf_correct(preds)
    n = len(conf)
    acc = float(correct.mean())
    p_true = preds.probs[np.arange(n), preds.labels]
    nll = float(-np.log(np.clip(p_true, NLL_FLOOR, None)).mean())

    width_bins = reliability_data(preds, ece_bins, "equal_width")
    ece = sum(b.count / n * abs(b.acc - b.conf) for b in width_bins)
    mce = max((abs(b.acc - b.conf) for b in width_bins if b.count), default=0.0)

    freq_bins = reliability_data(preds, ace_bins, "equal_frequency")
    gaps = [abs(b.acc - b.conf) for b in freq_bins if b.count]
    ace = float(np.mean(gaps)) if gaps else 0.0

    return CalibrationReport(acc=acc, nll=nll, ece=float(ece), ace=ace,
                             mce=float(mce), n=n, ece_bins=ece_bins,
                             ace_bins=ace_bins,
                             bins={"equal_width": width_bins,
                                   "equal_frequency": freq_bins})


def write_reliability_csv(table: List[BinStat], path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_lo", "bin_hi", "count", "conf", "acc"])
        for b in table:
            w.writerow([f"{b.lo:.10g}", f"{b.hi:.10g}", b.count,
                        f"{b.conf:.10g}", f"{b.acc:.10g}"])
