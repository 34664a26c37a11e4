"""Confidence scores from logits, expected calibration error, reliability bins."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .nn.functional import softmax


class ConfidenceMethod(str, enum.Enum):
    TOP = "top"
    MARGIN = "margin"
    NEG_ENTROPY = "neg-entropy"

    @classmethod
    def parse(cls, value) -> "ConfidenceMethod":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("_", "-"))
        except ValueError:
            raise ConfigError(f"unknown confidence method {value!r}; "
                              f"choose from {[m.value for m in cls]}") from None


DEFAULT_METHOD = ConfidenceMethod.NEG_ENTROPY


def confidence_batch(logits, method=DEFAULT_METHOD) -> np.ndarray:
    """Row-wise confidence in [0, 1] for an (n, C) logit array.

    ``neg-entropy`` is ``1 - H(softmax) / ln C``, so uniform outputs score 0
    and one-hot outputs score 1.
    """
    method = ConfidenceMethod.parse(method)
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    n_classes = logits.shape[1]
    if n_classes < 2:
        raise ConfigError("confidence needs at least 2 classes")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    s = softmax(logits)
    if method is ConfidenceMethod.TOP:
        out = s.max(axis=1)
    elif method is ConfidenceMethod.MARGIN:
        top2 = np.sort(s, axis=1)[:, -2:]
        out = top2[:, 1] - top2[:, 0]
    else:
        plogp = np.where(s > 0, s * np.log(np.where(s > 0, s, 1.0)), 0.0)
        out = 1.0 + plogp.sum(axis=1) / np.log(n_classes)
    return np.clip(out, 0.0, 1.0)


def confidence(logits, method=DEFAULT_METHOD) -> float:
    return float(confidence_batch(np.asarray(logits)[None], method)[0])


@dataclass
class CalibrationReport:
    n_bins: int
    counts: np.ndarray
    mean_confidence: np.ndarray
    mean_accuracy: np.ndarray
    ece: float
    bin_edges: np.ndarray = field(repr=False)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def rows(self) -> list[tuple[float, float, int, float, float]]:
        """``(bin_lo, bin_hi, count, mean_conf, mean_acc)`` for every non-empty bin."""
        return [(float(self.bin_edges[i]), float(self.bin_edges[i + 1]), int(self.counts[i]),
                 float(self.mean_confidence[i]), float(self.mean_accuracy[i]))
                for i in range(self.n_bins) if self.counts[i] > 0]

    def to_dict(self) -> dict:
        return {"n_bins": self.n_bins, "ece": self.ece, "total": self.total}


def bin_index(confidences: np.ndarray, n_bins: int) -> np.ndarray:
    """Right-closed equal-width bins over [0, 1]; confidence 0 goes to the first bin."""
    edges = np.arange(n_bins + 1) / n_bins
    idx = np.searchsorted(edges, confidences, side="left") - 1
    return np.clip(idx, 0, n_bins - 1)


def ece(confidences, correct, n_bins: int = 100) -> CalibrationReport:
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    corr = np.asarray(correct, dtype=bool).ravel()
    if conf.size == 0:
        raise ConfigError("calibration needs at least one sample")
    if conf.shape != corr.shape:
        raise ConfigError(f"{conf.size} confidences but {corr.size} correctness flags")
    if n_bins < 1:
        raise ConfigError("n_bins must be >= 1")
    if np.any(conf < 0) or np.any(conf > 1) or not np.all(np.isfinite(conf)):
        raise ConfigError("confidences must lie in [0, 1]")
    idx = bin_index(conf, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=corr.astype(np.float64), minlength=n_bins)
    nz = counts > 0
    mean_conf = np.zeros(n_bins)
    mean_acc = np.zeros(n_bins)
    mean_conf[nz] = conf_sum[nz] / counts[nz]
    mean_acc[nz] = acc_sum[nz] / counts[nz]
    value = float(np.sum(counts / conf.size * np.abs(mean_conf - mean_acc)))
    return CalibrationReport(n_bins, counts, mean_conf, mean_acc, value, np.arange(n_bins + 1) / n_bins)


def reliability_bins(confidences, correct, n_bins: int = 100):
    return ece(confidences, correct, n_bins).rows()


RELIABILITY_HEADER = ("bin_lo", "bin_hi", "count", "mean_conf", "mean_acc")


def write_reliability_csv(path, report: CalibrationReport) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RELIABILITY_HEADER)
        for lo, hi, n, mc, ma in report.rows():
            w.writerow([repr(lo), repr(hi), n, repr(mc), repr(ma)])


def ece_from_rows(rows) -> float:
    """Recompose ECE from reliability rows (e.g. read back from CSV)."""
    total = sum(int(r[2]) for r in rows)
    return float(sum(int(r[2]) / total * abs(float(r[3]) - float(r[4])) for r in rows))
