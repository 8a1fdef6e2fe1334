"""Anomaly scores, their calibration, and ranking/threshold metrics.

The raw score of an image is the discriminator's "fake-ness" of the
student reconstruction, ``1 - D(G_s(E(I)))``, so larger means more
anomalous. Calibration squashes it through a sigmoid after centering on
training-set statistics; that transform is strictly monotone and leaves
every ranking metric unchanged.
"""
from __future__ import annotations

import csv
import hashlib
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .autodiff import no_grad
from .networks import SimSIDModel, as_batch


class CalibrationError(ValueError):
    pass


# -- scores ---------------------------------------------------------------------


def raw_score(model: SimSIDModel, images, batch_size: int = 32) -> np.ndarray:
    """Fake-ness ``1 - D(G_s(E(I)))`` per image, computed in eval mode.

    The model's train/eval state is restored afterwards. Per-image
    results do not depend on ``batch_size``: eval-mode layers have no
    cross-sample interaction.
    """
    arr = as_batch(images).data
    was_training = model.training
    model.eval()
    out = np.empty(len(arr))
    try:
        with no_grad():
            for lo in range(0, len(arr), batch_size):
                chunk = as_batch(arr[lo : lo + batch_size])
                logits = model.disc_logits(model.reconstruct(chunk)).data
                out[lo : lo + len(logits)] = expit(-logits)
    finally:
        model.train(was_training)
    return out


@dataclass(frozen=True)
class CalibrationStats:
    mu: float
    sigma: float
    count: int

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma) and math.isfinite(self.mu)):
            raise CalibrationError(f"degenerate calibration: mu={self.mu}, sigma={self.sigma}")


def calibrate_scores(raw) -> CalibrationStats:
    """Mean and population standard deviation of training-set raw scores."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size < 2:
        raise CalibrationError(f"calibration needs at least 2 scores, got {raw.size}")
    mu = float(np.mean(raw))
    sigma = float(np.std(raw))
    if sigma == 0.0 or np.all(raw == raw.flat[0]):
        raise CalibrationError("all training scores are identical (sigma = 0); the model is degenerate")
    return CalibrationStats(mu, sigma, int(raw.size))


def calibrate(model: SimSIDModel, images, batch_size: int = 32) -> CalibrationStats:
    return calibrate_scores(raw_score(model, images, batch_size))


def anomaly_score(raw, stats: CalibrationStats):
    """``sigmoid((raw - mu) / sigma)``; scalar in, scalar out."""
    a = expit((np.asarray(raw, dtype=np.float64) - stats.mu) / stats.sigma)
    return float(a) if a.ndim == 0 else a


def parameter_checksum(model: SimSIDModel) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(model.state_arrays().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# -- ranking metrics -------------------------------------------------------------


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 (normal) or 1 (abnormal)")
    if y.min() == y.max():
        raise ValueError("both classes must be present to compute ranking metrics")
    return s, y.astype(np.int64)


def roc_auc(scores, labels) -> float:
    """Probability that a random abnormal outscores a random normal, ties counted half."""
    s, y = _check_binary(scores, labels)
    ranks = rankdata(s)  # average ranks for ties
    n1 = int(y.sum())
    n0 = y.size - n1
    return float((ranks[y == 1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def _sweep(s: np.ndarray, y: np.ndarray):
    """Confusion counts when predicting abnormal for ``score >= t``, t over distinct scores descending."""
    order = np.argsort(-s, kind="stable")
    ss, yy = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(ss)), ss.size - 1]  # final index of each tie group
    tp = np.cumsum(yy)[last]
    fp = (last + 1) - tp
    return ss[last], tp, fp


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds); starts at (0, 0) with threshold +inf, ends at (1, 1)."""
    s, y = _check_binary(scores, labels)
    thr, tp, fp = _sweep(s, y)
    p, n = y.sum(), y.size - y.sum()
    return np.r_[0.0, fp / n], np.r_[0.0, tp / p], np.r_[np.inf, thr]


def trapezoid_auc(x, y) -> float:
    return float(np.trapezoid(y, x))


def pr_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(precision, recall, thresholds), one point per distinct score, recall ascending."""
    s, y = _check_binary(scores, labels)
    thr, tp, fp = _sweep(s, y)
    return tp / (tp + fp), tp / y.sum(), thr


@dataclass(frozen=True)
class ThresholdPolicy:
    """``kind`` is ``"fixed"`` (use ``value``) or ``"best_f1"`` (search on the given scores)."""

    kind: str = "best_f1"
    value: float | None = None

    def __post_init__(self):
        if self.kind not in ("fixed", "best_f1"):
            raise ValueError(f"unknown threshold policy {self.kind!r}")
        if self.kind == "fixed" and self.value is None:
            raise ValueError("fixed threshold policy needs a value")

    @classmethod
    def fixed(cls, tau: float) -> "ThresholdPolicy":
        return cls("fixed", float(tau))


def confusion(scores, labels, tau: float) -> tuple[int, int, int, int]:
    """(tp, fp, tn, fn) predicting abnormal for ``score > tau``."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pred = s > tau
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    return tp, fp, tn, fn


def accuracy_f1(scores, labels, tau: float) -> tuple[float, float]:
    tp, fp, tn, fn = confusion(scores, labels, tau)
    acc = (tp + tn) / (tp + fp + tn + fn)
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return acc, f1


def candidate_thresholds(scores) -> np.ndarray:
    """Midpoints between consecutive distinct scores plus one point beyond each end."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.r_[u[0] - 1.0, mids, u[-1] + 1.0]


def best_f1_threshold(scores, labels) -> float:
    """Threshold with the highest F1; ties go to higher accuracy, then the lower threshold."""
    s, y = _check_binary(scores, labels)
    best, best_key = None, None
    for tau in candidate_thresholds(s):
        acc, f1 = accuracy_f1(s, y, tau)
        key = (f1, acc)
        if best_key is None or key > best_key:
            best, best_key = float(tau), key
    return best


@dataclass
class EvalReport:
    scores: np.ndarray
    labels: np.ndarray
    auc: float
    accuracy: float
    f1: float
    threshold: float
    roc: tuple[np.ndarray, np.ndarray]
    pr: tuple[np.ndarray, np.ndarray]
    ids: list[str] = field(default_factory=list)
    raw: np.ndarray | None = None

    def metrics(self) -> dict[str, float]:
        return {"auc": self.auc, "acc": self.accuracy, "f1": self.f1, "threshold": self.threshold,
                "n": int(self.labels.size), "n_abnormal": int(self.labels.sum())}


def threshold_metrics(scores, labels, policy: ThresholdPolicy = ThresholdPolicy()) -> EvalReport:
    s, y = _check_binary(scores, labels)
    tau = policy.value if policy.kind == "fixed" else best_f1_threshold(s, y)
    acc, f1 = accuracy_f1(s, y, tau)
    fpr, tpr, _ = roc_curve(s, y)
    prec, rec, _ = pr_curve(s, y)
    return EvalReport(s, y, roc_auc(s, y), acc, f1, float(tau), (fpr, tpr), (prec, rec))


# -- writers ----------------------------------------------------------------------


def write_scores_csv(path: str | os.PathLike, report: EvalReport) -> None:
    ids = report.ids or [str(i) for i in range(report.labels.size)]
    raw = report.raw if report.raw is not None else np.full(report.labels.size, np.nan)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "raw", "A"])
        for i, lab, r, a in zip(ids, report.labels, raw, report.scores):
            w.writerow([i, int(lab), repr(float(r)), repr(float(a))])


def write_metrics(path: str | os.PathLike, values: dict) -> None:
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n")


def read_metrics(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                k, _, v = line.partition("=")
                out[k.strip()] = v.strip()
    return out


def write_curve_csv(path: str | os.PathLike, header: tuple[str, str], xs, ys) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for x, y in zip(xs, ys):
            w.writerow([repr(float(x)), repr(float(y))])
