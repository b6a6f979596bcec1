"""Evaluation math: classification scores, predictive entropy, calibration.

Conventions kept fixed so values reproduce bit-for-bit:

* argmax ties resolve to the lowest class index (``np.argmax`` semantics);
* entropy uses the natural log with 0·log 0 = 0;
* calibration bin m covers ((m-1)/M, m/M]; confidence 0 lands in bin 1.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


@dataclass
class PredictiveDistribution:
    """K stochastic passes x C class probabilities for one sample."""

    probs: np.ndarray
    label: int
    point_probs: np.ndarray
    id: str = ""

    def __post_init__(self):
        self.probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
        self.point_probs = np.asarray(self.point_probs, dtype=np.float64)
        for row in (*self.probs, self.point_probs):
            if np.any(row < 0) or np.any(row > 1) or abs(row.sum() - 1.0) > 1e-9:
                raise ValueError(f"sample {self.id!r}: probability rows must lie in [0,1] and sum to 1")

    @property
    def mean_probs(self) -> np.ndarray:
        return self.probs.mean(axis=0)

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.point_probs))

    @property
    def confidence(self) -> float:
        return float(self.point_probs.max())


@dataclass
class CalibrationBins:
    n_bins: int
    counts: np.ndarray
    conf_sums: np.ndarray
    correct_sums: np.ndarray

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def rows(self) -> list[dict]:
        out = []
        for m in range(self.n_bins):
            c = int(self.counts[m])
            avg_conf = self.conf_sums[m] / c if c else 0.0
            acc = self.correct_sums[m] / c if c else 0.0
            out.append(
                {
                    "bin_low": m / self.n_bins,
                    "bin_high": (m + 1) / self.n_bins,
                    "count": c,
                    "avg_conf": float(avg_conf),
                    "accuracy": float(acc),
                    "gap": float(abs(acc - avg_conf)),
                }
            )
        return out


# -- entropy -------------------------------------------------------------


def entropy(p) -> float:
    """Natural-log Shannon entropy of one probability vector."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probabilities must be non-negative")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {p.sum()}, expected 1")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum()) + 0.0


def sample_entropy(pred: PredictiveDistribution, expected: bool = False) -> float:
    """Predictive entropy H(mean over passes), or the mean per-pass entropy with ``expected``."""
    if expected:
        return float(np.mean([entropy(row) for row in pred.probs]))
    return entropy(pred.mean_probs)


def entropy_summary(preds: Sequence[PredictiveDistribution], expected: bool = False) -> dict:
    """Dataset-level min/max/mean/std of per-sample entropies.

    Also reports the spread across passes (std over K of the dataset-mean
    per-pass entropy) and the ids of the least and most uncertain samples.
    """
    if not preds:
        raise ValueError("entropy_summary needs at least one sample")
    values = np.array([sample_entropy(p, expected) for p in preds])
    k = min(p.probs.shape[0] for p in preds)
    per_pass = np.array([[entropy(p.probs[j]) for p in preds] for j in range(k)])
    imin, imax = int(np.argmin(values)), int(np.argmax(values))
    return {
        "min": float(values.min()),
        "max": float(values.max()),
        "mean": float(values.mean()),
        "std": float(values.std()),
        "std_across_passes": float(per_pass.mean(axis=1).std()),
        "argmin_id": preds[imin].id,
        "argmax_id": preds[imax].id,
        "kind": "expected" if expected else "predictive",
    }


# -- calibration ---------------------------------------------------------


def calibration_bins(confidences, correct, n_bins: int = 10) -> CalibrationBins:
    if n_bins < 1:
        raise ValueError("need at least one bin")
    conf = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    idx = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    return CalibrationBins(
        n_bins,
        np.bincount(idx, minlength=n_bins).astype(np.int64),
        np.bincount(idx, weights=conf, minlength=n_bins),
        np.bincount(idx, weights=correct, minlength=n_bins),
    )


def ece_from_bins(bins: CalibrationBins) -> float:
    n = bins.n
    if n == 0:
        return 0.0
    total = 0.0
    for c, cs, ks in zip(bins.counts, bins.conf_sums, bins.correct_sums):
        if c:
            total += abs(ks - cs) / n
    return float(total)


def ece(preds: Sequence[PredictiveDistribution], n_bins: int = 10) -> tuple[float, CalibrationBins]:
    """Expected calibration error of the point (expected-mask) predictions."""
    conf = [p.confidence for p in preds]
    correct = [p.prediction == p.label for p in preds]
    bins = calibration_bins(conf, correct, n_bins)
    return ece_from_bins(bins), bins


# -- classification ------------------------------------------------------


def weighted_prf(labels, predictions, n_classes: int) -> dict:
    """Support-weighted precision/recall/F1 plus accuracy (percent)."""
    y = np.asarray(labels, dtype=int)
    yhat = np.asarray(predictions, dtype=int)
    if y.shape != yhat.shape:
        raise ValueError("labels and predictions differ in length")
    if y.size == 0:
        raise ValueError("no samples")
    for arr in (y, yhat):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"class index out of range [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y, yhat), 1)
    tp = np.diag(cm).astype(np.float64)
    pred_tot = cm.sum(axis=0)
    true_tot = cm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_tot > 0, tp / pred_tot, 0.0)
        recall = np.where(true_tot > 0, tp / true_tot, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    w = true_tot / true_tot.sum()
    return {
        "accuracy": float(100.0 * tp.sum() / y.size),
        "precision": float((w * precision).sum()),
        "recall": float((w * recall).sum()),
        "f1": float((w * f1).sum()),
        "per_class": {
            "precision": precision.tolist(),
            "recall": recall.tolist(),
            "f1": f1.tolist(),
            "support": true_tot.tolist(),
        },
    }


def binary_auc(scores, positives) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_weighted_ovr(scores, labels) -> float:
    """One-vs-rest AUROC averaged with true-class support weights.

    Classes without both positives and negatives are skipped and left out
    of the weights.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    total, weight = 0.0, 0
    for c in range(scores.shape[1]):
        pos = labels == c
        n_pos = int(pos.sum())
        if n_pos == 0 or n_pos == labels.size:
            continue
        total += n_pos * binary_auc(scores[:, c], pos)
        weight += n_pos
    if weight == 0:
        raise ValueError("every class is degenerate (no positive/negative split)")
    return float(total / weight)


# -- reports -------------------------------------------------------------


@dataclass
class MetricsReport:
    n: int
    n_classes: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    auroc: float | None
    ece: float
    entropy: dict
    calibration: list[dict]
    per_class: dict
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "n_classes": self.n_classes,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "auroc": self.auroc,
            "ece": self.ece,
            "entropy": self.entropy,
            "calibration": self.calibration,
            "per_class": self.per_class,
            "config": self.config,
        }


def build_report(
    preds: Sequence[PredictiveDistribution],
    n_classes: int,
    n_bins: int = 10,
    config: dict | None = None,
    expected_entropy: bool = False,
) -> MetricsReport:
    if not preds:
        raise ValueError("cannot report on an empty dataset")
    labels = np.array([p.label for p in preds])
    point = np.stack([p.point_probs for p in preds])
    prf = weighted_prf(labels, point.argmax(axis=1), n_classes)
    try:
        auroc = auroc_weighted_ovr(point, labels)
    except ValueError:
        auroc = None
    score, bins = ece(preds, n_bins)
    return MetricsReport(
        n=len(preds),
        n_classes=n_classes,
        accuracy=prf["accuracy"],
        precision=prf["precision"],
        recall=prf["recall"],
        f1=prf["f1"],
        auroc=auroc,
        ece=score,
        entropy=entropy_summary(preds, expected_entropy),
        calibration=bins.rows(),
        per_class=prf["per_class"],
        config=dict(config or {}),
    )


def compare_ood(id_report: dict, ood_report: dict) -> dict:
    """Entropy/ECE deltas between an in-distribution and a shifted report."""
    if id_report["n_classes"] != ood_report["n_classes"]:
        raise ValueError("reports disagree on the number of classes")
    h_id, h_ood = id_report["entropy"]["mean"], ood_report["entropy"]["mean"]
    return {
        "mean_entropy_id": h_id,
        "mean_entropy_ood": h_ood,
        "delta_mean_entropy": h_ood - h_id,
        "ece_id": id_report["ece"],
        "ece_ood": ood_report["ece"],
        "delta_ece": ood_report["ece"] - id_report["ece"],
        "ood_entropy_higher": bool(h_ood > h_id),
        "ood_ece_not_lower": bool(ood_report["ece"] >= id_report["ece"]),
    }


def aggregate_runs(values: Sequence[float]) -> dict:
    """Mean and std of one scalar over independent runs (seeds)."""
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n_runs": int(arr.size)}
