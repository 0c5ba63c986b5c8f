"""Mann-Whitney U test, ROC / precision-recall curves and threshold selection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from featdensity.scoring import DetectionThreshold


@dataclass(frozen=True)
class MannWhitneyResult:
    u_a: float
    u_b: float
    u: float
    z: float
    p_value: float
    # every pooled value tied: the normal approximation is undefined
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"u_a": self.u_a, "u_b": self.u_b, "u": self.u, "z": self.z,
                "p_value": self.p_value, "degenerate": self.degenerate}


@dataclass(frozen=True, eq=False)
class BinaryCurve:
    points: np.ndarray  # (k, 2) rows of (x, y)
    auc: float

    def to_csv(self, path, header: str = "") -> None:
        with open(path, "w") as fh:
            fh.write(f"# {header}auc={self.auc!r}\n" if header else f"# auc={self.auc!r}\n")
            fh.write("x,y\n")
            for x, y in self.points:
                fh.write(f"{x!r},{y!r}\n")


def _vector(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite")
    return a


def midranks(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """1-based ranks with ties sharing their average rank, plus the tie-group sizes."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    sizes = np.diff(np.r_[starts, values.size])
    # average of positions start+1 .. start+size
    group_rank = starts + (sizes + 1) / 2.0
    ranks = np.empty(values.size)
    ranks[order] = np.repeat(group_rank, sizes)
    return ranks, sizes


def mann_whitney(a, b) -> MannWhitneyResult:
    """Two-sided Mann-Whitney U test with tie correction, normal approximation.

    ``u_a`` counts pairs where the ``a`` value is larger (ties count one
    half). No continuity correction is applied.
    """
    a = _vector(a, "a")
    b = _vector(b, "b")
    n, m = a.size, b.size
    ranks, ties = midranks(np.concatenate([a, b]))
    u_a = ranks[:n].sum() - n * (n + 1) / 2.0
    u_b = ranks[n:].sum() - m * (m + 1) / 2.0
    u = min(u_a, u_b)
    total = n + m
    tie_term = float((ties.astype(np.float64) ** 3 - ties).sum()) / (total * (total - 1)) if total > 1 else 0.0
    var = n * m / 12.0 * ((total + 1) - tie_term)
    if var <= 0:
        return MannWhitneyResult(float(u_a), float(u_b), float(u), 0.0, 1.0, degenerate=True)
    z = (u - n * m / 2.0) / math.sqrt(var)
    p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
    return MannWhitneyResult(float(u_a), float(u_b), float(u), float(z), p)


def roc_auc(pos_scores, neg_scores) -> BinaryCurve:
    """ROC curve (FPR, TPR) with higher scores meaning positive.

    The AUC is the rank-sum statistic ``U_pos / (n_pos n_neg)``, which equals
    the trapezoidal area under the emitted points.
    """
    pos = _vector(pos_scores, "pos_scores")
    neg = _vector(neg_scores, "neg_scores")
    n_pos, n_neg = pos.size, neg.size
    ranks, _ = midranks(np.concatenate([pos, neg]))
    auc = (ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    pos_sorted, neg_sorted = np.sort(pos), np.sort(neg)
    tp = n_pos - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = n_neg - np.searchsorted(neg_sorted, thresholds, side="left")
    points = np.vstack([[0.0, 0.0], np.column_stack([fp / n_neg, tp / n_pos])])
    return BinaryCurve(points, float(auc))


def pr_auc(pos_scores, neg_scores) -> BinaryCurve:
    """Precision-recall points (recall, precision) and average precision.

    One point per distinct threshold, taken in descending order; ties move
    together. AP = sum_k (recall_k - recall_{k-1}) * precision_k.
    """
    pos = _vector(pos_scores, "pos_scores")
    neg = _vector(neg_scores, "neg_scores")
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    tp = pos.size - np.searchsorted(np.sort(pos), thresholds, side="left")
    fp = neg.size - np.searchsorted(np.sort(neg), thresholds, side="left")
    recall = tp / pos.size
    precision = tp / (tp + fp)
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return BinaryCurve(np.column_stack([recall, precision]), ap)


def detection_summary(in_scores, out_scores) -> dict:
    """AUROC, AUPR-in and AUPR-out for separating ``in`` (confident) from ``out``.

    AUPR-in takes the in-distribution / correct group as positive; AUPR-out
    takes the failures as positive with scores negated.
    """
    in_scores = np.asarray(in_scores, dtype=np.float64)
    out_scores = np.asarray(out_scores, dtype=np.float64)
    return {
        "auroc": roc_auc(in_scores, out_scores).auc,
        "aupr_in": pr_auc(in_scores, out_scores).auc,
        "aupr_out": pr_auc(-out_scores, -in_scores).auc,
    }


def f1_score(flags, failures) -> float:
    flags = np.asarray(flags, dtype=bool)
    failures = np.asarray(failures, dtype=bool)
    tp = np.sum(flags & failures)
    denom = flags.sum() + failures.sum()
    return 0.0 if denom == 0 else 2.0 * tp / denom


def select_threshold(scores_val, failure_flags_val, score_kind: str = "gmm") -> DetectionThreshold:
    """Threshold maximising F1 of ``score < T`` against the failure flags.

    Candidates are the midpoints between adjacent distinct scores. Among
    equal F1 values the larger threshold wins.
    """
    scores = _vector(scores_val, "scores_val")
    failures = np.asarray(failure_flags_val, dtype=bool).ravel()
    if failures.shape != scores.shape:
        raise ValueError("scores and failure flags must have the same length")
    n_fail = int(failures.sum())
    if n_fail == 0 or n_fail == failures.size:
        raise ValueError("need at least one failure and one success to select a threshold")
    order = np.argsort(scores, kind="mergesort")
    s, f = scores[order], failures[order]
    boundary = np.flatnonzero(s[1:] != s[:-1])  # last index of each distinct value except the top
    if boundary.size == 0:
        raise ValueError("all scores are identical; no threshold separates them")
    candidates = (s[boundary] + s[boundary + 1]) / 2.0
    flagged = boundary + 1
    tp = np.cumsum(f)[boundary]
    f1 = 2.0 * tp / (flagged + n_fail)
    best = np.flatnonzero(f1 == f1.max())[-1]
    return DetectionThreshold(float(candidates[best]), score_kind, float(f1[best]))
