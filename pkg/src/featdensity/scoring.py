"""Per-sample confidence scores and the rejection threshold rule.

Every score follows one convention: higher means more confident, so a
single threshold/ROC pipeline serves all methods.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from featdensity.classifier import log_softmax, softmax
from featdensity.gmm import GmmModel, log_density

SCORE_KINDS = ("gmm", "logits", "max_logit", "max_softmax", "calibrated", "mahalanobis")

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class ScoreGroups:
    """Scores of correctly classified samples versus failures."""

    correct_scores: np.ndarray
    wrong_scores: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.correct_scores, dtype=np.float64).ravel()
        w = np.asarray(self.wrong_scores, dtype=np.float64).ravel()
        if c.size == 0 and w.size == 0:
            raise ValueError("at least one score group must be non-empty")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(w))):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "correct_scores", c)
        object.__setattr__(self, "wrong_scores", w)

    @classmethod
    def from_flags(cls, scores, correct) -> ScoreGroups:
        scores = np.asarray(scores, dtype=np.float64)
        correct = np.asarray(correct, dtype=bool)
        return cls(scores[correct], scores[~correct])


@dataclass(frozen=True, eq=False)
class MahalanobisModel:
    class_means: np.ndarray
    tied_variances: np.ndarray


@dataclass(frozen=True)
class DetectionThreshold:
    value: float
    score_kind: str = "gmm"
    # F1 on the data the threshold was selected on, when known
    f1: float = math.nan

    def __post_init__(self):
        if math.isnan(self.value):
            raise ValueError("threshold must not be NaN")


def score_gmm(g: GmmModel, features) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {features.shape}")
    return log_density(g, features)


def score_max_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Largest class probability of ``softmax(logits / temperature)`` per row."""
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    return softmax(logits / temperature).max(axis=1)


def score_max_logit(logits) -> np.ndarray:
    return np.asarray(logits, dtype=np.float64).max(axis=1)


def _check_labels(labels, n: int, c: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    return labels.astype(np.int64)


def temperature_nll(logits, labels, temperature: float) -> float:
    """Mean cross-entropy of ``softmax(logits / temperature)``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    logp = log_softmax(logits / temperature)
    return float(-logp[np.arange(labels.size), labels].mean())


def fit_temperature(val_logits, val_labels, tol: float = 1e-4) -> float:
    """Temperature minimising validation NLL.

    Golden-section search on ``ln T`` over ``[-3, 3]``. Falls back to
    ``T = 1`` if the search result is not at least as good, so the returned
    temperature never increases validation NLL.
    """
    logits = np.asarray(val_logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ValueError(f"expected a non-empty (N, C) logit matrix, got shape {logits.shape}")
    labels = _check_labels(val_labels, logits.shape[0], logits.shape[1])

    def nll(log_t):
        return temperature_nll(logits, labels, math.exp(log_t))

    a, b = -3.0, 3.0
    c, d = b - _GOLDEN * (b - a), a + _GOLDEN * (b - a)
    fc, fd = nll(c), nll(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = nll(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = nll(d)
    best = (a + b) / 2.0
    if nll(best) > nll(0.0):
        return 1.0
    return math.exp(best)


def ece(probs, labels, bins: int = 10) -> float:
    """Expected calibration error over equal-width confidence bins.

    Bins are right-inclusive, ``(lo, hi]``, except the first which also
    includes 0, so a confidence of exactly 1 lands in the last bin.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if probs.ndim != 2:
        raise ValueError(f"probs must be 2-D, got shape {probs.shape}")
    if np.any(probs < -1e-8) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-8):
        raise ValueError("every row of probs must be a probability vector")
    labels = _check_labels(labels, probs.shape[0], probs.shape[1])
    n = probs.shape[0]
    if n == 0:
        return 0.0
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    which = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, bins - 1)
    total = 0.0
    for b in range(bins):
        mask = which == b
        count = mask.sum()
        if count:
            total += count / n * abs(correct[mask].mean() - conf[mask].mean())
    return float(total)


def fit_mahalanobis(features, labels, class_count: int, floor: float = 1e-6) -> MahalanobisModel:
    """Per-class means with one pooled (tied) diagonal variance."""
    features = np.asarray(features, dtype=np.float64)
    labels = _check_labels(labels, features.shape[0], class_count)
    counts = np.bincount(labels, minlength=class_count)
    if np.any(counts == 0):
        raise ValueError(f"classes {np.flatnonzero(counts == 0).tolist()} have no samples")
    means = np.stack([features[labels == c].mean(axis=0) for c in range(class_count)])
    resid = features - means[labels]
    tied = np.maximum((resid * resid).mean(axis=0), floor)
    return MahalanobisModel(means, tied)


def score_mahalanobis(mm: MahalanobisModel, f) -> np.ndarray | float:
    """Negated variance-scaled squared distance to the closest class mean."""
    f = np.asarray(f, dtype=np.float64)
    single = f.ndim == 1
    rows = f[None, :] if single else f
    if rows.ndim != 2 or rows.shape[1] != mm.class_means.shape[1]:
        raise ValueError(f"expected features of dimension {mm.class_means.shape[1]}, got {f.shape}")
    diff = rows[:, None, :] - mm.class_means[None, :, :]
    dist = (diff * diff / mm.tied_variances).sum(-1).min(axis=1)
    return float(-dist[0]) if single else -dist


def apply_threshold(scores, t: DetectionThreshold) -> np.ndarray:
    """Flag (reject) every sample whose score is below the threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return scores < t.value
