"""Feature purification: descend on BPD(F) + nu * ||F - F_ref||^2, then reclassify.

Only the linear head consumes purified features; the classifier is never
retrained and hidden layers are not re-run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from featdensity.classifier import MlpClassifier, extract_features, head_logits
from featdensity.errors import NumericError
from featdensity.gmm import GmmModel, bpd, grad_log_density


@dataclass(frozen=True)
class PurifyConfig:
    step_size: float
    proximity_weight: float = 0.0
    iterations: int = 100

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.proximity_weight < 0:
            raise ValueError("proximity_weight must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


@dataclass(frozen=True, eq=False)
class PurifyResult:
    labels_before: np.ndarray
    labels_after: np.ndarray
    accuracy_before: float | None = None
    accuracy_after: float | None = None

    @property
    def accuracy_delta(self) -> float | None:
        if self.accuracy_before is None:
            return None
        return self.accuracy_after - self.accuracy_before

    @property
    def changed(self) -> np.ndarray:
        return self.labels_before != self.labels_after


def objective(g: GmmModel, f, f_ref, nu: float):
    """BPD(F) + nu * ||F - F_ref||^2 (vector of values for row input)."""
    f = np.asarray(f, dtype=np.float64)
    prox = ((f - np.asarray(f_ref)) ** 2).sum(axis=-1)
    return bpd(g, f) + nu * prox


def purify_features(g: GmmModel, f_ref, cfg: PurifyConfig, trace: list | None = None) -> np.ndarray:
    """Run exactly ``cfg.iterations`` gradient steps on every row of ``f_ref``.

    If ``trace`` is a list, the objective after each step is appended to it.

    Raises:
        NumericError: an iterate becomes non-finite.
    """
    f_ref = np.asarray(f_ref, dtype=np.float64)
    if not np.all(np.isfinite(f_ref)):
        raise NumericError("reference features must be finite")
    scale = 1.0 / (g.feature_dim * math.log(2.0))
    f = f_ref.copy()
    for it in range(1, cfg.iterations + 1):
        grad_bpd = -grad_log_density(g, f) * scale
        f = f - cfg.step_size * (grad_bpd + 2.0 * cfg.proximity_weight * (f - f_ref))
        if not np.all(np.isfinite(f)):
            raise NumericError(f"purified feature became non-finite at iteration {it}")
        if trace is not None:
            trace.append(objective(g, f, f_ref, cfg.proximity_weight))
    return f


def purify_feature(g: GmmModel, f_ref, cfg: PurifyConfig) -> np.ndarray:
    f_ref = np.asarray(f_ref, dtype=np.float64)
    if f_ref.ndim != 1:
        raise ValueError(f"expected a single feature vector, got shape {f_ref.shape}")
    return purify_features(g, f_ref[None, :], cfg)[0]


def purify_and_reclassify(m: MlpClassifier, g: GmmModel, inputs, cfg: PurifyConfig, labels=None) -> PurifyResult:
    if m.feature_dim != g.feature_dim:
        raise ValueError(f"classifier features ({m.feature_dim}) and GMM ({g.feature_dim}) disagree")
    feats = extract_features(m, inputs)
    before = head_logits(m, feats).argmax(axis=1)
    after = head_logits(m, purify_features(g, feats, cfg)).argmax(axis=1)
    if labels is None:
        return PurifyResult(before, after)
    labels = np.asarray(labels)
    return PurifyResult(before, after, float(np.mean(before == labels)), float(np.mean(after == labels)))


def purification_grid(m: MlpClassifier, g: GmmModel, splits: dict, step_sizes, nus, iterations: int = 100) -> list[dict]:
    """Accuracy per (step size, nu) cell for each named ``(inputs, labels)`` split."""
    cells = []
    for eps in step_sizes:
        for nu in nus:
            cfg = PurifyConfig(eps, nu, iterations)
            cell = {"step_size": eps, "nu": nu}
            for name, (inputs, labels) in splits.items():
                res = purify_and_reclassify(m, g, inputs, cfg, labels)
                cell[f"{name}_accuracy"] = res.accuracy_after
                cell[f"{name}_delta"] = res.accuracy_delta
                cell[f"{name}_changed"] = int(res.changed.sum())
            cells.append(cell)
    return cells
