"""FGSM and BIM adversarial inputs in an l-infinity ball, clamped to the input domain."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from featdensity.classifier import MlpClassifier, input_gradient_batch, predict_batch
from featdensity.data import DOMAIN, LabeledDataset, UnlabeledDataset

METHODS = ("fgsm", "bim")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    steps: int = 1
    step_size: float | None = None  # defaults to epsilon / steps
    bounds: tuple[float, float] = DOMAIN

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is None:
            object.__setattr__(self, "step_size", self.epsilon / self.steps)
        if self.step_size < 0 or self.step_size > self.epsilon:
            raise ValueError(f"step_size must lie in [0, epsilon], got {self.step_size}")
        if not self.bounds[0] <= self.bounds[1]:
            raise ValueError(f"invalid bounds {self.bounds}")


@dataclass(frozen=True, eq=False)
class AttackResult:
    adversarial: UnlabeledDataset
    clean_correct: np.ndarray
    adversarial_correct: np.ndarray

    @property
    def clean_accuracy(self) -> float:
        return float(self.clean_correct.mean())

    @property
    def adversarial_accuracy(self) -> float:
        return float(self.adversarial_correct.mean())

    @property
    def success_rate(self) -> float:
        """Fraction of originally correct samples that the attack flips."""
        n_clean = self.clean_correct.sum()
        if n_clean == 0:
            return 0.0
        return float((self.clean_correct & ~self.adversarial_correct).sum() / n_clean)

    def stats(self) -> dict:
        return {
            "clean_accuracy": self.clean_accuracy,
            "adversarial_accuracy": self.adversarial_accuracy,
            "success_rate": self.success_rate,
            "count": int(self.clean_correct.size),
        }


def fgsm_batch(m: MlpClassifier, x, y, cfg: AttackConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    grad = input_gradient_batch(m, x, y)
    return np.clip(x + cfg.epsilon * np.sign(grad), *cfg.bounds)


def bim_batch(m: MlpClassifier, x, y, cfg: AttackConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x - cfg.epsilon, x + cfg.epsilon
    adv = x.copy()
    for _ in range(cfg.steps):
        grad = input_gradient_batch(m, adv, y)
        adv = np.clip(adv + cfg.step_size * np.sign(grad), *cfg.bounds)
        adv = np.clip(adv, lo, hi)
    return adv


def _single(fn, m, x, y, cfg):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a single input vector, got shape {x.shape}")
    return fn(m, x[None, :], np.array([y]), cfg)[0]


def fgsm(m: MlpClassifier, x, y: int, cfg: AttackConfig) -> np.ndarray:
    """One signed-gradient step of size epsilon on the true-label loss."""
    return _single(fgsm_batch, m, x, y, cfg)


def bim(m: MlpClassifier, x, y: int, cfg: AttackConfig) -> np.ndarray:
    """``cfg.steps`` signed steps of ``cfg.step_size``, projected into the epsilon ball."""
    return _single(bim_batch, m, x, y, cfg)


def attack_batch(m: MlpClassifier, ds: LabeledDataset, method: str, cfg: AttackConfig) -> AttackResult:
    """Attack every row of ``ds`` using its true label."""
    if method not in METHODS:
        raise ValueError(f"unknown attack {method!r}; expected one of {METHODS}")
    fn = fgsm_batch if method == "fgsm" else bim_batch
    adv = fn(m, ds.inputs, ds.labels, cfg)
    return AttackResult(
        UnlabeledDataset(adv, cfg.bounds),
        predict_batch(m, ds.inputs) == ds.labels,
        predict_batch(m, adv) == ds.labels,
    )
