"""Diagonal-covariance Gaussian mixture over classifier features.

Densities are evaluated in log space with log-sum-exp over components.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from featdensity.errors import NumericError

FORMAT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)

_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True, eq=False)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        mu = np.array(self.means, dtype=np.float64)
        var = np.array(self.variances, dtype=np.float64)
        if w.ndim != 1 or mu.ndim != 2 or var.shape != mu.shape or mu.shape[0] != w.shape[0]:
            raise ValueError(
                f"inconsistent shapes: weights {w.shape}, means {mu.shape}, variances {var.shape}"
            )
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValueError("weights must be non-negative and sum to 1")
        if not np.all(var > 0):
            raise ValueError("variances must be positive")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(var))):
            raise ValueError("means and variances must be finite")
        for name, a in (("weights", w), ("means", mu), ("variances", var)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def component_count(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.means.shape[1]

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "K": self.component_count,
            "D": self.feature_dim,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> GmmModel:
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported GMM format_version {doc.get('format_version')!r}")
        g = cls(doc["weights"], doc["means"], doc["variances"])
        if (g.component_count, g.feature_dim) != (doc["K"], doc["D"]):
            raise ValueError("K/D header does not match the stored arrays")
        return g

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> GmmModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 200
    tol: float = 1e-6
    variance_floor: float = 1e-6
    seed: int = 0
    init: str = "kmeanspp"
    partitions: int = 1

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if not self.variance_floor > 0:
            raise ValueError("variance_floor must be > 0")
        if self.init not in ("kmeanspp", "random_points"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.max_iters < 1 or self.partitions < 1:
            raise ValueError("max_iters and partitions must be >= 1")


@dataclass
class EmReport:
    iterations: int = 0
    log_likelihood: list[float] = field(default_factory=list)
    converged: bool = False
    # the M-step is no longer an exact maximiser once either of these happens
    floor_active: bool = False
    reseeded: bool = False


def logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.squeeze(m, axis=axis) + np.log(np.exp(a - m).sum(axis=axis))


def _as_rows(g: GmmModel, f) -> tuple[np.ndarray, bool]:
    f = np.asarray(f, dtype=np.float64)
    single = f.ndim == 1
    if single:
        f = f[None, :]
    if f.ndim != 2 or f.shape[1] != g.feature_dim:
        raise ValueError(f"expected features of dimension {g.feature_dim}, got shape {f.shape}")
    return f, single


def _component_log_probs(g: GmmModel, f: np.ndarray) -> np.ndarray:
    """``log pi_k + log N(f_i; mu_k, diag var_k)`` as an (N, K) array."""
    k, d = g.means.shape
    norm = np.log(g.weights) - 0.5 * (d * LOG_2PI + np.log(g.variances).sum(axis=1))
    inv_var = 1.0 / g.variances
    rows = max(1, _CHUNK_ELEMS // (k * d))
    out = np.empty((f.shape[0], k))
    for i in range(0, f.shape[0], rows):
        diff = f[i : i + rows, None, :] - g.means[None, :, :]
        out[i : i + rows] = norm - 0.5 * (diff * diff * inv_var).sum(-1)
    return out


def log_density(g: GmmModel, f):
    """Natural log of the mixture density; scalar for a vector, array for rows."""
    rows, single = _as_rows(g, f)
    out = logsumexp(_component_log_probs(g, rows), axis=1)
    return float(out[0]) if single else out


def bpd(g: GmmModel, f):
    """Bits per feature dimension, ``-log p(f) / (D ln 2)``."""
    return -log_density(g, f) / (g.feature_dim * math.log(2.0))


def responsibilities(g: GmmModel, f) -> np.ndarray:
    rows, single = _as_rows(g, f)
    lp = _component_log_probs(g, rows)
    r = np.exp(lp - logsumexp(lp, axis=1)[:, None])
    return r[0] if single else r


def grad_log_density(g: GmmModel, f) -> np.ndarray:
    """Gradient of ``log p(f)`` w.r.t. ``f``: sum_k r_k (mu_k - f) / var_k."""
    rows, single = _as_rows(g, f)
    r = responsibilities(g, rows)
    pull = (g.means[None, :, :] - rows[:, None, :]) / g.variances[None, :, :]
    grad = (r[:, :, None] * pull).sum(axis=1)
    return grad[0] if single else grad


def sample(g: GmmModel, n: int, rng: np.random.Generator) -> np.ndarray:
    comp = rng.choice(g.component_count, size=n, p=g.weights)
    return g.means[comp] + np.sqrt(g.variances[comp]) * rng.normal(size=(n, g.feature_dim))


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _e_step(g: GmmModel, x: np.ndarray, partitions: int):
    """Per-row log-likelihoods and responsibilities.

    Rows are split into contiguous partitions; each row's result does not
    depend on the split, so the output is identical for any partition count.
    """
    def run(chunk):
        lp = _component_log_probs(g, chunk)
        ll = logsumexp(lp, axis=1)
        return ll, np.exp(lp - ll[:, None])

    if partitions == 1:
        return run(x)
    chunks = np.array_split(x, partitions)
    with ThreadPoolExecutor(max_workers=partitions) as pool:
        parts = list(pool.map(run, chunks))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def fit_em(features, k: int, cfg: EmConfig = EmConfig()) -> tuple[GmmModel, EmReport]:
    """Fit a K-component diagonal GMM by expectation-maximisation.

    Stops once the mean log-likelihood changes by less than ``cfg.tol`` or
    after ``cfg.max_iters`` M-steps. ``report.log_likelihood[t]`` is the mean
    log-likelihood of the parameters produced by M-step ``t + 1``.

    Raises:
        ValueError: fewer rows than components.
        NumericError: the features contain NaN or infinity.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {x.shape}")
    n, d = x.shape
    if k < 1 or n < k:
        raise ValueError(f"need N >= K >= 1, got N={n}, K={k}")
    if not np.all(np.isfinite(x)):
        raise NumericError("features contain non-finite values")

    rng = np.random.default_rng(cfg.seed)
    floor = cfg.variance_floor
    global_var = np.maximum(x.var(axis=0), floor)
    if cfg.init == "kmeanspp":
        means = _kmeanspp(x, k, rng)
    else:
        means = x[rng.choice(n, size=k, replace=False)]
    g = GmmModel(np.full(k, 1.0 / k), means, np.tile(global_var, (k, 1)))

    report = EmReport()
    ll, resp = _e_step(g, x, cfg.partitions)
    prev = ll.mean()
    for it in range(1, cfg.max_iters + 1):
        mass = resp.sum(axis=0)
        empty = mass < 1e-8 * n
        safe_mass = np.where(empty, 1.0, mass)
        means = (resp.T @ x) / safe_mass[:, None]
        var = np.empty((k, d))
        for j in range(k):
            diff = x - means[j]
            var[j] = (resp[:, j] @ (diff * diff)) / safe_mass[j]
        if np.any(var[~empty] < floor):
            report.floor_active = True
        var = np.maximum(var, floor)
        if np.any(empty):
            report.reseeded = True
            worst = np.argsort(ll, kind="stable")
            for slot, j in enumerate(np.flatnonzero(empty)):
                means[j] = x[worst[slot % n]]
                var[j] = global_var
                mass[j] = 1.0
        g = GmmModel(mass / mass.sum(), means, var)

        ll, resp = _e_step(g, x, cfg.partitions)
        cur = ll.mean()
        if not math.isfinite(cur):
            raise NumericError(f"log-likelihood became non-finite at EM iteration {it}")
        report.log_likelihood.append(float(cur))
        report.iterations = it
        if abs(cur - prev) < cfg.tol:
            report.converged = True
            break
        prev = cur
    return g, report
