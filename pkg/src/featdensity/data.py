"""Synthetic datasets, CSV loading and deterministic splits.

Every generator is a pure function of its arguments and seed. Synthetic
inputs live in the box ``DOMAIN = (-10, 10)`` so that attacks have a
well-defined clamping range, much like the pixel range of images.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from featdensity.errors import ParseError

DOMAIN = (-10.0, 10.0)

OOD_KINDS = ("gaussian_noise", "uniform_noise", "shifted_blobs")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Inputs (N x d) with integer labels in ``[0, class_count)``."""

    inputs: np.ndarray
    labels: np.ndarray
    bounds: tuple[float, float]
    class_count: int

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels)
        if inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {inputs.shape}")
        if labels.ndim != 1 or labels.shape[0] != inputs.shape[0]:
            raise ValueError(
                f"labels length {labels.shape} does not match {inputs.shape[0]} rows"
            )
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
        if self.class_count < 1:
            raise ValueError(f"class_count must be >= 1, got {self.class_count}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        lo, hi = float(self.bounds[0]), float(self.bounds[1])
        if not lo <= hi:
            raise ValueError(f"invalid bounds {self.bounds}")
        if inputs.size and (inputs.min() < lo or inputs.max() > hi):
            raise ValueError(f"inputs fall outside bounds [{lo}, {hi}]")
        object.__setattr__(self, "inputs", _frozen(inputs))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "bounds", (lo, hi))

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, index) -> LabeledDataset:
        return LabeledDataset(self.inputs[index], self.labels[index], self.bounds, self.class_count)

    def equals(self, other: LabeledDataset) -> bool:
        """Exact (bitwise) equality of all fields."""
        return (
            self.bounds == other.bounds
            and self.class_count == other.class_count
            and np.array_equal(self.labels, other.labels)
            and self.inputs.shape == other.inputs.shape
            and self.inputs.tobytes() == other.inputs.tobytes()
        )


@dataclass(frozen=True, eq=False)
class UnlabeledDataset:
    """Inputs without labels, e.g. out-of-distribution or adversarial samples."""

    inputs: np.ndarray
    bounds: tuple[float, float]

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        if inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {inputs.shape}")
        lo, hi = float(self.bounds[0]), float(self.bounds[1])
        if not lo <= hi:
            raise ValueError(f"invalid bounds {self.bounds}")
        if inputs.size and (inputs.min() < lo or inputs.max() > hi):
            raise ValueError(f"inputs fall outside bounds [{lo}, {hi}]")
        object.__setattr__(self, "inputs", _frozen(inputs))
        object.__setattr__(self, "bounds", (lo, hi))

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float
    val_fraction: float
    test_fraction: float
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_fraction, self.val_fraction, self.test_fraction)
        if not all(0.0 < f < 1.0 for f in fracs):
            raise ValueError(f"split fractions must lie in (0, 1), got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-12:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)!r}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def blob_means(class_count: int, dim: int, separation: float, seed: int) -> np.ndarray:
    """Seed-derived class means with pairwise distance ``separation``.

    When ``dim >= class_count - 1`` the means are the vertices of a regular
    simplex centred at the origin, randomly rotated into ``dim`` dimensions.
    Otherwise a regular simplex does not fit and the means are random
    points, centred and scaled so the closest pair is ``separation`` apart.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[0])
    C, d = class_count, dim
    if d >= C - 1:
        vertices = np.eye(C) - 1.0 / C
        # orthonormal coordinates inside the (C-1)-dim hyperplane
        _, _, vt = np.linalg.svd(vertices)
        coords = vertices @ vt[: C - 1].T
        q, r = np.linalg.qr(rng.normal(size=(d, C - 1)))
        q = q * np.sign(np.diag(r))
        means = coords @ q.T * (separation / math.sqrt(2.0))
    else:
        pts = rng.normal(size=(C, d))
        pts -= pts.mean(axis=0)
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        closest = dist[~np.eye(C, dtype=bool)].min()
        means = pts * (separation / closest)
    return means


def gen_blobs(
    class_count: int,
    per_class: int,
    dim: int,
    spread: float,
    seed: int,
    separation: float | None = None,
) -> LabeledDataset:
    """Isotropic Gaussian classes, ``per_class`` rows each, in label order.

    ``separation`` is the distance between class means; it defaults to
    ``4 * spread``. Lowering it relative to ``spread`` increases overlap.
    """
    if class_count < 2:
        raise ValueError(f"class_count must be >= 2, got {class_count}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if not spread > 0:
        raise ValueError(f"spread must be > 0, got {spread}")
    if separation is None:
        separation = 4.0 * spread
    if not separation > 0:
        raise ValueError(f"separation must be > 0, got {separation}")
    means = blob_means(class_count, dim, separation, seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
    labels = np.repeat(np.arange(class_count), per_class)
    inputs = means[labels] + spread * rng.normal(size=(labels.size, dim))
    inputs = np.clip(inputs, *DOMAIN)
    return LabeledDataset(inputs, labels, DOMAIN, class_count)


def gen_ood(
    kind: str,
    count: int,
    dim: int,
    magnitude: float,
    seed: int,
    *,
    class_count: int = 2,
    spread: float = 1.0,
    separation: float | None = None,
    blob_seed: int | None = None,
) -> UnlabeledDataset:
    """Out-of-distribution inputs.

    Noise kinds are clamped to ``DOMAIN``. ``shifted_blobs`` draws from the
    blobs of :func:`gen_blobs` (same ``class_count``, ``spread``,
    ``separation`` and ``blob_seed``, classes assigned round-robin) and
    translates every coordinate by ``magnitude``; its bounds are the domain
    translated by the same amount.
    """
    if kind not in OOD_KINDS:
        raise ValueError(f"unknown OOD kind {kind!r}; expected one of {OOD_KINDS}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if not magnitude > 0:
        raise ValueError(f"magnitude must be > 0, got {magnitude}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x00D]))
    if kind == "gaussian_noise":
        inputs = rng.normal(scale=magnitude, size=(count, dim))
        return UnlabeledDataset(np.clip(inputs, *DOMAIN), DOMAIN)
    if kind == "uniform_noise":
        inputs = rng.uniform(-magnitude, magnitude, size=(count, dim))
        return UnlabeledDataset(np.clip(inputs, *DOMAIN), DOMAIN)

    if separation is None:
        separation = 4.0 * spread
    means = blob_means(class_count, dim, separation, seed if blob_seed is None else blob_seed)
    labels = np.arange(count) % class_count
    inputs = np.clip(means[labels] + spread * rng.normal(size=(count, dim)), *DOMAIN)
    lo, hi = DOMAIN
    return UnlabeledDataset(inputs + magnitude, (lo + magnitude, hi + magnitude))


def split(ds: LabeledDataset, spec: SplitSpec) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Partition rows into (train, val, test) by a seed-derived permutation.

    Validation and test sizes are ``floor(N * fraction)``; the remainder
    goes to train.
    """
    n = len(ds)
    if n < 3:
        raise ValueError(f"need at least 3 rows to split, got {n}")
    # the tiny offset absorbs products like 0.29 * 100 = 28.999999999999996
    n_val = math.floor(n * spec.val_fraction + 1e-9)
    n_test = math.floor(n * spec.test_fraction + 1e-9)
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"split of {n} rows leaves an empty part: {(n_train, n_val, n_test)}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    return (
        ds.subset(perm[:n_train]),
        ds.subset(perm[n_train : n_train + n_val]),
        ds.subset(perm[n_train + n_val :]),
    )


def load_csv(path) -> LabeledDataset:
    """Read rows of ``v_1,...,v_d,label``.

    Raises:
        FileNotFoundError: the file does not exist.
        ParseError: a value cannot be parsed (message cites the 1-based row).
        ValueError: rows disagree on the column count, or the file is empty.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such dataset file: {path}")
    rows, labels = [], []
    width = None
    with path.open(newline="") as fh:
        for rowno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise ParseError("expected at least one value and a label", rowno)
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ValueError(f"row {rowno}: expected {width} columns, got {len(row)}")
            try:
                values = [float(cell) for cell in row[:-1]]
                label_f = float(row[-1])
            except ValueError as exc:
                raise ParseError(str(exc), rowno) from None
            if not all(math.isfinite(v) for v in values):
                raise ParseError("non-finite value", rowno)
            if not (math.isfinite(label_f) and label_f == int(label_f) and label_f >= 0):
                raise ParseError(f"label {row[-1]!r} is not a non-negative integer", rowno)
            rows.append(values)
            labels.append(int(label_f))
    if not rows:
        raise ValueError(f"{path} contains no rows")
    inputs = np.array(rows, dtype=np.float64)
    return LabeledDataset(
        inputs, np.array(labels), (float(inputs.min()), float(inputs.max())), max(labels) + 1
    )


def save_csv(ds: LabeledDataset, path) -> None:
    """Write ``ds`` in the format read by :func:`load_csv` (17 significant digits)."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for x, y in zip(ds.inputs, ds.labels):
            writer.writerow([f"{v:.17g}" for v in x] + [int(y)])


def save_inputs_csv(inputs: np.ndarray, path) -> None:
    """Write an unlabeled input matrix, one row per sample."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for x in np.asarray(inputs):
            writer.writerow([f"{v:.17g}" for v in x])
