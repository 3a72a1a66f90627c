"""Datasets: synthetic generators and CSV round-tripping.

A :class:`Dataset` stores its examples column-wise (``X``, ``y``,
``class_tag``) as read-only numpy arrays.  Individual :class:`Example`
views are available through indexing or :meth:`Dataset.examples`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import InvalidArgument, ParseError


class Example(NamedTuple):
    x: np.ndarray
    y: float
    class_tag: int | None = None


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable collection of ``m`` labelled examples of dimension ``d``.

    ``norm_bound`` (B') and ``label_bound`` (B) default to the empirical
    maxima of ``||x||`` and ``|y|``; callers may pass larger values when the
    data domain is known a priori.
    """

    X: np.ndarray
    y: np.ndarray
    class_tag: np.ndarray | None = None
    norm_bound: float | None = None
    label_bound: float | None = None
    label_range: tuple[float, float] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        X = _frozen(self.X, float)
        if X.ndim == 1:
            X = _frozen(X.reshape(-1, 1), float)
        if X.ndim != 2:
            raise InvalidArgument(f"X must be 2-D, got shape {X.shape}")
        y = _frozen(self.y, float).reshape(-1)
        if y.shape[0] != X.shape[0]:
            raise InvalidArgument(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        if X.shape[0] < 1:
            raise InvalidArgument("dataset is empty")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.class_tag is not None:
            tags = _frozen(self.class_tag, np.int64).reshape(-1)
            if tags.shape[0] != X.shape[0]:
                raise InvalidArgument("class_tag length does not match number of examples")
            object.__setattr__(self, "class_tag", tags)

        norm = float(np.max(np.linalg.norm(X, axis=1)))
        lab = float(np.max(np.abs(y)))
        if self.norm_bound is None:
            object.__setattr__(self, "norm_bound", norm)
        elif self.norm_bound < norm:
            raise InvalidArgument(f"norm_bound {self.norm_bound} < max ||x|| = {norm}")
        if self.label_bound is None:
            object.__setattr__(self, "label_bound", lab)
        elif self.label_bound < lab:
            raise InvalidArgument(f"label_bound {self.label_bound} < max |y| = {lab}")

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def __len__(self):
        return self.m

    def __getitem__(self, j) -> Example:
        tag = None if self.class_tag is None else int(self.class_tag[j])
        return Example(self.X[j], float(self.y[j]), tag)

    def examples(self) -> Iterator[Example]:
        for j in range(self.m):
            yield self[j]

    @property
    def classes(self) -> np.ndarray:
        if self.class_tag is None:
            raise InvalidArgument("dataset carries no class tags")
        return np.unique(self.class_tag)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        tags = None if self.class_tag is None else self.class_tag[idx]
        return Dataset(self.X[idx], self.y[idx], tags, label_range=self.label_range,
                       meta=dict(self.meta))

    def without(self, i: int) -> "Dataset":
        """The dataset with example ``i`` removed (S minus i)."""
        if not 0 <= i < self.m:
            raise InvalidArgument(f"index {i} out of range for m={self.m}")
        return self.subset(np.delete(np.arange(self.m), i))

    def concat(self, other: "Dataset") -> "Dataset":
        if other.d != self.d:
            raise InvalidArgument("dimension mismatch")
        if (self.class_tag is None) != (other.class_tag is None):
            raise InvalidArgument("cannot concatenate tagged and untagged datasets")
        tags = None if self.class_tag is None else np.concatenate([self.class_tag, other.class_tag])
        return Dataset(np.vstack([self.X, other.X]), np.concatenate([self.y, other.y]), tags,
                       label_range=self.label_range)

    def equals(self, other: "Dataset") -> bool:
        """Field-for-field equality of the examples."""
        if self.X.shape != other.X.shape:
            return False
        same_tags = (self.class_tag is None and other.class_tag is None) or (
            self.class_tag is not None and other.class_tag is not None
            and np.array_equal(self.class_tag, other.class_tag))
        return bool(np.array_equal(self.X, other.X) and np.array_equal(self.y, other.y)
                    and same_tags)


def gen_two_cluster(d: int, m: int, seed: int) -> Dataset:
    """Balanced two-class data with uniform cube marginals.

    Positives (y=+1, class 1) have every coordinate uniform on [-0.5, 1];
    negatives (y=-1, class 0) on [-1, 0.5].  Example order is shuffled.
    """
    if d < 1:
        raise InvalidArgument("d must be >= 1")
    if m < 2 or m % 2:
        raise InvalidArgument(f"m must be even and >= 2, got {m}")
    rng = np.random.default_rng(seed)
    half = m // 2
    pos = rng.uniform(-0.5, 1.0, size=(half, d))
    neg = rng.uniform(-1.0, 0.5, size=(half, d))
    X = np.vstack([pos, neg])
    y = np.concatenate([np.ones(half), -np.ones(half)])
    tags = np.concatenate([np.ones(half, dtype=int), np.zeros(half, dtype=int)])
    perm = rng.permutation(m)
    return Dataset(X[perm], y[perm], tags[perm], label_range=(-1.0, 1.0),
                   meta={"generator": "two_cluster", "d": d, "m": m, "seed": seed})


def gen_linear_gaussian(d: int, m: int, seed: int, noise: float = 1.0,
                        w_seed: int | None = None) -> Dataset:
    """Linear regression data y = x^T w + noise * N(0, 1), x ~ N(0, I_d).

    ``w ~ N(0, I_d)`` is drawn from ``w_seed`` (default ``seed``), so a test
    set sharing the same ground truth uses a different ``seed`` and the same
    ``w_seed``.
    """
    if d < 1 or m < 1:
        raise InvalidArgument("d and m must be >= 1")
    if noise < 0:
        raise InvalidArgument("noise must be >= 0")
    w = np.random.default_rng(seed if w_seed is None else w_seed).normal(size=d)
    rng = np.random.default_rng([seed, 1])
    X = rng.normal(size=(m, d))
    y = X @ w + noise * rng.normal(size=m)
    return Dataset(X, y, meta={"generator": "linear_gaussian", "d": d, "m": m, "seed": seed,
                               "w_seed": seed if w_seed is None else w_seed, "noise": noise})


def blob_centers(d: int, K: int) -> np.ndarray:
    """Fixed unit-norm class centers.

    Standard basis vectors when K <= d, otherwise K points evenly spaced on
    the unit circle in the first two coordinates.
    """
    if K <= d:
        return np.eye(d)[:K]
    if d == 1:
        raise InvalidArgument("d=1 admits only K<=2 distinct unit centers")
    ang = 2 * np.pi * np.arange(K) / K
    C = np.zeros((K, d))
    C[:, 0] = np.cos(ang)
    C[:, 1] = np.sin(ang)
    return C


def gen_blobs(d: int, K: int, per_class: int, spread: float, seed: int) -> Dataset:
    """K classes around fixed unit centers with uniform noise of half-width ``spread``.

    Labels are the class ids (y = k) so the set also works for regression
    losses; ``class_tag`` carries the same ids.
    """
    if K < 2:
        raise InvalidArgument("K must be >= 2")
    if per_class < 1:
        raise InvalidArgument("per_class must be >= 1")
    if spread < 0:
        raise InvalidArgument("spread must be >= 0")
    if d == 1 and K == 2:
        C = np.array([[1.0], [-1.0]])
    else:
        C = blob_centers(d, K)
    rng = np.random.default_rng(seed)
    tags = np.repeat(np.arange(K), per_class)
    noise = rng.uniform(-spread, spread, size=(K * per_class, d)) if spread > 0 else 0.0
    X = C[tags] + noise
    return Dataset(X, tags.astype(float), tags, label_range=(0.0, float(K - 1)),
                   meta={"generator": "blobs", "d": d, "K": K, "per_class": per_class,
                         "spread": spread, "seed": seed})


def _fmt(v: float) -> str:
    return repr(float(v))


def emit_csv(ds: Dataset, path) -> Path:
    """Write ``x0..x{d-1},y[,class]`` with shortest round-trip float formatting."""
    path = Path(path)
    header = [f"x{k}" for k in range(ds.d)] + ["y"]
    if ds.class_tag is not None:
        header.append("class")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for j in range(ds.m):
            row = [_fmt(v) for v in ds.X[j]] + [_fmt(ds.y[j])]
            if ds.class_tag is not None:
                row.append(str(int(ds.class_tag[j])))
            w.writerow(row)
    return path


def load_csv(path) -> Dataset:
    """Parse a dataset CSV; errors name the offending line (1-based)."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file", line=1)
    header = [h.strip() for h in rows[0]]
    has_class = bool(header) and header[-1] == "class"
    feat = header[:-2] if has_class else header[:-1]
    if not header or (header[-2] if has_class else header[-1]) != "y" or not feat:
        raise ParseError("header must be x0,...,x{d-1},y[,class]", line=1)
    if feat != [f"x{k}" for k in range(len(feat))]:
        raise ParseError("feature columns must be named x0..x{d-1} in order", line=1)
    d = len(feat)
    width = len(header)
    X, y, tags = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise ParseError(f"expected {width} fields, found {len(row)}", line=lineno)
        try:
            vals = [float(c) for c in row[: d + 1]]
        except ValueError as exc:
            raise ParseError(f"non-numeric cell ({exc})", line=lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite value", line=lineno)
        X.append(vals[:d])
        y.append(vals[d])
        if has_class:
            try:
                tags.append(int(row[-1]))
            except ValueError:
                raise ParseError(f"class tag {row[-1]!r} is not an integer", line=lineno) from None
    if not X:
        raise ParseError("no data rows", line=2)
    return Dataset(np.array(X), np.array(y), np.array(tags) if has_class else None,
                   meta={"source": str(path)})
