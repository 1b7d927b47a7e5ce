"""Representation similarity (linear CKA) and similarity-driven task grouping."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterator, Mapping, Sequence

import numpy as np

from mtsl.errors import ContractError, ParseError, ShapeError

# Grouping values closer than this are treated as ties.
TIE_TOL = 1e-12
# Centered Gram norms below this mean "constant features".
_DEGENERATE = 1e-12


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray  # (N, C)
    source: tuple = ()  # (task, layer index) or empty

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError(f"feature matrix must be (N, C), got {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]


def _values(x) -> np.ndarray:
    if isinstance(x, FeatureMatrix):
        return x.values
    v = getattr(x, "data", x)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2:
        raise ShapeError(f"expected an (N, C) matrix, got shape {v.shape}")
    return v


def spatial_pool(features) -> FeatureMatrix:
    """Average an (N, C, H, W) activation over its spatial axes."""
    x = np.asarray(getattr(features, "data", features), dtype=np.float64)
    if x.ndim != 4 or x.shape[2] * x.shape[3] < 1:
        raise ShapeError(f"spatial_pool expects (N, C, H, W), got {x.shape}")
    return FeatureMatrix(x.mean(axis=(2, 3)))


def _center(k: np.ndarray) -> np.ndarray:
    return k - k.mean(axis=0, keepdims=True) - k.mean(axis=1, keepdims=True) + k.mean()


def cka_biased(x, y) -> float:
    """Linear CKA from double-centered Gram matrices."""
    x, y = _values(x), _values(y)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    kx = _center(x @ x.T)
    ky = _center(y @ y.T)
    nx = np.linalg.norm(kx)
    ny = np.linalg.norm(ky)
    if nx < _DEGENERATE or ny < _DEGENERATE:
        return 0.0
    return float(np.sum(kx * ky) / (nx * ny))


def hsic1(k: np.ndarray, l: np.ndarray) -> float:
    """Unbiased HSIC (U-statistic) of two Gram matrices; needs n >= 4."""
    n = k.shape[0]
    if n < 4:
        raise ContractError(f"unbiased HSIC needs at least 4 samples, got {n}")
    k = k.copy()
    l = l.copy()
    np.fill_diagonal(k, 0.0)
    np.fill_diagonal(l, 0.0)
    trace_term = np.sum(k * l)
    sum_term = k.sum() * l.sum() / ((n - 1) * (n - 2))
    row_term = 2.0 / (n - 2) * (k.sum(axis=1) @ l.sum(axis=1))
    return float((trace_term + sum_term - row_term) / (n * (n - 3)))


def cka_unbiased(x, y) -> float:
    """Linear CKA with unbiased HSIC in numerator and denominator, clamped to [-1, 1]."""
    x, y = _values(x), _values(y)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 4:
        raise ContractError(f"unbiased CKA needs at least 4 samples, got {x.shape[0]}")
    kx = x @ x.T
    ky = y @ y.T
    hxx = hsic1(kx, kx)
    hyy = hsic1(ky, ky)
    if hxx <= _DEGENERATE or hyy <= _DEGENERATE:
        return 0.0
    return float(np.clip(hsic1(kx, ky) / math.sqrt(hxx * hyy), -1.0, 1.0))


@dataclass(frozen=True)
class SimilarityMatrix:
    tasks: tuple
    S: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.S, dtype=np.float64)
        k = len(self.tasks)
        if s.shape != (k, k):
            raise ShapeError(f"similarity matrix shape {s.shape} does not match {k} tasks")
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "S", s)

    def __getitem__(self, pair):
        i, j = (self.tasks.index(t) for t in pair)
        return self.S[i, j]

    @classmethod
    def from_pairs(cls, tasks: Sequence, pairs: Mapping[tuple, float]) -> SimilarityMatrix:
        """Build from off-diagonal entries keyed by task pairs; the diagonal is 1."""
        idx = {t: i for i, t in enumerate(tasks)}
        s = np.eye(len(tasks))
        for (a, b), v in pairs.items():
            s[idx[a], idx[b]] = s[idx[b], idx[a]] = v
        return cls(tuple(tasks), s)


def pairwise_cka(features: Mapping[Hashable, object]) -> SimilarityMatrix:
    """Unbiased CKA between every pair of task features (unit diagonal)."""
    tasks = tuple(features)
    mats = [_values(features[t]) for t in tasks]
    ns = {m.shape[0] for m in mats}
    if len(ns) > 1:
        raise ShapeError(f"feature matrices disagree on sample count: {sorted(ns)}")
    k = len(tasks)
    s = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            s[i, j] = s[j, i] = cka_unbiased(mats[i], mats[j])
    return SimilarityMatrix(tasks, s)


# --- grouping -------------------------------------------------------------------


@dataclass(frozen=True)
class Grouping:
    groups: tuple[tuple, ...]
    group_values: tuple[float, ...]
    value: float

    def value_of(self, group) -> float:
        return self.group_values[self.groups.index(tuple(group))]


def set_partitions(n: int) -> Iterator[list[list[int]]]:
    """All partitions of range(n), via restricted growth strings.

    Blocks come out ordered by their smallest element, members ascending.
    """
    if n == 0:
        return
    labels = [0] * n

    def rec(i: int, top: int):
        if i == n:
            blocks: list[list[int]] = [[] for _ in range(top + 1)]
            for idx, lab in enumerate(labels):
                blocks[lab].append(idx)
            yield blocks
            return
        for lab in range(top + 2):
            labels[i] = lab
            yield from rec(i + 1, max(top, lab))

    labels[0] = 0
    yield from rec(1, 0)


def group_value(s: np.ndarray, members: Sequence[int], singleton_value: float) -> float:
    """Mean over members of each member's mean similarity to the other members."""
    if len(members) == 1:
        return float(singleton_value)
    per_task = []
    for t in members:
        others = [s[t, i] for i in members if i != t]
        per_task.append(sum(others) / len(others))
    return sum(per_task) / len(per_task)


def best_grouping(sim: SimilarityMatrix, gamma: float = 0.75) -> Grouping:
    """Exhaustive search for the partition of tasks with maximal mean group value.

    Singleton groups are valued at ``gamma``.  Ties (within ``TIE_TOL``)
    prefer fewer groups, then the lexicographically smallest partition in
    task-index order.
    """
    k = len(sim.tasks)
    if k == 0:
        raise ContractError("cannot group an empty task set")
    if k > 10:
        raise ContractError(f"exhaustive grouping is limited to 10 tasks, got {k}")
    s = sim.S
    best = None
    for blocks in set_partitions(k):
        values = [group_value(s, b, gamma) for b in blocks]
        total = sum(values) / len(values)
        key = (len(blocks), [tuple(b) for b in blocks])
        if best is None or total > best[0] + TIE_TOL or (abs(total - best[0]) <= TIE_TOL and key < best[1]):
            best = (total, key, values)
    total, (_, blocks), values = best
    groups = tuple(tuple(sim.tasks[i] for i in b) for b in blocks)
    return Grouping(groups, tuple(values), total)


def fusion_decision(grouping: Grouping, gamma: float) -> list[tuple]:
    """Groups with at least two members whose value reaches ``gamma``."""
    if not 0.0 <= gamma <= 1.0:
        raise ContractError(f"gamma must lie in [0, 1], got {gamma}")
    return [
        g for g, v in zip(grouping.groups, grouping.group_values) if len(g) >= 2 and v >= gamma
    ]


# --- CSV exchange -------------------------------------------------------------------


def save_feature_csv(features, path) -> None:
    v = _values(features)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(range(v.shape[1]))
        for row in v:
            w.writerow(repr(float(x)) for x in row)


def load_feature_csv(path, source: tuple = ()) -> FeatureMatrix:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{Path(path).name}: empty file", line=1) from None
        if header != [str(i) for i in range(len(header))]:
            raise ParseError("header must list channel indices 0..C-1", line=1)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            try:
                rows.append([float(x) for x in row])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
    if not rows:
        raise ParseError("no data rows", line=2)
    return FeatureMatrix(np.array(rows), source)
