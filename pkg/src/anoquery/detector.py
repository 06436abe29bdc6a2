"""Isolation forest: randomized isolation trees over row subsamples.

Scores are oriented so that higher = more anomalous, and live in (0, 1].
Trees are stored as flat arrays so that scoring vectorizes over instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EULER_GAMMA = 0.5772156649

DEFAULT_TREES = 100
DEFAULT_PSI = 256


def avg_path_norm(m: int) -> float:
    """Expected path length of an unsuccessful BST search among m points.

    Uses H(i) = ln(i) + gamma for i >= 2 and the exact H(1) = 1, so
    avg_path_norm(2) == 1 exactly. By convention the value is 0 for m <= 1.
    """
    if m <= 1:
        return 0.0
    if m == 2:
        return 1.0
    return 2.0 * (math.log(m - 1) + EULER_GAMMA) - 2.0 * (m - 1) / m


@dataclass
class IsolationTree:
    """One isolation tree as a node arena.

    feature[i] is the split feature of internal node i, or -1 for an
    external node; split/left/right are valid for internal nodes only;
    size[i] is the number of subsample points that reached node i.
    """

    feature: np.ndarray
    split: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    height_limit: int

    def path_length(self, x: np.ndarray) -> float:
        """Isolation path length of one instance, with the usual c(size)
        credit at external nodes."""
        node = 0
        depth = 0
        while self.feature[node] >= 0:
            node = self.left[node] if x[self.feature[node]] < self.split[node] else self.right[node]
            depth += 1
        return depth + avg_path_norm(int(self.size[node]))

    def path_lengths(self, X: np.ndarray) -> np.ndarray:
        """Vectorized path lengths for all rows of X."""
        n = X.shape[0]
        node = np.zeros(n, dtype=np.int32)
        depth = np.zeros(n, dtype=np.float64)
        for _ in range(self.height_limit + 1):
            internal = self.feature[node] >= 0
            if not internal.any():
                break
            idx = np.flatnonzero(internal)
            cur = node[idx]
            goes_left = X[idx, self.feature[cur]] < self.split[cur]
            node[idx] = np.where(goes_left, self.left[cur], self.right[cur])
            depth[idx] += 1.0
        return depth + _c_lookup(self.size[node])


def _c_lookup(sizes: np.ndarray) -> np.ndarray:
    out = np.zeros(len(sizes), dtype=np.float64)
    for m in np.unique(sizes):
        out[sizes == m] = avg_path_norm(int(m))
    return out


@dataclass
class IsolationForest:
    trees: list[IsolationTree]
    psi: int
    seed: int
    d: int

    @property
    def c_psi(self) -> float:
        return avg_path_norm(self.psi)


class _TreeBuilder:
    def __init__(self, X: np.ndarray, height_limit: int, rng: np.random.Generator):
        self.X = X
        self.height_limit = height_limit
        self.rng = rng
        self.feature: list[int] = []
        self.split: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.size: list[int] = []

    def build(self, rows: np.ndarray, depth: int) -> int:
        node = len(self.feature)
        self.feature.append(-1)
        self.split.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.size.append(len(rows))
        if depth >= self.height_limit or len(rows) <= 1:
            return node
        sub = self.X[rows]
        lo = sub.min(axis=0)
        hi = sub.max(axis=0)
        valid = np.flatnonzero(lo < hi)
        if len(valid) == 0:
            # all remaining points identical in every feature
            return node
        q = int(valid[self.rng.integers(len(valid))])
        # draw until strictly inside (lo, hi); uniform() is half-open so only
        # an exact-lo draw needs rejecting
        while True:
            p = self.rng.uniform(lo[q], hi[q])
            if p > lo[q]:
                break
        mask = sub[:, q] < p
        self.feature[node] = q
        self.split[node] = p
        self.left[node] = self.build(rows[mask], depth + 1)
        self.right[node] = self.build(rows[~mask], depth + 1)
        return node

    def finish(self) -> IsolationTree:
        return IsolationTree(
            feature=np.asarray(self.feature, dtype=np.int32),
            split=np.asarray(self.split, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int32),
            right=np.asarray(self.right, dtype=np.int32),
            size=np.asarray(self.size, dtype=np.int32),
            height_limit=self.height_limit,
        )


def fit(
    X_std: np.ndarray,
    n_trees: int = DEFAULT_TREES,
    psi: int = DEFAULT_PSI,
    seed: int = 0,
) -> IsolationForest:
    """Fit an isolation forest on standardized rows.

    Each tree grows on a without-replacement subsample of min(psi, n) rows;
    splits pick a uniformly random non-constant feature, then a uniform
    value strictly between that feature's subsample min and max. Height is
    limited to ceil(log2(subsample size)). Deterministic given seed.
    """
    n = X_std.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 rows to fit, got {n}")
    if n_trees < 1:
        raise ValueError(f"n_trees must be >= 1, got {n_trees}")
    if psi < 2:
        raise ValueError(f"psi must be >= 2, got {psi}")
    eff_psi = min(psi, n)
    height_limit = math.ceil(math.log2(eff_psi))
    rng = np.random.Generator(np.random.PCG64(seed))
    trees = []
    for _ in range(n_trees):
        rows = rng.choice(n, size=eff_psi, replace=False)
        builder = _TreeBuilder(X_std, height_limit, rng)
        builder.build(rows, 0)
        trees.append(builder.finish())
    return IsolationForest(trees=trees, psi=eff_psi, seed=seed, d=X_std.shape[1])


def score(forest: IsolationForest, x: np.ndarray) -> float:
    """Anomaly score of one instance: 2 ** (-E[h(x)] / c(psi))."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (forest.d,):
        raise ValueError(f"expected a {forest.d}-vector, got shape {x.shape}")
    mean_path = sum(t.path_length(x) for t in forest.trees) / len(forest.trees)
    return float(2.0 ** (-mean_path / forest.c_psi))


def score_all(forest: IsolationForest, X: np.ndarray) -> np.ndarray:
    """Anomaly scores for every row of X (same formula as :func:`score`)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != forest.d:
        raise ValueError(f"expected (n, {forest.d}) matrix, got shape {X.shape}")
    total = np.zeros(X.shape[0], dtype=np.float64)
    for t in forest.trees:
        total += t.path_lengths(X)
    return 2.0 ** (-(total / len(forest.trees)) / forest.c_psi)
