"""Per-instance meta-features driving the query policy.

Six columns, in fixed order: detector score, min/mean scaled distance to
labeled anomalies, k-NN labeled-anomaly flag, min/mean scaled distance to
labeled normals. The width never depends on the dataset's n or d, which is
what lets one trained policy transfer between datasets.

Distances are Euclidean scaled by 1/sqrt(d) so magnitudes stay comparable
across feature dimensions. Empty label sets yield the sentinel d_cap in
their distance columns; all distance features are clipped at d_cap.
"""

from __future__ import annotations

import numpy as np

from .data import Label

QS_ANOMALY = -1
QS_UNQUERIED = 0
QS_NORMAL = 1

DEFAULT_K = 10
CAP_SAMPLE = 256

COLUMNS = (
    "detector_score",
    "min_dist_anomaly",
    "mean_dist_anomaly",
    "knn_anomaly_flag",
    "min_dist_normal",
    "mean_dist_normal",
)

N_FEATURES = len(COLUMNS)

_CHUNK = 512


class QueryState:
    """Per-instance analyst feedback: -1 anomaly, 0 unqueried, +1 normal.

    Entries start all-unqueried and, once set, never change within a
    session or episode.
    """

    __slots__ = ("entries",)

    def __init__(self, n: int):
        self.entries = np.zeros(n, dtype=np.int8)

    def __len__(self) -> int:
        return len(self.entries)

    def mark(self, index: int, label: Label) -> None:
        if not 0 <= index < len(self.entries):
            raise IndexError(f"instance index {index} out of range [0, {len(self.entries)})")
        if self.entries[index] != QS_UNQUERIED:
            raise ValueError(f"instance {index} already labeled")
        self.entries[index] = QS_ANOMALY if label is Label.ANOMALY else QS_NORMAL

    def indices(self, code: int) -> np.ndarray:
        return np.flatnonzero(self.entries == code)

    def copy(self) -> "QueryState":
        qs = QueryState(len(self.entries))
        qs.entries = self.entries.copy()
        return qs


def scaled_distances(X_std: np.ndarray, j: int) -> np.ndarray:
    """Scaled distance ||X[i] - X[j]||_2 / sqrt(d) for every row i."""
    diff = X_std - X_std[j]
    return np.sqrt(np.sum(diff * diff, axis=1)) / np.sqrt(X_std.shape[1])


def row_scaled_distances(X_std: np.ndarray, rows: np.ndarray, i: int) -> np.ndarray:
    """Scaled distances from instance i to X_std[rows] (bit-identical to
    gathering :func:`scaled_distances` columns)."""
    diff = X_std[rows] - X_std[i]
    return np.sqrt(np.sum(diff * diff, axis=1)) / np.sqrt(X_std.shape[1])


def knn_indices(X_std: np.ndarray, k: int) -> np.ndarray:
    """Indices of each row's k nearest neighbors (self excluded).

    Ties break toward the lower index. Neighborhoods depend only on X, so
    they are computed once per dataset and reused as labels accrue.
    """
    n, d = X_std.shape
    k_eff = min(k, n - 1)
    out = np.empty((n, k_eff), dtype=np.int64)
    for start in range(0, n, _CHUNK):
        end = min(start + _CHUNK, n)
        block = X_std[start:end]
        d2 = np.zeros((end - start, n), dtype=np.float64)
        for c in range(d):
            diff = block[:, c, None] - X_std[None, :, c]
            d2 += diff * diff
        d2[np.arange(end - start), np.arange(start, end)] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")
        out[start:end] = order[:, :k_eff]
    return out


def init_cap(X_std: np.ndarray, seed: int) -> float:
    """Distance sentinel: max scaled distance from any instance to a
    without-replacement subsample of min(256, n) instances. Floored to 1.0
    when the data collapses to a point."""
    n, d = X_std.shape
    rng = np.random.Generator(np.random.PCG64(seed))
    sample = rng.choice(n, size=min(CAP_SAMPLE, n), replace=False)
    best = 0.0
    for start in range(0, n, _CHUNK):
        end = min(start + _CHUNK, n)
        block = X_std[start:end]
        d2 = np.zeros((end - start, len(sample)), dtype=np.float64)
        for c in range(d):
            diff = block[:, c, None] - X_std[None, sample, c]
            d2 += diff * diff
        best = max(best, float(d2.max()))
    cap = np.sqrt(best) / np.sqrt(d)
    return 1.0 if cap == 0.0 else float(cap)


class MetaFeatures:
    """The n x 6 feature matrix plus the caches that keep incremental
    updates bit-identical to a full recompute.

    Distance columns to each label class are cached as an (n, class size)
    matrix whose columns are ordered by instance index; derived min/mean
    columns always come from the same reduction calls, so inserting one
    column reproduces exactly what a fresh extraction would build.
    """

    def __init__(
        self,
        X_std: np.ndarray,
        detector_scores: np.ndarray,
        qs: QueryState,
        k: int,
        d_cap: float,
        knn_idx: np.ndarray | None = None,
    ):
        n = X_std.shape[0]
        if len(detector_scores) != n or len(qs) != n:
            raise ValueError("X_std, detector_scores and query state lengths disagree")
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        self.k = k
        self.d_cap = float(d_cap)
        self.scores = np.asarray(detector_scores, dtype=np.float64)
        self.knn_idx = knn_indices(X_std, k) if knn_idx is None else knn_idx
        self._anom_idx = qs.indices(QS_ANOMALY)
        self._norm_idx = qs.indices(QS_NORMAL)
        self._anom_cols = _label_columns(X_std, self._anom_idx)
        self._norm_cols = _label_columns(X_std, self._norm_idx)
        self.G = np.empty((n, N_FEATURES), dtype=np.float64)
        self._rebuild(qs)

    def _rebuild(self, qs: QueryState) -> None:
        n = self.G.shape[0]
        self.G[:, 0] = self.scores
        self.G[:, 1], self.G[:, 2] = _dist_features(self._anom_cols, self.d_cap, n)
        if self.knn_idx.shape[1] > 0:
            flags = (qs.entries[self.knn_idx] == QS_ANOMALY).any(axis=1)
            self.G[:, 3] = flags.astype(np.float64)
        else:
            self.G[:, 3] = 0.0
        self.G[:, 4], self.G[:, 5] = _dist_features(self._norm_cols, self.d_cap, n)

    @property
    def n_anomalies(self) -> int:
        return len(self._anom_idx)

    @property
    def n_normals(self) -> int:
        return len(self._norm_idx)


def _label_columns(X_std: np.ndarray, idx: np.ndarray) -> np.ndarray:
    if len(idx) == 0:
        return np.empty((X_std.shape[0], 0), dtype=np.float64)
    return np.column_stack([scaled_distances(X_std, int(j)) for j in idx])


def _dist_features(cols: np.ndarray, d_cap: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    if cols.shape[1] == 0:
        full = np.full(n, d_cap)
        return full, full.copy()
    mn = np.minimum(np.min(cols, axis=1), d_cap)
    mean = np.minimum(np.sum(cols, axis=1) / cols.shape[1], d_cap)
    return mn, mean


def extract(
    X_std: np.ndarray,
    detector_scores: np.ndarray,
    qs: QueryState,
    k: int = DEFAULT_K,
    d_cap: float = 1.0,
    knn_idx: np.ndarray | None = None,
) -> MetaFeatures:
    """Compute the full feature matrix for the current query state."""
    return MetaFeatures(X_std, detector_scores, qs, k, d_cap, knn_idx)


def update(
    mf: MetaFeatures, X_std: np.ndarray, qs: QueryState, newly_labeled: int
) -> MetaFeatures:
    """Fold one new label into mf, bit-identical to a fresh extract.

    mf must reflect qs minus the new label; qs must already carry it.
    Mutates mf in place and returns it.
    """
    n = X_std.shape[0]
    if not 0 <= newly_labeled < n:
        raise IndexError(f"instance index {newly_labeled} out of range [0, {n})")
    code = qs.entries[newly_labeled]
    if code == QS_UNQUERIED:
        raise ValueError(f"instance {newly_labeled} is not labeled in the query state")
    if newly_labeled in mf._anom_idx or newly_labeled in mf._norm_idx:
        raise ValueError(f"instance {newly_labeled} already folded into the features")
    expected_a = np.setdiff1d(qs.indices(QS_ANOMALY), [newly_labeled])
    expected_n = np.setdiff1d(qs.indices(QS_NORMAL), [newly_labeled])
    if not np.array_equal(expected_a, mf._anom_idx) or not np.array_equal(
        expected_n, mf._norm_idx
    ):
        raise ValueError("feature cache is inconsistent with the query state")

    col = scaled_distances(X_std, newly_labeled)
    if code == QS_ANOMALY:
        pos = int(np.searchsorted(mf._anom_idx, newly_labeled))
        mf._anom_idx = np.insert(mf._anom_idx, pos, newly_labeled)
        mf._anom_cols = np.insert(mf._anom_cols, pos, col, axis=1)
    else:
        pos = int(np.searchsorted(mf._norm_idx, newly_labeled))
        mf._norm_idx = np.insert(mf._norm_idx, pos, newly_labeled)
        mf._norm_cols = np.insert(mf._norm_cols, pos, col, axis=1)
    mf._rebuild(qs)
    return mf


def feature_row(
    X_std: np.ndarray,
    score: float,
    anom_idx: np.ndarray,
    norm_idx: np.ndarray,
    qs_entries: np.ndarray,
    knn_row: np.ndarray,
    i: int,
    d_cap: float,
) -> np.ndarray:
    """One instance's feature row from sorted label-index arrays.

    Matches the corresponding :class:`MetaFeatures` row bit-for-bit; used by
    the streaming trainer, which never materializes the full matrix.
    """
    row = np.empty(N_FEATURES, dtype=np.float64)
    row[0] = score
    row[1], row[2] = _row_dist_pair(X_std, anom_idx, i, d_cap)
    if len(knn_row) > 0:
        row[3] = 1.0 if (qs_entries[knn_row] == QS_ANOMALY).any() else 0.0
    else:
        row[3] = 0.0
    row[4], row[5] = _row_dist_pair(X_std, norm_idx, i, d_cap)
    return row


def _row_dist_pair(
    X_std: np.ndarray, idx: np.ndarray, i: int, d_cap: float
) -> tuple[float, float]:
    if len(idx) == 0:
        return d_cap, d_cap
    dvec = row_scaled_distances(X_std, idx, i)
    return (
        min(float(np.min(dvec)), d_cap),
        min(float(np.sum(dvec) / len(dvec)), d_cap),
    )


def apply_feature_mask(G: np.ndarray, masked_columns: tuple[int, ...], d_cap: float) -> np.ndarray:
    """Replace masked columns with their uninformative cold-start constants
    (d_cap for distance columns, 0 for the flag and detector columns), so the
    policy's input width stays fixed under feature ablations."""
    if not masked_columns:
        return G
    out = G.copy() if G.ndim == 2 else G.copy()
    for c in masked_columns:
        if c in (1, 2, 4, 5):
            out[..., c] = d_cap
        else:
            out[..., c] = 0.0
    return out
