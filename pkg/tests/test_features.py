import numpy as np
import pytest

from anoquery import features
from anoquery.data import Label
from anoquery.features import (
    QS_ANOMALY,
    QS_NORMAL,
    MetaFeatures,
    QueryState,
    apply_feature_mask,
    extract,
    feature_row,
    init_cap,
    knn_indices,
    scaled_distances,
    update,
)


def brute_force_knn(X, k):
    """Independent oracle: exact (distance, index) sort per row."""
    n, d = X.shape
    out = []
    for i in range(n):
        cand = []
        for j in range(n):
            if j == i:
                continue
            dist = np.sqrt(((X[i] - X[j]) ** 2).sum()) / np.sqrt(d)
            cand.append((dist, j))
        cand.sort()
        out.append([j for _, j in cand[: min(k, n - 1)]])
    return np.array(out)


class TestQueryState:
    def test_starts_unqueried(self):
        qs = QueryState(4)
        assert (qs.entries == 0).all()

    def test_mark_once_only(self):
        qs = QueryState(3)
        qs.mark(1, Label.ANOMALY)
        assert qs.entries[1] == QS_ANOMALY
        with pytest.raises(ValueError, match="already labeled"):
            qs.mark(1, Label.NORMAL)

    def test_mark_out_of_range(self):
        with pytest.raises(IndexError):
            QueryState(2).mark(5, Label.NORMAL)


class TestInitCap:
    def test_identical_rows_floor(self):
        assert init_cap(np.ones((5, 3)), seed=0) == 1.0

    def test_two_standardized_points(self):
        X = np.array([[-1.0], [1.0]])
        assert init_cap(X, seed=0) == 2.0

    def test_matches_brute_force_on_subsample(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(500, 4))
        cap = init_cap(X, seed=3)
        sample = np.random.Generator(np.random.PCG64(3)).choice(500, size=256, replace=False)
        best = 0.0
        for i in range(500):
            for j in sample:
                best = max(best, np.sqrt(((X[i] - X[j]) ** 2).sum()) / 2.0)
        assert cap == pytest.approx(best, rel=1e-12)


class TestExtract:
    def test_cold_start_columns(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(20, 3))
        scores = rng.random(20)
        mf = extract(X, scores, QueryState(20), k=3, d_cap=7.0)
        G = mf.G
        np.testing.assert_array_equal(G[:, 0], scores)
        for c in (1, 2, 4, 5):
            assert (G[:, c] == 7.0).all()
        assert (G[:, 3] == 0.0).all()

    def test_self_labeled_anomaly_zero_distance(self):
        X = np.random.default_rng(2).normal(size=(6, 2))
        qs = QueryState(6)
        qs.mark(4, Label.ANOMALY)
        mf = extract(X, np.full(6, 0.5), qs, k=2, d_cap=5.0)
        assert mf.G[4, 1] == 0.0
        assert mf.G[4, 2] == 0.0  # only one labeled anomaly, so mean = 0 too

    def test_hand_computed_line_example(self):
        # 1-D points 0 (anomaly), 3, 4 (anomaly); instance at 3 has
        # min anomaly distance 1 and mean 2; its nearest other point is the
        # anomaly at 4, so the 1-NN flag is set
        X = np.array([[0.0], [3.0], [4.0]])
        qs = QueryState(3)
        qs.mark(0, Label.ANOMALY)
        qs.mark(2, Label.ANOMALY)
        mf = extract(X, np.full(3, 0.5), qs, k=1, d_cap=10.0)
        assert mf.G[1, 1] == 1.0
        assert mf.G[1, 2] == 2.0
        assert mf.G[1, 3] == 1.0

    def test_min_le_mean_and_range(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(60, 4))
        qs = QueryState(60)
        for i in range(12):
            qs.mark(i, Label.ANOMALY if i % 3 else Label.NORMAL)
        cap = init_cap(X, 0)
        G = extract(X, rng.random(60), qs, k=4, d_cap=cap).G
        for pair in ((1, 2), (4, 5)):
            assert (G[:, pair[0]] <= G[:, pair[1]] + 1e-15).all()
            assert (G[:, pair[0]] >= 0).all() and (G[:, pair[1]] <= cap).all()
        assert set(np.unique(G[:, 3])) <= {0.0, 1.0}

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(30, 3))
        scores = rng.random(30)
        qs = QueryState(30)
        qs.mark(3, Label.ANOMALY)
        qs.mark(17, Label.NORMAL)
        G = extract(X, scores, qs, k=5, d_cap=9.0).G
        perm = rng.permutation(30)
        qs2 = QueryState(30)
        inv = np.empty(30, dtype=int)
        inv[perm] = np.arange(30)
        qs2.mark(int(inv[3]), Label.ANOMALY)
        qs2.mark(int(inv[17]), Label.NORMAL)
        G2 = extract(X[perm], scores[perm], qs2, k=5, d_cap=9.0).G
        np.testing.assert_allclose(G2, G[perm], atol=1e-12)

    def test_knn_flag_matches_brute_force(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(40, 2))
        qs = QueryState(40)
        for i in (2, 11, 29):
            qs.mark(i, Label.ANOMALY)
        mf = extract(X, np.full(40, 0.5), qs, k=6, d_cap=20.0)
        oracle = brute_force_knn(X, 6)
        for i in range(40):
            expected = float(any(qs.entries[j] == QS_ANOMALY for j in oracle[i]))
            assert mf.G[i, 3] == expected


class TestKnnIndices:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(25, 3))
        np.testing.assert_array_equal(knn_indices(X, 4), brute_force_knn(X, 4))

    def test_tie_break_lower_index(self):
        # three coincident points: neighbors of each are the other two, by index
        X = np.zeros((3, 2))
        idx = knn_indices(X, 2)
        np.testing.assert_array_equal(idx, [[1, 2], [0, 2], [0, 1]])

    def test_k_capped_by_n(self):
        X = np.random.default_rng(7).normal(size=(4, 2))
        assert knn_indices(X, 10).shape == (4, 3)


class TestUpdate:
    def test_first_anomaly_drops_columns(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(15, 2))
        qs = QueryState(15)
        mf = extract(X, np.full(15, 0.5), qs, k=3, d_cap=50.0)
        qs.mark(6, Label.ANOMALY)
        update(mf, X, qs, 6)
        assert (mf.G[:, 1] < 50.0).all()
        assert (mf.G[:, 4] == 50.0).all()

    def test_normal_label_leaves_anomaly_columns(self):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(15, 2))
        qs = QueryState(15)
        mf = extract(X, np.full(15, 0.5), qs, k=3, d_cap=50.0)
        before = mf.G[:, (1, 2, 3)].copy()
        qs.mark(2, Label.NORMAL)
        update(mf, X, qs, 2)
        np.testing.assert_array_equal(mf.G[:, (1, 2, 3)], before)

    def test_chain_equals_full_extract_bitwise(self):
        rng = np.random.default_rng(10)
        X = rng.normal(size=(200, 5))
        scores = rng.random(200)
        cap = init_cap(X, 1)
        qs = QueryState(200)
        mf = extract(X, scores, qs, k=10, d_cap=cap)
        order = rng.choice(200, size=10, replace=False)
        for step, i in enumerate(order):
            qs.mark(int(i), Label.ANOMALY if step % 2 == 0 else Label.NORMAL)
            update(mf, X, qs, int(i))
            fresh = extract(X, scores, qs, k=10, d_cap=cap)
            np.testing.assert_array_equal(mf.G, fresh.G)

    def test_rejects_unlabeled_index(self):
        X = np.random.default_rng(11).normal(size=(5, 2))
        qs = QueryState(5)
        mf = extract(X, np.full(5, 0.5), qs, k=2, d_cap=3.0)
        with pytest.raises(ValueError, match="not labeled"):
            update(mf, X, qs, 1)

    def test_rejects_double_fold(self):
        X = np.random.default_rng(12).normal(size=(5, 2))
        qs = QueryState(5)
        mf = extract(X, np.full(5, 0.5), qs, k=2, d_cap=3.0)
        qs.mark(1, Label.ANOMALY)
        update(mf, X, qs, 1)
        with pytest.raises(ValueError, match="already folded"):
            update(mf, X, qs, 1)

    def test_rejects_out_of_range(self):
        X = np.zeros((3, 1))
        qs = QueryState(3)
        mf = extract(X, np.full(3, 0.5), qs, k=1, d_cap=1.0)
        with pytest.raises(IndexError):
            update(mf, X, qs, 7)

    def test_new_anomaly_never_increases_min_dist(self):
        rng = np.random.default_rng(13)
        X = rng.normal(size=(50, 3))
        qs = QueryState(50)
        mf = extract(X, np.full(50, 0.5), qs, k=3, d_cap=30.0)
        prev = mf.G[:, 1].copy()
        for i in (4, 40, 21):
            qs.mark(i, Label.ANOMALY)
            update(mf, X, qs, i)
            assert (mf.G[:, 1] <= prev + 1e-15).all()
            prev = mf.G[:, 1].copy()


class TestFeatureRow:
    def test_matches_matrix_row_bitwise(self):
        rng = np.random.default_rng(14)
        X = rng.normal(size=(80, 4))
        scores = rng.random(80)
        cap = init_cap(X, 2)
        qs = QueryState(80)
        knn = knn_indices(X, 5)
        for i in (3, 9, 44, 70):
            qs.mark(i, Label.ANOMALY if i % 2 else Label.NORMAL)
        mf = extract(X, scores, qs, k=5, d_cap=cap, knn_idx=knn)
        anom = qs.indices(QS_ANOMALY)
        norm = qs.indices(QS_NORMAL)
        for i in (0, 9, 50):
            row = feature_row(X, float(scores[i]), anom, norm, qs.entries, knn[i], i, cap)
            np.testing.assert_array_equal(row, mf.G[i])


class TestFeatureMask:
    def test_distance_columns_become_cap(self):
        G = np.random.default_rng(15).random((10, 6))
        out = apply_feature_mask(G, (1, 2, 3), d_cap=4.5)
        assert (out[:, 1] == 4.5).all() and (out[:, 2] == 4.5).all()
        assert (out[:, 3] == 0.0).all()
        np.testing.assert_array_equal(out[:, 0], G[:, 0])

    def test_empty_mask_is_identity(self):
        G = np.ones((3, 6))
        assert apply_feature_mask(G, (), 2.0) is G

    def test_single_row(self):
        row = np.arange(6, dtype=np.float64)
        out = apply_feature_mask(row, (0, 4), d_cap=9.0)
        assert out[0] == 0.0 and out[4] == 9.0 and out[5] == 5.0


def test_width_fixed_regardless_of_shape():
    for n, d in ((2, 1), (7, 3), (30, 11)):
        X = np.random.default_rng(n).normal(size=(n, d))
        mf = extract(X, np.full(n, 0.5), QueryState(n), k=3, d_cap=5.0)
        assert mf.G.shape == (n, features.N_FEATURES)
