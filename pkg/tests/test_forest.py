import numpy as np
import pytest

from mindprint.errors import DataError
from mindprint.forest import (
    HyperParams,
    RandomForest,
    cv_accuracy,
    cv_folds,
    grid_search,
    permutation_test,
    train_forest,
)
from mindprint.seeding import derive_seed


def blobs(n, d=4, shift=3.0, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    X = rng.normal(size=(n, d))
    X[:, 0] += shift * y
    return X, y


def test_separable_train_accuracy():
    X = np.array([[0.0, 0.0], [0.2, 1.0], [0.1, 0.5], [1.0, 0.3], [1.2, 0.9], [0.9, 0.1]])
    y = np.array([0, 0, 0, 1, 1, 1])
    model = train_forest(X, y, HyperParams(25), seed=1)
    assert model.score(X, y) == 1.0


def test_random_labels_near_chance():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(1200, 5))
    y = rng.integers(0, 2, 1200)
    model = train_forest(X[:400], y[:400], HyperParams(50), seed=0)
    assert abs(model.score(X[400:], y[400:]) - 0.5) < 0.1


def gini_best_split(X, y):
    """Exhaustive search over features and midpoints for the lowest weighted Gini."""
    def gini(lab):
        if len(lab) == 0:
            return 0.0
        p = lab.mean()
        return 1 - p**2 - (1 - p) ** 2

    best = None
    for f in range(X.shape[1]):
        vals = np.unique(X[:, f])
        for lo, hi in zip(vals[:-1], vals[1:]):
            t = (lo + hi) / 2
            left = X[:, f] <= t
            score = (left.sum() * gini(y[left]) + (~left).sum() * gini(y[~left])) / len(y)
            if best is None or score < best[0]:
                best = (score, f, t)
    return best


def test_stump_equals_hand_derived():
    X = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 0.0], [3.0, 1.0]])
    y = np.array([0, 0, 1, 1])
    _, f, t = gini_best_split(X, y)
    model = RandomForest(1, max_depth=1, features_per_split=2, bootstrap=False, random_state=0).fit(X, y)
    tree = model.trees_[0]
    assert (tree.feature[0], tree.threshold[0]) == (f, t) == (0, 1.5)
    assert tree.counts[tree.left[0]].tolist() == [2, 0]
    assert tree.counts[tree.right[0]].tolist() == [0, 2]


def test_leaf_counts_sum_to_sample():
    X, y = blobs(90)
    model = RandomForest(7, max_depth=4, min_samples_leaf=3, random_state=2).fit(X, y)
    for t in model.trees_:
        assert t.counts[0].sum() == 90
        leaves = t.is_leaf
        assert t.counts[leaves].sum() == 90
        assert np.all(t.counts[leaves].sum(axis=1) >= 3)
        assert np.all(t.feature[~leaves] < X.shape[1])


def test_deterministic_and_worker_independent():
    X, y = blobs(120, seed=3)
    a = RandomForest(20, random_state=5).fit(X, y)
    b = RandomForest(20, random_state=5, n_jobs=3).fit(X, y)
    assert a.to_dict() == b.to_dict()
    c = RandomForest(20, random_state=6).fit(X, y)
    assert a.to_dict() != c.to_dict()


def test_predict_all_agree_and_overfit():
    X, y = blobs(60, shift=0.5, seed=4)
    deep = RandomForest(15, bootstrap=False, features_per_split=4, random_state=0).fit(X, y)
    assert np.array_equal(deep.predict(X), y)
    votes = deep.tree_votes(X)
    assert np.all((votes == 0) | (votes == 1))


def two_tree_model(vote_a, vote_b):
    leaf = lambda v: {"counts": [0, 3] if v else [3, 0]}
    doc = {
        "format": "mindprint.forest", "version": 1,
        "hyperparams": {"n_trees": 2, "max_depth": 1, "min_samples_leaf": 1, "features_per_split": 1},
        "seed": 0, "n_features": 1,
        "trees": [leaf(vote_a), leaf(vote_b)],
    }
    return RandomForest.from_dict(doc)


def test_tie_goes_to_zero():
    model = two_tree_model(1, 0)
    assert model.predict_vote_share([[0.0]]).tolist() == [0.5]
    assert model.predict([[0.0]]).tolist() == [0]
    assert two_tree_model(1, 1).predict([[0.0]]).tolist() == [1]


def test_width_and_class_errors():
    X, y = blobs(40)
    model = train_forest(X, y, HyperParams(3), seed=0)
    with pytest.raises(ValueError):
        model.predict(X[:, :2])
    with pytest.raises(DataError):
        train_forest(X, np.zeros(40, dtype=int), HyperParams(3), seed=0)
    with pytest.raises(ValueError):
        HyperParams(0)


def test_json_roundtrip(tmp_path):
    X, y = blobs(80, seed=8)
    model = train_forest(X, y, HyperParams(10, max_depth=5), seed=3)
    model.save(tmp_path / "m.json", feature_names=list("abcd"), community="news")
    back = RandomForest.load(tmp_path / "m.json")
    assert np.array_equal(back.predict_vote_share(X), model.predict_vote_share(X))
    assert back.hyperparams == model.hyperparams


def test_singleton_grid():
    X, y = blobs(40)
    assert grid_search(X, y, [HyperParams(7)], seed=0) == HyperParams(7)
    with pytest.raises(ValueError):
        grid_search(X, y, [], seed=0)


def test_grid_picks_dominator():
    rng = np.random.default_rng(11)
    X = rng.uniform(-1, 1, size=(300, 2))
    y = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(int)
    grid = [HyperParams(5, max_depth=1), HyperParams(30, max_depth=None, features_per_split=2)]
    res = grid_search(X, y, grid, k=5, seed=3, return_scores=True)
    folds = cv_folds(y, 5, derive_seed(3, "folds"))
    direct = [cv_accuracy(X, y, hp, folds, 3)[0] for hp in grid]
    assert res.mean_scores == direct
    assert direct[1] > direct[0] + 0.2
    assert res.best == grid[1]
    assert grid_search(X, y, grid, k=5, seed=3) == res.best


def test_permutation_floor_on_strong_signal():
    X, y = blobs(200, shift=6.0, seed=1)
    rep = permutation_test(X[::2], y[::2], X[1::2], y[1::2], HyperParams(10), n_perm=100, seed=0)
    assert rep.C == 0
    assert rep.p_value == 1 / 101
    assert round(rep.p_value, 4) == 0.0099
    assert rep.n_perm == 100


def test_permutation_null_not_significant():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(400, 3))
    y = np.tile([0, 1], 200)
    rep = permutation_test(X[:100], y[:100], X[100:], y[100:], HyperParams(10), n_perm=50, seed=4)
    assert rep.p_value > 0.05
    assert rep.p_value == (rep.C + 1) / 51


def test_permutation_ties_count_against():
    X, y = blobs(40, shift=0.0, seed=5)
    rep = permutation_test(X[::2], y[::2], X[1::2], y[1::2], HyperParams(1, max_depth=1), n_perm=20, seed=0,
                           observed_accuracy=0.0)
    assert rep.C == 20 and rep.p_value == 1.0
    with pytest.raises(ValueError):
        permutation_test(X, y, X, y, HyperParams(1), n_perm=0)


def test_permutation_workers_agree():
    X, y = blobs(60, seed=9)
    a = permutation_test(X[::2], y[::2], X[1::2], y[1::2], HyperParams(5), n_perm=8, seed=1)
    b = permutation_test(X[::2], y[::2], X[1::2], y[1::2], HyperParams(5), n_perm=8, seed=1, n_jobs=2)
    assert a == b


def test_sklearn_estimator_api():
    from sklearn.base import clone

    X, y = blobs(60)
    model = RandomForest(n_trees=5, random_state=1)
    cloned = clone(model)
    assert cloned.get_params() == model.get_params()
    assert cloned.fit(X, y).score(X, y) > 0.9
