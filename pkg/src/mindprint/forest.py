"""Random-forest classification, grid search, and label-permutation tests.

Tree growth (CART with Gini impurity over a random feature subset per
split) is delegated to scikit-learn's tree builder. The forest owns every
source of randomness: each tree's bootstrap sample and its feature-subset
seed come from one ``SeedSequence`` rooted at ``random_state``. Trees are
then copied into plain arrays that this package predicts with, explains,
and serializes.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from joblib import Parallel, delayed
from sklearn import config_context
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import KFold, StratifiedKFold
from sklearn.tree import DecisionTreeClassifier
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import DataError
from .seeding import derive_seed
from .stats import accuracy

FORMAT_TAG = "mindprint.forest"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class HyperParams:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_leaf: int = 1
    features_per_split: str | int = "sqrt"

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1 or None")
        if self.features_per_split != "sqrt" and int(self.features_per_split) < 1:
            raise ValueError("features_per_split must be 'sqrt' or a positive integer")

    def n_split_features(self, n_features):
        if self.features_per_split == "sqrt":
            return max(1, int(math.sqrt(n_features)))
        return min(int(self.features_per_split), n_features)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in ("n_trees", "max_depth", "min_samples_leaf", "features_per_split") if k in d})


DEFAULT_GRID = tuple(
    HyperParams(n, depth, leaf)
    for n in (100, 300)
    for depth in (None, 10, 20)
    for leaf in (1, 5)
)


@dataclass
class Tree:
    """Binary tree in array form; ``x[feature] <= threshold`` goes left.

    Leaves have ``feature == -1``. ``counts[node]`` holds the number of
    training rows of class 0 and class 1 that reached ``node``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray

    @property
    def n_nodes(self):
        return len(self.feature)

    @property
    def is_leaf(self):
        return self.feature < 0

    def vote(self):
        """Per-node majority class (ties go to 0) as floats."""
        return (self.counts[:, 1] > self.counts[:, 0]).astype(np.float64)

    def cover(self):
        return self.counts.sum(axis=1)

    def depth(self):
        depths = np.zeros(self.n_nodes, dtype=int)
        for node in range(self.n_nodes):
            if self.feature[node] >= 0:
                depths[self.left[node]] = depths[node] + 1
                depths[self.right[node]] = depths[node] + 1
        return int(depths.max())

    def apply(self, X):
        X = np.asarray(X, dtype=np.float32)
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            cur = node[active]
            go_left = X[active, self.feature[cur]] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
            active = active[self.feature[node[active]] >= 0]
        return node

    def to_nested(self, node=0):
        if self.feature[node] < 0:
            return {"counts": [int(c) for c in self.counts[node]]}
        return {
            "feature": int(self.feature[node]),
            "threshold": float(self.threshold[node]),
            "counts": [int(c) for c in self.counts[node]],
            "left": self.to_nested(self.left[node]),
            "right": self.to_nested(self.right[node]),
        }

    @classmethod
    def from_nested(cls, doc):
        feature, threshold, left, right, counts = [], [], [], [], []

        def visit(n):
            idx = len(feature)
            feature.append(n.get("feature", -1))
            threshold.append(n.get("threshold", -2.0))
            left.append(-1)
            right.append(-1)
            counts.append(n["counts"])
            if "left" in n:
                left[idx] = visit(n["left"])
                right[idx] = visit(n["right"])
            return idx

        visit(doc)
        return cls(
            np.array(feature, dtype=np.int64),
            np.array(threshold, dtype=np.float64),
            np.array(left, dtype=np.int64),
            np.array(right, dtype=np.int64),
            np.array(counts, dtype=np.float64).reshape(-1, 2),
        )


def _grow_tree(X32, y, hp, seed_seq, bootstrap):
    rng = np.random.default_rng(seed_seq)
    n = X32.shape[0]
    idx = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
    tree_seed = int(rng.integers(0, 2**31 - 1))
    Xb, yb = X32[idx], y[idx]
    builder = DecisionTreeClassifier(
        criterion="gini",
        max_depth=hp.max_depth,
        min_samples_leaf=hp.min_samples_leaf,
        max_features=hp.n_split_features(X32.shape[1]),
        random_state=tree_seed,
    )
    # the builder's own validation dominates the cost of small trees
    with config_context(skip_parameter_validation=True, assume_finite=True):
        builder.fit(Xb, yb)
    t = builder.tree_
    feature = np.where(t.children_left < 0, -1, t.feature).astype(np.int64)
    counts = np.zeros((t.node_count, 2))
    # value holds per-node class fractions; rows are unweighted so the
    # weighted node size is the row count
    sizes = t.weighted_n_node_samples[:, None]
    counts[:, builder.classes_.astype(np.int64)] = np.rint(t.value[:, 0, :] * sizes)
    return Tree(
        feature,
        np.where(feature < 0, -2.0, t.threshold).astype(np.float64),
        t.children_left.astype(np.int64),
        t.children_right.astype(np.int64),
        counts,
    )


class RandomForest(ClassifierMixin, BaseEstimator):
    """Bagged Gini trees with majority-vote prediction.

    Parameters
    ----------
    n_trees : int
    max_depth : int or None
        ``None`` grows trees until leaves are pure or hit ``min_samples_leaf``.
    min_samples_leaf : int
    features_per_split : "sqrt" or int
        Size of the random feature subset examined at each split.
    bootstrap : bool
        Draw a with-replacement sample of the training rows per tree.
    random_state : int
    n_jobs : int
        Trees are grown in threads; results do not depend on this value.

    The explained and thresholded model output is the vote share: the
    fraction of trees whose leaf majority is class 1. A 50/50 vote
    predicts class 0.
    """

    def __init__(
        self,
        n_trees=100,
        max_depth=None,
        min_samples_leaf=1,
        features_per_split="sqrt",
        bootstrap=True,
        random_state=0,
        n_jobs=1,
    ):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.features_per_split = features_per_split
        self.bootstrap = bootstrap
        self.random_state = random_state
        self.n_jobs = n_jobs

    @property
    def hyperparams(self):
        return HyperParams(self.n_trees, self.max_depth, self.min_samples_leaf, self.features_per_split)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        if len(np.unique(y)) < 2:
            raise DataError("training data holds a single class")
        hp = self.hyperparams
        X32 = np.ascontiguousarray(X, dtype=np.float32)
        children = np.random.SeedSequence(int(self.random_state)).spawn(hp.n_trees)
        if self.n_jobs == 1:
            trees = [_grow_tree(X32, y, hp, s, self.bootstrap) for s in children]
        else:
            trees = Parallel(n_jobs=self.n_jobs, prefer="threads")(
                delayed(_grow_tree)(X32, y, hp, s, self.bootstrap) for s in children
            )
        self.trees_ = trees
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        return self

    def _check_width(self, X):
        check_is_fitted(self, "trees_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X

    def tree_votes(self, X):
        X = self._check_width(X)
        return np.vstack([t.vote()[t.apply(X)] for t in self.trees_])

    def predict_vote_share(self, X):
        return self.tree_votes(X).mean(axis=0)

    def predict(self, X):
        votes = self.tree_votes(X)
        positive = votes.sum(axis=0)
        return (2 * positive > votes.shape[0]).astype(np.int64)

    def to_dict(self, feature_names=None, **extra):
        check_is_fitted(self, "trees_")
        return {
            "format": FORMAT_TAG,
            "version": FORMAT_VERSION,
            "hyperparams": self.hyperparams.to_dict(),
            "bootstrap": self.bootstrap,
            "seed": int(self.random_state),
            "n_features": int(self.n_features_in_),
            "feature_names": list(feature_names) if feature_names is not None else None,
            "trees": [t.to_nested() for t in self.trees_],
            **extra,
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != FORMAT_TAG:
            raise DataError("not a serialized forest")
        hp = HyperParams.from_dict(doc["hyperparams"])
        model = cls(
            hp.n_trees, hp.max_depth, hp.min_samples_leaf, hp.features_per_split,
            doc.get("bootstrap", True), doc["seed"],
        )
        model.trees_ = [Tree.from_nested(t) for t in doc["trees"]]
        model.classes_ = np.array([0, 1])
        model.n_features_in_ = doc["n_features"]
        return model

    def save(self, path, feature_names=None, **extra):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(feature_names, **extra), fh, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def train_forest(X, y, hp, seed, n_jobs=1):
    return RandomForest(
        hp.n_trees, hp.max_depth, hp.min_samples_leaf, hp.features_per_split,
        random_state=seed, n_jobs=n_jobs,
    ).fit(X, y)


def predict(model, X):
    return model.predict(X)


def cv_folds(y, k, seed):
    y = np.asarray(y)
    _, counts = np.unique(y, return_counts=True)
    if len(counts) == 2 and counts.min() >= k:
        splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    else:
        splitter = KFold(n_splits=k, shuffle=True, random_state=seed)
    return list(splitter.split(np.zeros(len(y)), y))


def cv_accuracy(X, y, hp, folds, seed, n_jobs=1):
    """Mean accuracy over folds; folds whose training part is one class are skipped."""
    scores = []
    for i, (tr, te) in enumerate(folds):
        if len(np.unique(y[tr])) < 2 or len(te) == 0:
            scores.append(float("nan"))
            continue
        model = train_forest(X[tr], y[tr], hp, derive_seed(seed, "cv", i), n_jobs=n_jobs)
        scores.append(accuracy(model.predict(X[te]), y[te]))
    valid = [s for s in scores if not math.isnan(s)]
    return (sum(valid) / len(valid) if valid else float("nan")), scores


@dataclass
class GridSearchResult:
    best: HyperParams
    mean_scores: list = field(default_factory=list)


def grid_search(X, y, grid, k=5, seed=0, n_jobs=1, return_scores=False):
    """Grid point with the highest mean k-fold CV accuracy (first wins ties)."""
    grid = list(grid)
    if not grid:
        raise ValueError("empty hyperparameter grid")
    if len(grid) == 1:
        result = GridSearchResult(grid[0], [float("nan")])
        return result if return_scores else result.best
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    folds = cv_folds(y, k, derive_seed(seed, "folds"))
    means = [cv_accuracy(X, y, hp, folds, seed, n_jobs)[0] for hp in grid]
    if all(math.isnan(m) for m in means):
        raise DataError("every cross-validation fold was invalid")
    best_i = max(range(len(grid)), key=lambda i: (-math.inf if math.isnan(means[i]) else means[i], -i))
    result = GridSearchResult(grid[best_i], means)
    return result if return_scores else result.best


@dataclass
class PermutationReport:
    observed_accuracy: float
    permuted_accuracies: list
    C: int
    p_value: float

    @property
    def n_perm(self):
        return len(self.permuted_accuracies)


def _permuted_accuracy(X_train, y_train, X_test, y_test, hp, seed, i):
    rng = np.random.default_rng(derive_seed(seed, "shuffle", i))
    model = train_forest(X_train, rng.permutation(y_train), hp, derive_seed(seed, "replica", i))
    return accuracy(model.predict(X_test), y_test)


def permutation_test(
    X_train, y_train, X_test, y_test, hp, n_perm=100, seed=0,
    observed_accuracy=None, n_jobs=1,
):
    """Retrain on shuffled training labels and compare test accuracies.

    ``C`` counts replicas whose accuracy is at least the observed one; the
    p-value is ``(C + 1) / (n_perm + 1)``.
    """
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    X_train = np.asarray(X_train, dtype=float)
    X_test = np.asarray(X_test, dtype=float)
    y_train = np.asarray(y_train, dtype=int)
    y_test = np.asarray(y_test, dtype=int)
    if observed_accuracy is None:
        model = train_forest(X_train, y_train, hp, seed)
        observed_accuracy = accuracy(model.predict(X_test), y_test)
    if n_jobs == 1:
        perm = [_permuted_accuracy(X_train, y_train, X_test, y_test, hp, seed, i) for i in range(n_perm)]
    else:
        perm = Parallel(n_jobs=n_jobs)(
            delayed(_permuted_accuracy)(X_train, y_train, X_test, y_test, hp, seed, i)
            for i in range(n_perm)
        )
    c = sum(1 for a in perm if a >= observed_accuracy)
    return PermutationReport(float(observed_accuracy), perm, c, (c + 1) / (n_perm + 1))
