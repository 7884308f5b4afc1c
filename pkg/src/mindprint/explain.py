"""Feature attribution and cross-community comparison of importance profiles.

Attributions are exact Shapley values of the forest's vote share under
the path-dependent tree expectation (missing features are integrated out
with the training-row covers recorded in each node). They are computed
with the polynomial-time TreeSHAP recursion, compiled with numba.
"""

import json
from dataclasses import dataclass, field

import numba
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import DataError


# -- TreeSHAP ----------------------------------------------------------------


@numba.njit(cache=True)
def _extend(pz, po, pi, pw, off, depth, zero_fraction, one_fraction, feature):
    pz[off + depth] = zero_fraction
    po[off + depth] = one_fraction
    pi[off + depth] = feature
    pw[off + depth] = 1.0 if depth == 0 else 0.0
    for i in range(depth - 1, -1, -1):
        pw[off + i + 1] += one_fraction * pw[off + i] * (i + 1) / (depth + 1)
        pw[off + i] = zero_fraction * pw[off + i] * (depth - i) / (depth + 1)


@numba.njit(cache=True)
def _unwind(pz, po, pi, pw, off, depth, index):
    one_fraction = po[off + index]
    zero_fraction = pz[off + index]
    next_one = pw[off + depth]
    for i in range(depth - 1, -1, -1):
        if one_fraction != 0.0:
            tmp = pw[off + i]
            pw[off + i] = next_one * (depth + 1) / ((i + 1) * one_fraction)
            next_one = tmp - pw[off + i] * zero_fraction * (depth - i) / (depth + 1)
        else:
            pw[off + i] = pw[off + i] * (depth + 1) / (zero_fraction * (depth - i))
    for i in range(index, depth):
        pz[off + i] = pz[off + i + 1]
        po[off + i] = po[off + i + 1]
        pi[off + i] = pi[off + i + 1]


@numba.njit(cache=True)
def _unwound_sum(pz, po, pw, off, depth, index):
    one_fraction = po[off + index]
    zero_fraction = pz[off + index]
    next_one = pw[off + depth]
    total = 0.0
    if one_fraction != 0.0:
        for i in range(depth - 1, -1, -1):
            tmp = next_one / ((i + 1) * one_fraction)
            total += tmp
            next_one = pw[off + i] - tmp * zero_fraction * (depth - i)
    else:
        for i in range(depth - 1, -1, -1):
            total += pw[off + i] / (zero_fraction * (depth - i))
    return total * (depth + 1)


@numba.njit(cache=True)
def _tree_shap_one(x, feature, threshold, left, right, cover, value, phi, pz, po, pi, pw, stack_i, stack_f):
    """Depth-first TreeSHAP walk of one tree with an explicit stack.

    A frame holds (node, depth, parent_off) and (zero, one, feature) of the
    edge leading to it. Each node's path lives at ``parent_off + depth`` and
    is only overwritten after its whole subtree has been visited.
    """
    top = 0
    stack_i[0, 0] = 0
    stack_i[0, 1] = 0
    stack_i[0, 2] = 0
    stack_i[0, 3] = -1
    stack_f[0, 0] = 1.0
    stack_f[0, 1] = 1.0
    top = 1
    while top > 0:
        top -= 1
        node = stack_i[top, 0]
        depth = stack_i[top, 1]
        parent_off = stack_i[top, 2]
        parent_feature = stack_i[top, 3]
        parent_zero = stack_f[top, 0]
        parent_one = stack_f[top, 1]

        off = parent_off + depth
        for i in range(depth):
            pz[off + i] = pz[parent_off + i]
            po[off + i] = po[parent_off + i]
            pi[off + i] = pi[parent_off + i]
            pw[off + i] = pw[parent_off + i]
        _extend(pz, po, pi, pw, off, depth, parent_zero, parent_one, parent_feature)

        f = feature[node]
        if f < 0:
            for i in range(1, depth + 1):
                w = _unwound_sum(pz, po, pw, off, depth, i)
                phi[pi[off + i]] += w * (po[off + i] - pz[off + i]) * value[node]
            continue

        if x[f] <= threshold[node]:
            hot, cold = left[node], right[node]
        else:
            hot, cold = right[node], left[node]
        w = cover[node]
        incoming_zero = 1.0
        incoming_one = 1.0
        k = 0
        while k <= depth:
            if pi[off + k] == f:
                break
            k += 1
        if k != depth + 1:
            incoming_zero = pz[off + k]
            incoming_one = po[off + k]
            _unwind(pz, po, pi, pw, off, depth, k)
            depth -= 1

        # cold first so the hot subtree is visited first
        stack_i[top, 0] = cold
        stack_i[top, 1] = depth + 1
        stack_i[top, 2] = off
        stack_i[top, 3] = f
        stack_f[top, 0] = cover[cold] / w * incoming_zero
        stack_f[top, 1] = 0.0
        top += 1
        stack_i[top, 0] = hot
        stack_i[top, 1] = depth + 1
        stack_i[top, 2] = off
        stack_i[top, 3] = f
        stack_f[top, 0] = cover[hot] / w * incoming_zero
        stack_f[top, 1] = incoming_one
        top += 1


@numba.njit(nogil=True, cache=True)
def _shap_many(X, feature, threshold, left, right, cover, value, tree_ptr, max_depth, out):
    """Accumulate per-tree SHAP values for every row of X into ``out``."""
    size = (max_depth + 2) * (max_depth + 3) // 2 + max_depth + 2
    pz = np.zeros(size)
    po = np.zeros(size)
    pi = np.zeros(size, dtype=np.int64)
    pw = np.zeros(size)
    stack_i = np.zeros((2 * max_depth + 4, 4), dtype=np.int64)
    stack_f = np.zeros((2 * max_depth + 4, 2))
    n_trees = tree_ptr.shape[0] - 1
    for r in range(X.shape[0]):
        for t in range(n_trees):
            a = tree_ptr[t]
            b = tree_ptr[t + 1]
            _tree_shap_one(X[r], feature[a:b], threshold[a:b], left[a:b], right[a:b],
                           cover[a:b], value[a:b], out[r], pz, po, pi, pw, stack_i, stack_f)


def _pack(model):
    trees = model.trees_
    sizes = [t.n_nodes for t in trees]
    ptr = np.zeros(len(trees) + 1, dtype=np.int64)
    np.cumsum(sizes, out=ptr[1:])
    cat = lambda attr: np.concatenate([getattr(t, attr) for t in trees])
    feature = cat("feature").astype(np.int64)
    threshold = cat("threshold").astype(np.float64)
    left = cat("left").astype(np.int64)
    right = cat("right").astype(np.int64)
    cover = np.concatenate([t.cover() for t in trees])
    value = np.concatenate([t.vote() for t in trees])
    max_depth = max(t.depth() for t in trees)
    return feature, threshold, left, right, cover, value, ptr, max_depth


def expected_value(model):
    """Cover-weighted mean vote share: the attribution base value."""
    total = 0.0
    for t in model.trees_:
        cov = t.cover()
        leaves = t.is_leaf
        total += float(np.sum(t.vote()[leaves] * cov[leaves]) / cov[0])
    return total / len(model.trees_)


def tree_shap(model, X):
    """Exact SHAP values of the vote share for each row of ``X``.

    Accepts one instance (1-D) or a matrix; returns the same rank. Rows
    sum to ``model.predict_vote_share(X) - expected_value(model)``.
    """
    check_is_fitted(model, "trees_")
    single = np.ndim(X) == 1
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.n_features_in_:
        raise ValueError(f"expected {model.n_features_in_} features, got {X.shape[1]}")
    # thresholds were learned on float32 features; route identically
    X = X.astype(np.float32).astype(np.float64)
    feature, threshold, left, right, cover, value, ptr, max_depth = _pack(model)
    out = np.zeros_like(X)
    _shap_many(X, feature, threshold, left, right, cover, value, ptr, max_depth, out)
    out /= len(model.trees_)
    return out[0] if single else out


@dataclass
class ImportanceVector:
    community: str
    values: np.ndarray
    n_instances: int
    meta: dict = field(default_factory=dict)


def importance_vector(model, positives, sample_size=700, seed=0, community=""):
    """Mean absolute SHAP value per feature over sampled positive instances.

    When fewer than ``sample_size`` positives exist, all of them are used.
    """
    if np.shape(positives)[0] == 0:
        raise DataError(f"{community!r}: no positive instances to explain")
    positives = check_array(positives, dtype=np.float64)
    n = positives.shape[0]
    if n > sample_size:
        rng = np.random.default_rng(seed)
        positives = positives[np.sort(rng.choice(n, size=sample_size, replace=False))]
    phi = tree_shap(model, positives)
    return ImportanceVector(community, np.abs(phi).mean(axis=0), positives.shape[0])


# -- comparing profiles -------------------------------------------------------


def cosine_similarity_matrix(vectors):
    """Pairwise cosine similarity of importance vectors (unit diagonal)."""
    mat = np.vstack([np.asarray(v.values, dtype=float) for v in vectors])
    norms = np.linalg.norm(mat, axis=1)
    for v, nrm in zip(vectors, norms):
        if nrm == 0:
            raise DataError(f"importance vector of {v.community!r} is all zeros")
    unit = mat / norms[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim = (sim + sim.T) / 2.0
    np.fill_diagonal(sim, 1.0)
    return sim


@dataclass
class Dendrogram:
    """Agglomeration record.

    ``merges[i] = (a, b, height, size)`` joins clusters ``a`` and ``b``
    into cluster ``n + i``; leaves are clusters ``0 .. n-1``.
    """

    labels: list
    merges: list

    @property
    def leaf_order(self):
        n = len(self.labels)
        members = {i: [i] for i in range(n)}
        for i, (a, b, _, _) in enumerate(self.merges):
            members[n + i] = members.pop(a) + members.pop(b)
        (root,) = members.values()
        return [self.labels[i] for i in root]

    def to_newick(self, precision=6):
        """Ultrametric Newick string; node depth is half the merge height."""
        n = len(self.labels)
        height = {i: 0.0 for i in range(n)}
        text = {i: _newick_label(self.labels[i]) for i in range(n)}
        for i, (a, b, h, _) in enumerate(self.merges):
            node = n + i
            height[node] = h / 2.0
            parts = []
            for child in (a, b):
                parts.append(f"{text.pop(child)}:{height[node] - height[child]:.{precision}f}")
            text[node] = "(" + ",".join(parts) + ")"
        (root,) = text.values()
        return root + ";"

    def to_json(self):
        return json.dumps(
            {
                "labels": list(self.labels),
                "merges": [
                    {"a": int(a), "b": int(b), "height": float(h), "size": int(s)}
                    for a, b, h, s in self.merges
                ],
                "leaf_order": self.leaf_order,
            },
            indent=1,
        )


def _newick_label(label):
    s = str(label)
    if any(c in s for c in " ():;,[]'"):
        return "'" + s.replace("'", "''") + "'"
    return s


def upgma(distance, labels):
    """Average-linkage agglomerative clustering of a distance matrix.

    At every step the closest pair of clusters merges (ties: smallest
    cluster ids first); the new cluster's distance to any other is the
    size-weighted mean of its members' distances.
    """
    d = np.array(distance, dtype=float)
    n = d.shape[0]
    if n < 2:
        raise DataError("UPGMA needs at least two leaves")
    if d.shape != (n, n) or len(labels) != n:
        raise ValueError("distance must be square and match the labels")
    if not np.allclose(d, d.T) or np.any(np.diag(d) != 0):
        raise ValueError("distance must be symmetric with a zero diagonal")

    active = list(range(n))
    size = {i: 1 for i in range(n)}
    dist = {(i, j): float(d[i, j]) for i in range(n) for j in range(i + 1, n)}
    merges = []
    next_id = n
    while len(active) > 1:
        (a, b), h = min(dist.items(), key=lambda kv: (kv[1], kv[0]))
        merges.append((a, b, h, size[a] + size[b]))
        active.remove(a)
        active.remove(b)
        for c in active:
            dac = dist.pop((min(a, c), max(a, c)))
            dbc = dist.pop((min(b, c), max(b, c)))
            dist[(c, next_id)] = (size[a] * dac + size[b] * dbc) / (size[a] + size[b])
        del dist[(a, b)]
        size[next_id] = size.pop(a) + size.pop(b)
        active.append(next_id)
        next_id += 1
    return Dendrogram(list(labels), merges)


class SignedPCA(TransformerMixin, BaseEstimator):
    """Principal components of the sample covariance with a fixed sign.

    Each component is flipped so that its largest-magnitude loading is
    positive, which makes coordinates reproducible across runs.
    """

    def __init__(self, n_components=2):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n, d = X.shape
        k = self.n_components
        if n < 2:
            raise DataError("PCA needs at least two points")
        if k > min(n - 1, d):
            raise ValueError(f"n_components={k} exceeds min(n-1, D)={min(n - 1, d)}")
        self.mean_ = X.mean(axis=0)
        cov = np.cov(X - self.mean_, rowvar=False, ddof=1).reshape(d, d)
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1][:k]
        comps = evecs[:, order].T
        for row in comps:
            if row[np.argmax(np.abs(row))] < 0:
                row *= -1.0
        self.components_ = comps
        self.explained_variance_ = evals[order]
        self.n_features_in_ = d
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        return (X - self.mean_) @ self.components_.T


def pca_project(vectors, k=2):
    return SignedPCA(k).fit_transform(np.asarray(vectors, dtype=float))
