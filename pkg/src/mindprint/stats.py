"""Rank and trend tests used to compare accuracy distributions and curves."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

EXACT_MWU_MAX_PRODUCT = 400


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    n_a: int
    n_b: int
    method: str
    z: float = float("nan")
    variance: float = float("nan")

    __test__ = False  # not a pytest class


def _two_sided_normal_p(z):
    return min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))


def accuracy(predicted, actual):
    predicted = np.asarray(predicted)
    actual = np.asarray(actual)
    if predicted.shape != actual.shape:
        raise ValueError(f"length mismatch: {predicted.shape} vs {actual.shape}")
    if predicted.size == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    return float(np.mean(predicted == actual))


def _rank_sum_distribution(doubled_ranks, n_a):
    """Count size-``n_a`` subsets of the pooled ranks by rank sum.

    Ranks are passed doubled so midranks stay integral. Entry ``s`` of the
    returned array is the number of subsets whose doubled rank sum is ``s``.
    """
    total = int(sum(doubled_ranks))
    dp = np.zeros((n_a + 1, total + 1), dtype=np.int64)
    dp[0, 0] = 1
    for r in doubled_ranks:
        dp[1:, r:] += dp[:-1, : total + 1 - r].copy()
    return dp[n_a]


def mann_whitney_u(a, b, exact=None):
    """Two-sided Mann-Whitney U test.

    The statistic is U for sample ``a`` (midranks for ties). The exact
    permutation distribution of the midrank sum is used when
    ``len(a) * len(b) <= 400``; otherwise a tie-corrected normal
    approximation with continuity correction.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    n_a, n_b = a.size, b.size
    if n_a == 0 or n_b == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    r_a = float(ranks[:n_a].sum())
    u = r_a - n_a * (n_a + 1) / 2.0
    if np.all(pooled == pooled[0]):
        return TestResult(u, 1.0, n_a, n_b, "mann_whitney_u")

    if exact is None:
        exact = n_a * n_b <= EXACT_MWU_MAX_PRODUCT
    if exact:
        doubled = [int(round(2 * r)) for r in ranks]
        dist = _rank_sum_distribution(doubled, n_a)
        obs = int(round(2 * r_a))
        lower = int(dist[: obs + 1].sum())
        upper = int(dist[obs:].sum())
        p = min(1.0, 2.0 * min(lower, upper) / int(dist.sum()))
        return TestResult(u, p, n_a, n_b, "mann_whitney_u")

    n = n_a + n_b
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(counts.astype(float) ** 3 - counts))
    var = n_a * n_b / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    mu = n_a * n_b / 2.0
    if var <= 0:
        return TestResult(u, 1.0, n_a, n_b, "mann_whitney_u", variance=var)
    z = max(abs(u - mu) - 0.5, 0.0) / math.sqrt(var)
    return TestResult(u, _two_sided_normal_p(z), n_a, n_b, "mann_whitney_u", z=z, variance=var)


def mann_kendall(series):
    """Two-sided Mann-Kendall trend test.

    S is the sum of ``sign(x_j - x_i)`` over ``i < j``; its variance is
    tie-corrected and the normal approximation uses a continuity
    correction of one.
    """
    x = np.asarray(series, dtype=float).ravel()
    n = x.size
    if n < 4:
        raise ValueError(f"Mann-Kendall needs at least 4 points, got {n}")
    diff = np.sign(x[None, :] - x[:, None])
    s = float(np.triu(diff, k=1).sum())
    _, counts = np.unique(x, return_counts=True)
    tie_term = float(np.sum(counts * (counts - 1.0) * (2.0 * counts + 5.0)))
    var = (n * (n - 1.0) * (2.0 * n + 5.0) - tie_term) / 18.0
    if var <= 0 or s == 0:
        return TestResult(s, 1.0, n, 0, "mann_kendall", z=0.0, variance=var)
    z = (s - 1.0) / math.sqrt(var) if s > 0 else (s + 1.0) / math.sqrt(var)
    return TestResult(s, _two_sided_normal_p(z), n, 0, "mann_kendall", z=z, variance=var)
