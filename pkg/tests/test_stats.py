import itertools

import numpy as np
import pytest
from scipy.stats import kendalltau, mannwhitneyu

from mindprint.stats import accuracy, mann_kendall, mann_whitney_u

from oracles import ranksum_exhaustive_p


def test_accuracy_examples():
    assert accuracy([1, 0, 1], [1, 0, 1]) == 1.0
    assert accuracy([1, 0], [0, 1]) == 0.0
    assert accuracy([1, 1, 0, 0], [1, 1, 0, 1]) == 0.75
    with pytest.raises(ValueError):
        accuracy([1], [1, 0])
    with pytest.raises(ValueError):
        accuracy([], [])


def test_mwu_separated_five_five():
    res = mann_whitney_u([1, 2, 3, 4, 5], [6, 7, 8, 9, 10])
    assert res.statistic == 0
    assert res.p_value == 2 / 252
    p, n = ranksum_exhaustive_p([1, 2, 3, 4, 5], [6, 7, 8, 9, 10])
    assert n == 252 and p == res.p_value


@pytest.mark.parametrize("seed", range(6))
def test_mwu_exact_matches_enumeration_with_ties(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 6, 5).astype(float)
    b = rng.integers(0, 6, 5).astype(float)
    p, _ = ranksum_exhaustive_p(a, b)
    assert mann_whitney_u(a, b).p_value == pytest.approx(p, abs=1e-12)


def test_mwu_same_multiset_and_identical():
    a = [0.8, 0.81, 0.9, 0.7]
    assert mann_whitney_u(a, a[::-1]).p_value == 1.0
    assert mann_whitney_u([1, 1], [1, 1, 1]).p_value == 1.0
    with pytest.raises(ValueError):
        mann_whitney_u([], [1])


def test_mwu_approximation_matches_scipy():
    rng = np.random.default_rng(3)
    a = np.round(rng.normal(size=40), 1)
    b = np.round(rng.normal(0.4, size=35), 1)
    ours = mann_whitney_u(a, b)
    ref = mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True)
    assert ours.statistic == ref.statistic
    assert ours.p_value == pytest.approx(ref.pvalue, rel=1e-9)


def test_mwu_monotone_transform_invariance():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=12), rng.normal(size=15)
    assert mann_whitney_u(a, b).p_value == mann_whitney_u(np.exp(a), np.exp(b)).p_value


def test_mann_kendall_monotone_six():
    res = mann_kendall([1, 2, 3, 4, 5, 6])
    assert res.statistic == 15
    rev = mann_kendall([6, 5, 4, 3, 2, 1])
    assert rev.statistic == -15 and rev.p_value == res.p_value


def test_mann_kendall_pair_count():
    rng = np.random.default_rng(0)
    x = rng.integers(0, 5, 9)
    s = sum(np.sign(x[j] - x[i]) for i, j in itertools.combinations(range(9), 2))
    assert mann_kendall(x).statistic == s


def test_mann_kendall_ties_shrink_variance():
    assert mann_kendall([1, 2, 2, 3, 4]).variance < mann_kendall([1, 2, 3, 4, 5]).variance


def test_mann_kendall_constant_and_short():
    res = mann_kendall([0.5] * 5)
    assert res.statistic == 0 and res.p_value == 1.0
    with pytest.raises(ValueError):
        mann_kendall([1, 2, 3])


def test_mann_kendall_against_kendall_tau_b():
    # S relates to tau-b of (time, x); with a tie-free series tau = S / (n(n-1)/2)
    x = [0.3, 0.1, 0.5, 0.4, 0.9, 0.7, 0.8]
    n = len(x)
    tau, _ = kendalltau(range(n), x)
    assert mann_kendall(x).statistic == pytest.approx(tau * n * (n - 1) / 2, abs=1e-9)


def test_mann_kendall_monotone_transform():
    x = np.array([0.2, 0.5, 0.1, 0.9, 0.4, 0.6])
    assert mann_kendall(x).p_value == mann_kendall(x**3 + 2).p_value
