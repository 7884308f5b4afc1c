import numpy as np
import pytest

from mindprint.errors import DataError, DegenerateUserError
from mindprint.trajectory import (
    DAYS_PER_MONTH,
    WindowSpec,
    cumulative_position,
    exclusion_cutoff,
    exclusion_embeddings,
    period_halves,
    temporal_position,
    trend_over_windows,
    window_embeddings,
)


def test_temporal_examples():
    assert temporal_position(100, 100, 300) == 0.0
    assert temporal_position(300, 100, 300) == 1.0
    assert temporal_position(150, 100, 300) == 0.25


def test_temporal_errors():
    with pytest.raises(DegenerateUserError):
        temporal_position(100, 100, 100)
    with pytest.raises(ValueError):
        temporal_position(301, 100, 300)


def test_temporal_affine_invariance():
    ts = np.array([100.0, 130.0, 220.0, 300.0])
    base = temporal_position(ts, 100, 300)
    moved = temporal_position(ts * 7 + 5000, 100 * 7 + 5000, 300 * 7 + 5000)
    assert np.allclose(base, moved, rtol=0, atol=1e-15)


def test_cumulative_examples():
    assert cumulative_position(0, 4) == 0.0
    assert cumulative_position(2, 4) == 0.5
    assert cumulative_position(6, 7) == 6 / 7
    with pytest.raises(ValueError):
        cumulative_position(0, 0)
    with pytest.raises(ValueError):
        cumulative_position(4, 4)


def test_window_spec_validation():
    assert WindowSpec().tags() == ["T-w1", "T-w2", "T-w3", "T-w4", "T-w5"]
    assert WindowSpec("cumulative").tags()[0] == "N-w1"
    for bad in [((0.0, 0.5), (0.6, 1.0)), ((0.1, 1.0),), ((0.0, 0.5), (0.5, 0.9))]:
        with pytest.raises(ValueError):
            WindowSpec(bounds=bad)
    with pytest.raises(ValueError):
        WindowSpec(kind="spatial")


def test_assign_half_open():
    spec = WindowSpec()
    assert spec.assign([0.0, 0.2, 0.3999, 0.4, 0.8, 1.0]).tolist() == [0, 1, 1, 2, 4, 4]


def test_all_in_first_window():
    ts = [0, 1, 2, 100]
    feats = np.arange(8, dtype=float).reshape(4, 2)
    out = window_embeddings(ts[:3], feats[:3], WindowSpec(), tau=100, user_first_ts=0)
    assert [e is None for _, e in out] == [False, True, True, True, True]
    assert out[0][1].n_comments == 3
    assert out[0][1].scope_tag == "T-w1"


def test_windows_partition_and_reconstruct():
    rng = np.random.default_rng(5)
    ts = np.sort(rng.integers(0, 1000, 50))
    feats = rng.uniform(0, 30, size=(50, 3))
    tau = 700
    for kind in ("temporal", "cumulative"):
        out = window_embeddings(ts, feats, WindowSpec(kind), tau)
        pre = ts <= tau
        got = [e for _, e in out if e is not None]
        assert sum(e.n_comments for e in got) == pre.sum()
        weighted = sum(e.vector * e.n_comments for e in got) / pre.sum()
        assert np.allclose(weighted, feats[pre].mean(axis=0), rtol=0, atol=1e-9)


def test_comments_after_tau_ignored():
    out = window_embeddings([0, 10, 20], [[1.0], [2.0], [99.0]], WindowSpec(), tau=10)
    assert out[-1][1].vector.tolist() == [2.0]
    assert sum(e.n_comments for _, e in out if e) == 2


def test_exclusion_strict_cut():
    tau = 10_000_000
    cut = exclusion_cutoff(tau, 6)
    assert cut == tau - 6 * DAYS_PER_MONTH * 86_400
    ts = np.array([cut - 10, cut, cut + 1, tau])
    feats = np.array([[1.0], [2.0], [3.0], [4.0]])
    emb = exclusion_embeddings(ts, feats, 6, tau)
    assert emb.n_comments == 1 and emb.vector.tolist() == [1.0]
    assert emb.scope_tag == "excl-6m"
    assert exclusion_embeddings(ts[1:], feats[1:], 6, tau) is None
    with pytest.raises(ValueError):
        exclusion_embeddings(ts, feats, 0, tau)


def test_period_halves():
    assert period_halves(4) == (slice(0, 2), slice(2, 4))
    assert period_halves(5) == (slice(0, 3), slice(3, 5))


def test_trend_needs_four():
    with pytest.raises(DataError):
        trend_over_windows([0.5, 0.6, 0.7])
    res = trend_over_windows([0.5, 0.6, 0.7, 0.8, 0.9])
    assert res.statistic == 10
