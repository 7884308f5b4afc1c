"""Activity positions, windowed embeddings, and exclusion windows.

For a user's comments in one community, the temporal position of a
comment min-max scales its timestamp between the user's first comment
there and their first comment in the target community. The cumulative
position is the number of earlier comments divided by the total. Both
are computed over pre-engagement comments (timestamp <= tau).
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateUserError
from .lexicon import UserEmbedding, mean_rows
from .stats import mann_kendall

SECONDS_PER_DAY = 86_400
DAYS_PER_MONTH = 30.44
EXCLUSION_MONTHS = (6, 12, 18, 24)


def temporal_position(ts, user_first_ts, tau):
    """Min-max scaled timestamp in [0, 1]; 1 at tau."""
    if tau <= user_first_ts:
        raise DegenerateUserError(
            f"first engagement {tau} does not follow first activity {user_first_ts}"
        )
    ts = np.asarray(ts, dtype=float)
    if np.any(ts > tau):
        raise ValueError("temporal positions are defined only for comments at or before tau")
    if np.any(ts < user_first_ts):
        raise ValueError("comment precedes the user's first activity")
    out = (ts - user_first_ts) / (tau - user_first_ts)
    return float(out) if out.ndim == 0 else out


def cumulative_position(ordinal_before, total):
    """Share of the user's comments made strictly before this one, in [0, 1)."""
    if total < 1:
        raise ValueError("total comment count must be >= 1")
    ordinal_before = np.asarray(ordinal_before)
    if np.any(ordinal_before < 0) or np.any(ordinal_before >= total):
        raise ValueError("ordinal must lie in [0, total)")
    out = ordinal_before / total
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class WindowSpec:
    """Windows ``[lo, hi)`` partitioning [0, 1]; the last one is closed."""

    kind: str = "temporal"
    bounds: tuple = ((0.0, 0.2), (0.2, 0.4), (0.4, 0.6), (0.6, 0.8), (0.8, 1.0))

    def __post_init__(self):
        if self.kind not in ("temporal", "cumulative"):
            raise ValueError(f"unknown window kind {self.kind!r}")
        b = [tuple(map(float, w)) for w in self.bounds]
        if not b or b[0][0] != 0.0 or b[-1][1] != 1.0:
            raise ValueError("windows must start at 0 and end at 1")
        for (lo, hi), (nlo, _) in zip(b, b[1:] + [(1.0, 1.0)]):
            if not lo < hi or hi != nlo:
                raise ValueError("windows must be contiguous and non-empty")
        object.__setattr__(self, "bounds", tuple(b))

    @property
    def prefix(self):
        return "T" if self.kind == "temporal" else "N"

    def tags(self):
        return [f"{self.prefix}-w{i + 1}" for i in range(len(self.bounds))]

    def assign(self, positions):
        """Window index of each position."""
        positions = np.asarray(positions, dtype=float)
        if np.any(positions < 0) or np.any(positions > 1):
            raise ValueError("positions must lie in [0, 1]")
        inner = np.array([hi for _, hi in self.bounds[:-1]])
        return np.searchsorted(inner, positions, side="right")


def pre_engagement(timestamps, tau):
    return np.asarray(timestamps) <= tau


def positions(timestamps, spec, tau, user_first_ts=None):
    """Positions of pre-engagement comments, which must be sorted by time."""
    ts = np.asarray(timestamps)
    if spec.kind == "temporal":
        first = ts.min() if user_first_ts is None else user_first_ts
        return temporal_position(ts, first, tau)
    return cumulative_position(np.arange(len(ts)), len(ts))


def window_embeddings(timestamps, features, spec, tau, author="", community="", user_first_ts=None):
    """Mean feature vector per window over the user's pre-engagement comments.

    ``timestamps`` and ``features`` cover the user's comments in one
    community; comments after tau are ignored. Returns a list of
    ``(tag, UserEmbedding or None)``; None marks an empty window.
    Raises DegenerateUserError for temporal windows when tau equals the
    first activity timestamp.
    """
    ts = np.asarray(timestamps)
    feats = np.asarray(features, dtype=float)
    keep = ts <= tau
    ts, feats = ts[keep], feats[keep]
    order = np.argsort(ts, kind="stable")
    ts, feats = ts[order], feats[order]
    tags = spec.tags()
    if ts.size == 0:
        return [(tag, None) for tag in tags]
    if user_first_ts is None:
        user_first_ts = ts.min()
    pos = positions(ts, spec, tau, user_first_ts)
    win = spec.assign(pos)
    out = []
    for w, tag in enumerate(tags):
        rows = feats[win == w]
        if rows.shape[0] == 0:
            out.append((tag, None))
        else:
            out.append((tag, UserEmbedding(author, community, tag, mean_rows(rows), rows.shape[0])))
    return out


def exclusion_cutoff(tau, months):
    return tau - months * DAYS_PER_MONTH * SECONDS_PER_DAY


def exclusion_embeddings(timestamps, features, months, tau, author="", community=""):
    """Embedding over comments strictly earlier than ``months`` before tau."""
    if months <= 0:
        raise ValueError("exclusion window must be positive")
    ts = np.asarray(timestamps)
    keep = ts < exclusion_cutoff(tau, months)
    if not keep.any():
        return None
    rows = np.asarray(features, dtype=float)[keep]
    return UserEmbedding(author, community, f"excl-{months}m", mean_rows(rows), rows.shape[0])


def period_halves(n):
    """Split ``n`` time-ordered comments at the median index; the middle one goes first."""
    first = (n + 1) // 2
    return slice(0, first), slice(first, n)


def trend_over_windows(accuracies):
    """Mann-Kendall test on an ordered accuracy curve."""
    acc = np.asarray(accuracies, dtype=float)
    if acc.size < 4:
        raise DataError(f"trend test needs at least 4 windows, got {acc.size}")
    return mann_kendall(acc)
