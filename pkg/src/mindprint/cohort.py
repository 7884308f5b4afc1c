"""Balanced, labeled, normalized datasets for each study design."""

import csv
import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .corpus import FilterSpec, eligible_users
from .errors import DataError

MIN_ROWS_PER_CLASS = 5


@dataclass(frozen=True)
class ActivityBucket:
    """Interval of target-community comment counts."""

    lower: float
    upper: float
    lower_inclusive: bool = False
    upper_inclusive: bool = True

    def __contains__(self, count):
        lo_ok = count >= self.lower if self.lower_inclusive else count > self.lower
        hi_ok = count <= self.upper if self.upper_inclusive else count < self.upper
        return lo_ok and hi_ok

    @property
    def label(self):
        lo = "[" if self.lower_inclusive else "("
        hi = "]" if self.upper_inclusive else ")"
        upper = "inf" if math.isinf(self.upper) else f"{self.upper:g}"
        return f"{lo}{self.lower:g},{upper}{hi}"

    @property
    def slug(self):
        upper = "inf" if math.isinf(self.upper) else f"{self.upper:g}"
        return f"{self.lower:g}-{upper}"

    @classmethod
    def parse(cls, text):
        """Parse interval notation such as ``(0,1]`` or ``[100,inf)``."""
        m = re.fullmatch(r"\s*([\[(])\s*([^,\s]+)\s*,\s*([^\]\s)]+)\s*([\])])\s*", text)
        if not m:
            raise ValueError(f"cannot parse activity bucket {text!r}")
        lo, hi = float(m.group(2)), float(m.group(3).replace("+", ""))
        if hi < lo:
            raise ValueError(f"empty activity bucket {text!r}")
        return cls(lo, hi, m.group(1) == "[", m.group(4) == "]" and not math.isinf(hi))


CANONICAL_BUCKETS = (
    ActivityBucket(0, 1, False, True),
    ActivityBucket(1, 10, False, False),
    ActivityBucket(10, 100, True, False),
    ActivityBucket(100, math.inf, True, False),
)
ANY_ACTIVITY = ActivityBucket(1, math.inf, True, False)


def bucket_slug(bucket):
    return "all" if bucket is None else bucket.slug


def label_pools(index, community, target_community, bucket=None, spec=None):
    """Split eligible authors of ``community`` into positive and negative pools.

    Positives have a target-community comment count inside ``bucket``
    (default: at least one comment). Negatives have no target-community
    comment anywhere in the indexed corpus.
    """
    eligible = eligible_users(index, community, spec or FilterSpec())
    bucket = ANY_ACTIVITY if bucket is None else bucket
    positives, negatives = set(), set()
    for author in eligible:
        n_target = index.count(author, target_community)
        if n_target == 0:
            negatives.add(author)
        elif n_target in bucket:
            positives.add(author)
    if not positives:
        raise DataError(
            f"no cohort members in {community!r} for bucket {bucket.label}"
        )
    return positives, negatives


@dataclass
class LabeledDataset:
    authors: list
    X: np.ndarray
    y: np.ndarray
    community: str
    resample_seed: int
    scope_tag: str = "all"
    bucket: str = "all"
    split: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=int)
        if len(self.authors) != len(self.y) or self.X.shape[0] != len(self.y):
            raise ValueError("authors, X and y must have the same number of rows")

    def __len__(self):
        return len(self.y)

    def subset(self, mask, **changes):
        mask = np.asarray(mask)
        return replace(
            self,
            authors=[a for a, keep in zip(self.authors, mask) if keep],
            X=self.X[mask],
            y=self.y[mask],
            split=None if self.split is None else self.split[mask],
            meta=dict(self.meta),
            **changes,
        )

    def class_counts(self):
        return int(np.sum(self.y == 0)), int(np.sum(self.y == 1))

    def manifest(self):
        n0, n1 = self.class_counts()
        return {
            "community": self.community,
            "bucket": self.bucket,
            "scope_tag": self.scope_tag,
            "seed": self.resample_seed,
            "n_rows": len(self),
            "n_positive": n1,
            "n_negative": n0,
            **self.meta,
        }

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        d = self.X.shape[1]
        split = self.split if self.split is not None else [""] * len(self)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["author", "label", "split"] + [f"f_{k}" for k in range(1, d + 1)])
            for author, label, part, row in zip(self.authors, self.y, split, self.X):
                writer.writerow([author, int(label), part] + [repr(float(x)) for x in row])
        with open(path.with_suffix(".json"), "w", encoding="utf-8") as fh:
            json.dump(self.manifest(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_csv(cls, path):
        path = Path(path)
        with open(path.with_suffix(".json"), encoding="utf-8") as fh:
            manifest = json.load(fh)
        authors, labels, split, rows = [], [], [], []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                authors.append(row[0])
                labels.append(int(row[1]))
                split.append(row[2])
                rows.append([float(x) for x in row[3:]])
        core = {"community", "bucket", "scope_tag", "seed", "n_rows", "n_positive", "n_negative"}
        return cls(
            authors,
            np.array(rows, dtype=float).reshape(len(rows), -1),
            np.array(labels, dtype=int),
            manifest["community"],
            manifest["seed"],
            scope_tag=manifest["scope_tag"],
            bucket=manifest["bucket"],
            split=np.array(split) if any(split) else None,
            meta={k: v for k, v in manifest.items() if k not in core},
        )


def build_balanced_dataset(
    embeddings, positives, negatives, seed, community="", scope_tag="all", bucket="all"
):
    """All positives plus an equal-size uniform sample of negatives.

    ``embeddings`` maps author to vector. Authors without an embedding are
    dropped from their pool and counted in ``meta``.
    """
    pos = sorted(a for a in positives if a in embeddings)
    neg_pool = sorted(a for a in negatives if a in embeddings)
    if set(pos) & set(neg_pool):
        raise DataError("positive and negative pools overlap")
    if not pos:
        raise DataError(f"no cohort members with embeddings in {community!r} ({scope_tag})")
    if len(neg_pool) < len(pos):
        raise DataError(
            f"{community!r} ({scope_tag}): {len(pos)} positives but only "
            f"{len(neg_pool)} negatives; short by {len(pos) - len(neg_pool)}"
        )
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(neg_pool), size=len(pos), replace=False)
    neg = [neg_pool[i] for i in np.sort(picked)]
    authors = pos + neg
    X = np.vstack([np.asarray(embeddings[a], dtype=float) for a in authors])
    y = np.array([1] * len(pos) + [0] * len(neg))
    meta = {
        "dropped_positives": len(positives) - len(pos),
        "negative_pool": len(neg_pool),
    }
    return LabeledDataset(authors, X, y, community, seed, scope_tag, bucket, meta=meta)


class Normalizer(TransformerMixin, BaseEstimator):
    """Per-feature z-score; zero-variance features pass through centered."""

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return (X - self.mean_) / self.scale_


def stratified_split(y, seed, test_fraction=0.2):
    """Boolean test mask holding ``round(test_fraction * n_c)`` rows of each class."""
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    test = np.zeros(len(y), dtype=bool)
    for label in np.unique(y):
        idx = np.flatnonzero(y == label)
        n_test = int(round(test_fraction * len(idx)))
        chosen = rng.permutation(idx)[:n_test]
        test[chosen] = True
    return test


def split_and_normalize(dataset, seed, test_fraction=0.2):
    """Stratified train/test split with a normalizer fit on train rows only.

    Returns ``(train, test, normalizer)``; both parts carry normalized
    features and the ``split`` column is filled in.
    """
    n0, n1 = dataset.class_counts()
    if min(n0, n1) < MIN_ROWS_PER_CLASS:
        raise DataError(
            f"{dataset.community!r} ({dataset.scope_tag}): too small to split "
            f"({n1} positive, {n0} negative rows)"
        )
    test_mask = stratified_split(dataset.y, seed, test_fraction)
    labelled = replace(dataset, split=np.where(test_mask, "test", "train"), meta=dict(dataset.meta))
    norm = Normalizer().fit(dataset.X[~test_mask])
    train = labelled.subset(~test_mask)
    test = labelled.subset(test_mask)
    train.X = norm.transform(train.X)
    test.X = norm.transform(test.X)
    return train, test, norm


def pre_post_datasets(pre_embeddings, post_embeddings, negatives, seed, community=""):
    """Balanced pre- and post-engagement datasets over the same positive authors.

    ``negatives`` maps negative authors to their embeddings. Positive
    authors missing either scope are dropped from both and counted.
    """
    both = set(pre_embeddings) & set(post_embeddings)
    if not both:
        raise DataError(f"{community!r}: no author has both pre and post activity")
    dropped = len(set(pre_embeddings) | set(post_embeddings)) - len(both)
    seed_pre, seed_post = np.random.SeedSequence(seed).generate_state(2)
    out = []
    for tag, emb, s in (("pre", pre_embeddings, int(seed_pre)), ("post", post_embeddings, int(seed_post))):
        table = dict(negatives)
        table.update({a: emb[a] for a in both})
        ds = build_balanced_dataset(table, both, set(negatives), s, community, scope_tag=tag)
        ds.meta["dropped_missing_scope"] = dropped
        ds.resample_seed = seed
        out.append(ds)
    return tuple(out)
