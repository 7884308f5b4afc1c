"""Synthetic comment corpora with planted, known category rates.

Every comment is a bag of words. Each token is drawn independently: with
the planted probability of a category it is a dictionary word of that
category, with a per-user background probability it is any dictionary
word, and otherwise it is a filler word that matches no category. Users
are either cohort members (positives, who also comment in the target
community from their engagement time ``tau`` onward) or not (negatives).
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Comment, write_comments
from .errors import ConfigError
from .lexicon import load_demo_lexicon, load_lexicon, tokenize

DEFAULT_COMMUNITIES = ("news", "politics", "worldnews", "science", "gaming")
DEFAULT_TIME_RANGE = (1451606400, 1609459199)  # 2016-01-01 .. 2020-12-31 UTC
_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "gr", "pl", "st")
_NUCLEI = ("a", "e", "i", "o", "u", "ai", "ou")


def filler_vocab(lexicon, size=400):
    """Deterministic pseudo-words that no dictionary entry matches."""
    words = []
    for a in _ONSETS:
        for b in _NUCLEI:
            for c in _ONSETS:
                for d in _NUCLEI:
                    w = a + b + c + d + "x"
                    if not lexicon.lookup(w) and tokenize(w) == [w]:
                        words.append(w)
                    if len(words) == size:
                        return words
    return words


@dataclass
class SignalSpec:
    n_users_pos: int = 100
    n_users_neg: int = 100
    communities: list = field(default_factory=lambda: list(DEFAULT_COMMUNITIES))
    comments_per_user: tuple = (20, 40)
    tokens_per_comment: tuple = (10, 30)
    vocab: list | None = None
    planted_categories: dict = field(default_factory=dict)
    pre_post_shift: dict | None = None
    background_rate: float = 0.10
    background_jitter: float = 0.5
    target_community: str = "conspiracy"
    target_comments: tuple = (1, 150)
    tau_quantile: tuple = (0.3, 0.7)
    time_range: tuple = DEFAULT_TIME_RANGE
    n_bots: int = 2
    deleted_fraction: float = 0.02
    dictionary: str | None = None
    seed: int = 0

    def __post_init__(self):
        self.communities = list(self.communities)
        self.comments_per_user = tuple(self.comments_per_user)
        self.tokens_per_comment = tuple(self.tokens_per_comment)
        self.target_comments = tuple(self.target_comments)
        self.tau_quantile = tuple(self.tau_quantile)
        self.time_range = tuple(int(t) for t in self.time_range)
        self.planted_categories = {k: tuple(map(float, v)) for k, v in self.planted_categories.items()}
        if self.pre_post_shift is not None:
            self.pre_post_shift = {k: float(v) for k, v in self.pre_post_shift.items()}

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown signal spec fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["planted_categories"] = {k: list(v) for k, v in sorted(self.planted_categories.items())}
        for k in ("comments_per_user", "tokens_per_comment", "target_comments", "tau_quantile", "time_range"):
            d[k] = list(d[k])
        return d

    def validate(self, lexicon):
        def check_range(name, lo_min):
            lo, hi = getattr(self, name)
            if not lo_min <= lo <= hi:
                raise ConfigError(f"{name} must satisfy {lo_min} <= low <= high")

        if self.n_users_pos < 0 or self.n_users_neg < 0 or self.n_users_pos + self.n_users_neg == 0:
            raise ConfigError("need at least one user")
        if not self.communities:
            raise ConfigError("need at least one community")
        if self.target_community in self.communities:
            raise ConfigError("target community cannot also be a mainstream community")
        check_range("comments_per_user", 4)
        check_range("tokens_per_comment", 1)
        check_range("target_comments", 1)
        lo, hi = self.tau_quantile
        if not 0 < lo <= hi < 1:
            raise ConfigError("tau_quantile must lie inside (0, 1)")
        if not self.time_range[0] + 4 * self.comments_per_user[1] < self.time_range[1]:
            raise ConfigError("time range too short")
        if self.vocab is not None and len(self.vocab) == 0:
            raise ConfigError("empty filler vocabulary")
        for name, rates in self.planted_categories.items():
            if name not in lexicon.categories:
                raise ConfigError(f"planted category {name!r} is not in the dictionary")
            if len(rates) != 2 or not all(0 <= r <= 1 for r in rates):
                raise ConfigError(f"rates for {name!r} must be two numbers in [0, 1]")
        for name in self.pre_post_shift or {}:
            if name not in self.planted_categories:
                raise ConfigError(f"shifted category {name!r} must also be planted")
        if not 0 <= self.background_rate <= 1 or not 0 <= self.background_jitter < 1:
            raise ConfigError("background rate must lie in [0, 1] and jitter in [0, 1)")
        if not 0 <= self.deleted_fraction < 1:
            raise ConfigError("deleted_fraction must lie in [0, 1)")


class _Sampler:
    """Token sampler over planted categories, background words, and filler."""

    def __init__(self, spec, lexicon):
        self.lexicon = lexicon
        self.cats = sorted(spec.planted_categories)
        words = sorted(lexicon.exact)
        cat_index = {c: i for i, c in enumerate(lexicon.categories)}
        self.groups = []
        for c in self.cats:
            k = cat_index[c]
            group = [w for w in words if k in lexicon.exact[w]]
            if not group:
                raise ConfigError(f"category {c!r} has no exact dictionary words to plant")
            self.groups.append(group)
        self.groups.append(words)  # background
        vocab = spec.vocab if spec.vocab is not None else filler_vocab(lexicon)
        for w in vocab:
            if lexicon.lookup(w) or tokenize(w) != [w]:
                raise ConfigError(f"filler word {w!r} is not a plain non-dictionary token")
        self.groups.append(list(vocab))
        sizes = np.array([len(g) for g in self.groups])
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self.sizes = sizes
        self.words = np.array([w for g in self.groups for w in g], dtype=object)

        # per-category hit profile of each group, for expected rates
        d = lexicon.n_categories
        self.profile = np.zeros((len(self.groups), d))
        for g, group in enumerate(self.groups):
            for w in group:
                for k in lexicon.lookup(w):
                    self.profile[g, k] += 1.0 / len(group)

    def probs(self, planted, background):
        p = np.array(list(planted) + [background])
        if np.any(p < 0) or p.sum() > 1 + 1e-12:
            raise ConfigError("planted plus background rates exceed one")
        return np.append(p, max(0.0, 1.0 - p.sum()))

    def expected_rates(self, probs):
        return probs @ self.profile

    def draw(self, rng, probs_per_token):
        """Words for tokens whose group probabilities are the given rows."""
        u = rng.random(len(probs_per_token))
        cdf = np.cumsum(probs_per_token, axis=1)
        group = np.minimum((u[:, None] >= cdf).sum(axis=1), len(self.groups) - 1)
        within = (rng.random(len(u)) * self.sizes[group]).astype(np.int64)
        return self.words[self.offsets[group] + within]

    def filler(self, rng, n):
        return self.words[self.offsets[-1] + rng.integers(0, self.sizes[-1], size=n)]


def _loguniform_int(rng, lo, hi):
    return int(min(hi, max(lo, round(math.exp(rng.uniform(math.log(lo), math.log(hi + 0.5)))))))


def _spaced_times(rng, n, start, end):
    """``n`` strictly increasing integer timestamps at least 2 s apart."""
    raw = np.sort(rng.integers(start, end - 2 * n, size=n))
    return raw + 2 * np.arange(n)


def _bodies(words, ntok):
    out, pos = [], 0
    for k in ntok:
        w = words[pos : pos + k]
        pos += k
        out.append(" ".join(w).capitalize() + ".")
    return out


def _user_comments(spec, sampler, rng, author, community, positive, uid):
    n = int(rng.integers(spec.comments_per_user[0], spec.comments_per_user[1] + 1))
    ts = _spaced_times(rng, n, *spec.time_range)
    ntok = rng.integers(spec.tokens_per_comment[0], spec.tokens_per_comment[1] + 1, size=n)
    jitter = spec.background_jitter
    background = spec.background_rate * rng.uniform(1 - jitter, 1 + jitter)
    idx = 0 if positive else 1
    base = [spec.planted_categories[c][idx] for c in sampler.cats]
    pre = sampler.probs(base, background)
    post = pre
    tau = None
    if positive:
        q = rng.uniform(*spec.tau_quantile)
        k = min(max(int(round(q * n)), 2), n - 2)
        tau = int(ts[k - 1] + (ts[k] - ts[k - 1]) // 2)
        shift = spec.pre_post_shift or {}
        shifted = [min(1.0, max(0.0, r + shift.get(c, 0.0))) for c, r in zip(sampler.cats, base)]
        post = sampler.probs(shifted, background)
    after = ts > tau if positive else np.zeros(n, dtype=bool)
    rows = np.repeat(np.where(after[:, None], post, pre), ntok, axis=0)
    bodies = _bodies(sampler.draw(rng, rows), ntok)
    comments = [
        Comment(f"{uid}c{j:03d}", author, community, int(t), b) for j, (t, b) in enumerate(zip(ts, bodies))
    ]

    n_del = int(rng.binomial(n, spec.deleted_fraction))
    for j, t in enumerate(_spaced_times(rng, n_del, *spec.time_range) if n_del else []):
        marker = "[deleted]" if j % 2 == 0 else "[removed]"
        comments.append(Comment(f"{uid}d{j:03d}", author, community, int(t), marker))

    n_target = 0
    if positive:
        n_target = _loguniform_int(rng, *spec.target_comments)
        later = np.sort(rng.integers(tau + 1, spec.time_range[1] + 1, size=n_target - 1))
        bodies = _bodies(sampler.filler(rng, 8 * n_target), [8] * n_target)
        for j, (t, b) in enumerate(zip([tau] + later.tolist(), bodies)):
            comments.append(Comment(f"{uid}t{j:03d}", author, spec.target_community, int(t), b))

    record = {
        "author": author,
        "label": int(positive),
        "community": community,
        "tau": tau,
        "n_comments": n,
        "n_target": n_target,
        "background_rate": background,
        "rates_pre": sampler.expected_rates(pre).tolist(),
        "rates_post": sampler.expected_rates(post).tolist(),
    }
    return comments, record


def _user_plan(spec):
    """Deterministic (author, community, positive) list with opaque author names."""
    plan = []
    for community in spec.communities:
        plan += [(community, True)] * spec.n_users_pos
        plan += [(community, False)] * spec.n_users_neg
    perm = np.random.default_rng(np.random.SeedSequence([spec.seed, 1])).permutation(len(plan))
    return [(f"user{perm[i]:06d}", c, pos) for i, (c, pos) in enumerate(plan)]


def _generate_chunk(spec, lexicon, items):
    sampler = _Sampler(spec, lexicon)
    out = []
    for i, (author, community, positive) in items:
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2, i]))
        out.append(_user_comments(spec, sampler, rng, author, community, positive, f"u{i:06d}"))
    return out


def generate_corpus(spec, lexicon=None, n_jobs=1):
    """Return ``(comments, manifest)``; comments are sorted by time then id."""
    if lexicon is None:
        lexicon = load_lexicon(spec.dictionary) if spec.dictionary else load_demo_lexicon()
    spec.validate(lexicon)
    sampler = _Sampler(spec, lexicon)
    plan = list(enumerate(_user_plan(spec)))
    if n_jobs == 1:
        results = _generate_chunk(spec, lexicon, plan)
    else:
        from joblib import Parallel, delayed

        chunks = [plan[i::n_jobs] for i in range(n_jobs)]
        parts = Parallel(n_jobs=n_jobs)(delayed(_generate_chunk)(spec, lexicon, c) for c in chunks)
        results = [None] * len(plan)
        for chunk, part in zip(chunks, parts):
            for (i, _), res in zip(chunk, part):
                results[i] = res

    comments, users = [], []
    for c, rec in results:
        comments += c
        users.append(rec)

    bots = [f"synthbot{b}" for b in range(spec.n_bots)]
    bot_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 3]))
    for b, bot in enumerate(bots):
        for community in spec.communities + [spec.target_community]:
            n = spec.comments_per_user[1]
            bodies = _bodies(sampler.filler(bot_rng, 6 * n), [6] * n)
            for j, (t, body) in enumerate(zip(_spaced_times(bot_rng, n, *spec.time_range), bodies)):
                comments.append(Comment(f"b{b}{community}{j:03d}", bot, community, int(t), body))

    comments.sort(key=lambda c: (c.created_utc, c.id))
    manifest = {
        "spec": spec.to_dict(),
        "categories": list(lexicon.categories),
        "planted_order": sampler.cats,
        "bots": bots,
        "n_comments": len(comments),
        "users": sorted(users, key=lambda r: r["author"]),
    }
    return comments, manifest


def write_corpus(spec, out_dir, lexicon=None, n_jobs=1, compress=False):
    """Write ``corpus.ndjson[.zst]``, ``bots.txt`` and ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    comments, manifest = generate_corpus(spec, lexicon, n_jobs)
    corpus_path = out_dir / ("corpus.ndjson.zst" if compress else "corpus.ndjson")
    write_comments(comments, corpus_path)
    (out_dir / "bots.txt").write_text("".join(b + "\n" for b in manifest["bots"]), encoding="utf-8")
    manifest["corpus_file"] = corpus_path.name
    manifest["corpus_sha256"] = hashlib.sha256(corpus_path.read_bytes()).hexdigest()
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return corpus_path, manifest
