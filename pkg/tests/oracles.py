"""Slow, obviously-correct reference implementations used only by tests."""

import itertools
import math

import numpy as np


def tree_conditional_value(tree, x, subset):
    """Path-dependent expectation of one tree's vote given features in ``subset``."""
    vote = tree.vote()
    cover = tree.cover()

    def walk(node):
        f = tree.feature[node]
        if f < 0:
            return vote[node]
        if f in subset:
            nxt = tree.left[node] if np.float32(x[f]) <= tree.threshold[node] else tree.right[node]
            return walk(nxt)
        l, r = tree.left[node], tree.right[node]
        return (cover[l] * walk(l) + cover[r] * walk(r)) / cover[node]

    return walk(0)


def brute_force_shap(model, x):
    """Exact Shapley values by enumerating every coalition (exponential in D)."""
    d = len(x)
    phi = np.zeros(d)
    feats = list(range(d))
    for tree in model.trees_:
        cache = {}

        def v(s):
            key = frozenset(s)
            if key not in cache:
                cache[key] = tree_conditional_value(tree, x, key)
            return cache[key]

        for i in feats:
            others = [j for j in feats if j != i]
            for k in range(len(others) + 1):
                weight = math.factorial(k) * math.factorial(d - k - 1) / math.factorial(d)
                for s in itertools.combinations(others, k):
                    phi[i] += weight * (v(set(s) | {i}) - v(set(s)))
    return phi / len(model.trees_)


def scan_tokens(text):
    """Character-by-character tokenizer: letters with internal apostrophes,
    URLs blanked first, everything lowercased."""
    text = text.lower()
    chars = list(text)
    i = 0
    while i < len(text):
        head = next((h for h in ("http://", "https://", "www.") if text.startswith(h, i)), None)
        j = i + len(head) if head else i
        if head and j < len(text) and not text[j].isspace():
            j = i
            while j < len(text) and not text[j].isspace():
                chars[j] = " "
                j += 1
            i = j
        else:
            i += 1
    s = "".join(chars)
    tokens, cur = [], ""
    for i, ch in enumerate(s):
        if ch.isalpha():
            cur += ch
        elif ch == "'" and cur and i + 1 < len(s) and s[i + 1].isalpha():
            cur += ch
        elif cur:
            tokens.append(cur)
            cur = ""
    if cur:
        tokens.append(cur)
    return tokens


def scan_featurize(lex, text):
    """Per-token scan over every dictionary entry; returns (percentages, n_tokens)."""
    tokens = scan_tokens(text)
    counts = np.zeros(lex.n_categories)
    for tok in tokens:
        hit = set(lex.exact.get(tok, ()))
        for p, cats in lex.prefix.items():
            if tok.startswith(p):
                hit |= cats
        for k in hit:
            counts[k] += 1
    if not tokens:
        return counts, 0
    return 100.0 * counts / len(tokens), len(tokens)


def ranksum_exhaustive_p(a, b):
    """Two-sided exact Mann-Whitney p by enumerating every assignment of
    pooled midranks to the first sample."""
    from scipy.stats import rankdata

    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    n_a = len(a)
    obs = ranks[:n_a].sum()
    sums = [ranks[list(c)].sum() for c in itertools.combinations(range(len(pooled)), n_a)]
    sums = np.array(sums)
    lower = np.sum(sums <= obs + 1e-9)
    upper = np.sum(sums >= obs - 1e-9)
    return min(1.0, 2 * min(lower, upper) / len(sums)), len(sums)
