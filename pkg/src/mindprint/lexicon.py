"""Dictionary-based psycholinguistic featurization.

A comment becomes a vector of category percentages: for each category,
the share of the comment's tokens that hit the category, times 100. Hits
come from exact word entries or wildcard-prefix entries (``hungr*``).

ASCII comments, the overwhelming majority in practice, are handled by a
compiled byte-level kernel that tokenizes and walks a trie in one pass.
Other comments go through the regular-expression tokenizer. Both paths
produce identical output; the test-suite enforces that.
"""

import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources

import numba
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import DataError

logger = logging.getLogger(__name__)

URL_RE = re.compile(r"(?:https?://|www\.)\S+")
TOKEN_RE = re.compile(r"[^\W\d_]+(?:'[^\W\d_]+)*")


class LexiconParseError(DataError):
    def __init__(self, path, lineno, message):
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


@dataclass(eq=False)
class Lexicon:
    """Ordered categories plus exact and prefix entries.

    ``exact`` and ``prefix`` map a lowercase word (prefix without its
    trailing ``*``) to a frozenset of category indices.
    """

    categories: list
    exact: dict = field(default_factory=dict)
    prefix: dict = field(default_factory=dict)

    def __post_init__(self):
        self.categories = list(self.categories)
        if not self.categories:
            raise ValueError("a lexicon needs at least one category")
        if len(set(self.categories)) != len(self.categories):
            raise ValueError("duplicate category names")
        d = len(self.categories)
        for table in (self.exact, self.prefix):
            for word, cats in table.items():
                if any(not 0 <= k < d for k in cats):
                    raise ValueError(f"entry {word!r} references an unknown category")
        self._cache = {}
        self._tables = None

    @property
    def n_categories(self):
        return len(self.categories)

    def __eq__(self, other):
        if not isinstance(other, Lexicon):
            return NotImplemented
        return (
            self.categories == other.categories
            and self.exact == other.exact
            and self.prefix == other.prefix
        )

    def __len__(self):
        return len(self.exact) + len(self.prefix)

    def lookup(self, token):
        """Category indices hit by one (already lowercased) token."""
        hit = self._cache.get(token)
        if hit is None:
            cats = set(self.exact.get(token, ()))
            prefix = self.prefix
            for end in range(1, len(token) + 1):
                p = prefix.get(token[:end])
                if p:
                    cats.update(p)
            hit = tuple(sorted(cats))
            if len(self._cache) > 1_000_000:
                self._cache.clear()
            self._cache[token] = hit
        return hit

    def trie_tables(self):
        if self._tables is None:
            self._tables = _build_trie(self)
        return self._tables


def load_lexicon(path):
    """Parse a ``.dic``-style dictionary file.

    The header sits between two ``%`` lines and maps integer ids to
    category names (``3 cogproc``); category order follows the header.
    Body lines are ``word<TAB>id[,id...]`` (whitespace-separated ids are
    also accepted). A trailing ``*`` makes the word a prefix entry.
    Repeated words take the union of their categories.
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()

    i = 0
    while i < len(lines) and not lines[i].strip():
        i += 1
    if i >= len(lines) or lines[i].strip() != "%":
        raise LexiconParseError(path, i + 1, "expected '%' opening the category header")
    i += 1
    id_to_index = {}
    categories = []
    while i < len(lines) and lines[i].strip() != "%":
        line = lines[i].strip()
        if line:
            parts = line.split(None, 1)
            if len(parts) != 2 or not parts[0].isdigit():
                raise LexiconParseError(path, i + 1, f"bad category line {line!r}")
            cid, name = int(parts[0]), parts[1].strip()
            if cid in id_to_index:
                raise LexiconParseError(path, i + 1, f"duplicate category id {cid}")
            if name in categories:
                raise LexiconParseError(path, i + 1, f"duplicate category name {name!r}")
            id_to_index[cid] = len(categories)
            categories.append(name)
        i += 1
    if i >= len(lines):
        raise LexiconParseError(path, i, "unterminated category header")
    i += 1

    exact, prefix = {}, {}
    for lineno in range(i + 1, len(lines) + 1):
        line = lines[lineno - 1].rstrip("\n")
        if not line.strip():
            continue
        if "\t" in line:
            word, rest = line.split("\t", 1)
        else:
            parts = line.split(None, 1)
            if len(parts) < 2:
                raise LexiconParseError(path, lineno, f"entry without categories: {line!r}")
            word, rest = parts
        word = word.strip().lower()
        ids = [tok for tok in re.split(r"[,\s]+", rest.strip()) if tok]
        if not word or not ids:
            raise LexiconParseError(path, lineno, f"bad entry {line!r}")
        cats = set()
        for tok in ids:
            if not tok.isdigit() or int(tok) not in id_to_index:
                raise LexiconParseError(path, lineno, f"unknown category id {tok!r}")
            cats.add(id_to_index[int(tok)])
        table = exact
        if word.endswith("*"):
            word = word.rstrip("*")
            table = prefix
            if not word:
                raise LexiconParseError(path, lineno, "bare '*' entry")
        table[word] = frozenset(table.get(word, frozenset()) | cats)
    return Lexicon(categories, exact, prefix)


def demo_lexicon_path():
    return resources.files("mindprint") / "data" / "demo.dic"


def load_demo_lexicon():
    with resources.as_file(demo_lexicon_path()) as p:
        return load_lexicon(p)


def tokenize(text):
    """Lowercased word tokens with internal apostrophes; URLs and digits removed."""
    text = URL_RE.sub(" ", text.lower())
    if not text.isascii():
        # \w also admits numeric characters such as "¼"; they separate tokens
        text = "".join(" " if ch.isalnum() and not ch.isalpha() else ch for ch in text)
    return TOKEN_RE.findall(text)


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    token_count: int


def featurize_comment(lex, text):
    values, counts = featurize_batch(lex, [text])
    return FeatureVector(values[0], int(counts[0]))


# -- compiled path ---------------------------------------------------------


def _csr(lists):
    ptr = np.zeros(len(lists) + 1, dtype=np.int64)
    for i, cats in enumerate(lists):
        ptr[i + 1] = ptr[i] + len(cats)
    flat = np.fromiter(
        (k for cats in lists for k in sorted(cats)), dtype=np.int32, count=int(ptr[-1])
    )
    return ptr, flat


def _build_trie(lex):
    children = [{}]
    exact_at = [()]
    prefix_at = [()]

    def insert(word):
        node = 0
        for b in word.encode("utf-8"):
            nxt = children[node].get(b)
            if nxt is None:
                nxt = len(children)
                children[node][b] = nxt
                children.append({})
                exact_at.append(())
                prefix_at.append(())
            node = nxt
        return node

    for word, cats in lex.exact.items():
        exact_at[insert(word)] = tuple(cats)
    for word, cats in lex.prefix.items():
        prefix_at[insert(word)] = tuple(cats)

    alphabet = sorted({b for ch in children for b in ch})
    byte_map = np.full(256, -1, dtype=np.int32)
    for j, b in enumerate(alphabet):
        byte_map[b] = j
    n_nodes = len(children)
    child = np.full((n_nodes, max(len(alphabet), 1)), -1, dtype=np.int32)
    for node, ch in enumerate(children):
        for b, nxt in ch.items():
            child[node, byte_map[b]] = nxt
    exact_ptr, exact_cat = _csr(exact_at)
    prefix_ptr, prefix_cat = _csr(prefix_at)
    return byte_map, child, exact_ptr, exact_cat, prefix_ptr, prefix_cat


@numba.njit(inline="always")
def _lower(c):
    if 65 <= c <= 90:
        return c + 32
    return c


@numba.njit(inline="always")
def _is_alpha(c):
    return 97 <= c <= 122


@numba.njit(inline="always")
def _is_space(c):
    # ASCII code points for which str.isspace() is true
    return c == 32 or 9 <= c <= 13 or 28 <= c <= 31


@numba.njit(inline="always")
def _url_end(buf, i, end):
    """Index just past a URL starting at ``i``, or -1 if none starts there."""
    c = _lower(buf[i])
    j = -1
    if c == 104:  # h
        if (
            i + 7 <= end
            and _lower(buf[i + 1]) == 116
            and _lower(buf[i + 2]) == 116
            and _lower(buf[i + 3]) == 112
        ):
            k = i + 4
            if _lower(buf[k]) == 115:
                k += 1
            if k + 3 <= end and buf[k] == 58 and buf[k + 1] == 47 and buf[k + 2] == 47:
                j = k + 3
    elif c == 119:  # w
        if (
            i + 4 <= end
            and _lower(buf[i + 1]) == 119
            and _lower(buf[i + 2]) == 119
            and buf[i + 3] == 46
        ):
            j = i + 4
    if j < 0 or j >= end or _is_space(buf[j]):
        return -1
    while j < end and not _is_space(buf[j]):
        j += 1
    return j


@numba.njit(inline="always")
def _hit(cats, ptr, node, counts, row, stamp, serial):
    for q in range(ptr[node], ptr[node + 1]):
        k = cats[q]
        if stamp[k] != serial:
            stamp[k] = serial
            counts[row, k] += 1


@numba.njit(nogil=True, cache=True)
def _featurize_ascii(
    buf, offsets, byte_map, child, exact_ptr, exact_cat, prefix_ptr, prefix_cat,
    counts, ntok,
):
    n_docs = offsets.shape[0] - 1
    d = counts.shape[1]
    stamp = np.zeros(d, dtype=np.int64)
    serial = 0
    apos = byte_map[39]
    for row in range(n_docs):
        i = offsets[row]
        end = offsets[row + 1]
        in_tok = False
        pending = False
        node = 0
        while i <= end:
            if i < end:
                c = _lower(buf[i])
                u = _url_end(buf, i, end) if (c == 104 or c == 119) else -1
            else:
                u = -1
                c = 0
            if u < 0 and _is_alpha(c):
                if not in_tok:
                    in_tok = True
                    serial += 1
                    node = 0
                elif pending:
                    pending = False
                    if node >= 0:
                        node = child[node, apos] if apos >= 0 else -1
                        if node >= 0:
                            _hit(prefix_cat, prefix_ptr, node, counts, row, stamp, serial)
                if node >= 0:
                    m = byte_map[c]
                    node = child[node, m] if m >= 0 else -1
                    if node >= 0:
                        _hit(prefix_cat, prefix_ptr, node, counts, row, stamp, serial)
                i += 1
                continue
            if u < 0 and c == 39 and in_tok and not pending:
                pending = True
                i += 1
                continue
            if in_tok:
                ntok[row] += 1
                if node >= 0:
                    _hit(exact_cat, exact_ptr, node, counts, row, stamp, serial)
                in_tok = False
                pending = False
            if u >= 0:
                i = u
            else:
                i += 1


def _featurize_python(lex, texts, counts, ntok, rows):
    for row, text in zip(rows, texts):
        tokens = tokenize(text)
        ntok[row] = len(tokens)
        for tok in tokens:
            for k in lex.lookup(tok):
                counts[row, k] += 1


def _featurize_chunk(lex, texts):
    n = len(texts)
    counts = np.zeros((n, lex.n_categories), dtype=np.int64)
    ntok = np.zeros(n, dtype=np.int64)
    ascii_rows = [i for i, t in enumerate(texts) if t.isascii()]
    if len(ascii_rows) < n:
        other = [i for i, t in enumerate(texts) if not t.isascii()]
        _featurize_python(lex, [texts[i] for i in other], counts, ntok, other)
    if ascii_rows:
        if len(ascii_rows) == n:
            sub = texts
        else:
            sub = [texts[i] for i in ascii_rows]
        offsets = np.zeros(len(sub) + 1, dtype=np.int64)
        np.cumsum([len(t) for t in sub], out=offsets[1:])
        buf = np.frombuffer("".join(sub).encode("ascii"), dtype=np.uint8)
        sub_counts = np.zeros((len(sub), lex.n_categories), dtype=np.int64)
        sub_ntok = np.zeros(len(sub), dtype=np.int64)
        _featurize_ascii(buf, offsets, *lex.trie_tables(), sub_counts, sub_ntok)
        if len(ascii_rows) == n:
            counts, ntok = sub_counts, sub_ntok
        else:
            counts[ascii_rows] = sub_counts
            ntok[ascii_rows] = sub_ntok
    return counts, ntok


def featurize_counts(lex, texts, n_jobs=1, chunk_size=20_000):
    """Raw per-category hit counts and token counts for each text."""
    texts = list(texts)
    if not texts:
        return np.zeros((0, lex.n_categories), dtype=np.int64), np.zeros(0, dtype=np.int64)
    chunks = [texts[i:i + chunk_size] for i in range(0, len(texts), chunk_size)]
    if n_jobs == 1 or len(chunks) == 1:
        parts = [_featurize_chunk(lex, ch) for ch in chunks]
    else:
        lex.trie_tables()
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(lambda ch: _featurize_chunk(lex, ch), chunks))
    return np.vstack([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def featurize_batch(lex, texts, n_jobs=1, chunk_size=20_000):
    """Category percentages (rows = texts) and token counts."""
    counts, ntok = featurize_counts(lex, texts, n_jobs=n_jobs, chunk_size=chunk_size)
    values = np.zeros(counts.shape, dtype=np.float64)
    nz = ntok > 0
    values[nz] = 100.0 * counts[nz] / ntok[nz, None]
    return values, ntok


class LexiconVectorizer(TransformerMixin, BaseEstimator):
    """Transformer mapping raw texts to category-percentage vectors.

    Parameters
    ----------
    dictionary : str or path, optional
        Dictionary file to load; the bundled demo dictionary when omitted.
    lexicon : Lexicon, optional
        An already loaded lexicon; takes precedence over ``dictionary``.
    n_jobs : int
        Worker threads for featurization. The compiled kernel releases the
        GIL, so threads scale across cores.
    """

    def __init__(self, dictionary=None, lexicon=None, n_jobs=1, chunk_size=20_000):
        self.dictionary = dictionary
        self.lexicon = lexicon
        self.n_jobs = n_jobs
        self.chunk_size = chunk_size

    def fit(self, X=None, y=None):
        if self.lexicon is not None:
            self.lexicon_ = self.lexicon
        elif self.dictionary is not None:
            self.lexicon_ = load_lexicon(self.dictionary)
        else:
            self.lexicon_ = load_demo_lexicon()
        self.n_features_out_ = self.lexicon_.n_categories
        return self

    def transform(self, X):
        check_is_fitted(self, "lexicon_")
        if isinstance(X, str):
            raise TypeError("expected an iterable of texts, got a single string")
        values, ntok = featurize_batch(
            self.lexicon_, X, n_jobs=self.n_jobs, chunk_size=self.chunk_size
        )
        self.token_counts_ = ntok
        return values

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "lexicon_")
        return np.asarray(self.lexicon_.categories, dtype=object)


# -- aggregation -------------------------------------------------------------


@dataclass
class UserEmbedding:
    author: str
    community: str
    scope_tag: str
    vector: np.ndarray
    n_comments: int


def aggregate_embeddings(vectors, author="", community="", scope_tag="all"):
    """Componentwise mean of feature vectors.

    Uses exactly rounded summation, so the result does not depend on the
    order of ``vectors``.
    """
    rows = [v.values if isinstance(v, FeatureVector) else np.asarray(v, dtype=float) for v in vectors]
    if not rows:
        raise DataError(f"no comments in scope {scope_tag!r} for {author!r} in {community!r}")
    mat = np.vstack(rows)
    n = mat.shape[0]
    mean = np.array([math.fsum(col) / n for col in mat.T])
    return UserEmbedding(author, community, scope_tag, mean, n)


def mean_rows(mat):
    """Order-insensitive column means of a 2-D array (exactly rounded sums)."""
    n = mat.shape[0]
    return np.array([math.fsum(col) / n for col in mat.T])


# -- embedding store ---------------------------------------------------------


def write_embeddings(embeddings, path, categories):
    """Write embeddings as CSV plus a ``.categories.json`` sidecar."""
    import csv
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = len(categories)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["author", "community", "scope_tag", "n_comments"] + [f"f_{k}" for k in range(1, d + 1)]
        )
        for e in embeddings:
            if len(e.vector) != d:
                raise ValueError("embedding width does not match the category list")
            writer.writerow(
                [e.author, e.community, e.scope_tag, e.n_comments] + [repr(float(x)) for x in e.vector]
            )
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump({"categories": list(categories)}, fh, indent=1)
        fh.write("\n")


def sidecar_path(path):
    from pathlib import Path

    path = Path(path)
    return path.with_name(path.stem + ".categories.json")


def read_embeddings(path):
    """Return (list of UserEmbedding, categories)."""
    import csv

    with open(sidecar_path(path), encoding="utf-8") as fh:
        categories = json.load(fh)["categories"]
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) != 4 + len(categories):
            raise DataError(f"{path}: header width does not match {len(categories)} categories")
        for row in reader:
            out.append(
                UserEmbedding(
                    row[0], row[1], row[2], np.array([float(x) for x in row[4:]]), int(row[3])
                )
            )
    return out, categories
