"""Comment ingestion, filtering, and the per-user activity index.

Input dumps follow the Pushshift comment schema: one JSON object per line
with at least ``id``, ``author``, ``subreddit``, ``body`` and
``created_utc``. Files may be zstd-compressed.
"""

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import zstandard

from .errors import DataError

logger = logging.getLogger(__name__)

ZSTD_MAGIC = b"\x28\xb5\x2f\xfd"
DEFAULT_DROP_MARKERS = frozenset({"[deleted]", "[removed]"})
MALFORMED_WARNING_FRACTION = 0.10


@dataclass(frozen=True, slots=True)
class Comment:
    id: str
    author: str
    community: str
    created_utc: int
    body: str

    def to_json(self):
        return json.dumps(
            {
                "id": self.id,
                "author": self.author,
                "subreddit": self.community,
                "created_utc": self.created_utc,
                "body": self.body,
            },
            ensure_ascii=False,
            sort_keys=True,
        )


@dataclass(frozen=True)
class FilterSpec:
    bot_list: frozenset = frozenset()
    time_range: tuple | None = None
    min_comments_per_community: int = 20
    drop_markers: frozenset = DEFAULT_DROP_MARKERS

    def __post_init__(self):
        object.__setattr__(self, "bot_list", frozenset(self.bot_list))
        object.__setattr__(self, "drop_markers", frozenset(self.drop_markers))
        if self.time_range is not None:
            start, end = self.time_range
            if not start < end:
                raise ValueError(f"time range start {start} must precede end {end}")
            object.__setattr__(self, "time_range", (int(start), int(end)))
        if self.min_comments_per_community < 1:
            raise ValueError("min_comments_per_community must be >= 1")

    def keeps(self, comment):
        if comment.author in self.bot_list:
            return False
        if comment.author in self.drop_markers:
            return False
        if not comment.body or comment.body in self.drop_markers:
            return False
        if self.time_range is not None:
            start, end = self.time_range
            if not start <= comment.created_utc <= end:
                return False
        return True


@dataclass
class ReadStats:
    lines: int = 0
    malformed: int = 0

    @property
    def comments(self):
        return self.lines - self.malformed

    @property
    def malformed_fraction(self):
        return self.malformed / self.lines if self.lines else 0.0

    @property
    def warning(self):
        if self.malformed_fraction > MALFORMED_WARNING_FRACTION:
            return (
                f"{self.malformed} of {self.lines} lines malformed "
                f"({self.malformed_fraction:.1%})"
            )
        return None


def load_bot_list(path):
    """Read a one-name-per-line bot list; blank lines and ``#`` comments ignored."""
    names = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            name = line.strip()
            if name and not name.startswith("#"):
                names.add(name)
    return frozenset(names)


def _open_text(source, fmt):
    if isinstance(source, (str, os.PathLike)):
        raw = open(source, "rb")
    else:
        raw = source
    if fmt is None:
        head = raw.peek(4)[:4] if hasattr(raw, "peek") else None
        if head is None:
            raw = io.BufferedReader(raw)
            head = raw.peek(4)[:4]
        fmt = "ndjson+zstd" if head == ZSTD_MAGIC else "ndjson"
    if fmt == "ndjson+zstd":
        dctx = zstandard.ZstdDecompressor(max_window_size=2**31)
        raw = dctx.stream_reader(raw, closefd=True)
    elif fmt != "ndjson":
        raise ValueError(f"unknown format {fmt!r}")
    return io.TextIOWrapper(raw, encoding="utf-8", errors="replace", newline="\n")


def parse_comment(line):
    """Parse one NDJSON line; return None when the record is malformed."""
    try:
        rec = json.loads(line)
        author = rec["author"]
        community = rec["subreddit"]
        body = rec["body"]
        created = int(rec["created_utc"])
        cid = rec["id"]
    except (ValueError, KeyError, TypeError):
        return None
    if not isinstance(author, str) or not author or created <= 0:
        return None
    if not isinstance(community, str) or not isinstance(body, str):
        return None
    return Comment(str(cid), author, community, created, body)


def read_comments(source, fmt=None, stats=None):
    """Yield comments from an NDJSON (optionally zstd) source in file order.

    Malformed lines are skipped and counted in ``stats``. Blank lines are
    ignored entirely.
    """
    if stats is None:
        stats = ReadStats()
    try:
        fh = _open_text(source, fmt)
    except OSError as exc:
        raise DataError(f"cannot read {source}: {exc}") from exc
    with fh:
        for line in fh:
            if not line.strip():
                continue
            stats.lines += 1
            comment = parse_comment(line)
            if comment is None:
                stats.malformed += 1
                continue
            yield comment
    if stats.warning:
        logger.warning("%s: %s", source, stats.warning)


def filter_corpus(comments, spec):
    """Drop bot authors, deleted content, and out-of-range timestamps."""
    return (c for c in comments if spec.keeps(c))


@dataclass
class ActivityIndex:
    """Per (author, community) counts and timestamp extrema.

    ``entries`` maps ``(author, community)`` to ``[count, first_ts, last_ts]``.
    """

    target_community: str
    entries: dict = field(default_factory=dict)
    first_target: dict = field(default_factory=dict)

    def add(self, comment):
        key = (comment.author, comment.community)
        ts = comment.created_utc
        entry = self.entries.get(key)
        if entry is None:
            self.entries[key] = [1, ts, ts]
        else:
            entry[0] += 1
            if ts < entry[1]:
                entry[1] = ts
            if ts > entry[2]:
                entry[2] = ts
        if comment.community == self.target_community:
            prev = self.first_target.get(comment.author)
            if prev is None or ts < prev:
                self.first_target[comment.author] = ts

    def merge(self, other):
        """Fold another partial index into this one (associative, commutative)."""
        if other.target_community != self.target_community:
            raise ValueError("cannot merge indices built for different targets")
        for key, (count, first, last) in other.entries.items():
            entry = self.entries.get(key)
            if entry is None:
                self.entries[key] = [count, first, last]
            else:
                entry[0] += count
                entry[1] = min(entry[1], first)
                entry[2] = max(entry[2], last)
        for author, ts in other.first_target.items():
            prev = self.first_target.get(author)
            if prev is None or ts < prev:
                self.first_target[author] = ts
        return self

    def count(self, author, community):
        entry = self.entries.get((author, community))
        return entry[0] if entry else 0

    def communities(self):
        return sorted({c for _, c in self.entries})

    def authors_in(self, community):
        return {a for a, c in self.entries if c == community}

    def rows(self):
        for (author, community) in sorted(self.entries):
            count, first, last = self.entries[(author, community)]
            yield author, community, count, first, last

    def to_csv(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "index.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["author", "community", "count", "first_ts", "last_ts"])
            writer.writerows(self.rows())
        with open(out_dir / "first_target.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["author", "first_target_ts"])
            for author in sorted(self.first_target):
                writer.writerow([author, self.first_target[author]])
        with open(out_dir / "target.json", "w", encoding="utf-8") as fh:
            json.dump({"target_community": self.target_community}, fh)
            fh.write("\n")

    @classmethod
    def from_csv(cls, out_dir):
        out_dir = Path(out_dir)
        with open(out_dir / "target.json", encoding="utf-8") as fh:
            target = json.load(fh)["target_community"]
        index = cls(target)
        with open(out_dir / "index.csv", newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                index.entries[(row["author"], row["community"])] = [
                    int(row["count"]),
                    int(row["first_ts"]),
                    int(row["last_ts"]),
                ]
        with open(out_dir / "first_target.csv", newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                index.first_target[row["author"]] = int(row["first_target_ts"])
        return index


def build_activity_index(comments, target_community):
    index = ActivityIndex(target_community)
    for comment in comments:
        index.add(comment)
    return index


def eligible_users(index, community, spec=None):
    """Authors with at least ``min_comments_per_community`` comments in ``community``."""
    threshold = (spec or FilterSpec()).min_comments_per_community
    present = False
    users = set()
    for (author, comm), (count, _, _) in index.entries.items():
        if comm != community:
            continue
        present = True
        if count >= threshold:
            users.add(author)
    if not present:
        logger.warning("community %r not present in the activity index", community)
    return users


def _index_one_source(source, spec, target_community):
    stats = ReadStats()
    index = build_activity_index(
        filter_corpus(read_comments(source, stats=stats), spec), target_community
    )
    return index, stats


def ingest_sources(sources, spec, target_community, n_jobs=1):
    """Build one activity index over several dump files.

    Files are indexed independently (optionally in parallel) and merged in
    input order; the merge is order-insensitive so the result does not
    depend on ``n_jobs``.
    """
    from joblib import Parallel, delayed

    sources = [str(s) for s in sources]
    parts = Parallel(n_jobs=n_jobs)(
        delayed(_index_one_source)(s, spec, target_community) for s in sources
    )
    index = ActivityIndex(target_community)
    stats = ReadStats()
    for part, st in parts:
        index.merge(part)
        stats.lines += st.lines
        stats.malformed += st.malformed
    return index, stats


def write_comments(comments, path, compress=None):
    """Write comments as NDJSON; zstd-compress when the path ends in ``.zst``."""
    path = Path(path)
    if compress is None:
        compress = path.suffix in (".zst", ".zstd")
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "wb") as raw:
        if compress:
            cctx = zstandard.ZstdCompressor(level=3, threads=0)
            sink = cctx.stream_writer(raw, closefd=False)
        else:
            sink = raw
        for comment in comments:
            sink.write(comment.to_json().encode("utf-8") + b"\n")
            n += 1
        if compress:
            sink.close()
    return n
