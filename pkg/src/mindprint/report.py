"""Run manifest: every output file with its digest, plus config hash,
seed, library versions, and a list of known gaps."""

import hashlib
import json
import platform
from importlib import metadata
from pathlib import Path

from .errors import DataError

SCHEMA = "mindprint.report/1"

# stage -> outputs that a complete run is expected to contain
EXPECTED = {
    "ingest": ["ingest/index.csv", "ingest/comments.ndjson"],
    "featurize": ["features/embeddings_all.csv"],
    "dataset": ["datasets/study1/categories.json"],
    "train": ["results/study1_accuracy.csv", "results/single_model.csv"],
    "permtest": ["results/study1_permutation.csv"],
    "shap": ["results/importance.csv", "results/importance.json"],
    "cluster": ["results/similarity.csv", "results/dendrogram.nwk", "results/pca.csv"],
    "prepost": ["results/prepost_accuracy.csv", "results/prepost_summary.json"],
    "windows": ["results/window_curve.csv", "results/window_trend.json"],
    "siamese": ["results/siamese.csv"],
}

_MANIFEST_FIELDS = {
    "schema": str,
    "config_sha256": str,
    "config": dict,
    "master_seed": int,
    "seed_derivation": str,
    "versions": dict,
    "files": list,
    "gaps": list,
    "bundle_sha256": str,
}


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _versions():
    out = {"python": platform.python_version()}
    for dist in ("artifact", "numpy", "scipy", "scikit-learn", "numba", "zstandard", "pyyaml", "joblib"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = None
    return out


def _stage_of(rel):
    for stage, paths in EXPECTED.items():
        if rel in paths:
            return stage
    head = rel.split("/")[0]
    return {"ingest": "ingest", "features": "featurize", "logs": "log"}.get(head, head)


def _listing(root):
    files = []
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        rel = p.relative_to(root).as_posix()
        if rel.startswith("report/"):
            continue
        files.append({"path": rel, "sha256": sha256_file(p), "bytes": p.stat().st_size, "stage": _stage_of(rel)})
    return files


def _bundle_digest(files):
    h = hashlib.sha256()
    for f in files:
        h.update(f"{f['path']}\0{f['sha256']}\n".encode("utf-8"))
    return h.hexdigest()


def build_report(cfg):
    """Write ``report/manifest.json`` and ``report/summary.json``."""
    root = Path(cfg.output_dir)
    if not root.is_dir():
        raise DataError(f"output directory {root} does not exist; nothing to report")
    files = _listing(root)
    present = {f["path"] for f in files}
    gaps = []
    for stage, paths in EXPECTED.items():
        for p in paths:
            if p not in present:
                gaps.append({"stage": stage, "missing": p})
    for log in sorted((root / "logs").glob("*.json")) if (root / "logs").is_dir() else []:
        with open(log, encoding="utf-8") as fh:
            doc = json.load(fh)
        gaps += [{"stage": doc["stage"], "note": g} for g in doc.get("gaps", [])]

    manifest = {
        "schema": SCHEMA,
        "config_sha256": cfg.hash(),
        "config": cfg.raw,
        "master_seed": cfg.seed,
        "seed_derivation": "SeedSequence(master, spawn_key=sha256(keys)) along stage/community/bucket/replica",
        "versions": _versions(),
        "files": files,
        "gaps": gaps,
        "bundle_sha256": _bundle_digest(files),
    }
    validate_manifest(manifest)
    out = root / "report"
    out.mkdir(exist_ok=True)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    summary = _summary(root)
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def _summary(root):
    import csv

    def table(rel):
        p = root / rel
        if not p.exists():
            return None
        with open(p, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))

    def doc(rel):
        p = root / rel
        if not p.exists():
            return None
        with open(p, encoding="utf-8") as fh:
            return json.load(fh)

    return {
        "study1_accuracy": table("results/study1_accuracy.csv"),
        "study1_permutation": table("results/study1_permutation.csv"),
        "single_model": table("results/single_model.csv"),
        "prepost": doc("results/prepost_summary.json"),
        "window_curve": table("results/window_curve.csv"),
        "window_trend": doc("results/window_trend.json"),
        "siamese": table("results/siamese.csv"),
    }


def validate_manifest(doc):
    """Raise DataError unless ``doc`` has the manifest's fields and types."""
    for key, typ in _MANIFEST_FIELDS.items():
        if key not in doc:
            raise DataError(f"manifest lacks {key!r}")
        if not isinstance(doc[key], typ):
            raise DataError(f"manifest field {key!r} must be {typ.__name__}")
    if doc["schema"] != SCHEMA:
        raise DataError(f"unknown manifest schema {doc['schema']!r}")
    for f in doc["files"]:
        if set(f) != {"path", "sha256", "bytes", "stage"}:
            raise DataError(f"malformed file entry {f!r}")
        if len(f["sha256"]) != 64 or f["path"].startswith("/"):
            raise DataError(f"malformed file entry {f!r}")
    if _bundle_digest(doc["files"]) != doc["bundle_sha256"]:
        raise DataError("bundle digest does not match the file list")
    return True


def verify_report(output_dir):
    """List files whose content no longer matches the manifest."""
    root = Path(output_dir)
    path = root / "report" / "manifest.json"
    if not path.is_file():
        raise DataError(f"{path} not found; run `mindprint report` first")
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    validate_manifest(doc)
    problems = []
    for f in doc["files"]:
        p = root / f["path"]
        if not p.is_file():
            problems.append(f"missing: {f['path']}")
        elif sha256_file(p) != f["sha256"]:
            problems.append(f"hash mismatch: {f['path']}")
    return problems
