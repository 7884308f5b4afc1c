"""Command line entry point: ``mindprint <stage> --config run.yaml``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import pipeline
from .config import PipelineConfig, parse_override
from .errors import ConfigError, DataError
from .report import build_report, verify_report
from .synth import SignalSpec, write_corpus

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3

STAGE_HELP = {
    "ingest": "filter dumps and build the activity index",
    "featurize": "per-comment features and per-user scope embeddings",
    "dataset": "balanced study-one datasets per community, bucket and resample",
    "train": "grid-search and fit study-one forests; pooled single model",
    "permtest": "label-permutation significance of each study-one model",
    "shap": "mean |SHAP| importance vector per community",
    "cluster": "cosine similarity, UPGMA dendrogram and PCA of importance vectors",
    "windows": "accuracy over activity windows and exclusion windows",
    "prepost": "pre- versus post-engagement classifiers",
    "siamese": "half-period change detector",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="mindprint", description="Psycholinguistic fingerprint pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p, required=True):
        p.add_argument("--config", required=required, help="YAML or JSON pipeline configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. --set n_perm=20")
        p.add_argument("--out", help="override paths.output_dir")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--n-jobs", type=int, help="override n_jobs")
        return p

    for name, text in STAGE_HELP.items():
        if name != "ingest":
            with_config(sub.add_parser(name, help=text))
    ing = with_config(sub.add_parser("ingest", help=STAGE_HELP["ingest"]), required=False)
    ing.add_argument("--input", action="append", default=[], help="NDJSON dump, optionally .zst; repeatable")
    ing.add_argument("--bots", help="bot list, one author per line")
    ing.add_argument("--from", dest="start", type=int, help="first kept created_utc (inclusive)")
    ing.add_argument("--to", dest="end", type=int, help="last kept created_utc (inclusive)")
    ing.add_argument("--target", help="target community")
    with_config(sub.add_parser("run", help="every stage in order, then the report"))
    rep = with_config(sub.add_parser("report", help="manifest of every output with digests"))
    rep.add_argument("--verify", action="store_true", help="check outputs against an existing manifest")

    syn = sub.add_parser("synth", help="generate a synthetic corpus with known ground truth")
    syn.add_argument("--spec", required=True, help="YAML or JSON signal specification")
    syn.add_argument("--out", required=True, help="output directory")
    syn.add_argument("--compress", action="store_true", help="write corpus.ndjson.zst")
    syn.add_argument("--n-jobs", type=int, default=1)
    return parser


def _ingest_overrides(args):
    out = []
    if args.input:
        out.append(("paths.inputs", [str(Path(p).resolve()) for p in args.input]))
    if args.bots:
        out.append(("paths.bot_list", str(Path(args.bots).resolve())))
    if args.target:
        out.append(("target_community", args.target))
    if (args.start is None) != (args.end is None):
        raise ConfigError("--from and --to must be given together")
    if args.start is not None:
        out.append(("filters.time_range", [args.start, args.end]))
    return out


def _load_config(args):
    overrides = [parse_override(s) for s in args.set]
    if args.command == "ingest":
        overrides += _ingest_overrides(args)
        if args.config is None:
            if not args.out:
                raise ConfigError("ingest without --config needs --out")
            doc = {"paths": {"output_dir": str(Path(args.out).resolve())}}
            return PipelineConfig.from_dict(doc, Path.cwd(), overrides)
    if args.out:
        overrides.append(("paths.output_dir", str(Path(args.out).resolve())))
    if args.seed is not None:
        overrides.append(("seed", args.seed))
    if args.n_jobs is not None:
        overrides.append(("n_jobs", args.n_jobs))
    return PipelineConfig.load(args.config, overrides)


def _load_spec(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"signal spec {path} not found")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: signal spec must be a mapping")
    try:
        return SignalSpec.from_dict(doc)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def dispatch(args):
    if args.command == "synth":
        spec = _load_spec(args.spec)
        path, manifest = write_corpus(spec, args.out, n_jobs=args.n_jobs, compress=args.compress)
        print(f"wrote {manifest['n_comments']} comments to {path}")
        return EXIT_OK
    cfg = _load_config(args)
    if args.command == "report":
        if args.verify:
            problems = verify_report(cfg.output_dir)
            for p in problems:
                print(p)
            if problems:
                raise DataError(f"{len(problems)} output file(s) do not match the manifest")
            print("all outputs match the manifest")
            return EXIT_OK
        manifest = build_report(cfg)
        print(json.dumps({"bundle_sha256": manifest["bundle_sha256"], "gaps": len(manifest["gaps"])}))
        return EXIT_OK
    if args.command == "run":
        manifest = pipeline.run_all(cfg)
        print(json.dumps({"bundle_sha256": manifest["bundle_sha256"], "gaps": len(manifest["gaps"])}))
        return EXIT_OK
    pipeline.STAGES[args.command](cfg)
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
