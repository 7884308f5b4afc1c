"""Pipeline configuration: one YAML or JSON file, plus dotted overrides."""

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .cohort import CANONICAL_BUCKETS, ActivityBucket
from .corpus import DEFAULT_DROP_MARKERS, FilterSpec, load_bot_list
from .errors import ConfigError
from .forest import HyperParams
from .trajectory import EXCLUSION_MONTHS

SCOPE_GROUPS = ("all", "prepost", "windows", "exclusion", "halves")

DEFAULTS = {
    "paths": {"inputs": [], "dictionary": None, "bot_list": None, "output_dir": "out"},
    "target_community": None,
    "communities": [],
    "filters": {
        "min_comments_per_community": 20,
        "time_range": None,
        "drop_markers": sorted(DEFAULT_DROP_MARKERS),
    },
    "buckets": [b.label for b in CANONICAL_BUCKETS],
    "n_resamples": 5,
    "grid": {
        "n_trees": [100, 300],
        "max_depth": [None, 10, 20],
        "min_samples_leaf": [1, 5],
        "features_per_split": ["sqrt"],
    },
    "cv_folds": 5,
    "test_fraction": 0.2,
    "n_perm": 100,
    "shap_sample": 700,
    "scopes": list(SCOPE_GROUPS),
    "windows": {"kinds": ["temporal", "cumulative"], "exclusion_months": list(EXCLUSION_MONTHS)},
    "siamese": {"enabled": True, "epochs": 300, "lr": 1e-4, "batch": 32},
    "seed": 0,
    "n_jobs": 1,
}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown configuration key {where!r}")
        if isinstance(base[key], dict) and base[key] and key != "grid":
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_dotted(doc, dotted, value):
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override {dotted!r}")
    node[keys[-1]] = value


def parse_override(text):
    """``key.sub=value`` with a YAML-parsed value."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from None
    return key.strip(), value


@dataclass
class PipelineConfig:
    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    # -- construction ---------------------------------------------------------

    @classmethod
    def from_dict(cls, doc, base_dir=None, overrides=()):
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a mapping")
        doc = copy.deepcopy(doc)
        for key, value in overrides:
            set_dotted(doc, key, value)
        cfg = cls(_merge(DEFAULTS, doc), Path(base_dir) if base_dir else Path.cwd())
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides=()):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"configuration file {path} not found")
        try:
            text = path.read_text(encoding="utf-8")
            doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(doc or {}, path.parent.resolve(), overrides)

    def validate(self):
        r = self.raw
        if not r["target_community"]:
            raise ConfigError("target_community is required")
        if not isinstance(r["n_resamples"], int) or r["n_resamples"] < 1:
            raise ConfigError("n_resamples must be an integer >= 1")
        if not isinstance(r["n_perm"], int) or r["n_perm"] < 0:
            raise ConfigError("n_perm must be a non-negative integer")
        if not isinstance(r["cv_folds"], int) or r["cv_folds"] < 2:
            raise ConfigError("cv_folds must be an integer >= 2")
        if not 0 < r["test_fraction"] < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if r["target_community"] in r["communities"]:
            raise ConfigError("the target community cannot be a mainstream community")
        bad = set(r["scopes"]) - set(SCOPE_GROUPS)
        if bad:
            raise ConfigError(f"unknown scope groups {sorted(bad)}")
        bad = set(r["windows"]["kinds"]) - {"temporal", "cumulative"}
        if bad:
            raise ConfigError(f"unknown window kinds {sorted(bad)}")
        try:
            self.buckets
            self.grid
            self.filter_spec(load_bots=False)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    # -- derived values -------------------------------------------------------

    def resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_dir(self):
        return self.resolve(self.raw["paths"]["output_dir"])

    @property
    def inputs(self):
        paths = [self.resolve(p) for p in self.raw["paths"]["inputs"]]
        for p in paths:
            if not p.exists():
                raise ConfigError(f"input dump {p} does not exist")
        if not paths:
            raise ConfigError("paths.inputs lists no input dumps")
        return paths

    @property
    def dictionary(self):
        d = self.raw["paths"]["dictionary"]
        if d is None:
            return None
        p = self.resolve(d)
        if not p.is_file():
            raise ConfigError(f"dictionary {p} does not exist")
        return p

    @property
    def target(self):
        return self.raw["target_community"]

    @property
    def buckets(self):
        return [ActivityBucket.parse(b) for b in self.raw["buckets"]]

    @property
    def grid(self):
        g = self.raw["grid"]
        if isinstance(g, list):
            points = [HyperParams.from_dict(p) for p in g]
        else:
            points = [
                HyperParams(n, d, leaf, f)
                for n in g.get("n_trees", [100])
                for d in g.get("max_depth", [None])
                for leaf in g.get("min_samples_leaf", [1])
                for f in g.get("features_per_split", ["sqrt"])
            ]
        if not points:
            raise ConfigError("empty hyperparameter grid")
        return points

    @property
    def seed(self):
        return int(self.raw["seed"])

    @property
    def n_jobs(self):
        return int(self.raw["n_jobs"])

    def filter_spec(self, load_bots=True):
        f = self.raw["filters"]
        bots = frozenset()
        bot_path = self.raw["paths"]["bot_list"]
        if load_bots and bot_path:
            p = self.resolve(bot_path)
            if not p.is_file():
                raise ConfigError(f"bot list {p} does not exist")
            bots = load_bot_list(p)
        return FilterSpec(
            bot_list=bots,
            time_range=tuple(f["time_range"]) if f["time_range"] else None,
            min_comments_per_community=int(f["min_comments_per_community"]),
            drop_markers=frozenset(f["drop_markers"]),
        )

    def canonical(self):
        """Stable JSON text of the merged configuration."""
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    def hash(self):
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()
