"""Stage implementations. Stages communicate only through files under the
output directory, so any stage can be rerun once its inputs exist.

Seeds follow the path ``derive_seed(master, study, community, ..., replica)``
and every sub-step (negative sampling, split, grid search, fit,
permutations, SHAP sampling) derives its own child from that.
"""

import csv
import json
import logging
import math
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from .cohort import (
    MIN_ROWS_PER_CLASS,
    LabeledDataset,
    Normalizer,
    bucket_slug,
    build_balanced_dataset,
    label_pools,
    pre_post_datasets,
    stratified_split,
)
from .corpus import ActivityIndex, filter_corpus, ingest_sources, read_comments, write_comments
from .errors import DataError, DegenerateUserError, MissingArtifactError
from .explain import (
    ImportanceVector,
    SignedPCA,
    cosine_similarity_matrix,
    importance_vector,
    upgma,
)
from .forest import RandomForest, grid_search, permutation_test, train_forest
from .lexicon import (
    UserEmbedding,
    featurize_batch,
    load_demo_lexicon,
    load_lexicon,
    mean_rows,
    read_embeddings,
    write_embeddings,
)
from .seeding import derive_seed
from .siamese import WindowQuadruple, build_pairs, save_model, train_siamese, write_pairs
from .stats import accuracy, mann_kendall, mann_whitney_u
from .trajectory import (
    WindowSpec,
    exclusion_embeddings,
    period_halves,
    window_embeddings,
)

logger = logging.getLogger(__name__)

HALF_TAGS = ("B1", "B2", "A1", "A2")


class Layout:
    def __init__(self, root):
        self.root = Path(root)

    ingest = property(lambda self: self.root / "ingest")
    features = property(lambda self: self.root / "features")
    datasets = property(lambda self: self.root / "datasets")
    models = property(lambda self: self.root / "models")
    results = property(lambda self: self.root / "results")
    logs = property(lambda self: self.root / "logs")
    report = property(lambda self: self.root / "report")

    def comments(self):
        return self.ingest / "comments.ndjson"

    def embeddings(self, scope):
        return self.features / f"embeddings_{scope}.csv"

    def require(self, path, producer):
        if not Path(path).exists():
            raise MissingArtifactError(path, producer)
        return path


def _fresh(path):
    path = Path(path)
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_log(cfg, stage, gaps=(), **counts):
    _write_json(Layout(cfg.output_dir).logs / f"{stage}.json", {"stage": stage, "gaps": list(gaps), "counts": counts})


def _parallel(cfg, fn, tasks):
    if cfg.n_jobs == 1 or len(tasks) < 2:
        return [fn(*t) for t in tasks]
    return Parallel(n_jobs=cfg.n_jobs)(delayed(fn)(*t) for t in tasks)


def _median(values):
    vals = [v for v in values if not math.isnan(v)]
    return float(np.median(vals)) if vals else float("nan")


def load_configured_lexicon(cfg):
    path = cfg.dictionary
    return load_lexicon(path) if path else load_demo_lexicon()


# -- ingest -------------------------------------------------------------------


def mainstream_communities(cfg, index):
    listed = list(cfg.raw["communities"])
    if listed:
        return listed
    return [c for c in index.communities() if c != cfg.target]


def run_ingest(cfg):
    lay = Layout(cfg.output_dir)
    spec = cfg.filter_spec()
    sources = cfg.inputs
    index, stats = ingest_sources(sources, spec, cfg.target, n_jobs=cfg.n_jobs)
    if stats.warning:
        logger.warning(stats.warning)
    communities = mainstream_communities(cfg, index)
    threshold = spec.min_comments_per_community
    keep = {
        (a, c)
        for (a, c), (count, _, _) in index.entries.items()
        if c in set(communities) and count >= threshold
    }

    def selected():
        for src in sources:
            for comment in filter_corpus(read_comments(src), spec):
                if (comment.author, comment.community) in keep:
                    yield comment

    _fresh(lay.ingest)
    index.to_csv(lay.ingest)
    n = write_comments(selected(), lay.comments())
    gaps = [f"community {c!r} has no eligible users" for c in communities if not any(k[1] == c for k in keep)]
    _write_json(
        lay.ingest / "ingest.json",
        {
            "communities": communities,
            "lines": stats.lines,
            "malformed": stats.malformed,
            "malformed_fraction": stats.malformed_fraction,
            "warning": stats.warning,
            "eligible_pairs": len(keep),
            "comments_written": n,
        },
    )
    _write_log(cfg, "ingest", gaps, comments_written=n)
    return index


def _ingest_meta(lay):
    path = lay.require(lay.ingest / "ingest.json", "ingest")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def load_index(lay):
    lay.require(lay.ingest / "index.csv", "ingest")
    return ActivityIndex.from_csv(lay.ingest)


# -- featurize ----------------------------------------------------------------


def scope_tags(cfg):
    groups = set(cfg.raw["scopes"])
    tags = ["all"]
    if "prepost" in groups:
        tags += ["pre", "post"]
    if "windows" in groups:
        for kind in cfg.raw["windows"]["kinds"]:
            tags += WindowSpec(kind).tags()
    if "exclusion" in groups:
        tags += [f"excl-{m}m" for m in cfg.raw["windows"]["exclusion_months"]]
    if "halves" in groups:
        tags += list(HALF_TAGS)
    return tags


def user_embeddings(author, community, ts, feats, tau, cfg):
    """Every configured scope embedding for one (user, community).

    ``ts`` must be sorted; ``tau`` is None for users who never engaged.
    Returns ``(embeddings, notes)`` where notes name skipped scopes.
    """
    groups = set(cfg.raw["scopes"])
    out = [UserEmbedding(author, community, "all", mean_rows(feats), len(ts))]
    notes = []
    if tau is None:
        return out, notes
    pre = ts <= tau
    n_pre, n_post = int(pre.sum()), int((~pre).sum())
    if "prepost" in groups:
        if n_pre:
            out.append(UserEmbedding(author, community, "pre", mean_rows(feats[pre]), n_pre))
        if n_post:
            out.append(UserEmbedding(author, community, "post", mean_rows(feats[~pre]), n_post))
    if "windows" in groups and n_pre:
        for kind in cfg.raw["windows"]["kinds"]:
            try:
                wins = window_embeddings(ts, feats, WindowSpec(kind), tau, author, community)
            except DegenerateUserError:
                notes.append(f"{kind}-degenerate")
                continue
            out += [e for _, e in wins if e is not None]
    if "exclusion" in groups:
        for m in cfg.raw["windows"]["exclusion_months"]:
            e = exclusion_embeddings(ts, feats, m, tau, author, community)
            if e is not None:
                out.append(e)
    if "halves" in groups:
        for rows, (t1, t2) in ((pre, ("B1", "B2")), (~pre, ("A1", "A2"))):
            part = feats[rows]
            if len(part) < 2:
                notes.append("halves-short")
                continue
            first, second = period_halves(len(part))
            out.append(UserEmbedding(author, community, t1, mean_rows(part[first]), first.stop))
            out.append(UserEmbedding(author, community, t2, mean_rows(part[second]), len(part) - first.stop))
    return out, notes


def run_featurize(cfg):
    lay = Layout(cfg.output_dir)
    lay.require(lay.comments(), "ingest")
    index = load_index(lay)
    lex = load_configured_lexicon(cfg)
    ids, authors, comms, ts, bodies = [], [], [], [], []
    for c in read_comments(lay.comments()):
        ids.append(c.id)
        authors.append(c.author)
        comms.append(c.community)
        ts.append(c.created_utc)
        bodies.append(c.body)
    feats, _ = featurize_batch(lex, bodies, n_jobs=cfg.n_jobs)
    del bodies
    ts = np.asarray(ts, dtype=np.int64)

    groups = {}
    for i, key in enumerate(zip(authors, comms)):
        groups.setdefault(key, []).append(i)
    by_scope = {tag: [] for tag in scope_tags(cfg)}
    notes = {}
    for author, community in sorted(groups):
        idx = sorted(groups[(author, community)], key=lambda i: (ts[i], ids[i]))
        idx = np.asarray(idx)
        tau = index.first_target.get(author)
        embs, why = user_embeddings(author, community, ts[idx], feats[idx], tau, cfg)
        for e in embs:
            by_scope[e.scope_tag].append(e)
        for w in why:
            notes[w] = notes.get(w, 0) + 1

    _fresh(lay.features)
    for tag, embs in by_scope.items():
        write_embeddings(embs, lay.embeddings(tag), lex.categories)
    counts = {f"n_{tag}": len(v) for tag, v in by_scope.items()}
    counts.update({f"skipped_{k}": v for k, v in sorted(notes.items())})
    _write_log(cfg, "featurize", [], n_comments=len(ids), **counts)
    return by_scope


def load_scope(lay, scope):
    """``({community: {author: vector}}, categories)`` for one scope."""
    path = lay.require(lay.embeddings(scope), "featurize")
    embs, categories = read_embeddings(path)
    table = {}
    for e in embs:
        table.setdefault(e.community, {})[e.author] = e.vector
    return table, categories


# -- fitting helpers ----------------------------------------------------------


@dataclass
class Fitted:
    model: RandomForest
    normalizer: Normalizer
    accuracy: float
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray


def assign_split(ds, seed, test_fraction):
    n0, n1 = ds.class_counts()
    if min(n0, n1) < MIN_ROWS_PER_CLASS:
        raise DataError(
            f"{ds.community!r} ({ds.scope_tag}, {ds.bucket}): too small to split "
            f"({n1} positive, {n0} negative rows)"
        )
    ds.split = np.where(stratified_split(ds.y, seed, test_fraction), "test", "train")
    return ds


def fit_and_score(ds, seed, cfg):
    """Normalize on train rows, grid-search, fit, and score on test rows."""
    test = ds.split == "test"
    norm = Normalizer().fit(ds.X[~test])
    Xtr, Xte = norm.transform(ds.X[~test]), norm.transform(ds.X[test])
    ytr, yte = ds.y[~test], ds.y[test]
    hp = grid_search(Xtr, ytr, cfg.grid, cfg.raw["cv_folds"], derive_seed(seed, "grid"))
    model = train_forest(Xtr, ytr, hp, derive_seed(seed, "fit"))
    acc = accuracy(model.predict(Xte), yte)
    return Fitted(model, norm, acc, Xtr, ytr, Xte, yte)


def _balanced_split(table, pos, neg, seed, cfg, community, scope, bucket="all"):
    ds = build_balanced_dataset(table, pos, neg, derive_seed(seed, "negatives"), community, scope, bucket)
    return assign_split(ds, derive_seed(seed, "split"), cfg.raw["test_fraction"])


# -- study one ----------------------------------------------------------------


def _bucket_list(cfg):
    return [None] + cfg.buckets


def run_dataset(cfg):
    lay = Layout(cfg.output_dir)
    index = load_index(lay)
    table, categories = load_scope(lay, "all")
    communities = _ingest_meta(lay)["communities"]
    spec = cfg.filter_spec(load_bots=False)
    root = _fresh(lay.datasets / "study1")
    gaps, written = [], 0
    for community in communities:
        emb = table.get(community, {})
        for bucket in _bucket_list(cfg):
            slug = bucket_slug(bucket)
            try:
                pos, neg = label_pools(index, community, cfg.target, bucket, spec)
            except DataError as exc:
                gaps.append(str(exc))
                continue
            for r in range(cfg.raw["n_resamples"]):
                seed = derive_seed(cfg.seed, "study_one", community, slug, r)
                try:
                    ds = _balanced_split(emb, pos, neg, seed, cfg, community, "all", slug)
                except DataError as exc:
                    gaps.append(f"{exc} [resample {r}]")
                    continue
                ds.resample_seed = seed
                ds.meta["replica"] = r
                ds.to_csv(root / community / slug / f"r{r}.csv")
                written += 1
    _write_json(root / "categories.json", {"categories": categories})
    _write_log(cfg, "dataset", gaps, datasets=written)
    return written


def _study_one_files(lay, producer="dataset"):
    root = lay.require(lay.datasets / "study1", producer)
    files = sorted(p for p in root.rglob("r*.csv"))
    if not files:
        raise MissingArtifactError(root / "<community>/<bucket>/r0.csv", producer)
    return files


def _model_path(lay, ds_path):
    rel = ds_path.relative_to(lay.datasets / "study1")
    return (lay.models / "study1" / rel).with_suffix(".json")


def _train_one(cfg, lay, ds_path, categories):
    ds = LabeledDataset.from_csv(ds_path)
    fit = fit_and_score(ds, ds.resample_seed, cfg)
    out = _model_path(lay, ds_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fit.model.save(
        out,
        feature_names=categories,
        community=ds.community,
        bucket=ds.bucket,
        replica=ds.meta["replica"],
        resample_seed=ds.resample_seed,
        accuracy=fit.accuracy,
        normalizer={"mean": fit.normalizer.mean_.tolist(), "scale": fit.normalizer.scale_.tolist()},
    )
    return [
        ds.community, "all", ds.resample_seed, fit.accuracy, ds.bucket, ds.meta["replica"],
        len(fit.y_train), len(fit.y_test), json.dumps(fit.model.hyperparams.to_dict(), sort_keys=True),
    ]


def _normalized_split(ds, doc):
    mean, scale = np.asarray(doc["normalizer"]["mean"]), np.asarray(doc["normalizer"]["scale"])
    test = ds.split == "test"
    X = (ds.X - mean) / scale
    return X[~test], ds.y[~test], X[test], ds.y[test]


def _load_model(path, producer="train"):
    if not Path(path).exists():
        raise MissingArtifactError(path, producer)
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return RandomForest.from_dict(doc), doc


def run_train(cfg):
    lay = Layout(cfg.output_dir)
    files = _study_one_files(lay)
    with open(lay.datasets / "study1" / "categories.json", encoding="utf-8") as fh:
        categories = json.load(fh)["categories"]
    _fresh(lay.models / "study1")
    rows = _parallel(cfg, _train_one, [(cfg, lay, f, categories) for f in files])
    rows.sort(key=lambda r: (r[0], r[4], r[5]))
    _write_csv(
        lay.results / "study1_accuracy.csv",
        ["community", "scope", "seed", "accuracy", "bucket", "replica", "n_train", "n_test", "hyperparams"],
        rows,
    )
    single = single_model(cfg, lay, files)
    _write_log(cfg, "train", [], models=len(rows), single_model_rows=len(single))
    return rows


def single_model(cfg, lay, files):
    """One forest on the pooled training rows of every community, per replica.

    Each community's rows keep that community's normalization. The delta is
    the community-specific accuracy minus the pooled model's accuracy on
    the same test rows.
    """
    by_replica = {}
    for f in files:
        if f.parent.name != "all":
            continue
        ds = LabeledDataset.from_csv(f)
        _, doc = _load_model(_model_path(lay, f))
        by_replica.setdefault(ds.meta["replica"], []).append((ds, doc))
    rows = []
    for r in sorted(by_replica):
        parts = sorted(by_replica[r], key=lambda p: p[0].community)
        if len(parts) < 2:
            continue
        splits = [_normalized_split(ds, doc) for ds, doc in parts]
        Xtr = np.vstack([s[0] for s in splits])
        ytr = np.concatenate([s[1] for s in splits])
        seed = derive_seed(cfg.seed, "single_model", r)
        hp = grid_search(Xtr, ytr, cfg.grid, cfg.raw["cv_folds"], derive_seed(seed, "grid"))
        model = train_forest(Xtr, ytr, hp, derive_seed(seed, "fit"))
        for (ds, doc), (_, _, Xte, yte) in zip(parts, splits):
            acc_single = accuracy(model.predict(Xte), yte)
            rows.append([ds.community, r, acc_single, doc["accuracy"], doc["accuracy"] - acc_single])
    _write_csv(
        lay.results / "single_model.csv",
        ["community", "replica", "accuracy_single", "accuracy_community", "delta"],
        rows,
    )
    return rows


def _perm_one(cfg, lay, ds_path):
    ds = LabeledDataset.from_csv(ds_path)
    model, doc = _load_model(_model_path(lay, ds_path))
    Xtr, ytr, Xte, yte = _normalized_split(ds, doc)
    rep = permutation_test(
        Xtr, ytr, Xte, yte, model.hyperparams, cfg.raw["n_perm"],
        derive_seed(ds.resample_seed, "perm"), observed_accuracy=doc["accuracy"],
    )
    return [
        ds.community, "all", ds.resample_seed, rep.observed_accuracy, rep.p_value,
        ds.bucket, ds.meta["replica"], rep.C, rep.n_perm,
    ]


def run_permtest(cfg):
    lay = Layout(cfg.output_dir)
    files = _study_one_files(lay)
    for f in files:
        lay.require(_model_path(lay, f), "train")
    if cfg.raw["n_perm"] == 0:
        _write_log(cfg, "permtest", ["n_perm is 0; permutation tests skipped"])
        return []
    rows = _parallel(cfg, _perm_one, [(cfg, lay, f) for f in files])
    rows.sort(key=lambda r: (r[0], r[5], r[6]))
    _write_csv(
        lay.results / "study1_permutation.csv",
        ["community", "scope", "seed", "accuracy", "p_value", "bucket", "replica", "C", "n_perm"],
        rows,
    )
    _write_log(cfg, "permtest", [], tests=len(rows))
    return rows


def _shap_one(cfg, lay, ds_path):
    ds = LabeledDataset.from_csv(ds_path)
    model, doc = _load_model(_model_path(lay, ds_path))
    Xtr, ytr, Xte, yte = _normalized_split(ds, doc)
    positives = np.vstack([Xtr[ytr == 1], Xte[yte == 1]])
    iv = importance_vector(
        model, positives, cfg.raw["shap_sample"], derive_seed(ds.resample_seed, "shap"), ds.community
    )
    return ds.community, ds.meta["replica"], iv.values, iv.n_instances


def run_shap(cfg):
    lay = Layout(cfg.output_dir)
    files = [f for f in _study_one_files(lay) if f.parent.name == "all"]
    for f in files:
        lay.require(_model_path(lay, f), "train")
    with open(lay.datasets / "study1" / "categories.json", encoding="utf-8") as fh:
        categories = json.load(fh)["categories"]
    parts = _parallel(cfg, _shap_one, [(cfg, lay, f) for f in files])
    by_comm = {}
    for community, r, values, n in parts:
        by_comm.setdefault(community, []).append((r, values, n))
    rows, meta = [], {}
    for community in sorted(by_comm):
        items = sorted(by_comm[community], key=lambda t: t[0])
        mean = mean_rows(np.vstack([v for _, v, _ in items]))
        rows.append([community] + [float(x) for x in mean])
        meta[community] = {"n_models": len(items), "n_instances": [n for _, _, n in items]}
    d = len(categories)
    _write_csv(lay.results / "importance.csv", ["community"] + [f"f_{k}" for k in range(1, d + 1)], rows)
    _write_json(
        lay.results / "importance.json",
        {"categories": list(categories), "pool": "train+test positives", "models": meta},
    )
    _write_log(cfg, "shap", [], communities=len(rows))
    return rows


def load_importance(lay):
    path = lay.require(lay.results / "importance.csv", "shap")
    rows = _read_csv(path)
    if not rows:
        raise DataError(f"{path} holds no importance vectors")
    with open(lay.results / "importance.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    names = meta["categories"]
    cols = [f"f_{k}" for k in range(1, len(names) + 1)]
    vectors = [
        ImportanceVector(
            r["community"], np.array([float(r[c]) for c in cols]), sum(meta["models"][r["community"]]["n_instances"])
        )
        for r in rows
    ]
    return vectors, names


def run_cluster(cfg):
    lay = Layout(cfg.output_dir)
    vectors, names = load_importance(lay)
    labels = [v.community for v in vectors]
    sim = cosine_similarity_matrix(vectors)
    _write_csv(lay.results / "similarity.csv", ["community"] + labels, [[c] + list(row) for c, row in zip(labels, sim)])
    gaps = []
    if len(vectors) >= 2:
        dist = 1.0 - sim
        np.fill_diagonal(dist, 0.0)
        tree = upgma(dist, labels)
        (lay.results / "dendrogram.nwk").write_text(tree.to_newick() + "\n", encoding="utf-8")
        (lay.results / "dendrogram.json").write_text(tree.to_json() + "\n", encoding="utf-8")
    else:
        gaps.append("dendrogram needs at least two communities")
    k = min(2, len(vectors) - 1, len(names))
    if k >= 1:
        mat = np.vstack([v.values for v in vectors])
        pca = SignedPCA(k).fit(mat)
        coords = pca.transform(mat)
        _write_csv(
            lay.results / "pca.csv",
            ["community"] + [f"pc{i + 1}" for i in range(k)],
            [[c] + list(row) for c, row in zip(labels, coords)],
        )
        _write_json(
            lay.results / "pca.json",
            {
                "explained_variance": pca.explained_variance_,
                "components": pca.components_,
                "features": names,
            },
        )
    else:
        gaps.append("PCA needs at least two communities")
    _write_log(cfg, "cluster", gaps, communities=len(labels))
    return sim


# -- study two ----------------------------------------------------------------


def _cohort(cfg, lay, index):
    """Per community: (positive authors, negative authors) over the whole activity range."""
    spec = cfg.filter_spec(load_bots=False)
    out = {}
    for community in _ingest_meta(lay)["communities"]:
        try:
            out[community] = label_pools(index, community, cfg.target, None, spec)
        except DataError:
            continue
    return out


def _prepost_one(cfg, community, r, pre, post, negatives):
    seed = derive_seed(cfg.seed, "study_two", community, r)
    pre_ds, post_ds = pre_post_datasets(pre, post, negatives, derive_seed(seed, "negatives"), community)
    accs = []
    for ds in (pre_ds, post_ds):
        assign_split(ds, derive_seed(seed, "split", ds.scope_tag), cfg.raw["test_fraction"])
        accs.append(fit_and_score(ds, derive_seed(seed, ds.scope_tag), cfg).accuracy)
    return [community, r, seed, accs[0], accs[1], accs[1] - accs[0]]


def run_prepost(cfg):
    lay = Layout(cfg.output_dir)
    index = load_index(lay)
    pre_t, _ = load_scope(lay, "pre")
    post_t, _ = load_scope(lay, "post")
    all_t, _ = load_scope(lay, "all")
    gaps, tasks = [], []
    for community, (pos, neg) in sorted(_cohort(cfg, lay, index).items()):
        pre = {a: v for a, v in pre_t.get(community, {}).items() if a in pos}
        post = {a: v for a, v in post_t.get(community, {}).items() if a in pos}
        negatives = {a: v for a, v in all_t.get(community, {}).items() if a in neg}
        for r in range(cfg.raw["n_resamples"]):
            tasks.append((cfg, community, r, pre, post, negatives))
    rows = []
    for task, res in zip(tasks, _parallel(cfg, _safe(_prepost_one), tasks)):
        if isinstance(res, str):
            gaps.append(f"prepost {task[1]} r{task[2]}: {res}")
        else:
            rows.append(res)
    _write_csv(
        lay.results / "prepost_accuracy.csv",
        ["community", "replica", "seed", "accuracy_pre", "accuracy_post", "difference"],
        rows,
    )
    summary = summarize_prepost(rows)
    _write_json(lay.results / "prepost_summary.json", summary)
    _write_log(cfg, "prepost", gaps, rows=len(rows))
    return summary


def summarize_prepost(rows):
    """Per-community medians over replicas, compared across communities."""
    by_comm = {}
    for community, _, _, a_pre, a_post, _ in rows:
        by_comm.setdefault(community, []).append((a_pre, a_post))
    pre = {c: _median([p for p, _ in v]) for c, v in by_comm.items()}
    post = {c: _median([q for _, q in v]) for c, v in by_comm.items()}
    comms = sorted(by_comm)
    out = {
        "communities": comms,
        "median_accuracy_pre": pre,
        "median_accuracy_post": post,
        "overall_median_pre": _median(list(pre.values())),
        "overall_median_post": _median(list(post.values())),
        "median_difference": _median([post[c] - pre[c] for c in comms]),
    }
    if comms:
        res = mann_whitney_u([pre[c] for c in comms], [post[c] for c in comms])
        out["mann_whitney"] = {"U": res.statistic, "p_value": res.p_value, "n": len(comms)}
    return out


class _safe:
    """Wrap a task so a DataError becomes a gap message instead of an abort."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, *args):
        try:
            return self.fn(*args)
        except DataError as exc:
            return str(exc)


def _window_one(cfg, kind, tag, community, r, table, negatives):
    seed = derive_seed(cfg.seed, "windows", community, tag, r)
    merged = dict(negatives)
    merged.update(table)
    ds = _balanced_split(merged, set(table), set(negatives), seed, cfg, community, tag)
    return [kind, tag, community, r, seed, len(table), fit_and_score(ds, seed, cfg).accuracy]


def window_tags(cfg):
    out = []
    groups = set(cfg.raw["scopes"])
    if "windows" in groups:
        for kind in cfg.raw["windows"]["kinds"]:
            out += [(kind, t) for t in WindowSpec(kind).tags()]
    if "exclusion" in groups:
        out += [("exclusion", f"excl-{m}m") for m in cfg.raw["windows"]["exclusion_months"]]
    return out


def run_windows(cfg):
    lay = Layout(cfg.output_dir)
    index = load_index(lay)
    all_t, _ = load_scope(lay, "all")
    cohort = _cohort(cfg, lay, index)
    tasks = []
    for kind, tag in window_tags(cfg):
        tab, _ = load_scope(lay, tag)
        for community, (pos, neg) in sorted(cohort.items()):
            table = {a: v for a, v in tab.get(community, {}).items() if a in pos}
            negatives = {a: v for a, v in all_t.get(community, {}).items() if a in neg}
            for r in range(cfg.raw["n_resamples"]):
                tasks.append((cfg, kind, tag, community, r, table, negatives))
    rows, gaps = [], []
    for task, res in zip(tasks, _parallel(cfg, _safe(_window_one), tasks)):
        if isinstance(res, str):
            gaps.append(f"{task[2]} {task[3]} r{task[4]}: {res}")
        else:
            rows.append(res)
    _write_csv(
        lay.results / "window_accuracy.csv",
        ["kind", "window", "community", "replica", "seed", "n_positive", "accuracy"],
        rows,
    )
    curve, trend = window_curves(rows, window_tags(cfg))
    _write_csv(lay.results / "window_curve.csv", ["kind", "window", "n_communities", "median_accuracy"], curve)
    _write_json(lay.results / "window_trend.json", trend)
    _write_log(cfg, "windows", gaps, rows=len(rows))
    return curve, trend


def window_curves(rows, tags):
    """Median over communities of the per-community median over replicas."""
    per = {}
    for kind, tag, community, _, _, _, acc in rows:
        per.setdefault((kind, tag), {}).setdefault(community, []).append(acc)
    curve, series = [], {}
    for kind, tag in tags:
        comm = per.get((kind, tag), {})
        med = _median([_median(v) for v in comm.values()])
        curve.append([kind, tag, len(comm), med])
        series.setdefault(kind, []).append(med)
    trend = {}
    for kind, values in series.items():
        vals = [v for v in values if not math.isnan(v)]
        if len(vals) < 4 or len(vals) != len(values):
            trend[kind] = {"p_value": None, "reason": "fewer than 4 complete windows"}
            continue
        res = mann_kendall(vals)
        trend[kind] = {"S": res.statistic, "z": res.z, "p_value": res.p_value, "n": len(vals)}
    return curve, trend


# -- siamese ------------------------------------------------------------------


def run_siamese(cfg):
    lay = Layout(cfg.output_dir)
    scfg = cfg.raw["siamese"]
    if not scfg["enabled"]:
        _write_log(cfg, "siamese", ["siamese stage disabled in the configuration"])
        return []
    index = load_index(lay)
    halves = {t: load_scope(lay, t)[0] for t in HALF_TAGS}
    cohort = _cohort(cfg, lay, index)
    _fresh(lay.models / "siamese")
    rows, gaps = [], []
    for community, (pos, _) in sorted(cohort.items()):
        authors = sorted(a for a in pos if any(a in halves[t].get(community, {}) for t in HALF_TAGS))
        quads = [
            WindowQuadruple(a, *(halves[t].get(community, {}).get(a) for t in HALF_TAGS)) for a in authors
        ]
        pairs, skipped = build_pairs(quads)
        seed = derive_seed(cfg.seed, "siamese", community)
        try:
            run = train_siamese(pairs, scfg["epochs"], scfg["lr"], scfg["batch"], seed)
        except DataError as exc:
            gaps.append(f"siamese {community}: {exc}")
            continue
        write_pairs(pairs, lay.datasets / "siamese" / f"{community}.csv")
        save_model(run.model, lay.models / "siamese" / f"{community}.json")
        rows.append([
            community, seed, len(quads) - skipped, skipped, len(run.train_pairs), len(run.test_pairs),
            run.accuracy, run.precision, run.loss_trace[-1],
        ])
    _write_csv(
        lay.results / "siamese.csv",
        ["community", "seed", "n_users", "n_skipped", "n_train_pairs", "n_test_pairs", "accuracy", "precision", "final_loss"],
        rows,
    )
    _write_log(cfg, "siamese", gaps, communities=len(rows))
    return rows


# -- orchestration --------------------------------------------------------------

STAGES = {
    "ingest": run_ingest,
    "featurize": run_featurize,
    "dataset": run_dataset,
    "train": run_train,
    "permtest": run_permtest,
    "shap": run_shap,
    "cluster": run_cluster,
    "prepost": run_prepost,
    "windows": run_windows,
    "siamese": run_siamese,
}


def run_study_one(cfg):
    for stage in ("dataset", "train", "permtest", "shap", "cluster"):
        STAGES[stage](cfg)


def run_study_two(cfg):
    for stage in ("prepost", "windows", "siamese"):
        STAGES[stage](cfg)


def run_all(cfg):
    from .report import build_report

    run_ingest(cfg)
    run_featurize(cfg)
    run_study_one(cfg)
    run_study_two(cfg)
    return build_report(cfg)
