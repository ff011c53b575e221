"""End-to-end runs: synth -> corpus -> embed -> align -> eval -> typeahead.

A run is described by a flat ``key = value`` manifest. Each stage writes into
``<out_dir>/<stage>/`` and finishes by writing ``_stage.json`` with the stage's
configuration, the checksums of its inputs and the checksums of its outputs.
A stage is skipped when its marker matches the current configuration, its
inputs and the files on disk, so deleting a stage's outputs re-runs only that
stage (and whatever consumes its changed outputs).
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import align, corpus, embed, evaluate, synth, translation, typeahead
from .errors import ShopAlignError, StageError, ValidationError

log = logging.getLogger(__name__)

STAGES = ("synth", "corpus", "embed", "align", "eval", "typeahead")
DEPENDS = {
    "synth": (),
    "corpus": ("synth",),
    "embed": ("corpus",),
    "align": ("synth", "corpus", "embed"),
    "eval": ("synth", "corpus", "embed", "align"),
    "typeahead": ("synth", "corpus", "embed", "align"),
}
SUPERVISION = {"PM": "Unsupervised", "NM": "Unsupervised", "IM": "Unsupervised",
               "AM": "Semi-supervised", "UM": "Supervised", "TM": "Supervised"}
TYPE_ORDER = ("Unsupervised", "Semi-supervised", "Supervised")

DEFAULTS = {
    "out_dir": "run",
    "seed": "0",
    "deterministic": "true",
    "stages": ",".join(STAGES),
    "synth.preset": "paper-scale-0.01",
    "synth.cross_train": "5000",
    "synth.cross_test": "2000",
    "corpus.min_length": "2",
    "embed.grid": "window=10,15;epochs=10,30;ns_exponent=-0.5,0.75",
    "embed.grid_sample": "",
    "align.methods": "IM,NM,UM,AM,TM",
    "align.pca_dim": "20",
    "align.clusters": "50",
    "align.ridge": "0.001",
    "align.max_iters": "50",
    "align.am_per_category": "20",
    "eval.k": "10",
    "eval.probe_runs": "5",
    "eval.tm_steps": "1",
    "typeahead.train_queries": "6000",
    "typeahead.k": "5",
    "typeahead.pool": "35",
    "typeahead.tm_top": "10",
}
PREFIXES = {"synth.": synth.SynthConfig, "embed.": embed.TrainConfig, "tm.": translation.TMConfig,
            "lm.": typeahead.LMConfig}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _coerce(cls, name: str, raw: str):
    kind = {f.name: f.type for f in fields(cls)}[name]
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if "bool" in kind:
            return raw.lower() in ("1", "true", "yes", "on")
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
    except ValueError:
        raise ValidationError(f"bad value {raw!r} for {name}") from None
    return raw


@dataclass
class RunManifest:
    values: dict[str, str] = field(default_factory=dict)
    checksums: dict[str, dict[str, str]] = field(default_factory=dict)
    ran: list[str] = field(default_factory=list)   # stages executed by the last run_pipeline call

    def __post_init__(self):
        for key in self.values:
            if key in DEFAULTS:
                continue
            prefix = next((p for p in PREFIXES if key.startswith(p)), None)
            if prefix is None or key[len(prefix):] not in {f.name for f in fields(PREFIXES[prefix])}:
                raise ValidationError(f"unknown manifest key {key!r}")
        for s in self.stages:
            if s not in STAGES:
                raise ValidationError(f"unknown stage {s!r}")

    def get(self, key: str) -> str:
        return self.values.get(key, DEFAULTS.get(key, ""))

    def int(self, key: str) -> int:
        try:
            return int(self.get(key))
        except ValueError:
            raise ValidationError(f"{key} must be an integer, got {self.get(key)!r}") from None

    def float(self, key: str) -> float:
        try:
            return float(self.get(key))
        except ValueError:
            raise ValidationError(f"{key} must be a number, got {self.get(key)!r}") from None

    @property
    def out_dir(self) -> Path:
        return Path(self.get("out_dir"))

    @property
    def seed(self) -> int:
        return self.int("seed")

    @property
    def deterministic(self) -> bool:
        return self.get("deterministic").lower() in ("1", "true", "yes", "on")

    @property
    def stages(self) -> list[str]:
        return [s.strip() for s in self.get("stages").split(",") if s.strip()]

    def overrides(self, prefix: str) -> dict:
        cls = PREFIXES[prefix]
        return {k[len(prefix):]: _coerce(cls, k[len(prefix):], v) for k, v in self.values.items()
                if k.startswith(prefix) and k[len(prefix):] in {f.name for f in fields(cls)}}

    def synth_config(self) -> synth.SynthConfig:
        preset = self.get("synth.preset")
        if preset not in synth.PRESETS:
            raise ValidationError(f"unknown preset {preset!r}; choose from {sorted(synth.PRESETS)}")
        return synth.PRESETS[preset].replace(seed=self.seed, **self.overrides("synth."))

    def train_config(self) -> embed.TrainConfig:
        cfg = embed.TrainConfig(seed=self.seed + 1, **self.overrides("embed."))
        return cfg.replace(workers=1) if self.deterministic else cfg

    def grid(self) -> dict[str, list]:
        spec = self.get("embed.grid").strip()
        out: dict[str, list] = {}
        for part in filter(None, (p.strip() for p in spec.split(";"))):
            name, _, values = part.partition("=")
            name = name.strip()
            if name not in {f.name for f in fields(embed.TrainConfig)}:
                raise ValidationError(f"unknown grid parameter {name!r}")
            out[name] = [_coerce(embed.TrainConfig, name, v.strip()) for v in values.split(",")]
        return out

    def stage_config(self, stage: str) -> dict:
        keys = {k: self.get(k) for k in DEFAULTS if k.startswith(stage + ".")}
        extra = {k: v for k, v in self.values.items() if any(k.startswith(p) for p in PREFIXES)}
        return {"seed": self.get("seed"), "deterministic": self.get("deterministic"), **keys, **extra}


def parse_manifest(text: str) -> RunManifest:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValidationError(f"manifest line {lineno}: expected key = value")
        values[key.strip()] = value.strip()
    return RunManifest(values)


def read_manifest(path) -> RunManifest:
    with open(path, encoding="utf-8") as fh:
        return parse_manifest(fh.read())


def write_manifest(path, manifest: RunManifest) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k in sorted(manifest.values):
            fh.write(f"{k} = {manifest.values[k]}\n")
        for stage, files in sorted(manifest.checksums.items()):
            for name, digest in sorted(files.items()):
                fh.write(f"# checksum {stage}/{name} {digest}\n")


@contextlib.contextmanager
def deterministic_threads(enabled: bool):
    """Single-threaded BLAS while enabled, so float reductions are reproducible."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


# -- stage bodies -----------------------------------------------------------------

class Stage:
    def __init__(self, manifest: RunManifest, name: str):
        self.m, self.name = manifest, name
        self.dir = manifest.out_dir / name

    def path(self, stage: str, filename: str) -> Path:
        return self.m.out_dir / stage / filename


def _write_cross(path_a, path_b, cross) -> None:
    corpus.write_sessions(path_a, [c.source for c in cross])
    corpus.write_sessions(path_b, [c.target for c in cross])


def read_cross(path_a, path_b) -> list[tuple[corpus.Session, corpus.Session]]:
    src = corpus.read_sessions(path_a)
    tgt = {s.session_id: s for s in corpus.read_sessions(path_b)}
    return [(s, tgt[s.session_id]) for s in src if s.session_id in tgt]


def _write_truth(path, truth: synth.GroundTruth) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("source\ttarget\tactivity\n")
        for a, b in sorted(truth.correspondence.items()):
            fh.write(f"{a}\t{b}\t{truth.activity_a[a]}\n")


def read_truth(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        next(fh)
        return dict(line.rstrip("\n").split("\t")[:2] for line in fh if line.strip())


def stage_synth(st: Stage) -> None:
    cfg = st.m.synth_config()
    world = synth.generate_shops(cfg)
    for shop, sessions, catalog, offset in (("a", world.sessions_a, world.catalog_a, 0),
                                            ("b", world.sessions_b, world.catalog_b, 1)):
        corpus.write_events(st.dir / f"events_{shop}.tsv", synth.sessions_to_events(sessions, seed=cfg.seed * 2 + offset))
        corpus.write_catalog(st.dir / f"catalog_{shop}.tsv", catalog)
        with open(st.dir / f"popularity_{shop}.tsv", "w", encoding="utf-8", newline="\n") as fh:
            pops = world.truth.popularity_a if shop == "a" else world.truth.popularity_b
            for p in sorted(pops):
                fh.write(f"{p}\t{pops[p]}\n")
    _write_truth(st.dir / "truth.tsv", world.truth)
    n_train, n_test = st.m.int("synth.cross_train"), st.m.int("synth.cross_test")
    cross = synth.generate_cross_sessions(world, n_train + n_test, seed=cfg.seed + 1)
    _write_cross(st.dir / "cross_train_a.tsv", st.dir / "cross_train_b.tsv", cross[:n_train])
    _write_cross(st.dir / "cross_test_a.tsv", st.dir / "cross_test_b.tsv", cross[n_train:])


def stage_corpus(st: Stage) -> None:
    rows = []
    for shop in ("a", "b"):
        parsed = corpus.read_events(st.path("synth", f"events_{shop}.tsv"))
        sessions, summary = corpus.sessionize(parsed.events, min_length=st.m.int("corpus.min_length"))
        corpus.write_sessions(st.dir / f"sessions_{shop}.tsv", sessions)
        s = corpus.stats(sessions)
        rows.append((shop.upper(), s, summary, parsed.malformed_count))
    with open(st.dir / "stats.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("shop\tsessions\tevents\tskus\tp25\tp50\tp75\tbot_filtered\ttoo_short\tmalformed\n")
        for shop, s, summ, bad in rows:
            p = s.percentiles
            fh.write(f"{shop}\t{s.sessions}\t{s.events}\t{s.skus}\t{p[0]}\t{p[1]}\t{p[2]}\t"
                     f"{summ.bot_filtered}\t{summ.too_short}\t{bad}\n")


GRID_FIELDS = ("min_count", "window", "epochs", "ns_exponent")


def stage_embed(st: Stage) -> None:
    base = st.m.train_config()
    grid = st.m.grid() or {"window": [base.window]}
    sample = st.m.get("embed.grid_sample")
    for shop in ("a", "b"):
        sessions = corpus.read_sessions(st.path("corpus", f"sessions_{shop}.tsv"))
        train_s, valid_s, _ = evaluate.split_sessions(sessions)
        results = evaluate.grid_search(train_s, valid_s, grid, base=base, sample=int(sample) if sample else None,
                                       seed=st.m.seed)
        with open(st.dir / f"grid_{shop}.tsv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\t".join(GRID_FIELDS) + "\tndcg\thit\n")
            for r in results:
                fh.write("\t".join(str(getattr(r.config, f)) for f in GRID_FIELDS) + f"\t{r.ndcg!r}\t{r.hit!r}\n")
        # refit on everything but the test split, which stays held out for NEP
        fit_s = train_s + valid_s
        for tag, result in (("best", results[0]), ("worst", results[-1])):
            table = embed.train(fit_s, result.config)
            embed.save_table(st.dir / f"{shop}_{tag}.vec", table)
            with open(st.dir / f"{shop}_{tag}.json", "w", encoding="utf-8") as fh:
                json.dump(result.config.as_dict(), fh, sort_keys=True)


def _tables(st: Stage, tag: str = "best"):
    return (embed.load_table(st.path("embed", f"a_{tag}.vec")), embed.load_table(st.path("embed", f"b_{tag}.vec")))


def fit_maps(st: Stage, A, B, methods, cat_a, cat_b, cross_train) -> dict[str, align.AlignmentMap]:
    maps = {}
    for method in methods:
        if method == "IM":
            maps["IM"] = align.im_align(cat_a, cat_b, A, B, pca_dim=st.m.int("align.pca_dim"),
                                        clusters=st.m.int("align.clusters"), max_iters=st.m.int("align.max_iters"),
                                        seed=st.m.seed)
        elif method == "NM":
            maps["NM"] = align.nm_align(A, B, max_iters=st.m.int("align.max_iters"))
        elif method == "UM":
            maps["UM"] = align.pair_regression_align(cross_train, A, B, ridge=st.m.float("align.ridge"))
        elif method == "AM":
            maps["AM"] = align.centroid_align(cat_a.activity_of(), cat_b.activity_of(), A, B,
                                              n_per_category=st.m.int("align.am_per_category"),
                                              seed=st.m.seed, ridge=st.m.float("align.ridge"))
        elif method != "TM":
            raise ValidationError(f"unknown alignment method {method!r}")
    return maps


def _methods(m: RunManifest) -> list[str]:
    return [x.strip().upper() for x in m.get("align.methods").split(",") if x.strip()]


def stage_align(st: Stage) -> None:
    A, B = _tables(st)
    cat_a = corpus.read_catalog(st.path("synth", "catalog_a.tsv"))
    cat_b = corpus.read_catalog(st.path("synth", "catalog_b.tsv"))
    cross_train = read_cross(st.path("synth", "cross_train_a.tsv"), st.path("synth", "cross_train_b.tsv"))
    methods = _methods(st.m)
    if "IM" in methods:
        fa, fb = cat_a.subset(A.vocab.products), cat_b.subset(B.vocab.products)
        seed = align.build_feature_seed(fa, fb, d=st.m.int("align.pca_dim"),
                                        k=min(st.m.int("align.clusters"), len(fa)), seed=st.m.seed)
        align.write_seed(st.dir / "seed_im.tsv", seed)
    for name, mapping in fit_maps(st, A, B, methods, cat_a, cat_b, cross_train).items():
        align.write_map(st.dir / f"{name.lower()}.map", mapping)
    if "TM" in methods:
        cfg = translation.TMConfig(seed=st.m.seed, **st.m.overrides("tm."))
        model = translation.tm_train(cross_train, A, B, cfg)
        translation.save_model(st.dir / "tm.npz", model)
    # low-scoring embeddings through the same feature-seeded method, for the ablation row
    if "IM" in methods:
        Aw, Bw = _tables(st, "worst")
        worst = fit_maps(st, Aw, Bw, ["IM"], cat_a, cat_b, cross_train)["IM"]
        align.write_map(st.dir / "im_worst.map", worst)


def _predictors(st: Stage, A, B, sessions_b):
    preds = [evaluate.PopularityPredictor(evaluate.popularity_baseline(sessions_b))]
    for method in _methods(st.m):
        if method == "TM":
            preds.append(evaluate.TranslationPredictor(translation.load_model(st.path("align", "tm.npz")),
                                                      max_steps=st.m.int("eval.tm_steps")))
        else:
            preds.append(evaluate.MapPredictor(method, align.read_map(st.path("align", f"{method.lower()}.map")), A, B,
                                               SUPERVISION[method]))
    return preds


def stage_eval(st: Stage) -> None:
    A, B = _tables(st)
    k = st.m.int("eval.k")
    cat_a = corpus.read_catalog(st.path("synth", "catalog_a.tsv"))
    cat_b = corpus.read_catalog(st.path("synth", "catalog_b.tsv"))
    act_a, act_b = cat_a.activity_of(), cat_b.activity_of()
    sessions_b = corpus.read_sessions(st.path("corpus", "sessions_b.tsv"))
    cross_test = read_cross(st.path("synth", "cross_test_a.tsv"), st.path("synth", "cross_test_b.tsv"))

    # within-shop: held-out test split, best and worst grid configurations
    nep_rows, nep_reports = [], []
    for shop, act in (("a", act_a), ("b", act_b)):
        _, _, test = evaluate.split_sessions(corpus.read_sessions(st.path("corpus", f"sessions_{shop}.tsv")))
        for tag in ("best", "worst"):
            table = embed.load_table(st.path("embed", f"{shop}_{tag}.vec"))
            rep = evaluate.nep_within_shop(test, table, k, method=f"{shop.upper()}-{tag}")
            acc = evaluate.probe_train_eval(table, act, seed=st.m.seed)
            with open(st.path("embed", f"{shop}_{tag}.json"), encoding="utf-8") as fh:
                cfg = json.load(fh)
            nep_rows.append((f"{shop.upper()} - {tag.capitalize()}", cfg, rep.ndcg, rep.hit, acc))
            nep_reports.append(rep)
    evaluate.write_report(st.dir / "nep.jsonl", nep_reports)
    with open(st.dir / "table4.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("model\t" + "\t".join(GRID_FIELDS) + "\tndcg\thit\tprobe_accuracy\n")
        for name, cfg, ndcg, hit, acc in nep_rows:
            fh.write(f"{name}\t" + "\t".join(str(cfg[f]) for f in GRID_FIELDS) + f"\t{ndcg!r}\t{hit!r}\t{acc!r}\n")

    # cross-shop first-item / any-item benchmark
    reports, rows = [], []
    for pred in _predictors(st, A, B, sessions_b):
        fip, aip = evaluate.cross_shop_eval(cross_test, pred, k, target_table=B)
        reports += [fip, aip]
        rows.append((pred.name, SUPERVISION.get(pred.name, pred.supervision.capitalize()), fip.ndcg, aip.ndcg))
        if pred.name == "IM":
            im_fip = fip
    if "IM" in _methods(st.m):
        Aw, Bw = _tables(st, "worst")
        worst = evaluate.MapPredictor("IM-worst", align.read_map(st.path("align", "im_worst.map")), Aw, Bw)
        fip, aip = evaluate.cross_shop_eval(cross_test, worst, k, target_table=Bw)
        reports += [fip, aip]
        rows.append(("IM (low-scoring embeddings)", "Unsupervised", fip.ndcg, aip.ndcg))
    evaluate.write_report(st.dir / "cross.jsonl", reports)
    with open(st.dir / "table5.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("model\ttype\tfip\taip\n")
        for name, kind, f, a in rows:
            if a < f:
                # only possible when the any-item ranking differs from the first-item one (eval.tm_steps > 1)
                log.warning("%s: AIP %.5f is below FIP %.5f", name, a, f)
            fh.write(f"{name}\t{kind}\t{f!r}\t{a!r}\n")

    # qualitative: transfer probe, error analysis, 2-D projection
    with open(st.dir / "probe.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("method\trun\taccuracy\n")
        for method in [x for x in _methods(st.m) if x != "TM"]:
            mapping = align.read_map(st.path("align", f"{method.lower()}.map"))
            for run in range(st.m.int("eval.probe_runs")):
                acc = evaluate.probe_transfer(A, B, mapping, act_a, act_b, seed=st.m.seed * 100 + run)
                fh.write(f"{method}\t{run}\t{acc!r}\n")
    if "IM" in _methods(st.m):
        ea = evaluate.error_analysis(im_fip, B, act_b)
        with open(st.dir / "errors.tsv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# median {ea.median!r} below {ea.below} above {ea.above} "
                     f"match_all {ea.match_rate!r} match_below {ea.match_rate_below!r} match_above {ea.match_rate_above!r}\n")
            fh.write("session\tdistance\tpredicted\ttarget\n")
            for sid, d, p, t in ea.misses:
                fh.write(f"{sid}\t{d!r}\t{p}\t{t}\n")
    for shop, table, act in (("a", A, act_a), ("b", B, act_b)):
        products, coords = evaluate.projection_2d(table)
        evaluate.write_projection(st.dir / f"projection_{shop}.tsv", products, coords, act)


def tm_intent(model: translation.TranslationModel, target: embed.EmbeddingTable, top: int = 10):
    """Probability-weighted mean of target vectors over the first decoding step's top products."""
    def intent(session):
        if not model.encode_ids(session.events):
            raise evaluate.EmptyIntentError("source session has no in-vocabulary event")
        p = translation.decode(model, session.events, 1)[0]
        best = np.argsort(-p, kind="stable")[:top]
        rows = [target.vocab.index[model.target_products[i]] for i in best]
        return (p[best, None] * target.U[rows]).sum(0) / p[best].sum()
    return intent


def stage_typeahead(st: Stage) -> None:
    A, B = _tables(st)
    act_b = corpus.read_catalog(st.path("synth", "catalog_b.tsv")).activity_of()
    sessions_b = corpus.read_sessions(st.path("corpus", "sessions_b.tsv"))
    rng = np.random.default_rng([st.m.seed, 6])
    n = min(st.m.int("typeahead.train_queries"), len(sessions_b))
    picked = [sessions_b[i] for i in np.sort(rng.choice(len(sessions_b), size=n, replace=False))]
    train_q = typeahead.generate_queries(picked, act_b, seed=st.m.seed)
    typeahead.write_queries(st.dir / "queries_b.tsv", train_q)

    cfg = typeahead.LMConfig(seed=st.m.seed, **st.m.overrides("lm."))
    lm = typeahead.lm_train(train_q, lambda s: embed.session_vector(s, B), B.dim, cfg)
    typeahead.save_lm(st.dir / "lm.npz", lm)

    cross_test = read_cross(st.path("synth", "cross_test_a.tsv"), st.path("synth", "cross_test_b.tsv"))
    q_rng = np.random.default_rng([st.m.seed, 7])
    items = [typeahead.TypeaheadItem(src.session_id, typeahead.sample_query(act_b[tgt.events[0]], q_rng), src)
             for src, tgt in cross_test]
    with open(st.dir / "test_queries.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for it in items:
            fh.write(f"{it.query}\t{it.item_id}\tB\n")
    counts = train_q.query_counts()
    scorers = {"PM": typeahead.popularity_scorer(counts), "LM": typeahead.lm_scorer(lm, None)}
    for method in _methods(st.m):
        if method == "TM":
            model = translation.load_model(st.path("align", "tm.npz"))
            scorers["TM"] = typeahead.lm_scorer(lm, tm_intent(model, B, st.m.int("typeahead.tm_top")))
        else:
            mapping = align.read_map(st.path("align", f"{method.lower()}.map"))
            scorers[method] = typeahead.lm_scorer(lm, lambda s, m=mapping: m.apply(embed.session_vector(s, A)))
    results = typeahead.typeahead_eval(scorers, items, counts, k=st.m.int("typeahead.k"),
                                       pool_size=st.m.int("typeahead.pool"))
    evaluate.write_report(st.dir / "typeahead.jsonl", results.values())
    with open(st.dir / "table6.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("model\tsl0\tsl1\n")
        for name in scorers:
            fh.write(f"{name}\t{results[(name, 0)].mrr!r}\t{results[(name, 1)].mrr!r}\n")


STAGE_FUNCS: dict[str, Callable[[Stage], None]] = {
    "synth": stage_synth, "corpus": stage_corpus, "embed": stage_embed,
    "align": stage_align, "eval": stage_eval, "typeahead": stage_typeahead,
}


# -- orchestration -----------------------------------------------------------------

def _outputs(directory: Path) -> dict[str, str]:
    return {p.name: sha256_file(p) for p in sorted(directory.iterdir()) if p.is_file() and p.name != "_stage.json"}


def _marker(directory: Path) -> dict | None:
    path = directory / "_stage.json"
    if not path.exists():
        return None
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _up_to_date(directory: Path, config: dict, inputs: dict) -> bool:
    marker = _marker(directory)
    if marker is None or marker.get("config") != config or marker.get("inputs") != inputs:
        return False
    return all((directory / f).exists() and sha256_file(directory / f) == d for f, d in marker["outputs"].items())


def run_stage(manifest: RunManifest, name: str, force: bool = False) -> tuple[dict[str, str], bool]:
    """Run one stage unless it is up to date; returns (output checksums, whether it ran)."""
    st = Stage(manifest, name)
    inputs = {}
    for dep in DEPENDS[name]:
        marker = _marker(manifest.out_dir / dep)
        if marker is None:
            raise StageError(name, manifest.stage_config(name), FileNotFoundError(f"stage {dep!r} has not been run"))
        inputs[dep] = marker["outputs"]
    config = manifest.stage_config(name)
    if not force and _up_to_date(st.dir, config, inputs):
        return _marker(st.dir)["outputs"], False
    st.dir.mkdir(parents=True, exist_ok=True)
    for old in st.dir.iterdir():
        if old.is_file():
            old.unlink()
    log.info("running stage %s", name)
    try:
        with deterministic_threads(manifest.deterministic):
            STAGE_FUNCS[name](st)
    except ShopAlignError as exc:
        raise StageError(name, config, exc) from exc
    except (OSError, ValueError, FloatingPointError) as exc:
        raise StageError(name, config, exc) from exc
    outputs = _outputs(st.dir)
    with open(st.dir / "_stage.json", "w", encoding="utf-8") as fh:
        json.dump({"stage": name, "config": config, "inputs": inputs, "outputs": outputs}, fh, indent=1, sort_keys=True)
    return outputs, True


def run_pipeline(manifest: RunManifest, force: bool = False) -> RunManifest:
    """Run the manifest's stages in dependency order; returns the manifest with checksums filled in."""
    manifest.out_dir.mkdir(parents=True, exist_ok=True)
    wanted = set(manifest.stages)
    ran = []
    for name in STAGES:
        if name not in wanted:
            continue
        outputs, did_run = run_stage(manifest, name, force)
        manifest.checksums[name] = outputs
        if did_run:
            ran.append(name)
    write_manifest(manifest.out_dir / "manifest.out", manifest)
    if "eval" in wanted or "typeahead" in wanted:
        with open(manifest.out_dir / "report.txt", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(render_report(manifest.out_dir))
    manifest.ran = ran
    return manifest


# -- reports -----------------------------------------------------------------------

def format_value(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "n/a"
    return f"{x:.5f}" if isinstance(x, float) else str(x)


def _num(s: str):
    try:
        v = float(s)
    except ValueError:
        return None
    return None if math.isnan(v) else v


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(r) for r in rows])


def render_method_table(rows: list[tuple[str, str, list]], columns: list[str]) -> str:
    """Method x metric table grouped by supervision type; '*' marks the best value per type and column."""
    order = {t: i for i, t in enumerate(TYPE_ORDER)}
    rows = sorted(rows, key=lambda r: (order.get(r[1], len(order)), -(r[2][0] if r[2] and r[2][0] is not None else -1)))
    best = {}
    for _, kind, vals in rows:
        for j, v in enumerate(vals):
            if v is not None and v > best.get((kind, j), -math.inf):
                best[(kind, j)] = v
    out = []
    for name, kind, vals in rows:
        cells = [(format_value(v) + ("*" if v is not None and v == best.get((kind, j)) else "")) for j, v in enumerate(vals)]
        out.append([name, kind] + cells)
    return _table(["Model", "Type"] + columns, out)


def _read_tsv(path: Path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n").split("\t") for line in fh if line.strip() and not line.startswith("#")][1:]


def render_report(out_dir) -> str:
    out_dir = Path(out_dir)
    parts = []
    t4 = out_dir / "eval" / "table4.tsv"
    if t4.exists():
        rows = [[r[0], *r[1:5], format_value(_num(r[5])), format_value(_num(r[6])), format_value(_num(r[7]))] for r in _read_tsv(t4)]
        parts.append("Within-shop next-event prediction (held-out test split)\n"
                     + _table(["Model", *GRID_FIELDS, "NDCG@10", "H@10", "Probe acc"], rows))
    t5 = out_dir / "eval" / "table5.tsv"
    if t5.exists():
        rows = [(r[0], r[1], [_num(r[2]), _num(r[3])]) for r in _read_tsv(t5)]
        parts.append("Cross-shop prediction, NDCG@10\n" + render_method_table(rows, ["FIP", "AIP"]))
    t6 = out_dir / "typeahead" / "table6.tsv"
    if t6.exists():
        rows = [(r[0], "Unconditioned" if r[0] in ("PM", "LM") else SUPERVISION.get(r[0], ""), [_num(r[1]), _num(r[2])])
                for r in _read_tsv(t6)]
        parts.append("Cross-shop type-ahead, MRR@5\n" + render_method_table(rows, ["SL=0", "SL=1"]))
    if not parts:
        raise ValidationError(f"no reports found under {out_dir}")
    return "\n\n".join(parts) + "\n"
