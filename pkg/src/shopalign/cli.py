"""Command-line entry point: ``shopalign <command> ...``.

Exit codes: 0 success, 2 usage error, 3 invalid input, 4 file error,
5 training diverged, 6 pipeline stage failed.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import align, corpus, embed, evaluate, pipeline, synth, translation, typeahead
from .errors import ShopAlignError, ValidationError

IO_EXIT = 4


def _manifest(args, **values) -> pipeline.RunManifest:
    base = {"out_dir": args.out_dir, "seed": str(args.seed), "deterministic": str(args.deterministic).lower()}
    base.update({k: str(v) for k, v in values.items() if v is not None})
    return pipeline.RunManifest(base)


def _write_lines(path, lines) -> None:
    out = sys.stdout if path in (None, "-") else open(path, "w", encoding="utf-8", newline="\n")
    try:
        for line in lines:
            out.write(line + "\n")
    finally:
        if out is not sys.stdout:
            out.close()


def _print_report(rep: evaluate.EvalReport) -> None:
    agg = rep.aggregates()
    print("\t".join(f"{k}={v:.5f}" if isinstance(v, float) else f"{k}={v}" for k, v in agg.items()))


# -- synth / corpus / embed ---------------------------------------------------------

def cmd_synth_generate(args) -> None:
    m = _manifest(args, **{"synth.preset": args.preset, "synth.cross_train": args.cross_train,
                           "synth.cross_test": args.cross_test, "stages": "synth"})
    pipeline.run_stage(m, "synth", force=True)
    print(f"wrote {m.out_dir / 'synth'}")


def cmd_corpus_stats(args) -> None:
    parsed = corpus.read_events(args.events, tolerance=args.tolerance)
    sessions, summary = corpus.sessionize(parsed.events, min_length=args.min_length)
    s = corpus.stats(sessions)
    row = {**s.as_row(), "malformed": parsed.malformed_count, "bot_filtered": summary.bot_filtered,
           "too_short": summary.too_short}
    print("\t".join(row))
    print("\t".join(str(v) for v in row.values()))


def cmd_corpus_build(args) -> None:
    parsed = corpus.read_events(args.events, tolerance=args.tolerance)
    sessions, _ = corpus.sessionize(parsed.events, min_length=args.min_length)
    corpus.write_sessions(args.output, sessions)
    print(f"{len(sessions)} sessions -> {args.output}")


def cmd_embed_train(args) -> None:
    sessions = corpus.read_sessions(args.sessions)
    cfg = embed.TrainConfig(dim=args.dim, window=args.window, epochs=args.epochs, min_count=args.min_count,
                            ns_exponent=args.ns_exponent, seed=args.seed,
                            workers=1 if args.deterministic else args.workers)
    table = embed.train(sessions, cfg)
    embed.save_table(args.output, table)
    print(f"{len(table)} products x {table.dim} -> {args.output}")


# -- align ------------------------------------------------------------------------

def cmd_align(args) -> None:
    src, tgt = embed.load_table(args.source), embed.load_table(args.target)
    method = args.method.upper()
    if method == "IM":
        cat_a, cat_b = corpus.read_catalog(args.catalog_a), corpus.read_catalog(args.catalog_b)
        mapping = align.im_align(cat_a, cat_b, src, tgt, pca_dim=args.pca_dim, clusters=args.clusters,
                                 max_iters=args.max_iters, seed=args.seed)
    elif method == "NM":
        mapping = align.nm_align(src, tgt, max_iters=args.max_iters)
    elif method == "AM":
        cat_a, cat_b = corpus.read_catalog(args.catalog_a), corpus.read_catalog(args.catalog_b)
        mapping = align.centroid_align(cat_a.activity_of(), cat_b.activity_of(), src, tgt,
                                       n_per_category=args.per_category, seed=args.seed, ridge=args.ridge)
    else:
        cross = pipeline.read_cross(args.cross_a, args.cross_b)
        if method == "UM":
            mapping = align.pair_regression_align(cross, src, tgt, ridge=args.ridge)
        else:
            cfg = translation.TMConfig(hidden=args.hidden, epochs=args.epochs, seed=args.seed)
            model = translation.tm_train(cross, src, tgt, cfg)
            translation.save_model(args.output, model)
            print(f"final loss {model.loss_history[-1]:.4f} -> {args.output}")
            return
    align.write_map(args.output, mapping)
    print(f"{method} map {mapping.d_source}x{mapping.d_target} -> {args.output}")


# -- eval -------------------------------------------------------------------------

def cmd_eval_nep(args) -> None:
    rep = evaluate.nep_within_shop(corpus.read_sessions(args.sessions), embed.load_table(args.embeddings), args.k,
                                   exclude_seen=args.exclude_seen)
    if args.output:
        evaluate.write_report(args.output, [rep])
    _print_report(rep)


def _predictor(args, src, tgt):
    if args.map:
        mapping = align.read_map(args.map)
        return evaluate.MapPredictor(args.name or mapping.method, mapping, src, tgt)
    if args.model:
        return evaluate.TranslationPredictor(translation.load_model(args.model), args.name or "TM", args.tm_steps)
    if args.popularity:
        return evaluate.PopularityPredictor(evaluate.popularity_baseline(corpus.read_sessions(args.popularity)))
    raise ValidationError("give one of --map, --model or --popularity")


def cmd_eval_cross(args) -> None:
    src, tgt = embed.load_table(args.source), embed.load_table(args.target)
    cross = pipeline.read_cross(args.cross_a, args.cross_b)
    fip, aip = evaluate.cross_shop_eval(cross, _predictor(args, src, tgt), args.k, target_table=tgt)
    if args.output:
        evaluate.write_report(args.output, [fip, aip])
    _print_report(fip)
    _print_report(aip)


def cmd_eval_probe(args) -> None:
    table = embed.load_table(args.embeddings)
    act = corpus.read_catalog(args.catalog).activity_of()
    if args.map:
        source = embed.load_table(args.source_embeddings)
        act_src = corpus.read_catalog(args.source_catalog).activity_of()
        mapping = align.read_map(args.map)
        accs = [evaluate.probe_transfer(source, table, mapping, act_src, act, seed=args.seed + r) for r in range(args.runs)]
    else:
        accs = [evaluate.probe_train_eval(table, act, seed=args.seed + r) for r in range(args.runs)]
    for r, a in enumerate(accs):
        print(f"run {r}\t{a:.5f}")
    print(f"mean\t{float(np.mean(accs)):.5f}\tchance\t{1.0 / len(set(act.values())):.5f}")


def cmd_eval_project(args) -> None:
    table = embed.load_table(args.embeddings)
    labels = corpus.read_catalog(args.catalog).activity_of() if args.catalog else None
    products, coords = evaluate.projection_2d(table)
    evaluate.write_projection(args.output, products, coords, labels)
    print(f"{len(products)} points -> {args.output}")


def cmd_eval_errors(args) -> None:
    reports = [r for r in evaluate.read_report(args.report) if r.task == args.task]
    if not reports:
        raise ValidationError(f"no {args.task} report in {args.report}")
    table = embed.load_table(args.embeddings) if args.embeddings else None
    act = corpus.read_catalog(args.catalog).activity_of() if args.catalog else None
    ea = evaluate.error_analysis(reports[0], table, act)
    print(f"misses {len(ea.misses)}\tmedian {ea.median:.5f}\tmatch_below {pipeline.format_value(ea.match_rate_below)}\t"
          f"match_above {pipeline.format_value(ea.match_rate_above)}")
    _write_lines(args.output, [f"{sid}\t{d!r}\t{p}\t{t}" for sid, d, p, t in ea.misses[:args.limit]])


# -- typeahead --------------------------------------------------------------------

def _sessions_by_id(path) -> dict[str, corpus.Session]:
    return {s.session_id: s for s in corpus.read_sessions(path)}


def cmd_typeahead_train(args) -> None:
    table = embed.load_table(args.embeddings)
    queries = typeahead.read_queries(args.queries, _sessions_by_id(args.sessions))
    cfg = typeahead.LMConfig(hidden=args.hidden, epochs=args.epochs, seed=args.seed)
    model = typeahead.lm_train(queries, lambda s: embed.session_vector(s, table), table.dim, cfg)
    typeahead.save_lm(args.output, model)
    print(f"final loss {model.loss_history[-1]:.4f} -> {args.output}")


def _intent_fn(args):
    if args.intent == "none":
        return None
    target = embed.load_table(args.target)
    if args.intent == "tm":
        return pipeline.tm_intent(translation.load_model(args.tm_model), target)
    source = embed.load_table(args.source)
    mapping = align.read_map(args.map)
    return lambda s: mapping.apply(embed.session_vector(s, source))


def cmd_typeahead_eval(args) -> None:
    counts = typeahead.read_queries(args.train_queries, _sessions_by_id(args.train_sessions)).query_counts()
    test = typeahead.read_queries(args.test_queries, _sessions_by_id(args.source_sessions))
    items = [typeahead.TypeaheadItem(r.session.session_id, r.query, r.session) for r in test]
    if args.intent == "popularity":
        scorer = typeahead.popularity_scorer(counts)
    else:
        scorer = typeahead.lm_scorer(typeahead.load_lm(args.model), _intent_fn(args))
    results = typeahead.typeahead_eval({args.intent: scorer}, items, counts, k=args.k,
                                       seed_lengths=(args.seed_length,), pool_size=args.pool)
    rep = results[(args.intent, args.seed_length)]
    if args.output:
        evaluate.write_report(args.output, [rep])
    _print_report(rep)


# -- run / report -----------------------------------------------------------------

def cmd_run(args) -> None:
    m = pipeline.read_manifest(args.manifest) if args.manifest else pipeline.RunManifest({})
    # global flags override the manifest only when given explicitly
    for key, val in (("out_dir", args.out_dir_given), ("seed", args.seed_given)):
        if val is not None:
            m.values[key] = str(val)
    if args.deterministic:
        m.values["deterministic"] = "true"
    if args.stages:
        m.values["stages"] = args.stages
    m = pipeline.RunManifest(m.values)
    pipeline.run_pipeline(m, force=args.force)
    print(f"stages run: {', '.join(m.ran) or 'none (all up to date)'}")
    report = m.out_dir / "report.txt"
    if report.exists():
        print(report.read_text(encoding="utf-8"), end="")


def cmd_report(args) -> None:
    print(pipeline.render_report(args.run_dir or args.out_dir), end="")


# -- parser -----------------------------------------------------------------------

def _add_cross(p) -> None:
    p.add_argument("--cross-a", required=True, help="source-side sessions of the cross-shop pairs")
    p.add_argument("--cross-b", required=True, help="target-side sessions (same session ids)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shopalign", description="Cross-shop product embedding alignment.")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible runs")
    parser.add_argument("--out-dir", default=None)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthetic two-shop worlds").add_subparsers(dest="action", required=True)
    g = p.add_parser("generate")
    g.add_argument("--preset", default="paper-scale-0.01", choices=sorted(synth.PRESETS))
    g.add_argument("--cross-train", type=int, default=5000)
    g.add_argument("--cross-test", type=int, default=2000)
    g.set_defaults(func=cmd_synth_generate)

    p = sub.add_parser("corpus", help="event logs to sessions").add_subparsers(dest="action", required=True)
    for name, func in (("stats", cmd_corpus_stats), ("build", cmd_corpus_build)):
        c = p.add_parser(name)
        c.add_argument("--events", required=True)
        c.add_argument("--min-length", type=int, default=2)
        c.add_argument("--tolerance", type=float, default=0.01, help="max fraction of malformed lines")
        if name == "build":
            c.add_argument("--output", required=True)
        c.set_defaults(func=func)

    p = sub.add_parser("embed", help="prod2vec training").add_subparsers(dest="action", required=True)
    t = p.add_parser("train")
    t.add_argument("--sessions", required=True)
    t.add_argument("--output", required=True)
    d = embed.TrainConfig()
    t.add_argument("--dim", type=int, default=d.dim)
    t.add_argument("--window", type=int, default=d.window)
    t.add_argument("--epochs", type=int, default=d.epochs)
    t.add_argument("--min-count", type=int, default=d.min_count)
    t.add_argument("--ns-exponent", type=float, default=d.ns_exponent)
    t.add_argument("--workers", type=int, default=1)
    t.set_defaults(func=cmd_embed_train)

    p = sub.add_parser("align", help="fit a cross-shop map").add_subparsers(dest="method", required=True)
    for method in ("im", "nm", "um", "am", "tm"):
        a = p.add_parser(method)
        a.add_argument("--source", required=True, help="Shop A embeddings")
        a.add_argument("--target", required=True, help="Shop B embeddings")
        a.add_argument("--output", required=True)
        if method in ("im", "am"):
            a.add_argument("--catalog-a", required=True)
            a.add_argument("--catalog-b", required=True)
        if method in ("um", "tm"):
            _add_cross(a)
        if method == "im":
            a.add_argument("--pca-dim", type=int, default=20)
            a.add_argument("--clusters", type=int, default=50)
        if method in ("im", "nm"):
            a.add_argument("--max-iters", type=int, default=50)
        if method in ("um", "am"):
            a.add_argument("--ridge", type=float, default=1e-3)
        if method == "am":
            a.add_argument("--per-category", type=int, default=20)
        if method == "tm":
            a.add_argument("--hidden", type=int, default=translation.TMConfig.hidden)
            a.add_argument("--epochs", type=int, default=translation.TMConfig.epochs)
        a.set_defaults(func=cmd_align)

    p = sub.add_parser("eval", help="benchmarks and probes").add_subparsers(dest="action", required=True)
    e = p.add_parser("nep", help="within-shop next-event prediction")
    e.add_argument("--sessions", required=True)
    e.add_argument("--embeddings", required=True)
    e.add_argument("--k", type=int, default=10)
    e.add_argument("--exclude-seen", action="store_true")
    e.add_argument("--output")
    e.set_defaults(func=cmd_eval_nep)
    e = p.add_parser("cross", help="first-item and any-item prediction")
    e.add_argument("--source", required=True)
    e.add_argument("--target", required=True)
    _add_cross(e)
    e.add_argument("--map")
    e.add_argument("--model", help="translation model (.npz)")
    e.add_argument("--tm-steps", type=int, default=1, help="decoder steps pooled for the any-item ranking")
    e.add_argument("--popularity", help="target-shop sessions for the popularity baseline")
    e.add_argument("--name")
    e.add_argument("--k", type=int, default=10)
    e.add_argument("--output")
    e.set_defaults(func=cmd_eval_cross)
    e = p.add_parser("probe", help="activity probe, optionally transferred through a map")
    e.add_argument("--embeddings", required=True)
    e.add_argument("--catalog", required=True)
    e.add_argument("--map")
    e.add_argument("--source-embeddings")
    e.add_argument("--source-catalog")
    e.add_argument("--runs", type=int, default=5)
    e.set_defaults(func=cmd_eval_probe)
    e = p.add_parser("project", help="2-D PCA projection")
    e.add_argument("--embeddings", required=True)
    e.add_argument("--catalog")
    e.add_argument("--output", required=True)
    e.set_defaults(func=cmd_eval_project)
    e = p.add_parser("errors", help="misses ordered by embedding distance")
    e.add_argument("--report", required=True)
    e.add_argument("--task", default="FIP")
    e.add_argument("--embeddings")
    e.add_argument("--catalog")
    e.add_argument("--limit", type=int, default=20)
    e.add_argument("--output")
    e.set_defaults(func=cmd_eval_errors)

    p = sub.add_parser("typeahead", help="intent-conditioned query completion").add_subparsers(dest="action", required=True)
    t = p.add_parser("train")
    t.add_argument("--queries", required=True)
    t.add_argument("--sessions", required=True, help="sessions the queries refer to")
    t.add_argument("--embeddings", required=True, help="embeddings of the queries' shop")
    t.add_argument("--hidden", type=int, default=typeahead.LMConfig.hidden)
    t.add_argument("--epochs", type=int, default=typeahead.LMConfig.epochs)
    t.add_argument("--output", required=True)
    t.set_defaults(func=cmd_typeahead_train)
    t = p.add_parser("eval")
    t.add_argument("--model", help="trained language model (.npz)")
    t.add_argument("--train-queries", required=True)
    t.add_argument("--train-sessions", required=True)
    t.add_argument("--test-queries", required=True)
    t.add_argument("--source-sessions", required=True, help="Shop A sessions the test queries refer to")
    t.add_argument("--intent", default="none", choices=["none", "map", "tm", "popularity"])
    t.add_argument("--map")
    t.add_argument("--tm-model")
    t.add_argument("--source")
    t.add_argument("--target")
    t.add_argument("--seed-length", type=int, default=0, choices=[0, 1])
    t.add_argument("--k", type=int, default=5)
    t.add_argument("--pool", type=int, default=35)
    t.add_argument("--output")
    t.set_defaults(func=cmd_typeahead_eval)

    r = sub.add_parser("run", help="run the full pipeline from a manifest")
    r.add_argument("manifest", nargs="?")
    r.add_argument("--stages", help="comma-separated subset of " + ",".join(pipeline.STAGES))
    r.add_argument("--force", action="store_true", help="re-run stages even when up to date")
    r.set_defaults(func=cmd_run)

    r = sub.add_parser("report", help="render comparison tables of a finished run")
    r.add_argument("run_dir", nargs="?")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.out_dir_given, args.seed_given = args.out_dir, args.seed
    args.out_dir = args.out_dir or "run"
    args.seed = 0 if args.seed is None else args.seed
    try:
        args.func(args)
    except ShopAlignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IO_EXIT
    return 0


if __name__ == "__main__":
    sys.exit(main())
