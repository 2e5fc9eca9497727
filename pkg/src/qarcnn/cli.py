"""Command-line interface: ``qarcnn <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from qarcnn.detector import GeneratorParams, load_params, save_params
from qarcnn.embedding import load_word_vectors
from qarcnn.errors import QarError
from qarcnn.ivfadc import build_index, default_nlist, read_index, write_index
from qarcnn.npa import DEFAULT_CANDIDATES, DEFAULT_COOC_RATIO, build_confusion_table
from qarcnn.retrieval import retrieve
from qarcnn.store import read_annotations, read_cooccurrence, read_feature_file, read_queries, read_taxonomy
from qarcnn.synthetic import SyntheticWorldSpec, generate_world
from qarcnn.training import NpaInputs, TrainConfig, build_images, labeled_objects, train

log = logging.getLogger("qarcnn")


def _lexicon(tax, cooc) -> frozenset[str]:
    nouns = set(cooc.total) if cooc is not None else set()
    if tax is not None:
        nouns.update(n for edge in tax.edges for n in edge)
    return frozenset(nouns)


def _valset(args, tax, cooc):
    lexicon = _lexicon(tax, cooc)
    val = build_images(read_feature_file(args.val_features), read_annotations(args.val_annotations))
    return lexicon, labeled_objects(val, lexicon)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -- subcommands --------------------------------------------------------------


def cmd_gen_fixtures(args) -> int:
    fields = {f.name: getattr(args, f.name) for f in dataclasses.fields(SyntheticWorldSpec)}
    world = generate_world(SyntheticWorldSpec(**fields))
    for name, path in world.write(args.out).items():
        print(f"{name}\t{path}")
    return 0


def cmd_train(args) -> int:
    words = load_word_vectors(args.word_vectors)
    images = build_images(read_feature_file(args.features), read_annotations(args.annotations))
    npa = None
    if args.npa:
        missing = [f for f in ("taxonomy", "cooc", "val_features", "val_annotations") if getattr(args, f) is None]
        if missing:
            raise QarError("--npa requires " + ", ".join("--" + m.replace("_", "-") for m in missing))
        tax = read_taxonomy(args.taxonomy)
        cooc = read_cooccurrence(*args.cooc)
        lexicon, valset = _valset(args, tax, cooc)
        npa = NpaInputs(valset, lexicon, tax, cooc, args.candidates, args.cooc_ratio)
    config = TrainConfig(
        learning_rate=args.lr,
        iterations=args.iters,
        seed=args.seed,
        npa_enabled=args.npa,
        npa_negatives_per_phrase=args.npa_negatives,
        confusion_refresh_interval=args.refresh,
        confusion_min_frequency=args.min_freq,
        lr_milestones=tuple(args.lr_milestones),
        lr_gamma=args.lr_gamma,
    )
    if args.init is not None:
        params = load_params(args.init)
    else:
        params = GeneratorParams.initialize(words.dim, images[0].features.shape[1], args.hidden, seed=args.seed)
    result = train(params, images, words, config, npa)
    save_params(result.params, args.out)
    if result.table is not None:
        result.table.save(Path(args.out).with_suffix(".confusion.json"))
    tail = result.losses[-min(100, len(result.losses)):]
    mean = sum(tail) / len(tail) if tail else float("nan")
    print(f"iterations\t{len(result.losses)}\nfinal_loss\t{mean:.6f}\ntable_builds\t{len(result.table_builds)}")
    return 0


def cmd_build_confusion(args) -> int:
    params = load_params(args.params)
    words = load_word_vectors(args.word_vectors)
    tax = read_taxonomy(args.taxonomy) if args.taxonomy else None
    cooc = read_cooccurrence(*args.cooc) if args.cooc else None
    lexicon, valset = _valset(args, tax, cooc)
    categories = sorted(set(valset.labels) & set(words.index))
    table = build_confusion_table(params, words, valset, categories, tax, cooc, args.candidates, args.cooc_ratio)
    table.save(args.out)
    print(f"categories\t{len(table)}")
    return 0


def cmd_build_index(args) -> int:
    features = read_feature_file(args.features)
    nlist = args.nlist or default_nlist(len(features))
    index = build_index(
        features, nlist, m=args.m, ksub=args.ksub, iters=args.iters, seed=args.seed,
        max_points_per_centroid=args.max_points_per_centroid,
    )
    write_index(args.out, index)
    print(f"ntotal\t{index.ntotal}\nnlist\t{index.nlist}\nbytes\t{index.layout_size()}")
    return 0


def cmd_query(args) -> int:
    if args.index is None and args.exact is None:
        raise QarError("query needs --index or --exact")
    params = load_params(args.params)
    words = load_word_vectors(args.word_vectors)
    index = read_index(args.index) if args.index else None
    exact = read_feature_file(args.exact) if args.exact else None
    results = retrieve(index, params, words, args.text, topk=args.topk, nprobe=args.nprobe, exact_features=exact)
    for rank, r in enumerate(results, 1):
        print(r.to_json(rank))
    return 0


def _write_query_table(path: Path, report: dict) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["query", "positives", "ap", "pr@10", "pr@100", "false_alarms"])
        for q, e in report["queries"].items():
            w.writerow([q, e["positives"], e.get("ap"), e.get("pr@10"), e.get("pr@100"),
                        sum(e["false_alarms"].values())])


def cmd_eval(args) -> int:
    from qarcnn.evaluation import evaluate
    from qarcnn import plotting

    params = load_params(args.params)
    words = load_word_vectors(args.word_vectors)
    features = read_feature_file(args.features) if args.features else None
    index = read_index(args.index) if args.index else None
    report = evaluate(
        params, words, read_annotations(args.annotations), read_queries(args.queries),
        features=features, index=index, nprobe=args.nprobe, iou_threshold=args.iou, depth=args.depth,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report)
    _write_query_table(out / "queries.tsv", report)
    if not args.no_figures:
        plotting.plot_query_ap(report, out / "query_ap.png")
        plotting.plot_localization(report, out / "localization.png")
    m = report["map"]
    print(f"map\t{'nan' if m is None else f'{m:.6f}'}")
    for t, v in report["localization"].items():
        print(f"localization@{t}\t{v:.6f}")
    return 0


def cmd_experiment(args) -> int:
    from qarcnn import plotting
    from qarcnn.experiment import ExperimentConfig, compare_npa

    cfg = ExperimentConfig(iterations=args.iters, learning_rate=args.lr, hidden_dim=args.hidden)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        res = compare_npa(SyntheticWorldSpec(seed=seed), cfg)
        summary = res.summary()
        sub = out / f"seed{seed}"
        _write_json(sub / "baseline.json", res.baseline)
        _write_json(sub / "npa.json", res.npa)
        _write_json(sub / "summary.json", summary)
        plotting.plot_ap_gain(res.baseline, res.npa, sub / "ap_gain.png")
        plotting.plot_false_alarms(
            summary["sibling_false_alarms_baseline"], summary["sibling_false_alarms_npa"],
            sub / "sibling_false_alarms.png", title="same-supercluster false alarms",
        )
        plotting.plot_localization(res.npa, sub / "localization.png")
        rows.append([
            seed, summary["map_baseline"], summary["map_npa"], summary["relative_gain"],
            summary["fraction_queries_fewer_sibling_false_alarms"],
            res.npa["localization_no_regression"]["0.8"], res.npa["localization"]["0.8"],
        ])
    header = ["seed", "map_baseline", "map_npa", "relative_gain", "fewer_sibling_fa", "loc0.8_plain", "loc0.8_regressed"]
    with (out / "summary.tsv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    print("\t".join(header))
    for row in rows:
        print("\t".join(str(v) if isinstance(v, int) else f"{v:.4f}" for v in row))
    return 0


# -- parser -------------------------------------------------------------------


def _spec_flags(p: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(SyntheticWorldSpec):
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=type(f.default), default=f.default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qarcnn", description="Query-adaptive region retrieval toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-fixtures", help="write a synthetic confusable-category world")
    p.add_argument("--out", required=True)
    _spec_flags(p)
    p.set_defaults(func=cmd_gen_fixtures)

    p = sub.add_parser("train", help="train a detector generator")
    p.add_argument("--features", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--word-vectors", required=True)
    p.add_argument("--npa", action="store_true", help="enable negative phrase augmentation")
    p.add_argument("--taxonomy")
    p.add_argument("--cooc", nargs=2, metavar=("TOTALS", "PAIRS"))
    p.add_argument("--val-features")
    p.add_argument("--val-annotations")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--lr-milestones", type=int, nargs="*", default=[])
    p.add_argument("--lr-gamma", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--init", help="start from these parameters instead of a seeded init")
    p.add_argument("--refresh", type=int, default=10000, help="confusion table refresh interval")
    p.add_argument("--min-freq", type=int, default=50)
    p.add_argument("--npa-negatives", type=int, default=1)
    p.add_argument("--candidates", type=int, default=DEFAULT_CANDIDATES)
    p.add_argument("--cooc-ratio", type=float, default=DEFAULT_COOC_RATIO)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-confusion", help="mine a confusion table from a trained model")
    p.add_argument("--params", required=True)
    p.add_argument("--word-vectors", required=True)
    p.add_argument("--val-features", required=True)
    p.add_argument("--val-annotations", required=True)
    p.add_argument("--taxonomy")
    p.add_argument("--cooc", nargs=2, metavar=("TOTALS", "PAIRS"))
    p.add_argument("--candidates", type=int, default=DEFAULT_CANDIDATES)
    p.add_argument("--cooc-ratio", type=float, default=DEFAULT_COOC_RATIO)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_confusion)

    p = sub.add_parser("build-index", help="build an IVFADC index over a feature file")
    p.add_argument("--features", required=True)
    p.add_argument("--nlist", type=int, default=None, help="default: about sqrt(n)")
    p.add_argument("--m", type=int, default=8)
    p.add_argument("--ksub", type=int, default=256)
    p.add_argument("--iters", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-points-per-centroid", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("query", help="retrieve regions for a text query (JSON lines on stdout)")
    p.add_argument("--index")
    p.add_argument("--params", required=True)
    p.add_argument("--word-vectors", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--topk", type=int, default=100)
    p.add_argument("--nprobe", type=int, default=1)
    p.add_argument("--exact", metavar="FEATURES", help="scan this feature file exactly instead of the index")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="evaluate retrieval and localization; writes report and figures")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--index")
    src.add_argument("--features")
    p.add_argument("--params", required=True)
    p.add_argument("--word-vectors", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--nprobe", type=int, default=1)
    p.add_argument("--depth", type=int, default=None, help="ranking depth (default: all regions)")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="compare training with and without NPA on synthetic worlds")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--iters", type=int, default=6000)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # any failure becomes a one-line diagnostic
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"qarcnn {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
