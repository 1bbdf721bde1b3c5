"""Command line entry point: ``graphveil <command> [<subcommand>] ...``.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from graphveil import adversary as adv
from graphveil.corpus import FAMILIES, Corpus, CorpusSpec, extract_subgraph_pool, generate_corpus, load_corpus, save_corpus
from graphveil.density import DensityModel, fit_density
from graphveil.errors import GraphVeilError
from graphveil.graph import OpGraph, load_graph, save_graph
from graphveil.optim import ALL_RULES, optimize
from graphveil.partition import PartitionConfig, extract_subgraphs, partition_balanced
from graphveil.pipeline import (
    POPULATE_ERRORS,
    Manifest,
    ObfuscatedBundle,
    ObfuscationModels,
    deobfuscate,
    make_sentinels,
    obfuscate_detailed,
    search_space_size,
)
from graphveil.populate import EnumConfig, NGramModel, fit_ngram, generate_ruleset, populate
from graphveil.refexec import check_equivalence
from graphveil.topo import TopoModel, TopologyPool, induce_orientation, sample_topologies, train_topo_model

log = logging.getLogger("graphveil")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# argument types


def positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def int_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text}") from None
    if not 0 < lo <= hi:
        raise argparse.ArgumentTypeError(f"expected 0 < LO <= HI, got {text}")
    return lo, hi


def beta_vector(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected four comma-separated widths, got {text}") from None
    if len(vals) != 4 or min(vals) <= 0:
        raise argparse.ArgumentTypeError(f"expected four positive widths, got {text}")
    return vals


def rule_list(text: str) -> list[str]:
    rules = [r for r in text.split(",") if r]
    unknown = [r for r in rules if r not in ALL_RULES]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown rules {unknown}; known: {','.join(ALL_RULES)}")
    return rules


# --------------------------------------------------------------------------
# helpers


def write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


NON_GRAPH_FILES = ("bundle.json", "corpus.json", "binding.json")


def load_graph_dir(path) -> list[OpGraph]:
    path = Path(path)
    if not path.is_dir():
        raise GraphVeilError(f"{path} is not a directory")
    return [load_graph(p) for p in sorted(path.rglob("*.json")) if p.name not in NON_GRAPH_FILES]


def _emit(args, summary: dict, human: str) -> None:
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        print(human)


# --------------------------------------------------------------------------
# commands


def cmd_corpus_gen(args) -> None:
    spec = CorpusSpec(tuple(args.families), args.models_per_family, args.depth_range, args.seed)
    c = generate_corpus(spec)
    save_corpus(c, args.out)
    sizes = [len(g.nodes) for _, g in c.graphs]
    _emit(args, {"models": c.names(), "nodes": sizes}, f"wrote {len(sizes)} models to {args.out}")


def cmd_topo_train(args) -> None:
    c = load_corpus(args.corpus)
    pool = extract_subgraph_pool(c, args.subgraph_size, args.seed)
    model = train_topo_model([e.graph for e in pool], args.M)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    if args.ngram_out:
        fit_ngram(c).save(args.ngram_out)
    _emit(args, {"subgraphs": len(pool), "M": args.M}, f"trained on {len(pool)} subgraphs, wrote {args.out}")


def cmd_topo_sample(args) -> None:
    model = TopoModel.load(args.model)
    pool = sample_topologies(model, args.count, args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    pool.save(args.out)
    if args.density_out:
        fit_density(pool.graphs, min_size=1).save(args.density_out)
    _emit(args, {"count": len(pool)}, f"wrote {len(pool)} topologies to {args.out}")


def cmd_populate(args) -> None:
    pool = TopologyPool.load(args.topos)
    ngram = NGramModel.load(args.ngram)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    made = 0
    for i, u in enumerate(pool.graphs):
        if made == args.k:
            break
        cfg = EnumConfig(args.pct, args.max_solns, args.seed + i)
        try:
            g = populate(generate_ruleset(induce_orientation(u)), ngram, cfg, 1)[0]
        except POPULATE_ERRORS:
            continue
        save_graph(g, out / f"sentinel_{made}.json")
        made += 1
    if made < args.k:
        raise GraphVeilError(f"only {made} of {args.k} topologies could be populated")
    _emit(args, {"sentinels": made}, f"wrote {made} sentinels to {out}")


def cmd_partition(args) -> None:
    g = load_graph(args.input)
    p = partition_balanced(g, PartitionConfig(args.n, args.trials, args.seed))
    subs, binding = extract_subgraphs(g, p)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(subs):
        save_graph(s, out / f"part_{i}.json")
    write_json(out / "binding.json", binding.to_json())
    _emit(args, {"part_sizes": list(p.part_sizes), "size_std": p.size_std},
          f"{args.n} parts of sizes {list(p.part_sizes)}")


def _models_from_args(args) -> ObfuscationModels:
    ngram = NGramModel.load(args.ngram)
    topo = TopoModel.load(args.topo) if args.topo else None
    pool = TopologyPool.load(args.pool) if args.pool else None
    density = DensityModel.load(args.density) if args.density else None
    if topo is None and pool is None:
        raise UsageError("obfuscate needs --topo or --pool")
    return ObfuscationModels(ngram, topo, density, pool, args.beta, args.pool_size)


def cmd_obfuscate(args) -> None:
    g = load_graph(args.input)
    r = obfuscate_detailed(g, args.n, args.k, _models_from_args(args), args.seed)
    r.bundle.save(args.bundle)
    Path(args.manifest).parent.mkdir(parents=True, exist_ok=True)
    r.manifest.save(args.manifest)
    if args.labels_out:
        real = set(r.manifest.real_map.values())
        items = {iid: {"model": args.model_name, "real": iid in real} for _, iid, _ in r.bundle.all_items()}
        write_json(args.labels_out, {"items": items})
    total = sum(len(b.items) for b in r.bundle.buckets)
    _emit(args, {"buckets": len(r.bundle.buckets), "items": total, "search_space": str(search_space_size(args.n, args.k))},
          f"wrote {total} items in {len(r.bundle.buckets)} buckets to {args.bundle}")


def cmd_optimize(args) -> None:
    # optimizer side: sees only the bundle, never a manifest
    bundle = ObfuscatedBundle.load(args.bundle)
    before = sum(len(g.nodes) for _, _, g in bundle.all_items())
    out = bundle.map(lambda g: optimize(g, args.rules))
    out.save(args.out)
    after = sum(len(g.nodes) for _, _, g in out.all_items())
    _emit(args, {"nodes_before": before, "nodes_after": after}, f"optimized bundle: {before} -> {after} nodes")


def cmd_deobfuscate(args) -> None:
    m = Manifest.load(args.manifest)
    g = deobfuscate(ObfuscatedBundle.load(args.bundle), m)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_graph(g, args.out)
    _emit(args, {"nodes": len(g.nodes)}, f"reassembled {len(g.nodes)} nodes into {args.out}")


def cmd_adversary_eval(args) -> None:
    if len(args.bundle) != len(args.labels):
        raise UsageError("give one --labels file per --bundle")
    samples: dict[str, tuple[list, list]] = {}
    for bpath, lpath in zip(args.bundle, args.labels):
        labels = json.loads(Path(lpath).read_text())["items"]
        for _, iid, g in ObfuscatedBundle.load(bpath).all_items():
            if iid not in labels:
                raise GraphVeilError(f"no label for item {iid}")
            real, fake = samples.setdefault(labels[iid]["model"], ([], []))
            (real if labels[iid]["real"] else fake).append(g)
    if args.hold_out not in samples:
        raise GraphVeilError(f"no items for held-out model {args.hold_out!r}")
    if len(samples) < 2:
        raise GraphVeilError("need at least one model besides the held-out one")
    report = adv.evaluate_held_out(samples, args.hold_out, args.k, args.n, epochs=args.epochs, lr=args.lr, seed=args.seed)
    doc = report.to_json()
    if args.report:
        write_json(args.report, doc)
    _emit(args, doc, f"specificity {report.specificity:.3f}, min gamma {report.min_gamma:.3f}, candidates {report.candidates}")


def cmd_stats_compare(args) -> None:
    rep = adv.compare_distributions(load_graph_dir(args.real), load_graph_dir(args.fake), args.alpha)
    doc = rep.to_json()
    if args.out:
        write_json(args.out, doc)
    _emit(args, doc, "flagged: " + (", ".join(rep.flagged) or "none"))


def pipeline_demo(seed: int = 7, k: int = 20, models_per_family: int = 3, train_k: int = 4) -> dict:
    """Corpus -> obfuscate a held-out model -> optimize -> deobfuscate ->
    equivalence check -> adversary, summarized as one JSON-ready record."""
    corpus = generate_corpus(CorpusSpec(FAMILIES, models_per_family, (3, 6), seed))
    # the largest model gives the most partitions at n = |V| // 8
    held_name, held = max(corpus.graphs, key=lambda item: (len(item[1].nodes), item[0]))
    train = [(n, g) for n, g in corpus.graphs if n != held_name]
    pool = extract_subgraph_pool(Corpus(train), (8, 16), seed)
    models = ObfuscationModels(fit_ngram([g for _, g in train]), train_topo_model([e.graph for e in pool], 8)).ready(seed)

    n = max(1, len(held.nodes) // 8)
    r = obfuscate_detailed(held, n, k, models, seed)
    optimized = r.bundle.map(optimize)
    rebuilt = deobfuscate(optimized, r.manifest)
    verdict = check_equivalence(held, rebuilt, trials=5, seed=seed, tol=1e-9)

    samples = {}
    real_ids = set(r.manifest.real_map.values())
    items = r.bundle.all_items()
    samples[held_name] = ([g for _, i, g in items if i in real_ids], [g for _, i, g in items if i not in real_ids])
    for j, (name, g) in enumerate(train):
        p = partition_balanced(g, PartitionConfig(max(1, len(g.nodes) // 8), 64, seed + j))
        subs, _ = extract_subgraphs(g, p)
        fakes = [s for i, sub in enumerate(subs) for s in make_sentinels(sub, train_k, models, seed * 1000 + 100 * j + i)[0]]
        samples[name] = (subs, fakes)
    report = adv.evaluate_held_out(samples, held_name, k, n)
    return {
        "seed": seed,
        "model": held_name,
        "n": n,
        "k": k,
        "nodes_original": len(held.nodes),
        "nodes_optimized_whole": len(optimize(held).nodes),
        "nodes_deobfuscated": len(rebuilt.nodes),
        "equivalence": verdict.to_json(),
        "search_space": str(search_space_size(n, k)),
        "adversary": report.to_json(),
    }


def cmd_pipeline_demo(args) -> None:
    summary = pipeline_demo(args.seed, args.k, args.models_per_family)
    if args.out:
        write_json(args.out, summary)
    human = (
        f"{summary['model']}: n={summary['n']} k={summary['k']}, "
        f"{summary['nodes_original']} -> {summary['nodes_deobfuscated']} nodes, "
        f"equivalence {'pass' if summary['equivalence']['passed'] else 'FAIL'}, "
        f"candidates {summary['adversary']['candidates']}"
    )
    _emit(args, summary, human)
    if not summary["equivalence"]["passed"]:
        raise GraphVeilError("reassembled model is not equivalent to the original")


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    common.add_argument("--threads", type=positive_int, default=1, help="worker cap (work currently runs serially)")

    parser = argparse.ArgumentParser(prog="graphveil", description="Hide a model graph among sentinel subgraphs.")
    top = parser.add_subparsers(dest="command", required=True, metavar="command")

    def leaf(sub, name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(fn=fn)
        return p

    corpus = top.add_parser("corpus", help="synthetic model corpus").add_subparsers(dest="sub", required=True, metavar="sub")
    p = leaf(corpus, "gen", cmd_corpus_gen, "generate a corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--families", nargs="+", choices=FAMILIES, default=list(FAMILIES))
    p.add_argument("--models-per-family", type=positive_int, default=2)
    p.add_argument("--depth-range", type=int_range, default=(3, 6))

    topo = top.add_parser("topo", help="topology model").add_subparsers(dest="sub", required=True, metavar="sub")
    p = leaf(topo, "train", cmd_topo_train, "train the topology model on corpus subgraphs")
    p.add_argument("--corpus", required=True)
    p.add_argument("--subgraph-size", type=int_range, default=(8, 16))
    p.add_argument("--M", type=nonneg_int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--ngram-out", help="also fit the opcode bigram model on the corpus")
    p = leaf(topo, "sample", cmd_topo_sample, "sample a topology pool")
    p.add_argument("--model", required=True)
    p.add_argument("--count", type=positive_int, default=2000)
    p.add_argument("--out", required=True)
    p.add_argument("--density-out", help="also fit the feature density on the pool")

    p = leaf(top, "populate", cmd_populate, "assign operators to pool topologies")
    p.add_argument("--topos", required=True)
    p.add_argument("--ngram", required=True)
    p.add_argument("--pct", type=float, default=25.0)
    p.add_argument("--max-solns", type=positive_int, default=256)
    p.add_argument("--k", type=positive_int, default=20)
    p.add_argument("--out", required=True)

    p = leaf(top, "partition", cmd_partition, "partition a model graph")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--n", type=positive_int, required=True)
    p.add_argument("--trials", type=positive_int, default=64)
    p.add_argument("--out", required=True)

    p = leaf(top, "obfuscate", cmd_obfuscate, "build a bundle and manifest")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--n", type=positive_int, required=True)
    p.add_argument("--k", type=positive_int, required=True)
    p.add_argument("--topo")
    p.add_argument("--pool", help="pre-sampled topology pool (skips sampling from --topo)")
    p.add_argument("--pool-size", type=positive_int, default=2000)
    p.add_argument("--density")
    p.add_argument("--ngram", required=True)
    p.add_argument("--beta", type=beta_vector)
    p.add_argument("--bundle", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels-out", help="write item labels for adversary experiments")
    p.add_argument("--model-name", default="model")

    p = leaf(top, "optimize", cmd_optimize, "optimize every bundle item (never reads a manifest)")
    p.add_argument("--bundle", required=True)
    p.add_argument("--rules", type=rule_list, default=list(ALL_RULES))
    p.add_argument("--out", required=True)

    p = leaf(top, "deobfuscate", cmd_deobfuscate, "reassemble the optimized model")
    p.add_argument("--bundle", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    advp = top.add_parser("adversary", help="real-vs-sentinel attack").add_subparsers(dest="sub", required=True, metavar="sub")
    p = leaf(advp, "eval", cmd_adversary_eval, "train on other models, score the held-out one")
    p.add_argument("--bundle", action="append", required=True)
    p.add_argument("--labels", action="append", required=True)
    p.add_argument("--hold-out", required=True)
    p.add_argument("--k", type=positive_int, required=True)
    p.add_argument("--n", type=positive_int, required=True)
    p.add_argument("--epochs", type=positive_int, default=500)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--report")

    stats = top.add_parser("stats", help="feature statistics").add_subparsers(dest="sub", required=True, metavar="sub")
    p = leaf(stats, "compare", cmd_stats_compare, "KS-compare two graph sets")
    p.add_argument("--real", required=True)
    p.add_argument("--fake", required=True)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--out")

    pipe = top.add_parser("pipeline", help="end-to-end runs").add_subparsers(dest="sub", required=True, metavar="sub")
    p = leaf(pipe, "demo", cmd_pipeline_demo, "corpus to adversary in one run")
    p.add_argument("--k", type=positive_int, default=20)
    p.add_argument("--models-per-family", type=positive_int, default=3)
    p.add_argument("--out")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"graphveil: error: {exc}", file=sys.stderr)
        return 2
    except (GraphVeilError, ValueError, OSError) as exc:
        doc = exc.to_json() if isinstance(exc, GraphVeilError) else {"error": type(exc).__name__, "message": str(exc)}
        if args.json:
            print(json.dumps(doc, sort_keys=True))
        print(f"graphveil: {doc['message']}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
