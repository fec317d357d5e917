"""Command-line experiment runner.

Subcommands: cluster, train, eval, ablate, export-routing,
export-clusters. Configs are JSON files mirroring ExperimentConfig;
see the README for the full key tree.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .clustering import kmeans_fit
from .encoder import encode_many
from .harness import (
    VARIANTS,
    ExperimentConfig,
    export_cluster_assignments,
    export_routing_heatmap,
    load_config,
    run_ablation,
    run_experiment,
)
from .model import evaluate
from .taskgen import load_corpus, save_corpus


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON experiment config")
    parser.add_argument("--seed", type=int, default=None, help="run seed override")
    parser.add_argument("--out", type=Path, required=True, help="output directory")


def _experiment(args) -> ExperimentConfig:
    exp = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "variant", None):
        exp = dataclasses.replace(exp, variant=args.variant)
    return exp


def cmd_cluster(args) -> int:
    try:
        corpus = load_corpus(args.corpus)
    except OSError as err:
        raise SystemExit(f"cannot read corpus: {err}")
    args.out.mkdir(parents=True, exist_ok=True)
    embed_dim = args.embed_dim
    embeddings = encode_many([r.instruction for r in corpus.held_in], embed_dim)
    model = kmeans_fit(embeddings, args.k, seed=args.seed or 0)
    cluster_path = args.out / "clusters.json"
    cluster_path.write_text(json.dumps({
        "k": model.k,
        "embed_dim": embed_dim,
        "final_objective": model.final_objective,
        "iterations_run": model.iterations_run,
        "centroids": model.centroids.tolist(),
    }, sort_keys=True), encoding="utf-8")
    export_cluster_assignments(corpus, model, embed_dim, args.out / "cluster_assignments.csv")
    print(f"fitted {model.k} clusters in {model.iterations_run} iterations; "
          f"objective {model.final_objective:.6f}")
    print(f"wrote {cluster_path} and {args.out / 'cluster_assignments.csv'}")
    return 0


def cmd_train(args) -> int:
    exp = _experiment(args)
    seed = args.seed if args.seed is not None else exp.seeds[0]
    result = run_experiment(exp, seed, out_dir=args.out, cache_dir=args.out / "base_cache")
    save_corpus(result.corpus, args.out / "corpus.jsonl")
    print(f"variant={exp.variant} seed={seed} "
          f"final_train_loss={result.report.final_train_loss:.4f}")
    for task, metrics in sorted(result.report.held_in.items()):
        print(f"  held-in  {task}: loss={metrics.loss:.4f} acc={metrics.accuracy:.3f}")
    for task, metrics in sorted(result.report.held_out.items()):
        print(f"  held-out {task}: loss={metrics.loss:.4f} acc={metrics.accuracy:.3f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    model, cluster_model, manifest = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    stored = manifest.get("corpus_fingerprint")
    if stored is not None and stored != corpus.fingerprint():
        raise SystemExit(
            f"corpus fingerprint {corpus.fingerprint()} does not match checkpoint ({stored})"
        )
    args.out.mkdir(parents=True, exist_ok=True)
    report, _ = evaluate(model, corpus.held_in + corpus.held_out, cluster_model)
    out_path = args.out / "eval_report.json"
    out_path.write_text(report.to_json(), encoding="utf-8")
    for split_name, block in (("held-in", report.held_in), ("held-out", report.held_out)):
        for task, metrics in sorted(block.items()):
            print(f"{split_name} {task}: loss={metrics.loss:.4f} acc={metrics.accuracy:.3f}")
    print(f"wrote {out_path}")
    return 0


def cmd_ablate(args) -> int:
    exp = _experiment(args)
    variants = args.variants.split(",") if args.variants else ["dense-r8", "cluster"]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise SystemExit(f"unknown variants: {unknown}; choose from {sorted(VARIANTS)}")
    rows = run_ablation(exp, variants, out_dir=args.out,
                        cache_dir=args.out / "base_cache", reuse=args.reuse)
    for row in rows:
        print(f"{row['variant']}: held-in loss "
              f"{row['held_in_loss_mean']:.4f} +/- {row['held_in_loss_std']:.4f} "
              f"({row['trainable_parameters']} trainable params)")
    print(f"wrote {args.out / 'ablation.csv'}")
    return 0


def cmd_export_routing(args) -> int:
    model, cluster_model, _ = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"routing-layer{args.layer}-{args.module}.csv"
    export_routing_heatmap(
        model, corpus.held_in + corpus.held_out, cluster_model,
        args.layer, args.module, path,
    )
    print(f"wrote {path}")
    return 0


def cmd_export_clusters(args) -> int:
    model, cluster_model, _ = load_checkpoint(args.checkpoint)
    if cluster_model is None:
        raise SystemExit("checkpoint carries no clustering model")
    corpus = load_corpus(args.corpus)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "cluster_assignments.csv"
    export_cluster_assignments(corpus, cluster_model, model.config.embed_dim, path)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clustermix",
                                     description="cluster-routed adapter experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cluster", help="fit k-means on a corpus file")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train", help="train one variant at one seed")
    _add_common(p)
    p.add_argument("--variant", choices=sorted(VARIANTS), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a variant grid and aggregate")
    _add_common(p)
    p.add_argument("--variants", type=str, default=None,
                   help="comma-separated variant names")
    p.add_argument("--reuse", action="store_true",
                   help="only aggregate existing run reports")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-routing", help="expert-usage heatmap CSV for one mixture")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--module", choices=("q", "v"), default="q")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_export_routing)

    p = sub.add_parser("export-clusters", help="cluster-assignment CSV from a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_export_clusters)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
