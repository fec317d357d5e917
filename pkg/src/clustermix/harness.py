"""Experiment runner: variants, sweeps, caching, CSV exporters.

A run is fully determined by (experiment config, seed). The pretrained
base is cached per (model-architecture, base seed) so a whole ablation
grid adapts one shared frozen model, isolating adapter effects. The
run seed drives adapter init, gate noise, batch order and clustering.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .clustering import ClusterModel, kmeans_fit
from .encoder import encode_many
from .model import (
    Model,
    ModelConfig,
    NumericError,
    evaluate,
    pretrain_base,
    train_adapters,
)
from .reports import MetricsReport, RoutingRecord, routing_purity, usage_histogram
from .taskgen import Corpus, SuiteConfig, generate_corpus
from .tensor import make_rng

# Variant name -> model-config overrides. Exactly one combine mode is
# active per variant; the two dense rows are the single-adapter
# baselines at small and at matched-or-greater parameter budget.
VARIANTS: dict[str, dict] = {
    "dense-r8": {"combine_mode": "dense", "rank": 8},
    "dense-r64": {"combine_mode": "dense", "rank": 64},
    "cluster": {"gating_mode": "cluster", "combine_mode": "universal"},
    "sentence": {"gating_mode": "sentence", "combine_mode": "universal"},
    "token": {"gating_mode": "token", "combine_mode": "universal"},
    "top2": {"gating_mode": "cluster", "combine_mode": "top2"},
    "no-universal": {"gating_mode": "cluster", "combine_mode": "top1"},
}


@dataclass
class TrainSettings:
    adapter_steps: int = 800
    batch_size: int = 32
    adapter_lr: float = 1e-2
    pretrain_steps: int = 500
    pretrain_lr: float = 3e-3
    weight_decay: float = 0.05
    gate_lr_scale: float = 0.02


# Sweepable model-config axes, mirroring the cluster-count, expert-count
# and temperature ablation grids.
SWEEP_AXES = ("num_clusters", "num_experts", "tau")


@dataclass
class ExperimentConfig:
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    variant: str = "cluster"
    seeds: tuple[int, ...] = (0, 1, 2)
    corpus_seed: int = 0
    base_seed: int = 0
    sweeps: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.sweeps) - set(SWEEP_AXES)
        if unknown:
            raise ValueError(f"unknown sweep axes {sorted(unknown)}; allowed: {SWEEP_AXES}")

    def resolved_model(self) -> ModelConfig:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        return self.model.with_overrides(**VARIANTS[self.variant])

    def sweep_points(self) -> list[tuple[str, "ExperimentConfig"]]:
        """Cross-product of the sweep axes, each with an explicit run id.

        Without sweeps this is a single point with an empty id suffix.
        """
        points: list[tuple[str, ExperimentConfig]] = [("", self)]
        for axis in SWEEP_AXES:
            if axis not in self.sweeps:
                continue
            expanded = []
            for suffix, exp in points:
                for value in self.sweeps[axis]:
                    tag = f"{suffix}[{axis}={value}]"
                    model = exp.model.with_overrides(**{axis: value})
                    expanded.append((tag, dataclasses.replace(exp, model=model, sweeps={})))
            points = expanded
        return points

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        return cls(
            suite=SuiteConfig(**payload.get("suite", {})),
            model=ModelConfig(**payload.get("model", {})),
            train=TrainSettings(**payload.get("train", {})),
            variant=payload.get("variant", "cluster"),
            seeds=tuple(payload.get("seeds", (0, 1, 2))),
            corpus_seed=payload.get("corpus_seed", 0),
            base_seed=payload.get("base_seed", 0),
            sweeps=dict(payload.get("sweeps", {})),
        )

    def to_dict(self) -> dict:
        return {
            "suite": dataclasses.asdict(self.suite),
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "variant": self.variant,
            "seeds": list(self.seeds),
            "corpus_seed": self.corpus_seed,
            "base_seed": self.base_seed,
            "sweeps": self.sweeps,
        }


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh))


@dataclass
class RunResult:
    report: MetricsReport
    trace: list[RoutingRecord]
    model: Model
    cluster_model: ClusterModel | None
    corpus: Corpus
    checkpoint_path: Path | None = None


# -- base model cache ---------------------------------------------------------


def _base_cache_key(config: ModelConfig, train: TrainSettings, seed: int) -> str:
    relevant = {
        "vocab_size": config.vocab_size,
        "d_model": config.d_model,
        "n_layers": config.n_layers,
        "n_heads": config.n_heads,
        "max_seq_len": config.max_seq_len,
        "pretrain_steps": train.pretrain_steps,
        "pretrain_lr": train.pretrain_lr,
        "seed": seed,
    }
    blob = json.dumps(relevant, sort_keys=True).encode()
    return hashlib.blake2b(blob, digest_size=8).hexdigest()


def get_or_pretrain_base(
    config: ModelConfig,
    train: TrainSettings,
    seed: int,
    cache_dir: Path | None,
) -> Model:
    """Pretrain the dense base on the copy objective, or load it from cache."""
    base_config = config.with_overrides(seed=seed)
    if cache_dir is None:
        return pretrain_base(base_config, seed, steps=train.pretrain_steps,
                             peak_lr=train.pretrain_lr)
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"base-{_base_cache_key(config, train, seed)}.ckpt"
    if path.exists():
        model, _, _ = load_checkpoint(path)
        return model
    model = pretrain_base(base_config, seed, steps=train.pretrain_steps,
                          peak_lr=train.pretrain_lr)
    save_checkpoint(path, model, step=train.pretrain_steps)
    return model


# -- clustering ---------------------------------------------------------------


def fit_corpus_clusters(corpus: Corpus, config: ModelConfig, seed: int) -> ClusterModel:
    """Fit k-means on held-in instruction embeddings and stamp cluster
    ids onto the held-in records; the model is then frozen."""
    embeddings = encode_many([r.instruction for r in corpus.held_in], config.embed_dim)
    cluster_model = kmeans_fit(embeddings, config.num_clusters, seed=seed)
    from .clustering import assign_many

    labels = assign_many(cluster_model, embeddings)
    for record, label in zip(corpus.held_in, labels):
        record.cluster = int(label)
    return cluster_model


# -- single run ----------------------------------------------------------------


def run_experiment(
    exp: ExperimentConfig,
    seed: int,
    out_dir: Path | None = None,
    cache_dir: Path | None = None,
    corpus: Corpus | None = None,
    base: Model | None = None,
    eval_batch_size: int = 32,
) -> RunResult:
    """Train one variant at one seed and evaluate on both splits.

    On NaN divergence the last-good checkpoint (the freshly adapted
    model before the failing step) is written next to the would-be
    output and the error re-raised with its path.
    """
    started = time.perf_counter()
    model_config = exp.resolved_model().with_overrides(seed=seed)
    if corpus is None:
        corpus = generate_corpus(exp.suite, exp.corpus_seed)
    if model_config.vocab_size < len(corpus.vocab):
        raise ValueError("model vocab_size is smaller than the corpus vocabulary")
    cluster_model = fit_corpus_clusters(corpus, model_config, seed=exp.corpus_seed)

    if base is None:
        base = get_or_pretrain_base(model_config, exp.train, exp.base_seed, cache_dir)
    model = _clone_dense(base, model_config)
    model.attach_adapters(
        cluster_model.centroids
        if model_config.gating_mode == "cluster" and model_config.combine_mode != "dense"
        else None,
        make_rng(seed, "adapter-init"),
    )

    last_good: Path | None = None
    noise_rng = make_rng(seed, "gate-noise")
    try:
        losses = train_adapters(
            model,
            corpus.held_in,
            steps=exp.train.adapter_steps,
            batch_size=exp.train.batch_size,
            peak_lr=exp.train.adapter_lr,
            seed=seed,
            weight_decay=exp.train.weight_decay,
            gate_lr_scale=exp.train.gate_lr_scale,
            noise_rng=noise_rng,
        )
    except NumericError as err:
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            last_good = out_dir / f"{exp.variant}-seed{seed}-lastgood.ckpt"
            save_checkpoint(last_good, model, cluster_model,
                            corpus_fingerprint=corpus.fingerprint())
        raise NumericError(f"{err} (last-good checkpoint: {last_good})") from err

    report, trace = evaluate(
        model, corpus.held_in + corpus.held_out, cluster_model, batch_size=eval_batch_size
    )
    report.final_train_loss = losses[-1] if losses else None
    report.wall_clock_seconds = time.perf_counter() - started

    checkpoint_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_path = out_dir / f"{exp.variant}-seed{seed}.ckpt"
        save_checkpoint(
            checkpoint_path,
            model,
            cluster_model,
            step=exp.train.adapter_steps,
            rng_state=noise_rng.bit_generator.state,
            corpus_fingerprint=corpus.fingerprint(),
            extra={"variant": exp.variant, "seed": seed},
        )
        report_path = out_dir / f"{exp.variant}-seed{seed}-report.json"
        report_path.write_text(report.to_json(), encoding="utf-8")

    return RunResult(
        report=report,
        trace=trace,
        model=model,
        cluster_model=cluster_model,
        corpus=corpus,
        checkpoint_path=checkpoint_path,
    )


def _clone_dense(base: Model, config: ModelConfig) -> Model:
    """Fresh model carrying the (frozen) dense weights of the cached base."""
    model = Model(config, init_rng=make_rng(0, "clone"))
    for (_, source), (_, target) in zip(base.named_parameters(), model.named_parameters()):
        target.data[...] = source.data
    model.freeze_dense()
    return model


# -- exporters -----------------------------------------------------------------


def export_cluster_assignments(corpus: Corpus, cluster_model: ClusterModel,
                               embed_dim: int, path) -> list[list]:
    """Per-(task, template) cluster-count matrix, written as CSV."""
    from .clustering import assign_many

    rows: dict[tuple[str, str], np.ndarray] = {}
    records = corpus.held_in + corpus.held_out
    embeddings = encode_many([r.instruction for r in records], embed_dim)
    labels = assign_many(cluster_model, embeddings)
    for record, label in zip(records, labels):
        key = (record.task_id, record.template_id)
        rows.setdefault(key, np.zeros(cluster_model.k, dtype=int))[label] += 1
    header = ["task", "template"] + [f"cluster{j}" for j in range(cluster_model.k)]
    table = [header]
    for (task, template) in sorted(rows):
        table.append([task, template] + rows[(task, template)].tolist())
    _write_csv(path, table)
    return table


def export_routing_heatmap(
    model: Model,
    records: list,
    cluster_model: ClusterModel | None,
    layer: int,
    module: str,
    path,
) -> list[list]:
    """Row-normalized expert-usage frequencies per task for one mixture.

    Held-in rows come first, then held-out rows, mirroring the split
    separation of the routing-decision figures.
    """
    if not (0 <= layer < len(model.layers)):
        raise ValueError(f"layer {layer} out of range")
    if module not in ("q", "v"):
        raise ValueError("module must be 'q' or 'v'")
    mixture = model.layers[layer].q_mix if module == "q" else model.layers[layer].v_mix
    if mixture is None:
        raise ValueError("model has no routing-capable mixtures")
    _, trace = evaluate(model, records, cluster_model)
    key = f"layer{layer}.{module}"
    num_experts = mixture.num_experts
    usage = usage_histogram(trace, num_experts).get(key, {})
    held_out_tasks = {r.task_id for r in records if r.held_out}
    held_in_tasks = {r.task_id for r in records if not r.held_out}
    header = ["task", "split"] + [f"expert{e}" for e in range(num_experts)]
    table = [header]
    for split, tasks in (("held_in", held_in_tasks), ("held_out", held_out_tasks)):
        for task in sorted(tasks):
            counts = np.array(usage.get(task, [0] * num_experts), dtype=float)
            total = counts.sum()
            freq = counts / total if total else counts
            table.append([task, split] + [float(x) for x in freq])
    _write_csv(path, table)
    return table


def _write_csv(path, table: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        csv.writer(fh).writerows(table)


# -- ablation grids ------------------------------------------------------------


def run_ablation(
    exp: ExperimentConfig,
    variants: list[str],
    out_dir: Path,
    cache_dir: Path | None = None,
    reuse: bool = False,
) -> list[dict]:
    """Run (or load) every variant x seed, aggregate mean +/- std per task.

    With ``reuse=True`` missing runs are an error listing every absent
    artifact rather than silently recomputing.
    """
    if len(variants) < 2 and not exp.sweeps:
        raise ValueError("an ablation grid needs at least two variants or a sweep")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(exp.suite, exp.corpus_seed)

    grid: list[tuple[str, str, ExperimentConfig]] = []
    for variant in variants:
        for tag, sub in dataclasses.replace(exp, variant=variant).sweep_points():
            grid.append((f"{variant}{tag}", variant, sub))

    missing = []
    reports: dict[str, list[MetricsReport]] = {run_id: [] for run_id, _, _ in grid}
    for run_id, variant, sub in grid:
        for seed in exp.seeds:
            report_path = out_dir / f"{run_id}-seed{seed}-report.json"
            if report_path.exists():
                reports[run_id].append(MetricsReport.from_json(report_path.read_text()))
            elif reuse:
                missing.append(str(report_path))
            else:
                run = run_experiment(sub, seed, cache_dir=cache_dir, corpus=corpus)
                report_path.write_text(run.report.to_json(), encoding="utf-8")
                reports[run_id].append(run.report)
    if missing:
        raise FileNotFoundError("missing run artifacts: " + ", ".join(missing))

    tasks = sorted({t for rs in reports.values() for r in rs for t in r.held_in})
    held_out_tasks = sorted({t for rs in reports.values() for r in rs for t in r.held_out})
    rows = []
    for run_id, variant, _ in grid:
        row: dict = {"variant": run_id, "seeds": len(reports[run_id])}
        per_seed_means = [r.mean_held_in_loss() for r in reports[run_id]]
        row["held_in_loss_mean"] = float(np.mean(per_seed_means))
        row["held_in_loss_std"] = float(np.std(per_seed_means))
        for task in tasks:
            losses = [r.held_in[task].loss for r in reports[run_id] if task in r.held_in]
            row[f"loss[{task}]"] = float(np.mean(losses)) if losses else None
        for task in held_out_tasks:
            losses = [r.held_out[task].loss for r in reports[run_id] if task in r.held_out]
            row[f"loss[{task}|ho]"] = float(np.mean(losses)) if losses else None
        row["trainable_parameters"] = reports[run_id][0].trainable_parameters
        rows.append(row)

    columns = list(rows[0].keys())
    table = [columns] + [[row[c] for c in columns] for row in rows]
    _write_csv(out_dir / "ablation.csv", table)
    text_lines = ["  ".join(str(c) for c in line) for line in table]
    (out_dir / "ablation.txt").write_text("\n".join(text_lines) + "\n", encoding="utf-8")
    return rows


def rank1_conflict_probe(
    exp: ExperimentConfig,
    seed: int,
    cache_dir: Path | None = None,
    steps: int = 600,
) -> dict[str, float]:
    """Fig.1-style probe: one rank-1 adapter trained jointly on a
    conflicting pair versus two rank-1 task experts trained separately,
    at the same total step budget (joint gets all steps, each separate
    expert half). Returns mean held-in losses for both arrangements."""
    from .model import evaluate as model_evaluate
    from .model import train_adapters

    model_config = exp.model.with_overrides(combine_mode="dense", rank=1, seed=seed)
    corpus = generate_corpus(exp.suite, exp.corpus_seed)
    tasks = sorted({r.task_id for r in corpus.held_in})
    if len(tasks) != 2:
        raise ValueError("the conflict probe needs a two-task corpus")
    cluster_model = fit_corpus_clusters(corpus, model_config, seed=exp.corpus_seed)
    base = get_or_pretrain_base(model_config, exp.train, exp.base_seed, cache_dir)

    def train_on(records, train_steps, stream):
        model = _clone_dense(base, model_config)
        model.attach_adapters(None, make_rng(seed, f"probe-{stream}"))
        train_adapters(model, records, steps=train_steps,
                       batch_size=exp.train.batch_size, peak_lr=exp.train.adapter_lr,
                       seed=seed, weight_decay=exp.train.weight_decay)
        return model

    joint = train_on(corpus.held_in, steps, "joint")
    joint_report, _ = model_evaluate(joint, corpus.held_in, cluster_model)
    joint_loss = joint_report.mean_held_in_loss()

    separate_losses = []
    for task in tasks:
        records = [r for r in corpus.held_in if r.task_id == task]
        expert = train_on(records, steps // 2, f"sep-{task}")
        report, _ = model_evaluate(expert, records, cluster_model)
        separate_losses.append(report.held_in[task].loss)
    return {
        "joint_mean_loss": joint_loss,
        "separate_mean_loss": float(np.mean(separate_losses)),
    }


def best_mixture_purity(trace: list[RoutingRecord], num_experts: int,
                       tasks: set[str] | None = None) -> float:
    """Highest per-mixture min-over-tasks routing purity (held-in view)."""
    usage = usage_histogram(trace, num_experts)
    purity = routing_purity(usage)
    best = 0.0
    for mixture_key, per_task in purity.items():
        values = [v for t, v in per_task.items() if tasks is None or t in tasks]
        if values:
            best = max(best, min(values))
    return best
