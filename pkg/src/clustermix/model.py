"""A tiny causal transformer whose q/v projections carry adapter mixtures.

The base model is pretrained from scratch on a task-agnostic copy
objective, then frozen; instruction tuning only updates the adapters,
the gate weights and the cluster-embedding table. Training uses AdamW
(decoupled weight decay) under a linear-warmup + cosine-decay schedule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .clustering import ClusterModel, assign_cluster
from .encoder import encode_instruction
from .mixture import (
    AdapterMixture,
    ClusterEmbeddings,
    apply_grouped,
    apply_rowwise,
    gate_forward,
    top2_decision,
)
from .reports import (
    MetricsReport,
    RoutingRecord,
    TaskMetrics,
    mean_universal_weights,
    usage_histogram,
)
from .tensor import (
    NumericError,
    Parameter,
    Tape,
    Tensor,
    embedding,
    layer_norm,
    linear,
    log_softmax,
    make_rng,
    matmul,
    reduce_sum,
    relu,
    reshape,
    softmax,
    take_along_last,
    transpose,
)

PAD_ID = 0
SEP_ID = 1
ANSWER_ID = 2
NUM_SPECIAL_TOKENS = 3

GATING_MODES = ("cluster", "sentence", "token")
COMBINE_MODES = ("universal", "top1", "top2", "dense")


@dataclass
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    max_seq_len: int = 32
    num_experts: int = 4
    rank: int = 8
    tau: float = 0.05
    num_clusters: int = 8
    embed_dim: int = 64
    gating_mode: str = "cluster"
    combine_mode: str = "universal"
    lora_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.gating_mode not in GATING_MODES:
            raise ValueError(f"unknown gating mode {self.gating_mode!r}")
        if self.combine_mode not in COMBINE_MODES:
            raise ValueError(f"unknown combine mode {self.combine_mode!r}")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def with_overrides(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)


@dataclass
class Batch:
    tokens: np.ndarray       # (B, S) int64 inputs
    targets: np.ndarray      # (B, S) int64 next-token targets
    loss_mask: np.ndarray    # (B, S), 1.0 on answer positions only
    cluster_ids: np.ndarray | None = None   # (B,) for cluster routing
    instr_mask: np.ndarray | None = None    # (B, S), 1.0 on instruction positions
    example_ids: np.ndarray | None = None   # (B,) corpus indices, trace only
    task_ids: list[str] | None = None       # per-row task labels, trace only


class Layer:
    """One pre-norm transformer block; q/v may be wrapped by mixtures."""

    def __init__(self, index: int, d_model: int, rng: np.random.Generator):
        d_ff = 4 * d_model
        std = 1.0 / math.sqrt(d_model)
        name = f"layer{index}"
        self.ln1_gain = Parameter(np.ones(d_model), name=f"{name}.ln1.gain")
        self.ln1_bias = Parameter(np.zeros(d_model), name=f"{name}.ln1.bias")
        self.wq = Parameter(rng.normal(0.0, std, (d_model, d_model)), name=f"{name}.wq")
        self.wk = Parameter(rng.normal(0.0, std, (d_model, d_model)), name=f"{name}.wk")
        self.wv = Parameter(rng.normal(0.0, std, (d_model, d_model)), name=f"{name}.wv")
        self.wo = Parameter(rng.normal(0.0, std, (d_model, d_model)), name=f"{name}.wo")
        self.ln2_gain = Parameter(np.ones(d_model), name=f"{name}.ln2.gain")
        self.ln2_bias = Parameter(np.zeros(d_model), name=f"{name}.ln2.bias")
        self.ff_w1 = Parameter(rng.normal(0.0, std, (d_ff, d_model)), name=f"{name}.ff1.weight")
        self.ff_b1 = Parameter(np.zeros(d_ff), name=f"{name}.ff1.bias")
        self.ff_w2 = Parameter(
            rng.normal(0.0, 1.0 / math.sqrt(d_ff), (d_model, d_ff)), name=f"{name}.ff2.weight"
        )
        self.ff_b2 = Parameter(np.zeros(d_model), name=f"{name}.ff2.bias")
        self.q_mix: AdapterMixture | None = None
        self.v_mix: AdapterMixture | None = None

    def dense_parameters(self) -> list[Parameter]:
        return [
            self.ln1_gain, self.ln1_bias, self.wq, self.wk, self.wv, self.wo,
            self.ln2_gain, self.ln2_bias, self.ff_w1, self.ff_b1, self.ff_w2, self.ff_b2,
        ]


class Model:
    def __init__(self, config: ModelConfig, init_rng: np.random.Generator | None = None):
        self.config = config
        rng = init_rng if init_rng is not None else make_rng(config.seed, "model-init")
        d = config.d_model
        self.tok_emb = Parameter(rng.normal(0.0, 0.1, (config.vocab_size, d)), name="tok_emb")
        self.pos_emb = Parameter(rng.normal(0.0, 0.1, (config.max_seq_len, d)), name="pos_emb")
        self.layers = [Layer(i, d, rng) for i in range(config.n_layers)]
        self.final_gain = Parameter(np.ones(d), name="final.gain")
        self.final_bias = Parameter(np.zeros(d), name="final.bias")
        self.head = Parameter(rng.normal(0.0, 1.0 / math.sqrt(d), (config.vocab_size, d)),
                              name="head")
        self.cluster_table: ClusterEmbeddings | None = None
        self._causal_bias = _causal_bias(config.max_seq_len)

    # -- parameter bookkeeping -------------------------------------------

    def dense_parameters(self) -> list[Parameter]:
        params = [self.tok_emb, self.pos_emb]
        for layer in self.layers:
            params.extend(layer.dense_parameters())
        params.extend([self.final_gain, self.final_bias, self.head])
        return params

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        """Every parameter exactly once, in a stable order."""
        seen: set[int] = set()
        out: list[tuple[str, Parameter]] = []

        def push(param: Parameter) -> None:
            if id(param) not in seen:
                seen.add(id(param))
                out.append((param.name, param))

        for p in self.dense_parameters():
            push(p)
        if self.cluster_table is not None:
            push(self.cluster_table.table)
        for layer in self.layers:
            for mixture in (layer.q_mix, layer.v_mix):
                if mixture is not None:
                    for p in mixture.parameters():
                        push(p)
        return out

    def trainable_parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters() if p.trainable]

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def freeze_dense(self) -> None:
        for p in self.dense_parameters():
            p.freeze()

    def census(self) -> dict[str, dict]:
        return {
            name: {"shape": list(p.shape), "count": int(p.data.size), "trainable": p.trainable}
            for name, p in self.named_parameters()
        }

    # -- adapter attachment ----------------------------------------------

    def attach_adapters(self, centroids: np.ndarray | None, rng: np.random.Generator) -> None:
        """Wrap q/v projections in adapter mixtures; dense weights must
        already be frozen. Cluster routing requires fitted centroids,
        whose rows seed the shared embedding table."""
        cfg = self.config
        if any(p.trainable for p in self.dense_parameters()):
            raise ValueError("freeze the dense model before attaching adapters")
        if cfg.gating_mode == "cluster" and cfg.combine_mode != "dense":
            if centroids is None:
                raise ValueError("cluster routing needs fitted centroids")
            if centroids.shape != (cfg.num_clusters, cfg.embed_dim):
                raise ValueError(
                    f"expected centroids of shape {(cfg.num_clusters, cfg.embed_dim)},"
                    f" got {centroids.shape}"
                )
            self.cluster_table = ClusterEmbeddings(centroids)
        cond_dim = cfg.embed_dim if cfg.gating_mode == "cluster" else cfg.d_model
        for i, layer in enumerate(self.layers):
            for which, base in (("q", layer.wq), ("v", layer.wv)):
                mixture = AdapterMixture(
                    base,
                    num_experts=1 if cfg.combine_mode == "dense" else cfg.num_experts,
                    rank=cfg.rank,
                    cond_dim=cond_dim,
                    tau=cfg.tau,
                    rng=rng,
                    combine=cfg.combine_mode,
                    scale=cfg.lora_scale,
                    name=f"layer{i}.{which}",
                )
                if which == "q":
                    layer.q_mix = mixture
                else:
                    layer.v_mix = mixture


def _causal_bias(max_len: int) -> np.ndarray:
    bias = np.zeros((max_len, max_len))
    bias[np.triu_indices(max_len, k=1)] = -1e9
    return bias


# -- forward pass ----------------------------------------------------------


def _sentence_condition(h: Tensor, instr_mask: np.ndarray) -> Tensor:
    """Mean hidden state over instruction positions, one row per example."""
    counts = instr_mask.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("every example needs at least one instruction position")
    weights = instr_mask / counts[:, None]
    summed = reduce_sum(h * Tensor(weights[:, :, None]), axis=1)
    return summed


def _project(
    model: Model,
    layer_index: int,
    which: str,
    mixture: AdapterMixture | None,
    plain_weight: Parameter,
    h: Tensor,
    batch: Batch,
    train_mode: bool,
    rng: np.random.Generator | None,
    trace: list[RoutingRecord] | None,
) -> Tensor:
    if mixture is None:
        return linear(h, plain_weight)
    cfg = model.config
    if mixture.combine == "dense":
        if trace is not None:  # the single adapter is always on at weight 1
            for row in range(h.shape[0]):
                trace.append(RoutingRecord(
                    layer=layer_index,
                    module=which,
                    example_id=int(batch.example_ids[row]) if batch.example_ids is not None else row,
                    task_id=batch.task_ids[row] if batch.task_ids else "",
                    cluster_id=int(batch.cluster_ids[row]) if batch.cluster_ids is not None else -1,
                    expert=0,
                    g_max=1.0,
                ))
        return apply_grouped(mixture, h, [])

    if cfg.gating_mode == "cluster":
        if batch.cluster_ids is None:
            raise ValueError("cluster routing needs batch cluster ids")
        groups = []
        for cluster_id in np.unique(batch.cluster_ids):
            row_mask = batch.cluster_ids == cluster_id
            condition = model.cluster_table.row(int(cluster_id))
            if mixture.combine == "top2":
                decision = top2_decision(mixture, condition, train_mode, rng)
            else:
                decision = gate_forward(mixture, condition, train_mode, rng)
            groups.append((decision, row_mask))
            if trace is not None:
                for row in np.flatnonzero(row_mask):
                    trace.append(RoutingRecord(
                        layer=layer_index,
                        module=which,
                        example_id=int(batch.example_ids[row]) if batch.example_ids is not None else int(row),
                        task_id=batch.task_ids[row] if batch.task_ids else "",
                        cluster_id=int(cluster_id),
                        expert=decision.selected,
                        g_max=decision.g_max,
                    ))
        return apply_grouped(mixture, h, groups)

    # sentence / token routing conditions come from the mixture input itself
    if cfg.gating_mode == "sentence":
        if batch.instr_mask is None:
            raise ValueError("sentence routing needs an instruction mask")
        condition = _sentence_condition(h, batch.instr_mask)
        per_token = False
    else:
        condition = h
        per_token = True
    logits = mixture.gate_logits(condition, train_mode, rng)
    probs = softmax(logits, tau=mixture.tau, axis=-1)
    out, selection = apply_rowwise(mixture, h, probs, per_token=per_token)
    if trace is not None:
        g_top = np.take_along_axis(probs.data, selection[..., None], axis=-1)[..., 0]
        rows = selection.shape[0]
        for row in range(rows):
            cluster_id = int(batch.cluster_ids[row]) if batch.cluster_ids is not None else -1
            example_id = int(batch.example_ids[row]) if batch.example_ids is not None else row
            task_id = batch.task_ids[row] if batch.task_ids else ""
            if per_token:
                for pos in range(selection.shape[1]):
                    trace.append(RoutingRecord(
                        layer=layer_index, module=which, example_id=example_id,
                        task_id=task_id, cluster_id=cluster_id,
                        expert=int(selection[row, pos]), g_max=float(g_top[row, pos]),
                    ))
            else:
                trace.append(RoutingRecord(
                    layer=layer_index, module=which, example_id=example_id,
                    task_id=task_id, cluster_id=cluster_id,
                    expert=int(selection[row]), g_max=float(g_top[row]),
                ))
    return out


def forward(
    model: Model,
    batch: Batch,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    collect_trace: bool = False,
) -> tuple[Tensor, list[RoutingRecord]]:
    """Causal transformer pass; returns logits (B, S, V) and the routing trace."""
    cfg = model.config
    tokens = np.asarray(batch.tokens)
    if tokens.ndim != 2:
        raise ValueError("tokens must be a (batch, seq) matrix")
    B, S = tokens.shape
    if S > cfg.max_seq_len:
        raise ValueError(f"sequence length {S} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary range")

    trace: list[RoutingRecord] | None = [] if collect_trace else None
    x = embedding(model.tok_emb, tokens) + embedding(model.pos_emb, np.arange(S))
    H, hd = cfg.n_heads, cfg.head_dim
    bias = Tensor(model._causal_bias[:S, :S])
    for i, layer in enumerate(model.layers):
        h = layer_norm(x, layer.ln1_gain, layer.ln1_bias)
        q = _project(model, i, "q", layer.q_mix, layer.wq, h, batch, train_mode, rng, trace)
        k = linear(h, layer.wk)
        v = _project(model, i, "v", layer.v_mix, layer.wv, h, batch, train_mode, rng, trace)
        q4 = transpose(reshape(q, (B, S, H, hd)), (0, 2, 1, 3))
        k4 = transpose(reshape(k, (B, S, H, hd)), (0, 2, 3, 1))
        v4 = transpose(reshape(v, (B, S, H, hd)), (0, 2, 1, 3))
        scores = matmul(q4, k4) * (1.0 / math.sqrt(hd)) + bias
        attn = softmax(scores, axis=-1)
        context = reshape(transpose(matmul(attn, v4), (0, 2, 1, 3)), (B, S, cfg.d_model))
        x = x + linear(context, layer.wo)
        h2 = layer_norm(x, layer.ln2_gain, layer.ln2_bias)
        ff = linear(relu(linear(h2, layer.ff_w1) + layer.ff_b1), layer.ff_w2) + layer.ff_b2
        x = x + ff
    x = layer_norm(x, model.final_gain, model.final_bias)
    logits = linear(x, model.head)
    return logits, (trace if trace is not None else [])


def sequence_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean masked cross-entropy over answer positions."""
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=np.float64)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ValueError("logits, targets and mask shapes do not conform")
    total = float(mask.sum())
    if total == 0.0:
        raise ValueError("loss mask selects no positions")
    log_probs = log_softmax(logits, axis=-1)
    picked = take_along_last(log_probs, targets)
    return reduce_sum(picked * Tensor(mask)) * (-1.0 / total)


# -- optimization ------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay over trainable parameters.

    `lr_scales` maps parameter ids to per-parameter learning-rate
    multipliers (used to keep the gate path's total logit movement at
    the full-scale recipe's magnitude; see README on routing softness).
    """

    def __init__(self, params: list[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05,
                 lr_scales: dict[int, float] | None = None):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        scales = lr_scales or {}
        self._scales = [scales.get(id(p), 1.0) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v, scale in zip(self.params, self._m, self._v, self._scales):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= lr * scale * (update + self.weight_decay * p.data)


def warmup_cosine_lr(step: int, total_steps: int, peak_lr: float,
                     warmup_frac: float = 0.02, start_factor: float = 1e-3) -> float:
    """Linear warmup to the peak over the first ~2% of steps, then
    cosine decay to zero (same warmup ratio as the full-scale recipe)."""
    warmup = max(1, round(warmup_frac * total_steps))
    if step < warmup:
        t = (step + 1) / warmup
        return peak_lr * (start_factor + (1.0 - start_factor) * t)
    progress = (step - warmup) / max(1, total_steps - warmup)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def train_step(
    model: Model,
    batch: Batch,
    optimizer: AdamW,
    lr: float,
    rng: np.random.Generator | None = None,
) -> float:
    """One forward/backward/update on trainable parameters only."""
    optimizer.zero_grad()
    with Tape() as tape:
        logits, _ = forward(model, batch, train_mode=True, rng=rng)
        loss = sequence_loss(logits, batch.targets, batch.loss_mask)
        tape.backward(loss)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError(f"training loss diverged to {value}")
    optimizer.step(lr)
    return value


# -- base pretraining --------------------------------------------------------


def copy_batch(config: ModelConfig, batch_size: int, rng: np.random.Generator) -> Batch:
    """Copy task: random content tokens, a separator, then the same
    tokens again; loss only on the repeated half."""
    half = (config.max_seq_len - 1) // 2
    content = rng.integers(NUM_SPECIAL_TOKENS, config.vocab_size, size=(batch_size, half))
    seq = np.concatenate(
        [content, np.full((batch_size, 1), SEP_ID, dtype=np.int64), content], axis=1
    )
    tokens = seq[:, :-1]
    targets = seq[:, 1:]
    mask = np.zeros_like(tokens, dtype=np.float64)
    mask[:, half:] = 1.0
    return Batch(tokens=tokens, targets=targets, loss_mask=mask)


def pretrain_base(
    config: ModelConfig,
    seed: int,
    steps: int = 400,
    batch_size: int = 32,
    peak_lr: float = 3e-3,
) -> Model:
    """Train every dense weight on the copy objective, then freeze."""
    model = Model(config, init_rng=make_rng(seed, "base-init"))
    data_rng = make_rng(seed, "base-batches")
    optimizer = AdamW(model.dense_parameters(), weight_decay=0.01)
    for step in range(steps):
        batch = copy_batch(config, batch_size, data_rng)
        lr = warmup_cosine_lr(step, steps, peak_lr)
        train_step(model, batch, optimizer, lr)
    model.freeze_dense()
    return model


def copy_task_loss(model: Model, seed: int = 999, batch_size: int = 64) -> float:
    """Frozen-model loss on a fresh copy batch (pretraining sanity probe)."""
    batch = copy_batch(model.config, batch_size, make_rng(seed, "copy-probe"))
    logits, _ = forward(model, batch)
    return float(sequence_loss(logits, batch.targets, batch.loss_mask).data)


# -- batching and evaluation --------------------------------------------------


def build_batch(records: list, indices: np.ndarray) -> Batch:
    """Pad a set of corpus records into one batch."""
    chosen = [records[i] for i in indices]
    lengths = [len(r.input_ids) + len(r.target_ids) for r in chosen]
    width = max(lengths) - 1
    B = len(chosen)
    tokens = np.full((B, width), PAD_ID, dtype=np.int64)
    targets = np.full((B, width), PAD_ID, dtype=np.int64)
    loss_mask = np.zeros((B, width), dtype=np.float64)
    instr_mask = np.zeros((B, width), dtype=np.float64)
    cluster_ids = np.zeros(B, dtype=np.int64)
    task_ids = []
    for row, record in enumerate(chosen):
        seq = np.array(list(record.input_ids) + list(record.target_ids), dtype=np.int64)
        n_in = len(record.input_ids)
        tokens[row, : len(seq) - 1] = seq[:-1]
        targets[row, : len(seq) - 1] = seq[1:]
        loss_mask[row, n_in - 1 : len(seq) - 1] = 1.0
        instr_mask[row, :n_in] = 1.0
        cluster_ids[row] = record.cluster if record.cluster is not None else 0
        task_ids.append(record.task_id)
    return Batch(
        tokens=tokens,
        targets=targets,
        loss_mask=loss_mask,
        cluster_ids=cluster_ids,
        instr_mask=instr_mask,
        example_ids=np.asarray(indices, dtype=np.int64),
        task_ids=task_ids,
    )


def gate_path_parameters(model: Model) -> list[Parameter]:
    """Gate weights plus the cluster table: the parameters that set
    routing logits (their learning rate is scaled separately)."""
    params: list[Parameter] = []
    if model.cluster_table is not None:
        params.append(model.cluster_table.table)
    for layer in model.layers:
        for mixture in (layer.q_mix, layer.v_mix):
            if mixture is not None and mixture.gate_weight is not None:
                params.append(mixture.gate_weight)
    return params


def train_adapters(
    model: Model,
    records: list,
    steps: int,
    batch_size: int = 32,
    peak_lr: float = 5e-3,
    seed: int = 0,
    weight_decay: float = 0.05,
    gate_lr_scale: float = 1.0,
    noise_rng: np.random.Generator | None = None,
) -> list[float]:
    """Instruction-tune the adapter parameters on clustered records."""
    if any(r.cluster is None for r in records):
        raise ValueError("records must be cluster-assigned before adapter training")
    lr_scales = {id(p): gate_lr_scale for p in gate_path_parameters(model)}
    optimizer = AdamW(model.trainable_parameters(), weight_decay=weight_decay,
                      lr_scales=lr_scales)
    batch_rng = make_rng(seed, "adapter-batches")
    if noise_rng is None:
        noise_rng = make_rng(seed, "gate-noise")
    losses = []
    for step in range(steps):
        indices = batch_rng.choice(len(records), size=min(batch_size, len(records)),
                                   replace=False)
        batch = build_batch(records, indices)
        lr = warmup_cosine_lr(step, steps, peak_lr)
        losses.append(train_step(model, batch, optimizer, lr, rng=noise_rng))
    return losses


def assign_record_clusters(records: list, cluster_model: ClusterModel, embed_dim: int) -> None:
    """Fill in missing cluster ids via the frozen clustering model."""
    for record in records:
        if record.cluster is None:
            record.cluster = assign_cluster(
                cluster_model, encode_instruction(record.instruction, embed_dim)
            )


def greedy_decode(model: Model, batch: Batch, lengths: np.ndarray,
                  answer_lengths: np.ndarray) -> list[list[int]]:
    """Greedy continuation of each row from its instruction prefix.

    `lengths` are instruction lengths (tokens already in the row);
    each row generates exactly its known answer length.
    """
    B = batch.tokens.shape[0]
    width = int((lengths + answer_lengths).max()) - 1
    tokens = np.full((B, width), PAD_ID, dtype=np.int64)
    tokens[:, : batch.tokens.shape[1]] = batch.tokens[:, :width]
    instr_mask = np.zeros((B, width), dtype=np.float64)
    instr_mask[:, : batch.instr_mask.shape[1]] = batch.instr_mask[:, :width]
    outputs: list[list[int]] = [[] for _ in range(B)]
    for step in range(int(answer_lengths.max())):
        active = step < answer_lengths
        if not active.any():
            break
        probe = Batch(
            tokens=tokens,
            targets=tokens,
            loss_mask=np.ones_like(instr_mask),
            cluster_ids=batch.cluster_ids,
            instr_mask=instr_mask,
            example_ids=batch.example_ids,
            task_ids=batch.task_ids,
        )
        logits, _ = forward(model, probe)
        read_at = lengths + step - 1
        picks = logits.data[np.arange(B), read_at].argmax(axis=-1)
        for row in np.flatnonzero(active):
            outputs[row].append(int(picks[row]))
            if step < answer_lengths[row] - 1:  # only needed to feed the next step
                tokens[row, lengths[row] + step] = picks[row]
    return outputs


def evaluate(
    model: Model,
    records: list,
    cluster_model: ClusterModel | None,
    batch_size: int = 32,
) -> tuple[MetricsReport, list[RoutingRecord]]:
    """Noise-off evaluation: per-task loss, greedy exact match, routing stats.

    Records missing a cluster id (held-out tasks) are assigned through
    the frozen clustering model on the fly.
    """
    report = MetricsReport()
    census = model.census()
    report.census = census
    report.trainable_parameters = sum(c["count"] for c in census.values() if c["trainable"])
    report.frozen_parameters = sum(c["count"] for c in census.values() if not c["trainable"])
    if not records:
        return report, []

    if cluster_model is not None:
        assign_record_clusters(records, cluster_model, model.config.embed_dim)
    if any(r.cluster is None for r in records):
        raise ValueError("records lack cluster ids and no clustering model was given")

    nll_sums: dict[tuple[str, bool], float] = {}
    token_counts: dict[tuple[str, bool], int] = {}
    match_counts: dict[tuple[str, bool], int] = {}
    record_counts: dict[tuple[str, bool], int] = {}
    trace: list[RoutingRecord] = []

    for start in range(0, len(records), batch_size):
        indices = np.arange(start, min(start + batch_size, len(records)))
        batch = build_batch(records, indices)
        logits, batch_trace = forward(model, batch, collect_trace=True)
        trace.extend(batch_trace)
        log_probs = log_softmax(logits, axis=-1).data
        picked = np.take_along_axis(log_probs, batch.targets[..., None], axis=-1)[..., 0]
        lengths = np.array([len(records[i].input_ids) for i in indices])
        answer_lengths = np.array([len(records[i].target_ids) for i in indices])
        decoded = greedy_decode(model, batch, lengths, answer_lengths)
        for row, index in enumerate(indices):
            record = records[index]
            key = (record.task_id, record.held_out)
            row_mask = batch.loss_mask[row]
            nll_sums[key] = nll_sums.get(key, 0.0) - float((picked[row] * row_mask).sum())
            token_counts[key] = token_counts.get(key, 0) + int(row_mask.sum())
            record_counts[key] = record_counts.get(key, 0) + 1
            if decoded[row] == list(record.target_ids):
                match_counts[key] = match_counts.get(key, 0) + 1
            else:
                match_counts.setdefault(key, match_counts.get(key, 0))

    for (task, held_out), count in record_counts.items():
        metrics = TaskMetrics(
            loss=nll_sums[(task, held_out)] / token_counts[(task, held_out)],
            accuracy=match_counts.get((task, held_out), 0) / count,
            count=count,
        )
        (report.held_out if held_out else report.held_in)[task] = metrics

    num_experts = model.config.num_experts if model.config.combine_mode != "dense" else 1
    report.expert_usage = usage_histogram(trace, num_experts)
    report.universal_weights = mean_universal_weights(trace)
    return report, trace
