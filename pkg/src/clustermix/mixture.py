"""Routed low-rank adapter mixtures for one linear projection.

One `AdapterMixture` wraps a frozen base weight with E task adapters,
an optional always-on universal adapter, and a linear gate. The gate
scores a condition vector (a trainable cluster embedding by default,
or token/sentence hidden states for the alternative routing modes),
keeps only the largest softmax entry, and weights the universal
adapter by the complement of that entry.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Parameter,
    Tensor,
    embedding,
    linear,
    reduce_sum,
    reshape,
    softmax,
    take,
    take_along_last,
)

COMBINE_MODES = ("universal", "top1", "top2", "dense")
GATING_MODES = ("cluster", "sentence", "token")


class LowRankAdapter:
    """Additive low-rank update delta(x) = scale * up(down(x)).

    The up matrix starts at zero so the delta vanishes at init and the
    wrapped module starts exactly at its frozen base behavior.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, rng: np.random.Generator,
                 scale: float = 1.0, name: str = "adapter"):
        if rank < 1:
            raise ValueError("adapter rank must be >= 1")
        self.rank = rank
        self.scale = float(scale)
        self.down = Parameter(rng.normal(0.0, 0.02, size=(rank, d_in)), name=f"{name}.down")
        self.up = Parameter(np.zeros((d_out, rank)), name=f"{name}.up")

    def delta(self, x: Tensor) -> Tensor:
        out = linear(linear(x, self.down), self.up)
        if self.scale != 1.0:
            out = out * self.scale
        return out

    def parameters(self) -> list[Parameter]:
        return [self.down, self.up]


class ClusterEmbeddings:
    """Trainable per-cluster condition vectors, one table per model.

    Rows are initialized from the fitted centroids and are shared by
    every mixture in the model (all layers, both q and v projections).
    """

    def __init__(self, centroids: np.ndarray, name: str = "cluster_table"):
        self.table = Parameter(np.array(centroids, dtype=np.float64), name=name)

    @property
    def k(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def row(self, index: int) -> Tensor:
        if not 0 <= index < self.k:
            raise ValueError(f"cluster index {index} out of range [0, {self.k})")
        return reshape(embedding(self.table, np.array([index])), (self.dim,))


@dataclass
class GateDecision:
    """Result of one gate invocation.

    `weights` is the softmax vector with everything but the kept
    entries zeroed (no renormalization); `g_max` is the largest kept
    entry and the universal adapter weight is exactly 1 - g_max.
    """

    weights: np.ndarray
    selected: int
    g_max: float
    picks: tuple[int, ...]
    probs: Tensor

    @property
    def universal_weight(self) -> float:
        return 1.0 - self.g_max


class AdapterMixture:
    """A frozen linear weight plus routed low-rank experts."""

    def __init__(
        self,
        base: Parameter,
        num_experts: int,
        rank: int,
        cond_dim: int,
        tau: float,
        rng: np.random.Generator,
        combine: str = "universal",
        scale: float = 1.0,
        name: str = "mixture",
    ):
        if base.trainable:
            raise ValueError("mixture base weight must be frozen")
        if num_experts < 1:
            raise ValueError("need at least one expert")
        if tau <= 0.0:
            raise ValueError("gate temperature must be positive")
        if combine not in COMBINE_MODES:
            raise ValueError(f"unknown combine mode {combine!r}")
        if combine == "top2" and num_experts < 2:
            raise ValueError("top2 needs at least two experts")
        d_out, d_in = base.shape
        self.base = base
        self.name = name
        self.num_experts = num_experts
        self.tau = float(tau)
        self.combine = combine
        self.noise_std = float(np.sqrt(1.0 / num_experts))
        self.experts = [
            LowRankAdapter(d_in, d_out, rank, rng, scale, name=f"{name}.expert{e}")
            for e in range(num_experts)
        ]
        self.universal = (
            LowRankAdapter(d_in, d_out, rank, rng, scale, name=f"{name}.universal")
            if combine == "universal"
            else None
        )
        self.gate_weight = (
            Parameter(rng.normal(0.0, 0.02, size=(num_experts, cond_dim)), name=f"{name}.gate")
            if combine != "dense"
            else None
        )

    def parameters(self) -> list[Parameter]:
        params = [self.base]
        for expert in self.experts:
            params.extend(expert.parameters())
        if self.universal is not None:
            params.extend(self.universal.parameters())
        if self.gate_weight is not None:
            params.append(self.gate_weight)
        return params

    # -- gating ---------------------------------------------------------

    def gate_logits(self, condition: Tensor, train_mode: bool,
                    rng: np.random.Generator | None) -> Tensor:
        cond = condition if isinstance(condition, Tensor) else Tensor(condition)
        logits = linear(cond, self.gate_weight)
        if train_mode:
            if rng is None:
                raise ValueError("training-mode gating needs an rng for the noise term")
            logits = logits + Tensor(rng.normal(0.0, self.noise_std, size=logits.shape))
        return logits


def gate_forward(
    mixture: AdapterMixture,
    condition,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> GateDecision:
    """One gate invocation: softmax((W_gate c + noise) / tau), keep top-1.

    Noise is drawn i.i.d. N(0, 1/E) per invocation and only in training
    mode; ties on the largest entry resolve to the lowest index.
    """
    cond = condition if isinstance(condition, Tensor) else Tensor(condition)
    if cond.ndim != 1:
        raise ValueError("gate condition must be a vector")
    logits = mixture.gate_logits(cond, train_mode, rng)
    probs = softmax(logits, tau=mixture.tau)
    selected = int(np.argmax(probs.data))
    weights = np.zeros(mixture.num_experts)
    weights[selected] = probs.data[selected]
    return GateDecision(
        weights=weights,
        selected=selected,
        g_max=float(probs.data[selected]),
        picks=(selected,),
        probs=probs,
    )


def mixture_forward(mixture: AdapterMixture, x: Tensor, gate: GateDecision | None) -> Tensor:
    """Apply one gate decision: base output plus weighted adapter deltas.

    universal: y = W0 x + g_max * delta_sel(x) + (1 - g_max) * delta_u(x)
    top1:      y = W0 x + g_max * delta_sel(x)
    dense:     y = W0 x + delta_0(x)
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    base = linear(x, mixture.base)
    if mixture.combine == "dense":
        return base + mixture.experts[0].delta(x)
    if gate is None:
        raise ValueError("routed mixture needs a gate decision")
    g_top = take(gate.probs, gate.selected)
    out = base + g_top * mixture.experts[gate.selected].delta(x)
    if mixture.combine == "universal":
        out = out + (1.0 - g_top) * mixture.universal.delta(x)
    return out


def top2_forward(
    mixture: AdapterMixture,
    x: Tensor,
    condition,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Keep the two largest gate entries unchanged, no universal adapter."""
    if mixture.num_experts < 2:
        raise ValueError("top2 routing needs at least two experts")
    cond = condition if isinstance(condition, Tensor) else Tensor(condition)
    logits = mixture.gate_logits(cond, train_mode, rng)
    probs = softmax(logits, tau=mixture.tau)
    order = np.argsort(-probs.data, kind="stable")
    first, second = int(order[0]), int(order[1])
    x = x if isinstance(x, Tensor) else Tensor(x)
    out = linear(x, mixture.base)
    out = out + take(probs, first) * mixture.experts[first].delta(x)
    out = out + take(probs, second) * mixture.experts[second].delta(x)
    return out


def top2_decision(mixture: AdapterMixture, condition, train_mode: bool = False,
                  rng: np.random.Generator | None = None) -> GateDecision:
    """Gate decision keeping the two largest entries (for grouped routing)."""
    if mixture.num_experts < 2:
        raise ValueError("top2 routing needs at least two experts")
    cond = condition if isinstance(condition, Tensor) else Tensor(condition)
    logits = mixture.gate_logits(cond, train_mode, rng)
    probs = softmax(logits, tau=mixture.tau)
    order = np.argsort(-probs.data, kind="stable")
    first, second = int(order[0]), int(order[1])
    weights = np.zeros(mixture.num_experts)
    weights[first] = probs.data[first]
    weights[second] = probs.data[second]
    return GateDecision(
        weights=weights,
        selected=first,
        g_max=float(probs.data[first]),
        picks=(first, second),
        probs=probs,
    )


def build_condition(
    mode: str,
    *,
    cluster_row: Tensor | None = None,
    token_hidden: Tensor | None = None,
    instruction_hidden: Tensor | None = None,
    instruction_mask: np.ndarray | None = None,
) -> Tensor:
    """Condition vector for one gate decision, per routing mode.

    cluster: the trainable cluster-embedding row. token: the token's
    current hidden state. sentence: the mean hidden state over
    instruction positions only (answer positions excluded).
    """
    if mode == "cluster":
        if cluster_row is None:
            raise ValueError("cluster mode needs cluster_row")
        return cluster_row
    if mode == "token":
        if token_hidden is None:
            raise ValueError("token mode needs token_hidden")
        return token_hidden
    if mode == "sentence":
        if instruction_hidden is None or instruction_mask is None:
            raise ValueError("sentence mode needs instruction_hidden and instruction_mask")
        mask = np.asarray(instruction_mask, dtype=np.float64)
        total = float(mask.sum())
        if total == 0.0:
            raise ValueError("sentence mode needs at least one instruction position")
        summed = reduce_sum(instruction_hidden * Tensor(mask[:, None]), axis=0)
        return summed * (1.0 / total)
    raise ValueError(f"unknown gating mode {mode!r}")


def apply_grouped(
    mixture: AdapterMixture,
    x: Tensor,
    groups: list[tuple[GateDecision, np.ndarray]],
) -> Tensor:
    """Apply per-group gate decisions to a batch.

    `x` is (B, S, d_in); each group is one decision plus a boolean row
    mask over the batch. Rows of the same cluster share one decision,
    so this realizes cluster-conditioned routing on a mixed batch.
    """
    base = linear(x, mixture.base)
    if mixture.combine == "dense":
        return base + mixture.experts[0].delta(x)
    covered = np.zeros(x.shape[0], dtype=bool)
    expert_row_weight: dict[int, Tensor] = {}
    universal_row_weight: Tensor | None = None
    for decision, row_mask in groups:
        row_mask = np.asarray(row_mask, dtype=bool)
        if (covered & row_mask).any():
            raise ValueError("group row masks overlap")
        covered |= row_mask
        mask = Tensor(row_mask.astype(np.float64)[:, None, None])
        for idx in decision.picks:
            term = take(decision.probs, idx) * mask
            existing = expert_row_weight.get(idx)
            expert_row_weight[idx] = term if existing is None else existing + term
        if mixture.combine == "universal":
            uterm = (1.0 - take(decision.probs, decision.selected)) * mask
            universal_row_weight = (
                uterm if universal_row_weight is None else universal_row_weight + uterm
            )
    if not covered.all():
        raise ValueError("every batch row needs a gate decision")
    out = base
    for idx in sorted(expert_row_weight):
        out = out + expert_row_weight[idx] * mixture.experts[idx].delta(x)
    if mixture.combine == "universal":
        out = out + universal_row_weight * mixture.universal.delta(x)
    return out


def apply_rowwise(
    mixture: AdapterMixture,
    x: Tensor,
    probs: Tensor,
    per_token: bool,
) -> tuple[Tensor, np.ndarray]:
    """Apply per-row (sentence) or per-token gate probabilities.

    probs is (B, E) for sentence routing or (B, S, E) for token
    routing. Returns the output and the integer selection array used
    for tracing. Selection is by argmax with lowest-index ties; the
    kept entry stays unchanged and the universal weight is its
    complement, exactly as in the single-decision path.
    """
    selection = np.argmax(probs.data, axis=-1)
    g_top = take_along_last(probs, selection)
    if per_token:
        g_rows = reshape(g_top, (*selection.shape, 1))
    else:
        g_rows = reshape(g_top, (selection.shape[0], 1, 1))
    base = linear(x, mixture.base)
    out = base
    for e in np.unique(selection):
        chosen = (selection == e).astype(np.float64)
        mask = chosen[..., None] if per_token else chosen[:, None, None]
        out = out + (Tensor(mask) * g_rows) * mixture.experts[int(e)].delta(x)
    if mixture.combine == "universal":
        out = out + (1.0 - g_rows) * mixture.universal.delta(x)
    return out, selection
