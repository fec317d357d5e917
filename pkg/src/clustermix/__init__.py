"""Cluster-conditioned mixtures of low-rank adapters on a tiny transformer."""

from .clustering import ClusterModel, assign_cluster, kmeans_fit, kmeans_objective
from .encoder import encode_instruction, tokenize
from .mixture import (
    AdapterMixture,
    ClusterEmbeddings,
    GateDecision,
    LowRankAdapter,
    build_condition,
    gate_forward,
    mixture_forward,
    top2_forward,
)
from .model import Model, ModelConfig, evaluate, forward, pretrain_base, sequence_loss
from .reports import MetricsReport, RoutingRecord
from .taskgen import Corpus, SuiteConfig, generate_corpus
from .tensor import Parameter, Tape, Tensor, finite_diff_grad, make_rng

__version__ = "0.1.0"

__all__ = [
    "AdapterMixture",
    "ClusterEmbeddings",
    "ClusterModel",
    "Corpus",
    "GateDecision",
    "LowRankAdapter",
    "MetricsReport",
    "Model",
    "ModelConfig",
    "Parameter",
    "RoutingRecord",
    "SuiteConfig",
    "Tape",
    "Tensor",
    "assign_cluster",
    "build_condition",
    "encode_instruction",
    "evaluate",
    "finite_diff_grad",
    "forward",
    "gate_forward",
    "generate_corpus",
    "kmeans_fit",
    "kmeans_objective",
    "make_rng",
    "mixture_forward",
    "pretrain_base",
    "sequence_loss",
    "tokenize",
    "top2_forward",
]
