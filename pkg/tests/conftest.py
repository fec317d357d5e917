import pytest

from clustermix.harness import ExperimentConfig, TrainSettings, fit_corpus_clusters
from clustermix.model import Model, ModelConfig, pretrain_base
from clustermix.taskgen import SuiteConfig, generate_corpus
from clustermix.tensor import make_rng


def micro_suite(**overrides) -> SuiteConfig:
    base = dict(
        tasks=("first", "last"),
        combo_task="bounds",
        scaffold_templates=True,
        train_records_per_task=24,
        heldout_records_per_task=6,
        combo_records=6,
    )
    base.update(overrides)
    return SuiteConfig(**base)


def micro_model(**overrides) -> ModelConfig:
    base = dict(d_model=16, n_layers=1, n_heads=2, num_experts=3, rank=2,
                num_clusters=4, embed_dim=16)
    base.update(overrides)
    return ModelConfig(**base)


def micro_train(**overrides) -> TrainSettings:
    base = dict(adapter_steps=25, batch_size=16, adapter_lr=5e-3,
                pretrain_steps=30, pretrain_lr=3e-3, gate_lr_scale=0.02)
    base.update(overrides)
    return TrainSettings(**base)


def micro_experiment(**overrides) -> ExperimentConfig:
    base = dict(suite=micro_suite(), model=micro_model(), train=micro_train(),
                variant="cluster", seeds=(0,))
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(micro_suite(), seed=0)


@pytest.fixture(scope="session")
def small_base():
    """One frozen pretrained base shared by contract tests."""
    return pretrain_base(micro_model(), seed=0, steps=30)


@pytest.fixture()
def adapted_setup(small_corpus, small_base):
    """Fresh adapter-mode model over the shared base and corpus."""
    config = micro_model()
    cluster_model = fit_corpus_clusters(small_corpus, config, seed=0)
    model = Model(config, init_rng=make_rng(0, "test-clone"))
    for (_, src), (_, dst) in zip(small_base.named_parameters(), model.named_parameters()):
        dst.data[...] = src.data
    model.freeze_dense()
    model.attach_adapters(cluster_model.centroids, make_rng(0, "test-adapters"))
    return model, cluster_model, small_corpus
