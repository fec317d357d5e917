import math

import numpy as np
import pytest

from clustermix.mixture import (
    AdapterMixture,
    ClusterEmbeddings,
    GateDecision,
    apply_grouped,
    apply_rowwise,
    build_condition,
    gate_forward,
    mixture_forward,
    top2_decision,
    top2_forward,
)
from clustermix.tensor import Parameter, Tape, Tensor, check_gradients, make_rng, reduce_sum


def make_mixture(
    d_in=6,
    d_out=5,
    num_experts=4,
    rank=2,
    cond_dim=8,
    tau=1.0,
    combine="universal",
    seed=0,
) -> AdapterMixture:
    rng = make_rng(seed, "mixture-test")
    base = Parameter(rng.normal(size=(d_out, d_in)), trainable=False, name="base")
    return AdapterMixture(
        base, num_experts, rank, cond_dim, tau, make_rng(seed, "mixture-init"), combine=combine
    )


def randomize_adapters(mixture: AdapterMixture, seed=1) -> None:
    rng = make_rng(seed, "adapter-values")
    adapters = list(mixture.experts)
    if mixture.universal is not None:
        adapters.append(mixture.universal)
    for adapter in adapters:
        adapter.down.data[...] = rng.normal(size=adapter.down.shape)
        adapter.up.data[...] = rng.normal(size=adapter.up.shape)


def test_gate_single_expert_gives_weight_one():
    mixture = make_mixture(num_experts=1)
    gate = gate_forward(mixture, np.ones(8))
    assert gate.weights.tolist() == [1.0]
    assert gate.g_max == 1.0
    assert gate.universal_weight == 0.0


def test_gate_equal_logits_tie_to_lowest_index():
    mixture = make_mixture(num_experts=4)
    mixture.gate_weight.data[...] = 0.0
    gate = gate_forward(mixture, np.ones(8))
    assert gate.selected == 0
    assert gate.g_max == pytest.approx(0.25)
    assert np.array_equal(gate.weights, [0.25, 0.0, 0.0, 0.0])
    assert gate.universal_weight == pytest.approx(0.75)


def test_gate_against_direct_softmax():
    mixture = make_mixture(num_experts=4, cond_dim=4, tau=1.0)
    mixture.gate_weight.data[...] = np.diag([2.0, 0.0, 0.0, 0.0])
    gate = gate_forward(mixture, np.array([1.0, 1.0, 1.0, 1.0]))
    expected = math.exp(2.0) / (math.exp(2.0) + 3.0)
    assert gate.selected == 0
    assert gate.g_max == pytest.approx(expected, rel=1e-12)
    assert gate.universal_weight == pytest.approx(1.0 - expected, rel=1e-12)


def test_gate_weight_algebra_at_most_one_nonzero():
    mixture = make_mixture(num_experts=6)
    rng = make_rng(3, "gate-algebra")
    for _ in range(25):
        gate = gate_forward(mixture, rng.normal(size=8))
        nonzero = np.flatnonzero(gate.weights)
        assert len(nonzero) == 1
        assert nonzero[0] == gate.selected
        assert gate.g_max + gate.universal_weight == 1.0
        assert 1.0 / 6.0 <= gate.g_max <= 1.0
        assert 0.0 <= gate.universal_weight <= 1.0 - 1.0 / 6.0 + 1e-12


def test_gate_shift_invariance():
    mixture = make_mixture(num_experts=4, cond_dim=4, tau=0.5)
    rng = make_rng(4, "gate-shift")
    w = rng.normal(size=(4, 4))
    mixture.gate_weight.data[...] = w
    cond = rng.normal(size=4)
    base_gate = gate_forward(mixture, cond)
    mixture.gate_weight.data[...] = w + np.outer(np.full(4, 3.3), cond) / (cond @ cond)
    shifted_gate = gate_forward(mixture, cond)
    assert shifted_gate.selected == base_gate.selected
    assert abs(shifted_gate.g_max - base_gate.g_max) < 1e-9


def test_gate_temperature_monotonicity():
    mixture = make_mixture(num_experts=4, cond_dim=4, tau=1.0)
    mixture.gate_weight.data[...] = np.diag([1.3, 0.4, -0.2, 0.1])
    cond = np.ones(4)
    values = []
    for tau in (0.01, 0.05, 0.1, 0.2):
        mixture.tau = tau
        values.append(gate_forward(mixture, cond).g_max)
    assert values[0] > values[1] > values[2] > values[3]


def test_gate_noise_explores_near_ties():
    mixture = make_mixture(num_experts=2, cond_dim=4, tau=1.0)
    mixture.gate_weight.data[...] = 0.0
    mixture.gate_weight.data[0, 0] = 0.001  # top-two softmax gap < 0.01
    cond = np.ones(4)
    rng = make_rng(5, "gate-noise")
    seen = {gate_forward(mixture, cond, train_mode=True, rng=rng).selected for _ in range(200)}
    assert seen == {0, 1}


def test_gate_noise_off_is_deterministic():
    mixture = make_mixture(num_experts=4)
    cond = make_rng(6, "gate-det").normal(size=8)
    a = gate_forward(mixture, cond)
    b = gate_forward(mixture, cond)
    assert a.selected == b.selected
    assert a.g_max == b.g_max


def test_gate_train_mode_requires_rng():
    mixture = make_mixture()
    with pytest.raises(ValueError):
        gate_forward(mixture, np.ones(8), train_mode=True, rng=None)


def test_gate_rejects_nonfinite_condition():
    from clustermix.tensor import NumericError

    mixture = make_mixture()
    with pytest.raises(NumericError):
        gate_forward(mixture, np.array([np.nan] * 8))


def test_forward_zero_init_equals_base():
    mixture = make_mixture()
    x = Tensor(make_rng(7, "x").normal(size=(3, 6)))
    gate = gate_forward(mixture, np.ones(8))
    out = mixture_forward(mixture, x, gate)
    assert np.array_equal(out.data, x.data @ mixture.base.data.T)


def test_forward_single_expert_full_weight():
    mixture = make_mixture(num_experts=1, combine="top1")
    randomize_adapters(mixture)
    x = Tensor(make_rng(8, "x1").normal(size=(2, 6)))
    gate = gate_forward(mixture, np.ones(8))
    out = mixture_forward(mixture, x, gate)
    expert = mixture.experts[0]
    expected = x.data @ mixture.base.data.T + x.data @ expert.down.data.T @ expert.up.data.T
    assert np.allclose(out.data, expected, atol=1e-12)


def test_forward_matches_dense_materialization():
    mixture = make_mixture()
    randomize_adapters(mixture)
    rng = make_rng(9, "dense-oracle")
    x = Tensor(rng.normal(size=(4, 6)))
    gate = gate_forward(mixture, rng.normal(size=8))
    out = mixture_forward(mixture, x, gate)

    sel = mixture.experts[gate.selected]
    effective = (
        mixture.base.data
        + gate.g_max * sel.up.data @ sel.down.data
        + (1.0 - gate.g_max) * mixture.universal.up.data @ mixture.universal.down.data
    )
    assert np.allclose(out.data, x.data @ effective.T, atol=1e-10)


def test_top2_equal_logits_take_first_two():
    mixture = make_mixture(num_experts=4, tau=1.0)
    mixture.gate_weight.data[...] = 0.0
    decision = top2_decision(mixture, np.ones(8))
    assert decision.picks == (0, 1)
    assert np.allclose(decision.weights, [0.25, 0.25, 0.0, 0.0])


def test_top2_weights_not_renormalized():
    mixture = make_mixture(num_experts=4, cond_dim=4, tau=1.0)
    mixture.gate_weight.data[...] = np.diag([3.0, 1.0, 0.0, -1.0])
    decision = top2_decision(mixture, np.ones(4))
    assert decision.weights.sum() < 1.0


def test_top2_matches_sort_and_mask_oracle():
    rng = make_rng(10, "top2-oracle")
    for trial in range(5):
        mixture = make_mixture(num_experts=5, combine="top2", seed=trial)
        randomize_adapters(mixture, seed=trial + 40)
        cond = rng.normal(size=8)
        x = Tensor(rng.normal(size=(3, 6)))
        out = top2_forward(mixture, x, cond)

        probs = gate_forward_probs(mixture, cond)
        masked = probs.copy()
        masked[np.argsort(-probs, kind="stable")[2:]] = 0.0
        expected = x.data @ mixture.base.data.T
        for e in np.flatnonzero(masked):
            expert = mixture.experts[e]
            expected = expected + masked[e] * (x.data @ expert.down.data.T @ expert.up.data.T)
        assert np.allclose(out.data, expected, atol=1e-10)


def gate_forward_probs(mixture, cond):
    logits = mixture.gate_weight.data @ np.asarray(cond)
    z = (logits - logits.max()) / mixture.tau
    e = np.exp(z)
    return e / e.sum()


def test_top2_requires_two_experts():
    mixture = make_mixture(num_experts=1, combine="top1")
    with pytest.raises(ValueError):
        top2_forward(mixture, Tensor(np.ones((1, 6))), np.ones(8))


def test_build_condition_cluster_row_is_centroid_at_init():
    centroids = make_rng(11, "centroids").normal(size=(3, 8))
    table = ClusterEmbeddings(centroids)
    row = build_condition("cluster", cluster_row=table.row(2))
    assert np.array_equal(row.data, centroids[2])


def test_build_condition_sentence_mean_of_identical_rows():
    h = Tensor(np.tile([1.0, 2.0, 3.0], (4, 1)))
    mask = np.array([1.0, 1.0, 1.0, 0.0])
    cond = build_condition("sentence", instruction_hidden=h, instruction_mask=mask)
    assert np.allclose(cond.data, [1.0, 2.0, 3.0])


def test_build_condition_missing_input_raises():
    with pytest.raises(ValueError):
        build_condition("cluster")
    with pytest.raises(ValueError):
        build_condition("token")
    with pytest.raises(ValueError):
        build_condition("nonsense")


def test_rowwise_token_routing_matches_per_token_oracle():
    mixture = make_mixture(d_in=6, d_out=6, cond_dim=6, num_experts=3, tau=0.7)
    randomize_adapters(mixture, seed=12)
    rng = make_rng(13, "token-oracle")
    x = Tensor(rng.normal(size=(1, 5, 6)))
    from clustermix.tensor import softmax as tsoftmax
    from clustermix.tensor import linear as tlinear

    probs = tsoftmax(tlinear(x, mixture.gate_weight), tau=mixture.tau, axis=-1)
    out, selection = apply_rowwise(mixture, x, probs, per_token=True)
    assert selection.shape == (1, 5)
    for t in range(5):
        token = Tensor(x.data[0, t])
        cond = build_condition("token", token_hidden=token)
        gate = gate_forward(mixture, cond)
        expected = mixture_forward(mixture, token, gate)
        assert gate.selected == selection[0, t]
        assert np.allclose(out.data[0, t], expected.data, atol=1e-10)


def test_grouped_routing_matches_single_decision_application():
    mixture = make_mixture()
    randomize_adapters(mixture, seed=14)
    rng = make_rng(15, "grouped")
    x = Tensor(rng.normal(size=(4, 3, 6)))
    gate_a = gate_forward(mixture, rng.normal(size=8))
    gate_b = gate_forward(mixture, rng.normal(size=8))
    rows_a = np.array([True, False, True, False])
    out = apply_grouped(mixture, x, [(gate_a, rows_a), (gate_b, ~rows_a)])
    for i in range(4):
        gate = gate_a if rows_a[i] else gate_b
        expected = mixture_forward(mixture, Tensor(x.data[i]), gate)
        assert np.allclose(out.data[i], expected.data, atol=1e-10)


def test_grouped_routing_requires_full_cover():
    mixture = make_mixture()
    x = Tensor(np.zeros((2, 2, 6)))
    gate = gate_forward(mixture, np.ones(8))
    with pytest.raises(ValueError):
        apply_grouped(mixture, x, [(gate, np.array([True, False]))])


def test_gradients_flow_to_all_trainable_parts_and_not_base():
    mixture = make_mixture(d_in=4, d_out=3, num_experts=3, rank=2, cond_dim=8, tau=0.5)
    randomize_adapters(mixture, seed=16)
    table = ClusterEmbeddings(make_rng(17, "table").normal(size=(2, 8)))
    rng = make_rng(18, "layer-grad")
    x_data = rng.normal(size=(2, 4))
    probe = rng.normal(size=(2, 3))

    def build_loss():
        gate = gate_forward(mixture, build_condition("cluster", cluster_row=table.row(1)))
        out = mixture_forward(mixture, Tensor(x_data), gate)
        return reduce_sum(out * probe)

    sel = gate_forward(mixture, table.row(1)).selected
    params = [
        mixture.experts[sel].down,
        mixture.experts[sel].up,
        mixture.universal.down,
        mixture.universal.up,
        mixture.gate_weight,
        table.table,
    ]
    assert check_gradients(build_loss, params) < 1e-4

    with Tape() as tape:
        tape.backward(build_loss())
    assert np.array_equal(mixture.base.grad, np.zeros_like(mixture.base.data))
    assert np.abs(table.table.grad[1]).sum() > 0.0
    assert np.array_equal(table.table.grad[0], np.zeros(8))


def test_cluster_table_is_shared_by_identity():
    centroids = np.zeros((2, 8))
    table = ClusterEmbeddings(centroids)
    m1 = make_mixture()
    m2 = make_mixture(seed=21)
    # both mixtures read the same table object: a row edit is seen by both
    table.table.data[1, :] = 7.0
    r1 = build_condition("cluster", cluster_row=table.row(1))
    r2 = build_condition("cluster", cluster_row=table.row(1))
    assert np.array_equal(r1.data, r2.data)
    assert gate_forward(m1, r1).g_max == gate_forward(m1, r2).g_max
    assert m1 is not m2


def test_mixture_rejects_trainable_base():
    base = Parameter(np.zeros((3, 3)), trainable=True)
    with pytest.raises(ValueError):
        AdapterMixture(base, 2, 1, 8, 0.05, make_rng(0, "x"))


def test_noise_std_follows_expert_count():
    for e in (1, 2, 4, 8):
        mixture = make_mixture(num_experts=e, combine="top1")
        assert mixture.noise_std == pytest.approx(math.sqrt(1.0 / e))
