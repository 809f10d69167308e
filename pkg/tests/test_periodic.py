import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ecgmoe.beats import global_stats_dim
from ecgmoe.errors import InsufficientPeaks, InvalidHyper, ShapeMismatch, UnknownTask
from ecgmoe.nn import grad_check
from ecgmoe.nn.core import Parameter
from ecgmoe.periodic import (
    ATTENTION_MODES,
    N_EXPERTS,
    AttentionIntegrator,
    ExpertBank,
    PeriodicMoE,
    TaskGate,
    gate_features,
)

STATS = global_stats_dim(1)
D_T = 4


def _gate(seed=0, mode="task", scale=1.0):
    rng = np.random.default_rng(seed)
    emb = Parameter("task_embeddings", rng.normal(size=(5, D_T)))
    gate = TaskGate(STATS, emb, rng, mode)
    gate.U.value[...] = scale * rng.normal(size=gate.U.shape)
    return gate


def _beats(rng, B=6, L=24):
    return rng.normal(size=(B, L)), rng.uniform(500, 1100, size=B - 1)


def _bank(seed=0):
    return ExpertBank(np.random.default_rng(seed), d_e=6, channels=3)


# ---------------------------------------------------------------- gate


def test_zero_gate_matrix_is_uniform():
    gate = _gate()
    gate.U.value[...] = 0.0
    g, _ = gate.forward(np.random.default_rng(1).normal(size=STATS), 3)
    np.testing.assert_array_equal(g, np.full(N_EXPERTS, 0.2))


def test_tasks_get_distinct_gates():
    for seed in range(50):
        gate = _gate(seed)
        stats = np.random.default_rng(seed + 100).normal(size=STATS)
        gates = np.stack([gate.forward(stats, t)[0] for t in range(5)])
        for i in range(5):
            for j in range(i + 1, 5):
                assert np.max(np.abs(gates[i] - gates[j])) > 1e-6, (seed, i, j)


def test_signal_gate_ignores_task_and_uniform_gate_is_constant():
    stats = np.random.default_rng(0).normal(size=STATS)
    sig = _gate(mode="signal")
    np.testing.assert_array_equal(sig.forward(stats, 0)[0], sig.forward(stats, 4)[0])
    uni = _gate(mode="uniform")
    g, cache = uni.forward(stats, 2)
    np.testing.assert_array_equal(g, np.full(N_EXPERTS, 0.2))
    np.testing.assert_array_equal(uni.backward(np.ones(N_EXPERTS), cache), np.zeros(STATS))


@given(st.integers(0, 2**31), st.integers(0, N_EXPERTS - 1), st.floats(0.01, 5.0))
def test_pushing_a_row_towards_the_input_raises_that_weight(seed, k, c):
    gate = _gate(seed % 1000)
    stats = np.random.default_rng(seed).normal(size=STATS)
    g0, (u, _, _) = gate.forward(stats, 1)
    gate.U.value[k] += c * u / np.dot(u, u)
    g1, _ = gate.forward(stats, 1)
    assert g1[k] > g0[k] or g0[k] == 1.0
    others = np.delete(np.arange(N_EXPERTS), k)
    assert np.all(g1[others] <= g0[others])


@given(hnp.arrays(np.float64, STATS, elements=st.floats(-1e4, 1e4)), st.integers(0, 4), st.floats(0.0, 100.0))
def test_gate_is_on_the_simplex(stats, task, scale):
    g, _ = _gate(scale=scale).forward(stats, task)
    assert np.all(g >= 0)
    assert abs(g.sum() - 1.0) <= 1e-9


def test_gate_errors():
    gate = _gate()
    with pytest.raises(UnknownTask):
        gate.forward(np.zeros(STATS), 5)
    with pytest.raises(ShapeMismatch):
        gate.forward(np.zeros(STATS + 1), 0)
    with pytest.raises(InvalidHyper):
        _gate(mode="learned")


def test_gate_features_converts_rr_to_seconds():
    stats = np.arange(STATS, dtype=float) * 1000.0
    x = gate_features(stats)
    np.testing.assert_array_equal(x[:-4], stats[:-4])
    np.testing.assert_array_equal(x[-4:], stats[-4:] / 1000.0)


def test_gate_grad_check():
    gate = _gate(3)
    report = grad_check(gate, (np.random.default_rng(0).normal(size=STATS), 2), h=1e-5, tol=1e-5)
    assert report.passed, report
    assert "task_embeddings" in report.errors


# ---------------------------------------------------------------- experts


def test_morphology_vectors_do_not_depend_on_beat_count():
    bank = _bank()
    beat = np.random.default_rng(0).normal(size=24)
    E3, _ = bank.forward(np.tile(beat, (3, 1)), np.full(2, 800.0))
    E9, _ = bank.forward(np.tile(beat, (9, 1)), np.full(8, 800.0))
    np.testing.assert_allclose(E3[:3], E9[:3], atol=1e-12)


def test_permuting_beats_moves_rhythm_only():
    rng = np.random.default_rng(1)
    bank = _bank(1)
    beats, rr = _beats(rng, B=8)
    E, _ = bank.forward(beats, rr)
    perm = rng.permutation(8)
    Ep, _ = bank.forward(beats[perm], rr[np.clip(perm[1:] - 1, 0, None)])
    np.testing.assert_allclose(Ep[:3], E[:3], atol=1e-12)
    assert np.max(np.abs(Ep[3:] - E[3:])) > 1e-6


def test_duplicating_the_beat_set_keeps_morphology():
    rng = np.random.default_rng(2)
    bank = _bank(2)
    beats, rr = _beats(rng)
    E, _ = bank.forward(beats, rr)
    E2, _ = bank.forward(np.vstack([beats, beats]), np.concatenate([rr, [800.0], rr]))
    np.testing.assert_allclose(E2[:3], E[:3], atol=1e-12)


def test_expert_bank_rejects_too_few_beats():
    bank = _bank()
    with pytest.raises(InsufficientPeaks):
        bank.forward(np.zeros((1, 24)), np.zeros(0))
    with pytest.raises(ShapeMismatch):
        bank.forward(np.zeros((4, 24)), np.zeros(2))


# ---------------------------------------------------------------- integration


def _moe(mode="hybrid", seed=0, gating="task"):
    rng = np.random.default_rng(seed)
    emb = Parameter("task_embeddings", rng.normal(size=(5, D_T)))
    return PeriodicMoE(STATS, emb, rng, d_e=6, d_p=5, channels=3, heads=2, attention=mode, gating=gating)


@pytest.mark.parametrize("mode", ATTENTION_MODES)
def test_one_hot_gate_ignores_the_other_experts(mode):
    moe = _moe(mode)
    rng = np.random.default_rng(0)
    E = rng.normal(size=(N_EXPERTS, 6))
    g = np.eye(N_EXPERTS)[1]
    out, _ = moe.integrate(E, g)
    E2 = E.copy()
    E2[[0, 2, 3, 4]] = rng.normal(size=(4, 6))
    out2, _ = moe.integrate(E2, g)
    np.testing.assert_array_equal(out.f_periodic, out2.f_periodic)


def test_identical_tokens_attend_uniformly():
    moe = _moe("self")
    E = np.tile(np.random.default_rng(0).normal(size=6), (N_EXPERTS, 1))
    out, _ = moe.integrate(E, np.full(N_EXPERTS, 0.2))
    np.testing.assert_allclose(out.attention_weights["self"], 0.2, atol=1e-12)
    hybrid = _moe("hybrid").integrate(E, np.full(N_EXPERTS, 0.2))[0]
    np.testing.assert_allclose(hybrid.attention_weights["self"], 1 / 3, atol=1e-12)
    np.testing.assert_allclose(hybrid.attention_weights["cross"], 1 / 3, atol=1e-12)


def test_attention_modes_give_different_features():
    E = np.random.default_rng(0).normal(size=(N_EXPERTS, 6))
    g = np.full(N_EXPERTS, 0.2)
    feats = {m: _moe(m).integrate(E, g)[0].f_periodic for m in ATTENTION_MODES}
    assert not np.allclose(feats["self"], feats["hybrid"])
    assert not np.allclose(feats["cross"], feats["hybrid"])
    assert set(_moe("self").integrate(E, g)[0].attention_weights) == {"self"}
    assert set(_moe("cross").integrate(E, g)[0].attention_weights) == {"cross"}


def test_integrate_shape_errors():
    moe = _moe()
    with pytest.raises(ShapeMismatch):
        moe.integrate(np.zeros((4, 6)), np.full(5, 0.2))
    with pytest.raises(ShapeMismatch):
        moe.integrate(np.zeros((5, 6)), np.full(4, 0.25))
    with pytest.raises(InvalidHyper):
        AttentionIntegrator(6, 5, 2, np.random.default_rng(0), mode="none")


@pytest.mark.parametrize("mode", ATTENTION_MODES)
def test_integrator_grad_check(mode):
    rng = np.random.default_rng(4)
    integ = AttentionIntegrator(6, 5, 2, rng, mode)
    report = grad_check(integ, rng.normal(size=(N_EXPERTS, 6)), h=1e-5, tol=1e-5)
    assert report.passed, report


@pytest.mark.parametrize("mode,gating", [("hybrid", "task"), ("self", "signal"), ("cross", "uniform")])
def test_full_periodic_path_grad_check(mode, gating):
    rng = np.random.default_rng(7)
    moe = _moe(mode, seed=7, gating=gating)
    beats, rr = _beats(rng)
    stats = rng.normal(size=STATS)
    report = grad_check(moe, (beats, rr, stats, 2), h=1e-5, tol=1e-4, max_entries=10, check_inputs=False)
    assert report.passed, report
