import itertools

import numpy as np
import pytest
from helpers import conv1d_reference, op_cases
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ecgmoe.errors import InvalidHeads, InvalidHyper, ShapeMismatch
from ecgmoe.nn import grad_check
from ecgmoe.nn.core import (
    Module,
    Parameter,
    adaptive_avg_pool_matrix,
    conv1d_forward,
    conv1d_output_length,
    linear_forward,
    moving_average_forward,
    same_padding,
    softmax,
)
from ecgmoe.nn.layers import Linear, LoraLayer, MultiHeadAttention, lora_forward
from ecgmoe.nn.losses import bce_with_logits, cross_entropy, mae, nt_xent


# ---------------------------------------------------------------- linear


def test_linear_identity_and_hand_example():
    x = np.array([1.0, 2.0])
    y, _ = linear_forward(x, np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(y, x)
    y, _ = linear_forward(x, np.array([[1.0, 1.0], [0.0, 1.0]]), np.array([0.0, 1.0]))
    np.testing.assert_array_equal(y, [3.0, 3.0])


def test_linear_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeMismatch, match=r"\(3,\).*\(2, 2\)"):
        linear_forward(np.zeros(3), np.zeros((2, 2)))


# ---------------------------------------------------------------- conv1d


def test_impulse_reproduces_reversed_kernel():
    k = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    x = np.zeros((1, 21))
    x[0, 10] = 1.0
    y, _ = conv1d_forward(x, k[None, None, :], None, padding=same_padding(5))
    np.testing.assert_array_equal(y[0, 8:13], k[::-1])
    assert np.count_nonzero(y) == 5


def test_dilated_receptive_field_spans_five_samples():
    rng = np.random.default_rng(0)
    kern = rng.normal(size=(1, 1, 3))
    x = rng.normal(size=(1, 30))
    y0, _ = conv1d_forward(x, kern, None, dilation=2)
    # output 0 reads samples 0, 2, 4
    x_near = x.copy()
    x_near[0, 4] += 1.0
    x_far = x.copy()
    x_far[0, 5] += 1.0
    assert conv1d_forward(x_near, kern, None, dilation=2)[0][0, 0] != y0[0, 0]
    assert conv1d_forward(x_far, kern, None, dilation=2)[0][0, 0] == y0[0, 0]


def test_conv_matches_triple_loop_on_shape_grid():
    rng = np.random.default_rng(0)
    worst = 0.0
    for cin, cout, K, dil in itertools.product([1, 2, 4], [1, 3, 4], [1, 3, 7, 15], [1, 2, 4]):
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 8))
        T = int(rng.integers(dil * (K - 1) + 1, 80))
        x = rng.normal(size=(cin, T))
        kern = rng.normal(size=(cout, cin, K))
        bias = rng.normal(size=cout)
        y, _ = conv1d_forward(x, kern, bias, stride, dil, padding)
        ref = conv1d_reference(x, kern, bias, stride, dil, padding)
        worst = max(worst, float(np.max(np.abs(y - ref))))
    assert worst < 1e-10


def test_conv_errors():
    x = np.zeros((2, 10))
    with pytest.raises(InvalidHyper):
        conv1d_forward(x, np.zeros((1, 2, 3)), stride=0)
    with pytest.raises(InvalidHyper):
        conv1d_forward(x, np.zeros((1, 2, 3)), dilation=0)
    with pytest.raises(ShapeMismatch):
        conv1d_forward(x, np.zeros((1, 3, 3)))
    with pytest.raises(ShapeMismatch):
        conv1d_forward(x, np.zeros((1, 2, 7)), dilation=2)
    assert conv1d_output_length(10, 3, stride=2, dilation=1, padding=1) == 5


# ---------------------------------------------------------------- softmax


def test_softmax_cases():
    np.testing.assert_array_equal(softmax(np.zeros(5)), np.full(5, 0.2))
    x = np.random.default_rng(0).normal(size=7)
    np.testing.assert_allclose(softmax(x + 123.4), softmax(x), atol=1e-12)
    y = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(y)) and y[0] == 1.0 and y[1] < 1e-300


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
                  elements=st.floats(-700, 700)))
def test_softmax_rows_are_on_the_simplex(x):
    y = softmax(x, axis=1)
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)


@given(hnp.arrays(np.float64, st.integers(1, 8), elements=st.floats(-30, 30)))
def test_softmax_strictly_positive_for_moderate_logits(x):
    assert np.all(softmax(x) > 0)


# ---------------------------------------------------------------- attention


def test_single_token_attention_is_value_projection():
    rng = np.random.default_rng(0)
    mha = MultiHeadAttention("m", 6, 3, rng)
    x = rng.normal(size=(1, 6))
    (y, w), _ = mha.forward(x, x, x)
    np.testing.assert_array_equal(w, np.ones((3, 1, 1)))
    v, _ = mha.v.forward(x)
    expected, _ = mha.o.forward(v)
    np.testing.assert_allclose(y, expected, atol=1e-12)


def test_permuting_keys_permutes_weight_columns():
    rng = np.random.default_rng(1)
    mha = MultiHeadAttention("m", 8, 2, rng)
    q, kv = rng.normal(size=(3, 8)), rng.normal(size=(5, 8))
    perm = rng.permutation(5)
    (y1, w1), _ = mha.forward(q, kv, kv)
    (y2, w2), _ = mha.forward(q, kv[perm], kv[perm])
    np.testing.assert_allclose(w2, w1[:, :, perm], atol=1e-12)
    np.testing.assert_allclose(y2, y1, atol=1e-12)


def test_attention_rows_sum_to_one_and_heads_validated():
    rng = np.random.default_rng(2)
    mha = MultiHeadAttention("m", 8, 4, rng)
    (_, w), _ = mha.forward(rng.normal(size=(4, 8)), rng.normal(size=(6, 8)), rng.normal(size=(6, 8)))
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
    with pytest.raises(InvalidHeads):
        MultiHeadAttention("bad", 8, 3, rng)
    with pytest.raises(ShapeMismatch):
        mha.forward(np.zeros((2, 7)), np.zeros((2, 8)), np.zeros((2, 8)))


# ---------------------------------------------------------------- LoRA


def _lora(rng, d_in=6, d_out=4, rank=2, alpha=4.0):
    W = Parameter("W", rng.normal(size=(d_out, d_in)), frozen=True)
    return LoraLayer("l", W, None, rank, alpha, rng)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.just(6)), elements=st.floats(-1e3, 1e3)))
def test_fresh_lora_equals_base_exactly(x):
    layer = _lora(np.random.default_rng(0))
    np.testing.assert_array_equal(lora_forward(layer, x), x @ layer.base_weight.value.T)


def test_full_rank_lora_realises_any_delta():
    rng = np.random.default_rng(3)
    layer = _lora(rng, d_in=4, d_out=3, rank=3, alpha=3.0)
    delta = rng.normal(size=(3, 4))
    # B A = delta with A = delta's first rows completed to full row rank
    layer.A.value[...] = delta
    layer.B.value[...] = np.eye(3)
    x = rng.normal(size=4)
    np.testing.assert_allclose(lora_forward(layer, x), (layer.base_weight.value + delta) @ x, atol=1e-12)


def test_frozen_base_receives_no_gradient():
    rng = np.random.default_rng(4)
    layer = _lora(rng)
    layer.B.value[...] = rng.normal(size=layer.B.shape)
    y, cache = layer.forward(rng.normal(size=(3, 6)))
    layer.backward(np.ones_like(y), cache)
    assert not np.any(layer.base_weight.grad)
    assert np.any(layer.A.grad) and np.any(layer.B.grad)
    report = grad_check(layer, rng.normal(size=(3, 6)), h=1e-4, tol=1e-5)
    assert report.passed, report
    assert "base_weight" not in report.errors and "A" in report.errors


def test_lora_rank_validation():
    with pytest.raises(ShapeMismatch):
        _lora(np.random.default_rng(0), rank=5)
    with pytest.raises(ShapeMismatch):
        _lora(np.random.default_rng(0), rank=0)


# ---------------------------------------------------------------- losses


def test_loss_closed_forms():
    x = np.array([1.0, -2.0, 3.0])
    assert mae(x, x)[0] == 0.0
    assert bce_with_logits(np.array([0.0]), np.array([0.5]))[0] == pytest.approx(np.log(2), abs=1e-12)
    gaps = [cross_entropy(np.array([g, 0.0, 0.0]), 0)[0] for g in (1.0, 10.0, 100.0)]
    assert gaps[0] > gaps[1] > gaps[2] >= 0 and gaps[2] < 1e-40


def test_losses_are_non_negative_and_validate_shapes():
    rng = np.random.default_rng(0)
    for _ in range(50):
        z = rng.normal(size=(4, 3)) * 10
        assert cross_entropy(z, rng.integers(0, 3, 4))[0] >= 0
        assert bce_with_logits(z[:, 0], rng.integers(0, 2, 4).astype(float))[0] >= 0
        assert nt_xent(z, rng.normal(size=(4, 3)))[0] >= 0
    with pytest.raises(ShapeMismatch):
        mae(np.zeros(3), np.zeros(4))
    with pytest.raises(ShapeMismatch):
        cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ShapeMismatch):
        nt_xent(np.zeros((4, 3)), np.zeros((4, 2)))
    with pytest.raises(InvalidHyper):
        nt_xent(np.ones((4, 3)), np.ones((4, 3)), temperature=0.0)


def test_nt_xent_prefers_aligned_pairs():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(8, 16))
        aligned = nt_xent(z, z, 0.5)[0]
        shuffled = nt_xent(z, z[np.roll(np.arange(8), 1)], 0.5)[0]
        assert np.isfinite(aligned) and np.isfinite(shuffled)
        assert aligned < shuffled


# ---------------------------------------------------------------- grad_check


@pytest.mark.parametrize("seed", range(3))
def test_every_op_passes_finite_differences(seed):
    for label, module, inputs in op_cases(seed):
        report = grad_check(module, inputs, h=1e-4, tol=1e-5, seed=seed)
        assert report.passed, f"{label}: {report}"


def test_step_size_outside_range_is_rejected():
    lin = Linear("l", 2, 2, np.random.default_rng(0))
    with pytest.raises(InvalidHyper):
        grad_check(lin, np.zeros(2), h=1e-2)
    with pytest.raises(InvalidHyper):
        grad_check(lin, np.zeros(2), h=1e-8)


class _DoubledLinear(Linear):
    def backward(self, dy, cache):
        dx = super().backward(dy, cache)
        self.W.grad *= 2.0
        return dx


def test_planted_fault_is_caught():
    rng = np.random.default_rng(0)
    report = grad_check(_DoubledLinear("bad", 5, 3, rng), rng.normal(size=(4, 5)), h=1e-4, tol=1e-5)
    assert not report.passed
    assert report.errors["W"] == pytest.approx(1.0, abs=1e-3)
    assert report.worst() == "W"


def test_relu_kink_entries_are_skipped_not_misreported():
    # an input that sits exactly on the kink has no derivative
    from helpers import relu_op

    report = grad_check(relu_op(), np.array([0.0, 1.0, -1.0, 2.0]), h=1e-4, tol=1e-5)
    assert report.passed and report.skipped == 1


def test_frozen_parameters_are_not_checked():
    rng = np.random.default_rng(0)
    lin = Linear("l", 3, 2, rng)
    lin.b.frozen = True
    report = grad_check(lin, rng.normal(size=3))
    assert "b" not in report.errors and "W" in report.errors


# ---------------------------------------------------------------- helpers


def test_pool_matrix_rows_average_and_cover_everything():
    for T, bins in [(10, 3), (7, 7), (128, 8), (5, 8)]:
        M = adaptive_avg_pool_matrix(T, bins)
        np.testing.assert_allclose(M.sum(axis=1), 1.0)
        assert np.all(M.sum(axis=0) > 0)


def test_moving_average_of_constant_is_constant():
    y, _ = moving_average_forward(np.full((2, 20), 3.5), 7)
    np.testing.assert_allclose(y, 3.5, atol=1e-12)


def test_module_parameter_walk_deduplicates_shared_parameters():
    class Pair(Module):
        def __init__(self):
            shared = Parameter("shared", np.zeros(3))
            self.first = shared
            self.items = [shared, shared]

    assert [n for n, _ in Pair().named_parameters()] == ["first"]
