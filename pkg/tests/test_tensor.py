import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import vitae.tensor as T
from vitae.config import preset
from vitae.errors import GradientError, ShapeError
from vitae.gradcheck import OPS, grad_check, op_cases
from vitae.tensor import ConvSpec, Tensor

import oracles


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_sum_gradient_is_ones(rng):
    x = leaf(rng.standard_normal((3, 4)))
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_rejects_non_scalar(rng):
    x = leaf(rng.standard_normal(5))
    with pytest.raises(GradientError):
        T.backward(x * 2.0)


def test_backward_twice_is_an_error(rng):
    x = leaf(rng.standard_normal(3))
    loss = T.sum(x * x)
    T.backward(loss)
    with pytest.raises(GradientError):
        T.backward(loss)


def test_backward_refuses_stale_leaf_grads(rng):
    x = leaf(rng.standard_normal(3))
    T.backward(T.sum(x * x))
    with pytest.raises(GradientError):
        T.backward(T.sum(x * 3.0))


def test_detached_loss_is_an_error():
    with pytest.raises(GradientError):
        T.backward(T.sum(Tensor(np.ones(3))))


def test_no_grad_records_nothing(rng):
    x = leaf(rng.standard_normal(3))
    with T.no_grad():
        y = T.sum(x * x)
    assert not y.requires_grad
    assert T.is_grad_enabled()


def test_zero_extent_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


def test_matmul_gradients_match_closed_form(rng):
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    T.backward(T.sum(a @ b))
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ np.ones((3, 2)))


def test_grad_check_linear_is_exact_to_rounding(rng):
    w = rng.standard_normal(6)
    rep = grad_check(lambda t: T.sum(t * Tensor(w)), rng.standard_normal(6))
    assert rep.max_rel_err < 1e-9


def test_grad_check_conv_sum(rng):
    w = rng.standard_normal((4, 2, 3, 3))
    spec = ConvSpec.make(3)
    rep = grad_check(lambda t: T.sum(T.conv2d(t, Tensor(w), None, spec)), rng.standard_normal((1, 2, 4, 4)))
    assert rep.passed


def test_grad_check_rejects_non_scalar(rng):
    with pytest.raises(GradientError):
        grad_check(lambda t: t * 2.0, rng.standard_normal(3))


def test_grad_check_size_limit():
    with pytest.raises(ValueError):
        grad_check(lambda t: T.sum(t), np.zeros(10_001))


def test_grad_check_detects_corrupted_rule(monkeypatch, rng):
    monkeypatch.setattr(T, "_gelu_derivative", lambda x, cdf=None: np.ones_like(x))
    rep = grad_check(lambda t: T.sum(T.gelu(t)), rng.standard_normal(8))
    assert not rep.passed


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("op", OPS)
def test_op_gradients(op, seed):
    for label, f, x in op_cases(seed)[op]:
        rep = grad_check(f, x, tol=1e-4)
        assert rep.passed, f"{op} w.r.t. {label}: {rep.max_rel_err:.2e}"


CONV_CASES = [
    (3, 1, 1, 1, 1), (3, 2, 1, 1, 1), (3, 2, 3, 1, 1), (7, 4, 2, 1, 1),
    (3, 1, 1, 2, 2), (3, 1, 2, 4, 4), (1, 1, 1, 1, 1), (1, 2, 1, 2, 1),
]


@pytest.mark.parametrize("k,s,d,groups,_", CONV_CASES)
def test_conv2d_matches_direct_loops(k, s, d, groups, _, rng):
    cin, cout = 4, 4
    x = rng.standard_normal((2, cin, 9, 8))
    w = rng.standard_normal((cout, cin // groups, k, k))
    b = rng.standard_normal(cout)
    spec = ConvSpec.make(k, s, d, None, groups)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), spec).data
    want = oracles.conv2d_loop(x, w, b, s, d, d * (k - 1) // 2, groups)
    np.testing.assert_allclose(got, want, atol=1e-10)


def _preset_conv_geometry():
    combos = set()
    for name in ("vitae-t", "vitae-s", "vitaev2-s"):
        for s in preset(name).stages:
            for d in s.dilations:
                combos.add((s.kernel, s.reduction, d))
            combos.update({(3, 2, 1), (3, 1, 1)})
    return sorted(combos)


@pytest.mark.parametrize("k,s,d", _preset_conv_geometry())
@pytest.mark.parametrize("n", [224, 56, 28, 14, 7, 32])
def test_same_padding_extents(k, s, d, n):
    spec = ConvSpec.make(k, s, d)
    oh, ow = spec.output_extent(n, n)
    assert oh == ow == -(-n // s)


def test_conv_extent_underflow():
    with pytest.raises(ShapeError):
        ConvSpec.make(3, 1, 1, padding=0).output_extent(2, 2)


def test_softmax_sums_to_one_at_large_magnitude(rng):
    x = Tensor(rng.uniform(-1e4, 1e4, (16, 33)))
    np.testing.assert_allclose(T.softmax(x).data.sum(-1), 1.0, atol=1e-6)


def test_gelu_is_exact(rng):
    x = rng.standard_normal(50) * 3
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, oracles.gelu(x), atol=1e-12)


def test_layernorm_matches_formula(rng):
    x, g, b = rng.standard_normal((2, 5, 6)), rng.standard_normal(6), rng.standard_normal(6)
    got = T.layernorm(Tensor(x), Tensor(g), Tensor(b)).data
    np.testing.assert_allclose(got, oracles.layer_norm(x, g, b), atol=1e-12)


def test_batchnorm_updates_running_stats_with_unbiased_variance(rng):
    x = rng.standard_normal((4, 3, 2, 2)) * 2 + 1
    rm, rv = np.zeros(3), np.ones(3)
    out = T.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, True, 0.1, 1e-5).data
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(out, (x - mu[None, :, None, None]) / np.sqrt(var[None, :, None, None] + 1e-5), atol=1e-12)
    np.testing.assert_allclose(rm, 0.1 * mu)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_batchnorm_training_needs_two_values():
    with pytest.raises(ShapeError):
        T.batchnorm2d(Tensor(np.ones((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                      np.zeros(2), np.ones(2), True, 0.1, 1e-5)


def test_conv_mac_tally_matches_closed_form(rng):
    spec = ConvSpec.make(3, 2, 1, None, 2)
    x, w = Tensor(rng.standard_normal((2, 4, 8, 8))), Tensor(rng.standard_normal((6, 2, 3, 3)))
    with T.count_macs() as c:
        T.conv2d(x, w, None, spec)
    assert c.total == 2 * 6 * 4 * 4 * (4 // 2) * 9


def test_outputs_are_bit_identical_across_calls(rng):
    x = rng.standard_normal((2, 4, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 4, 3, 3)).astype(np.float32)
    spec = ConvSpec.make(3)
    a = T.gelu(T.conv2d(Tensor(x), Tensor(w), None, spec)).data
    b = T.gelu(T.conv2d(Tensor(x), Tensor(w), None, spec)).data
    assert a.tobytes() == b.tobytes()


def test_zero_taps_are_exact(rng):
    x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
    w1 = rng.standard_normal((4, 3, 1, 1)).astype(np.float32)
    w3 = np.zeros((4, 3, 3, 3), dtype=np.float32)
    w3[:, :, 1, 1] = w1[:, :, 0, 0]
    a = T.conv2d(Tensor(x), Tensor(w1), None, ConvSpec.make(1)).data
    b = T.conv2d(Tensor(x), Tensor(w3), None, ConvSpec.make(3)).data
    assert np.array_equal(a, b)


def test_img2seq_is_raster_order(rng):
    x = rng.standard_normal((2, 3, 2, 4))
    t = T.img2seq(Tensor(x)).data
    assert t.shape == (2, 8, 3)
    np.testing.assert_array_equal(t[1, 5], x[1, :, 1, 1])
    np.testing.assert_array_equal(T.seq2img(Tensor(t), (2, 4)).data, x)


@settings(max_examples=40, deadline=None)
@given(
    shape_a=st.lists(st.integers(1, 3), min_size=1, max_size=3),
    drop=st.integers(0, 2),
    seed=st.integers(0, 2**16),
)
def test_broadcast_gradients_reduce_to_operand_shape(shape_a, drop, seed):
    g = np.random.default_rng(seed)
    shape_b = [1 if i % 2 else s for i, s in enumerate(shape_a)][min(drop, len(shape_a) - 1):]
    a, b = leaf(g.standard_normal(shape_a)), leaf(g.standard_normal(shape_b))
    T.backward(T.sum(a * b))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    np.testing.assert_allclose(b.grad.sum(), (a.data * np.ones_like(b.data)).sum(), atol=1e-9)
