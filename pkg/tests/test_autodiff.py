import math

import numpy as np
import pytest

from queryground import autodiff as ad
from queryground.autodiff import DimensionError, Tape, Tensor
from queryground.gradcheck import fd_check, run_op_checks


def _grad_of(fn, *inputs):
    with Tape() as tape:
        out = fn(*inputs)
        tape.backward(ad.sum_all(out))
    return [t.grad for t in inputs]


# ---------------------------------------------------------------------------
# matmul

def _matmul_oracle(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(a, Tensor(np.eye(2)))
    assert np.array_equal(out.data, a.data)


def test_matmul_against_scalar_triple_loop():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0], [6.0]])
    expect = _matmul_oracle(a, b)
    assert np.array_equal(expect, [[17.0], [39.0]])
    out = ad.matmul(Tensor(a), Tensor(b))
    assert np.allclose(out.data, expect)


def test_matmul_zero_case():
    out = ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.ones((3, 2))))
    assert np.array_equal(out.data, np.zeros((2, 2)))


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_matmul_backward():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = Tensor([[5.0], [6.0]], requires_grad=True)
    ga, gb = _grad_of(lambda x, y: ad.matmul(x, y), a, b)
    # d(sum)/dA = 1 @ B^T, d(sum)/dB = A^T @ 1
    assert np.allclose(ga, np.ones((2, 1)) @ b.data.T)
    assert np.allclose(gb, a.data.T @ np.ones((2, 1)))


# ---------------------------------------------------------------------------
# sigmoid

def test_sigmoid_symmetry():
    assert ad.sigmoid(Tensor([0.0])).data[0] == pytest.approx(0.5)


def test_sigmoid_at_five():
    expect = 1.0 / (1.0 + math.exp(-5.0))  # 0.9933071490757153
    got = ad.sigmoid(Tensor([5.0], dtype=np.float64)).item()
    assert got == pytest.approx(expect, rel=1e-12)
    assert got == pytest.approx(0.993307, abs=1e-6)


def test_sigmoid_saturation_stays_finite_and_positive():
    with ad.precision("f64"):
        y = ad.sigmoid(Tensor([-1000.0])).item()
    assert 0.0 < y <= 1e-300
    hi = ad.sigmoid(Tensor([1000.0], dtype=np.float64)).item()
    assert hi < 1.0
    assert np.isfinite([y, hi]).all()


def test_sigmoid_outputs_in_open_interval():
    x = Tensor(np.linspace(-50, 50, 101))
    y = ad.sigmoid(x).data
    assert (y > 0).all() and (y < 1).all()


# ---------------------------------------------------------------------------
# pooling

def test_pool2x2_window_arithmetic():
    f = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1))
    assert ad.pool2x2(f, "mean").data.reshape(()) == pytest.approx((1 + 2 + 3 + 4) / 4)
    assert ad.pool2x2(f, "max").data.reshape(()) == pytest.approx(4.0)


def test_pool2x2_constant_map_invariant():
    f = Tensor(np.full((4, 6, 3), 2.5))
    for mode in ("mean", "max"):
        assert np.allclose(ad.pool2x2(f, mode).data, 2.5)


def test_pool2x2_odd_dims_rejected():
    with pytest.raises(DimensionError):
        ad.pool2x2(Tensor(np.zeros((3, 4, 1))), "mean")


def test_pool2x2_max_tie_routes_to_first_row_major():
    f = Tensor(np.full((2, 2, 1), 7.0), requires_grad=True)
    (g,) = _grad_of(lambda x: ad.pool2x2(x, "max"), f)
    expect = np.zeros((2, 2, 1))
    expect[0, 0, 0] = 1.0
    assert np.array_equal(g, expect)


def test_pool2x2_mean_backward_splits_by_quarter():
    f = Tensor(np.arange(8.0).reshape(2, 2, 2), requires_grad=True)
    (g,) = _grad_of(lambda x: ad.pool2x2(x, "mean"), f)
    assert np.allclose(g, 0.25)


def test_reduce_spatial_direct_arithmetic():
    f = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1))
    assert ad.reduce_spatial(f, "mean").data[0] == pytest.approx(2.0)
    assert ad.reduce_spatial(f, "max").data[0] == pytest.approx(3.0)


def test_reduce_spatial_single_position_identity():
    v = np.array([0.5, -1.5, 2.0]).reshape(1, 1, 3)
    for mode in ("mean", "max"):
        assert np.allclose(ad.reduce_spatial(Tensor(v), mode).data, v.reshape(3))


def test_reduce_spatial_constant_map():
    f = Tensor(np.full((3, 5, 2), -0.75))
    for mode in ("mean", "max"):
        assert np.allclose(ad.reduce_spatial(f, mode).data, -0.75)


# ---------------------------------------------------------------------------
# layernorm / softmax

def test_layernorm_zero_variance_guarded_by_eps():
    out = ad.layernorm(Tensor([1.0, 1.0, 1.0]), Tensor([1.0] * 3), Tensor([0.0] * 3), eps=1e-5)
    assert np.allclose(out.data, 0.0, atol=1e-6)


def test_layernorm_two_point_direct_formula():
    out = ad.layernorm(Tensor([1.0, 3.0], dtype=np.float64),
                       Tensor([1.0, 1.0], dtype=np.float64),
                       Tensor([0.0, 0.0], dtype=np.float64), eps=1e-12)
    assert np.allclose(out.data, [-1.0, 1.0], atol=1e-6)


def test_layernorm_zero_gain_returns_bias():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
    bias = np.array([0.5, -1.0, 2.0])
    out = ad.layernorm(x, Tensor(np.zeros(3)), Tensor(bias))
    assert np.allclose(out.data, np.broadcast_to(bias, (4, 3)))


def test_softmax_symmetry_and_saturation():
    assert np.allclose(ad.softmax_lastdim(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    sat = ad.softmax_lastdim(Tensor([1000.0, 0.0])).data
    assert np.isfinite(sat).all()
    assert sat[0] == pytest.approx(1.0, abs=1e-6)
    assert sat[1] == pytest.approx(0.0, abs=1e-6)


def test_softmax_log_ratios():
    out = ad.softmax_lastdim(Tensor(np.log([1.0, 2.0, 3.0]), dtype=np.float64))
    assert np.allclose(out.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(3).normal(size=(5, 7)) * 10)
    s = ad.softmax_lastdim(x).data.sum(axis=-1)
    assert np.allclose(s, 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# broadcasting rules

def test_broadcast_channel_pattern():
    a = Tensor(np.ones((1, 1, 4)))
    f = Tensor(np.full((3, 2, 4), 2.0))
    assert np.allclose(ad.mul(a, f).data, 2.0)


def test_broadcast_spatial_pattern():
    a = Tensor(np.full((3, 2, 1), 0.5))
    f = Tensor(np.full((3, 2, 4), 2.0))
    assert np.allclose(ad.mul(a, f).data, 1.0)


def test_broadcast_bias_suffix():
    x = Tensor(np.zeros((5, 3)))
    b = Tensor(np.array([1.0, 2.0, 3.0]))
    assert np.allclose(ad.add(x, b).data, np.tile([1.0, 2.0, 3.0], (5, 1)))


def test_broadcast_mismatch_rejected():
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.zeros((3, 4))), Tensor(np.zeros((4, 3))))
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2,))))


def test_broadcast_backward_unbroadcasts():
    a = Tensor(np.ones((1, 1, 3)), requires_grad=True)
    f = Tensor(np.ones((4, 2, 3)), requires_grad=True)
    ga, gf = _grad_of(ad.mul, a, f)
    assert ga.shape == (1, 1, 3)
    assert np.allclose(ga, 8.0)  # 4*2 positions summed
    assert gf.shape == (4, 2, 3)


# ---------------------------------------------------------------------------
# shape plumbing

def test_reshape_roundtrip_identity():
    x = np.arange(24.0).reshape(2, 3, 4)
    t = Tensor(x)
    back = ad.reshape(ad.reshape(t, (6, 4)), (2, 3, 4))
    assert np.array_equal(back.data, x)


def test_reshape_produces_fresh_buffer():
    t = Tensor(np.zeros((2, 2)))
    r = ad.reshape(t, (4,))
    r.data[0] = 99.0
    assert t.data[0, 0] == 0.0


def test_concat_and_narrow_roundtrip():
    a = Tensor(np.arange(6.0).reshape(2, 3))
    b = Tensor(np.arange(9.0).reshape(3, 3))
    cat = ad.concat([a, b], axis=0)
    assert cat.data.shape == (5, 3)
    assert np.array_equal(ad.narrow(cat, 0, 2, 3).data, b.data)


def test_gather_rows_with_repeats_accumulates():
    t = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    (g,) = _grad_of(lambda x: ad.gather_rows(x, np.array([0, 0, 2])), t)
    assert np.array_equal(g, np.array([[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]]))


def test_transpose_last2():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(ad.transpose_last2(t).data, t.data.T)


def test_permute_roundtrip():
    x = np.arange(24.0).reshape(2, 3, 4)
    out = ad.permute(ad.permute(Tensor(x), (2, 0, 1)), (1, 2, 0))
    assert np.array_equal(out.data, x)


# ---------------------------------------------------------------------------
# dropout

def test_dropout_eval_is_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(5, 5)))
    out = ad.dropout(x, 0.5, training=False)
    assert np.array_equal(out.data, x.data)


def test_dropout_train_scales_survivors():
    ad.seed_dropout(7)
    x = Tensor(np.ones((200, 200)))
    out = ad.dropout(x, 0.25, training=True).data
    kept = out != 0
    assert np.allclose(out[kept], 1.0 / 0.75)
    # survivor fraction near 1-p
    assert abs(kept.mean() - 0.75) < 0.02


def test_dropout_backward_uses_forward_mask():
    ad.seed_dropout(11)
    x = Tensor(np.ones((50, 50)), requires_grad=True)
    with Tape() as tape:
        out = ad.dropout(x, 0.5, training=True)
        tape.backward(ad.sum_all(out))
    mask = out.data != 0
    assert np.allclose(x.grad[mask], 2.0)
    assert np.allclose(x.grad[~mask], 0.0)


# ---------------------------------------------------------------------------
# tape semantics

def test_backward_twice_is_an_error():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        y = ad.scale(x, 2.0)
    tape.backward(y)
    with pytest.raises(RuntimeError):
        tape.backward(y)


def test_gradient_accumulation_is_additive():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        y = ad.add(ad.mul(x, x), x)  # x^2 + x -> dy/dx = 2x + 1
        tape.backward(ad.sum_all(y))
    assert x.grad[0] == pytest.approx(7.0)


def test_ops_outside_tape_record_nothing():
    x = Tensor([1.0], requires_grad=True)
    y = ad.scale(x, 3.0)
    assert y.requires_grad
    with Tape() as tape:
        pass
    assert len(tape) == 0


def test_diamond_dependency_sums_both_paths():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        a = ad.scale(x, 3.0)
        b = ad.scale(x, 5.0)
        tape.backward(ad.sum_all(ad.add(a, b)))
    assert x.grad[0] == pytest.approx(8.0)


# ---------------------------------------------------------------------------
# finite-difference properties

def test_every_op_matches_central_differences():
    results = run_op_checks(seed=0)
    bad = [(r.name, r.max_rel_err) for r in results if not r.passed]
    assert not bad, f"ops failing FD check: {bad}"


def test_random_three_op_chain_matches_fd():
    with ad.precision("f64"):
        rng = np.random.default_rng(42)
        a = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-2, 2, (4, 5)), requires_grad=True)
        c = Tensor(rng.uniform(-2, 2, (3, 5)), requires_grad=True)
        err, _ = fd_check(lambda x, y, z: ad.mul(ad.sigmoid(ad.matmul(x, y)), z), [a, b, c])
    assert err < 1e-6


def test_selection_ops():
    a = Tensor(np.array([1.0, 5.0, 2.0]))
    b = Tensor(np.array([3.0, 4.0, 2.0]))
    assert np.array_equal(ad.maximum(a, b).data, [3.0, 5.0, 2.0])
    assert np.array_equal(ad.minimum(a, b).data, [1.0, 4.0, 2.0])


def test_maximum_tie_gradient_goes_to_first_operand():
    a = Tensor(np.array([2.0]), requires_grad=True)
    b = Tensor(np.array([2.0]), requires_grad=True)
    ga, gb = _grad_of(ad.maximum, a, b)
    assert ga[0] == 1.0
    assert np.all(gb == 0.0)
