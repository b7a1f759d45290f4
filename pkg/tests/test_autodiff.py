import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from igns import autodiff as ad
from igns.autodiff import Tape, Value


def grads_of(fn, *arrays):
    vals = [Value(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*vals)
    g = tape.backward(out, wrt=vals)
    return out, [g[v.id] for v in vals]


def test_value_shapes():
    assert Value(3.0).shape == (1, 1)
    assert Value([1.0, 2.0, 3.0]).shape == (3, 1)
    assert Value(np.ones((2, 3), dtype=np.float32)).dtype == np.float32
    assert Value(np.arange(4)).dtype == np.float64
    with pytest.raises(ValueError):
        Value(np.zeros((2, 2, 2)))


def test_unknown_op_rejected():
    with pytest.raises(ValueError, match="unknown op"):
        ad.record("conv3d", Value(1.0))


def test_no_tape_no_records():
    x = Value([[1.0]], requires_grad=True)
    y = ad.tanh(x)
    assert not y.requires_grad
    with Tape() as tape:
        ad.add(Value(1.0), Value(2.0))
    assert len(tape) == 0


def test_matmul_gradient_hand():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0], [6.0]])
    _, (ga, gb) = grads_of(lambda x, y: ad.sum_all(ad.matmul(x, y)), a, b)
    np.testing.assert_array_equal(ga, [[5.0, 6.0], [5.0, 6.0]])
    np.testing.assert_array_equal(gb, [[4.0], [6.0]])


def test_broadcast_row_and_column():
    a = np.arange(6.0).reshape(2, 3)
    row = np.array([[1.0, 2.0, 3.0]])
    col = np.array([[2.0], [3.0]])
    out, (ga, gr) = grads_of(lambda x, r: ad.sum_all(ad.mul(x, r)), a, row)
    np.testing.assert_array_equal(ga, np.broadcast_to(row, a.shape))
    np.testing.assert_array_equal(gr, a.sum(axis=0, keepdims=True))
    _, (_, gc) = grads_of(lambda x, c: ad.sum_all(ad.add(x, c)), a, col)
    np.testing.assert_array_equal(gc, [[3.0], [3.0]])
    with pytest.raises(ValueError, match="shape mismatch"):
        ad.add(Value(np.ones((2, 3))), Value(np.ones((3, 2))))


def test_lncosh_matches_numpy_and_is_stable():
    x = np.array([[-800.0, -3.0, 0.0, 0.5, 800.0]])
    y = ad.lncosh(Value(x)).data
    np.testing.assert_allclose(y[0, 1:4], np.log(np.cosh(x[0, 1:4])), rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(y[0, [0, 4]], 800.0 - np.log(2.0))


def test_softplus_extremes():
    y = ad.softplus(Value([[-50.0, 0.0, 50.0]])).data
    np.testing.assert_allclose(y, [[np.log1p(np.exp(-50.0)), np.log(2.0), 50.0]], rtol=1e-14)


def test_scatter_gather_adjoint(rng):
    x = rng.standard_normal((5, 3))
    idx = np.array([0, 2, 2, 4, 1, 0])
    y = rng.standard_normal((6, 3))
    lhs = float(np.sum(ad.gather(Value(x), idx).data * y))
    rhs = float(np.sum(x * ad.scatter_sum(Value(y), idx, 5).data))
    assert abs(lhs - rhs) < 1e-12


def test_scatter_rejects_bad_index():
    with pytest.raises((IndexError, ValueError)):
        ad.scatter_sum(Value(np.ones((2, 1))), np.array([0, 5]), 3)


def test_concat_slice_transpose_roundtrip(rng):
    a, b = rng.standard_normal((3, 2)), rng.standard_normal((3, 4))
    c = ad.concat([Value(a), Value(b)], axis=1)
    np.testing.assert_array_equal(ad.slice_(c, cols=slice(2, 6)).data, b)
    np.testing.assert_array_equal(ad.transpose(c).data, c.data.T)


def test_layernorm_forward(rng):
    x = rng.standard_normal((4, 6))
    y = ad.layernorm(Value(x)).data
    ref = (x - x.mean(1, keepdims=True)) / np.sqrt(x.var(1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(y, ref, rtol=1e-12)


ALL_UNARY = ["tanh", "lncosh", "softplus", "square", "relu", "layernorm"]


@pytest.mark.parametrize("name", ALL_UNARY)
def test_unary_gradient_check(name, rng):
    x = Value(rng.standard_normal((3, 4)) + (0.3 if name == "relu" else 0.0), requires_grad=True)
    w = rng.standard_normal((3, 4))
    fn = getattr(ad, name)
    err = ad.gradient_check(lambda ps: ad.sum_all(ad.mul(fn(ps[0]), Value(w))), [x])
    assert err < 1e-7


def test_composite_gradient_check(rng):
    A = Value(rng.standard_normal((4, 3)), requires_grad=True)
    B = Value(rng.standard_normal((3, 3)), requires_grad=True)
    r = Value(rng.standard_normal((1, 3)), requires_grad=True)
    idx = np.array([0, 1, 1, 3, 2])

    def f(ps):
        a, b, row = ps
        h = ad.tanh(ad.add(ad.matmul(a, ad.transpose(b)), row))
        m = ad.scatter_sum(ad.gather(h, idx), idx[::-1].copy(), 4)
        z = ad.concat([h, ad.scale(m, 0.5)], axis=1)
        return ad.sum_all(ad.lncosh(ad.sub(ad.slice_(z, rows=slice(1, 4)), Value(1.0))))

    assert ad.gradient_check(f, [A, B, r]) < 1e-7


def test_gradient_check_guards():
    x = Value(np.ones((1, 1), dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError, match="64-bit"):
        ad.gradient_check(lambda ps: ad.sum_all(ps[0]), [x])
    y = Value(np.ones((1, 1)), requires_grad=True)
    with pytest.raises(ValueError):
        ad.gradient_check(lambda ps: ad.sum_all(ps[0]), [y], h=1e-2)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_strict_mode_catches_nan():
    with pytest.raises(ad.NonFiniteError):
        ad.mul(Value([[np.inf]]), Value([[0.0]]))
    with ad.strict_mode(False):
        out = ad.mul(Value([[np.inf]]), Value([[0.0]]))
    assert np.isnan(out.data).all()


def test_shared_subexpression_accumulates():
    x = Value([[3.0]], requires_grad=True)
    with Tape() as tape:
        y = ad.add(ad.mul(x, x), x)
    assert tape.backward(y)[x.id][0, 0] == 7.0


def test_jacobian_linear_map(rng):
    M = rng.standard_normal((3, 4))
    J = ad.jacobian(lambda v: ad.matmul(Value(M), v), rng.standard_normal((4, 1)))
    np.testing.assert_allclose(J, M, rtol=1e-14)


def test_wrt_without_gradient_gives_zeros():
    a = Value([[1.0]], requires_grad=True)
    b = Value([[2.0, 3.0]], requires_grad=True)
    with Tape() as tape:
        out = ad.square(a)
    g = tape.backward(out, wrt=[a, b])
    np.testing.assert_array_equal(g[b.id], np.zeros((1, 2)))


def test_operator_sugar():
    a, b = Value([[2.0]]), Value([[3.0]])
    assert (a + b).item() == 5.0
    assert (a - b).item() == -1.0
    assert (a * b).item() == 6.0
    assert (2 * a).item() == 4.0
    assert (-a).item() == -2.0
    assert (a @ b).item() == 6.0


small = hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
                   elements=st.floats(-3, 3, allow_nan=False))


@settings(max_examples=40, deadline=None)
@given(small)
def test_sum_of_square_gradient_is_twice_input(x):
    _, (g,) = grads_of(lambda v: ad.sum_all(ad.square(v)), x)
    np.testing.assert_array_equal(g, 2.0 * x)


@settings(max_examples=30, deadline=None)
@given(small, st.floats(-2, 2, allow_nan=False))
def test_scale_linear_in_seed(x, c):
    vx = Value(x, requires_grad=True)
    with Tape() as tape:
        out = ad.scale(ad.tanh(vx), c)
    seed = np.ones_like(x)
    g1 = tape.backward(out, seed=seed)[vx.id]
    g2 = tape.backward(out, seed=2 * seed)[vx.id]
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-14, atol=1e-300)
    np.testing.assert_allclose(g1, c * (1 - np.tanh(x) ** 2), rtol=1e-12, atol=1e-300)
