import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmsalgan import tensor as T
from cmsalgan.gradcheck import grad_check
from cmsalgan.tensor import Tensor


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def rand(rng, *shape):
    return t64(rng.standard_normal(shape))


# --- loop oracles -----------------------------------------------------------

def conv_loops(x, w, b, stride, pad, dil):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - dil * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dil * (k - 1) - 1) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for ci in range(c):
                        for ky in range(k):
                            for kx in range(k):
                                acc += w[o, ci, ky, kx] * xp[i, ci, y * stride + ky * dil, xx * stride + kx * dil]
                    out[i, o, y, xx] = acc
    return out


def pool_loops(x, size, stride):
    n, c, h, w = x.shape
    ho, wo = (h - size) // stride + 1, (w - size) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for i in range(n):
        for j in range(c):
            for y in range(ho):
                for xx in range(wo):
                    out[i, j, y, xx] = x[i, j, y * stride:y * stride + size, xx * stride:xx * stride + size].max()
    return out


# --- forward values -----------------------------------------------------------

def test_elementwise_examples():
    a, b = t64([1.0, 2.0]), t64([3.0, 4.0])
    assert np.allclose((a + b).data, [4, 6])
    assert np.allclose((a * b).data, [3, 8])
    assert np.allclose((a / b).data, [1 / 3, 0.5])
    assert np.allclose(T.relu(t64([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_matmul_example():
    a = t64([[1, 2], [3, 4]])
    b = t64([[5, 6], [7, 8]])
    assert np.array_equal(T.matmul(a, b).data, [[19, 22], [43, 50]])


def test_backward_of_product_sum():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    T.backward((x * x).sum())
    assert np.allclose(x.grad, [2, 4, 6])


def test_shared_subexpression_accumulates():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = x * x
    T.backward(y * y + y)           # x^4 + x^2
    assert np.isclose(x.grad, 4 * 27 + 6)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.backward(x * 2.0)


@pytest.mark.parametrize("stride,pad,dil", [(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 0, 2), (1, 4, 4)])
def test_conv2d_matches_loops(stride, pad, dil):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 9, 9))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = T.conv2d(t64(x), t64(w), t64(b), stride, pad, dil).data
    assert np.allclose(got, conv_loops(x, w, b, stride, pad, dil), atol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(ValueError):
        T.conv2d(t64(np.zeros((1, 3, 5, 5))), t64(np.zeros((2, 4, 3, 3))))


def test_dilated_output_size():
    # 3x3 at dilation 2 spans 5 pixels; padding 2 preserves size
    assert T.conv_output_size(28, 3, 1, 2, 2) == 28
    assert T.conv_output_size(28, 3, 1, 4, 4) == 28
    assert T.conv_output_size(224, 3, 2, 1, 1) == 112


def test_conv_transpose_is_adjoint_of_conv():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 7, 7))
    w = rng.standard_normal((5, 3, 3, 3))
    y = rng.standard_normal((2, 5, 4, 4))
    lhs = (T.conv2d(t64(x), t64(w), stride=2, padding=1).data * y).sum()
    rhs = (x * T.conv2d_transpose(t64(y), t64(w), stride=2, padding=1).data).sum()
    assert np.isclose(lhs, rhs, rtol=1e-12)


def test_conv_transpose_k2_s2_places_kernel():
    x = np.zeros((1, 1, 2, 2))
    x[0, 0, 1, 0] = 2.0
    w = np.arange(4.0).reshape(1, 1, 2, 2)
    out = T.conv2d_transpose(t64(x), t64(w), stride=2).data[0, 0]
    expect = np.zeros((4, 4))
    expect[2:4, 0:2] = 2 * w[0, 0]
    assert np.array_equal(out, expect)


def test_max_pool_matches_loops_and_ties_go_to_first():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 8, 8))
    assert np.array_equal(T.max_pool2d(t64(x), 2).data, pool_loops(x, 2, 2))
    a = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    T.backward(T.max_pool2d(a, 2).sum())
    assert np.array_equal(a.grad[0, 0], [[1, 0], [0, 0]])


def test_bilinear_upsample_closed_form():
    x = t64(np.array([0.0, 1.0]).reshape(1, 1, 1, 2))
    out = T.bilinear_resize(x, 1, 4).data.ravel()
    assert np.allclose(out, [0.0, 0.25, 0.75, 1.0])


def test_bilinear_rows_sum_to_one():
    for i, o in [(3, 7), (8, 4), (5, 5), (1, 6)]:
        assert np.allclose(T.bilinear_matrix(i, o).sum(axis=1), 1.0)


def test_unfold_offsets():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    u = T.unfold(t64(x), 3).data
    # centre tap is the pixel itself; top-left tap of (0, 0) is padding
    assert np.array_equal(u[0, 0, 4], x[0, 0])
    assert u[0, 0, 0, 0, 0] == 0.0
    assert u[0, 0, 0, 2, 2] == x[0, 0, 1, 1]
    assert u[0, 0, 8, 1, 1] == x[0, 0, 2, 2]


def test_softmax_example():
    s = T.softmax(t64([[0.0, np.log(3.0)]]), axis=1).data
    assert np.allclose(s, [[0.25, 0.75]])


def test_sigmoid_saturation_is_finite():
    s = T.sigmoid(t64([-1000.0, 1000.0])).data
    assert np.all(s > 0) and np.all(s < 1)


def test_concat_extent_error():
    with pytest.raises(ValueError, match="extent"):
        T.concat([t64(np.zeros((1, 2, 3))), t64(np.zeros((1, 2, 4)))], axis=1)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_checked_mode_rejects_nan():
    with T.checked():
        with pytest.raises(FloatingPointError):
            T.log(t64([-1.0]))


# --- gradients ------------------------------------------------------------

OPS = {
    "add": (lambda a, b: (a + b).sum(), [(3, 4), (4,)]),
    "sub": (lambda a, b: ((a - b) * (a - b)).sum(), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: (a * b).sum(), [(2, 3), (2, 3)]),
    "div": (lambda a, b: (a / (b * b + 1.0)).sum(), [(2, 3), (2, 3)]),
    "exp": (lambda a: T.exp(a).sum(), [(5,)]),
    "log": (lambda a: T.log(a * a + 0.5).sum(), [(5,)]),
    "sigmoid": (lambda a: (T.sigmoid(a) * T.sigmoid(a)).sum(), [(6,)]),
    "tanh": (lambda a: (T.tanh(a) * a).sum(), [(6,)]),
    "relu": (lambda a: (T.relu(a) * a).sum(), [(6,)]),
    "softmax": (lambda a: (T.softmax(a, axis=1) * T.Tensor(np.arange(12.0).reshape(3, 4))).sum(), [(3, 4)]),
    "mean": (lambda a: (a.mean(axis=0) * a.mean(axis=0)).sum(), [(3, 4)]),
    "reshape_transpose": (lambda a: (a.reshape(4, 3).transpose(1, 0) * T.Tensor(np.arange(12.0).reshape(3, 4))).sum(), [(3, 4)]),
    "getitem": (lambda a: (a[1:, ::2] * a[1:, ::2]).sum(), [(3, 4)]),
    "concat": (lambda a, b: (T.concat([a, b], axis=1) * T.concat([b, a], axis=1)).sum(), [(2, 3), (2, 3)]),
    "matmul": (lambda a, b: (T.matmul(a, b) * T.matmul(a, b)).sum(), [(2, 3, 4), (4, 5)]),
    "linear": (lambda x, w, b: T.tanh(T.linear(x, w, b)).sum(), [(3, 4), (4, 2), (2,)]),
    "conv2d": (lambda x, w, b: (T.conv2d(x, w, b, 2, 1) * T.conv2d(x, w, b, 2, 1)).sum(), [(2, 2, 6, 6), (3, 2, 3, 3), (3,)]),
    "conv2d_dilated": (lambda x, w: (T.conv2d(x, w, None, 1, 2, 2) * T.conv2d(x, w, None, 1, 2, 2)).sum(), [(1, 2, 7, 7), (2, 2, 3, 3)]),
    "conv2d_transpose": (lambda x, w, b: (T.conv2d_transpose(x, w, b, 2) * T.conv2d_transpose(x, w, b, 2)).sum(), [(2, 3, 3, 3), (3, 2, 2, 2), (2,)]),
    "max_pool2d": (lambda x: (T.max_pool2d(x, 2) * T.max_pool2d(x, 2)).sum(), [(2, 2, 6, 6)]),
    "unfold": (lambda x: (T.unfold(x, 3) * T.unfold(x, 3)).sum(), [(1, 2, 4, 5)]),
    "bilinear_resize": (lambda x: (T.bilinear_resize(x, 7, 9) * T.bilinear_resize(x, 7, 9)).sum(), [(1, 2, 4, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    inputs = [rand(rng, *s) for s in shapes]
    assert grad_check(fn, inputs) < 1e-4


# --- properties ---------------------------------------------------------------

finite = st.floats(-20, 20, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=1, max_size=12))
def test_softmax_is_a_distribution(vals):
    s = T.softmax(t64([vals]), axis=1).data
    assert np.isclose(s.sum(), 1.0) and np.all(s >= 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=1, max_size=12))
def test_sigmoid_open_interval(vals):
    s = T.sigmoid(t64(vals)).data
    assert np.all((s > 0) & (s < 1))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 2), st.integers(0, 2), st.sampled_from([1, 3]))
def test_conv_adjoint_property(seed, stride, pad, k):
    rng = np.random.default_rng(seed)
    size = 6
    x = rng.standard_normal((1, 2, size, size))
    w = rng.standard_normal((3, 2, k, k))
    y_shape = T.conv2d(t64(x), t64(w), stride=stride, padding=pad).shape
    if (y_shape[-1] - 1) * stride - 2 * pad + k != size:
        return
    y = rng.standard_normal(y_shape)
    lhs = (T.conv2d(t64(x), t64(w), stride=stride, padding=pad).data * y).sum()
    rhs = (x * T.conv2d_transpose(t64(y), t64(w), stride=stride, padding=pad).data).sum()
    assert np.isclose(lhs, rhs, rtol=1e-10, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(1, 12))
def test_bilinear_preserves_constants(i, o):
    x = t64(np.full((1, 1, i, i), 0.37))
    assert np.allclose(T.bilinear_resize(x, o, o).data, 0.37)
