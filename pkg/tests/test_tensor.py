import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tactigrasp.errors import DegenerateInputError, DimensionError, NumericError
from tactigrasp.tensor import (
    DiffOp,
    activation,
    activation_vjp,
    check_gradient,
    conv2d,
    conv2d_vjp,
    layer_norm,
    layer_norm_degenerate,
    layer_norm_vjp,
    matmul,
    matmul_vjp,
    softmax,
    softmax_vjp,
)

from oracles import loop_conv2d, op

finite = st.floats(-20, 20, allow_nan=False, width=32)


def test_matmul_identity_and_hand_values():
    m = np.array([[1, 2], [3, 4]], np.float32)
    assert np.array_equal(matmul(np.eye(2, dtype=np.float32), m), m)
    assert matmul(m, np.array([[5], [6]], np.float32)).tolist() == [[17], [39]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(np.zeros((2, 3), np.float32), np.zeros((4, 2), np.float32))


def test_softmax_examples():
    assert np.allclose(softmax(np.zeros(2, np.float32)), [0.5, 0.5])
    assert np.allclose(softmax(np.array([0.0, math.log(3.0)], np.float32)), [0.25, 0.75], atol=1e-7)


def test_softmax_bad_axis():
    with pytest.raises(DimensionError):
        softmax(np.zeros((2, 2), np.float32), axis=2)


@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 7)), elements=finite),
       st.floats(-50, 50, width=32))
def test_softmax_is_a_shift_invariant_distribution(x, c):
    y = softmax(x)
    assert np.all((y >= 0) & (y <= 1))
    assert np.allclose(y.sum(-1), 1.0, atol=1e-6)
    assert np.allclose(softmax(x + np.float32(c)), y, atol=1e-6)


def test_layer_norm_examples():
    g, b = np.ones(4, np.float32), np.zeros(4, np.float32)
    assert np.array_equal(layer_norm(np.full((1, 4), 3.0, np.float32), 1e-6, g, b), np.zeros((1, 4)))
    y = layer_norm(np.array([[1.0, -1.0]], np.float32), 0.0, np.ones(2, np.float32), np.zeros(2, np.float32))
    assert y.tolist() == [[1.0, -1.0]]


def test_layer_norm_rejects_mismatched_affine():
    with pytest.raises(DimensionError):
        layer_norm(np.zeros((2, 3), np.float32), 1e-6, np.ones(4, np.float32), np.zeros(4, np.float32))


@given(arrays(np.float32, (3, 6), elements=st.floats(-10, 10, width=32)),
       st.floats(-100, 100, width=32))
def test_layer_norm_ignores_constant_offsets(x, c):
    g, b = np.ones(6, np.float32), np.zeros(6, np.float32)
    x = x + np.arange(6, dtype=np.float32)  # keep every row non-constant
    assert np.allclose(layer_norm(x + np.float32(c), 1e-6, g, b), layer_norm(x, 1e-6, g, b), atol=2e-3)


def test_activation_values():
    assert activation(np.zeros(1, np.float32), "silu")[0] == 0.0
    assert activation(np.zeros(1, np.float32), "gelu")[0] == 0.0
    assert activation(np.ones(1, np.float32), "silu")[0] == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-7)
    assert abs(activation(np.array([10.0], np.float32), "gelu")[0] - 10.0) <= 1e-6
    with pytest.raises(ValueError):
        activation(np.zeros(1, np.float32), "relu6")


def test_conv2d_examples():
    x = np.array([[[1, 2], [3, 4]]], np.float32)
    assert np.array_equal(conv2d(x, np.ones((1, 1, 1, 1), np.float32)), x)
    assert conv2d(x, np.full((1, 1, 1, 1), 2.0, np.float32)).tolist() == [[[2, 4], [6, 8]]]
    c = np.full((1, 5, 5), 1.5, np.float32)
    y = conv2d(c, np.ones((1, 1, 3, 3), np.float32), padding=1)
    assert np.all(y[0, 1:-1, 1:-1] == 9 * 1.5)


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(np.zeros((2, 4, 4), np.float32), np.zeros((1, 3, 3, 3), np.float32))


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 2, 5)])
def test_conv2d_matches_loop_oracle(stride, padding, k):
    rng = np.random.default_rng(stride * 10 + padding + k)
    x = rng.standard_normal((3, 7, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, k, k)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    got = conv2d(x, w, stride, padding, bias=b)
    assert np.allclose(got, loop_conv2d(x, w, b, stride, padding), atol=1e-4)


def test_ops_are_bitwise_deterministic():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((5, 3, 3, 3)).astype(np.float32)
    assert conv2d(x, w, padding=1).tobytes() == conv2d(x.copy(), w.copy(), padding=1).tobytes()
    assert softmax(x).tobytes() == softmax(x.copy()).tobytes()


# -- gradient checks --------------------------------------------------------

SHAPES = [(2, 3), (4, 5), (3, 1, 6)]


def primitive_ops(rng, shape):
    d = shape[-1]
    b = rng.standard_normal((d, 4)).astype(np.float32)
    a = rng.standard_normal((3, d)).astype(np.float32)
    g = rng.standard_normal(d).astype(np.float32)
    be = rng.standard_normal(d).astype(np.float32)
    x0 = rng.standard_normal(shape).astype(np.float32)
    return [
        op("matmul/a", lambda x: matmul_vjp(x, b), 0),
        op("matmul/b", lambda x: matmul_vjp(a, x), 1),
        op("softmax", lambda x: softmax_vjp(x, -1)),
        op("softmax/axis0", lambda x: softmax_vjp(x, 0)),
        op("layer_norm/x", lambda x: layer_norm_vjp(x, g, be)[:2], 0, layer_norm_degenerate),
        op("layer_norm/gamma", lambda gg: layer_norm_vjp(x0, gg, be)[:2], 1),
        op("layer_norm/beta", lambda bb: layer_norm_vjp(x0, g, bb)[:2], 2),
        op("silu", lambda x: activation_vjp(x, "silu")),
        op("gelu", lambda x: activation_vjp(x, "gelu")),
    ]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_primitive_gradients(seed):
    rng = np.random.default_rng(seed)
    shape = SHAPES[seed]
    x_for = {"matmul/b": (shape[-1], 4), "layer_norm/gamma": (shape[-1],), "layer_norm/beta": (shape[-1],)}
    for o in primitive_ops(rng, shape):
        x = rng.standard_normal(x_for.get(o.name, (3, shape[-1]) if o.name == "matmul/a" else shape))
        assert check_gradient(o, x, seed) < 1e-2, o.name


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
def test_conv2d_gradients(seed, stride, padding):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((3, 6, 5)).astype(np.float32)
    w0 = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b0 = rng.standard_normal(4).astype(np.float32)
    assert check_gradient(op("conv/x", lambda x: conv2d_vjp(x, w0, b0, stride, padding)), x0, seed) < 1e-2
    assert check_gradient(op("conv/w", lambda w: conv2d_vjp(x0, w, b0, stride, padding), 1), w0, seed) < 1e-2
    assert check_gradient(op("conv/b", lambda b: conv2d_vjp(x0, w0, b, stride, padding), 2), b0, seed) < 1e-2


def test_gradient_check_catches_a_wrong_vjp():
    # backward of x**2 deliberately off by 10 %
    bad = DiffOp("bad-square", lambda x: (x * x, lambda dy: 2.2 * x * dy))
    assert check_gradient(bad, np.linspace(-1, 1, 7)) > 5e-2


def test_gradient_check_flags_degenerate_layer_norm():
    g, b = np.ones(4, np.float32), np.zeros(4, np.float32)
    o = op("layer_norm", lambda x: layer_norm_vjp(x, g, b)[:2], 0, layer_norm_degenerate)
    with pytest.raises(DegenerateInputError):
        check_gradient(o, np.full((2, 4), 3.0))


def test_gradient_check_rejects_non_finite():
    o = DiffOp("log", lambda x: (np.log(x), lambda dy: dy / x))
    with np.errstate(invalid="ignore"), pytest.raises(NumericError):
        check_gradient(o, np.array([-1.0, 2.0]))
