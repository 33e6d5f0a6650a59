"""Numeric core: float32 arrays plus the few primitives the models need.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 in C order.
Each differentiable primitive comes in two flavours:

* ``op(...)`` returns the forward result only;
* ``op_vjp(...)`` returns ``(result, backward)`` where ``backward(grad_out)``
  gives the vector-Jacobian product for each differentiable input.

There is no graph: models chain the ``backward`` closures by hand.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateInputError, DimensionError, NumericError

DTYPE = np.float32
GELU_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def as_tensor(x) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- matmul -----------------------------------------------------------------

def matmul_vjp(a: np.ndarray, b: np.ndarray):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    y = np.matmul(a, b)

    def backward(dy):
        da = _unbroadcast(np.matmul(dy, np.swapaxes(b, -1, -2)), a.shape)
        db = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), dy), b.shape)
        return da, db

    return y, backward


def matmul(a, b):
    return matmul_vjp(a, b)[0]


# -- softmax ----------------------------------------------------------------

def softmax_vjp(x: np.ndarray, axis: int = -1):
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for rank {x.ndim}")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(dy):
        return (y * (dy - (dy * y).sum(axis=axis, keepdims=True)),)

    return y, backward


def softmax(x, axis: int = -1):
    return softmax_vjp(x, axis)[0]


# -- layer norm -------------------------------------------------------------

def layer_norm_vjp(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match last axis {d}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma + beta

    def backward(dy):
        lead = tuple(range(dy.ndim - 1))
        dgamma = (dy * xhat).sum(axis=lead)
        dbeta = dy.sum(axis=lead)
        g = dy * gamma
        dx = inv * (g - g.mean(axis=-1, keepdims=True)
                    - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return y, backward


def layer_norm(x, eps, gamma, beta):
    return layer_norm_vjp(x, gamma, beta, eps)[0]


def layer_norm_degenerate(x: np.ndarray) -> bool:
    """True when any normalized row has zero variance."""
    return bool(np.any(x.var(axis=-1) == 0.0))


# -- activations ------------------------------------------------------------

def activation_vjp(x: np.ndarray, kind: str):
    if kind == "silu":
        s = 1.0 / (1.0 + np.exp(-x))
        y = x * s

        def backward(dy):
            return (dy * (s * (1.0 + x * (1.0 - s))),)

    elif kind == "gelu":
        # tanh approximation
        u = _SQRT_2_OVER_PI * (x + GELU_COEF * x**3)
        t = np.tanh(u)
        y = 0.5 * x * (1.0 + t)

        def backward(dy):
            du = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
            return (dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    else:
        raise ValueError(f"unknown activation {kind!r}")
    return y, backward


def activation(x, kind: str):
    return activation_vjp(x, kind)[0]


# -- conv2d -----------------------------------------------------------------

def conv2d_vjp(x: np.ndarray, kernels: np.ndarray, bias: Optional[np.ndarray] = None,
               stride: int = 1, padding: int = 0):
    """Cross-correlation over ``x[..., C_in, H, W]`` with ``kernels[C_out, C_in, k, k]``."""
    c_out, c_in, k, k2 = kernels.shape
    if k != k2:
        raise DimensionError(f"conv2d: kernels must be square, got {kernels.shape}")
    if k % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd, got {k}")
    if x.ndim < 3 or x.shape[-3] != c_in:
        raise DimensionError(
            f"conv2d: input {tuple(x.shape)} has wrong channel count for kernels {kernels.shape}"
        )
    lead = x.shape[:-3]
    xb = x.reshape((-1,) + x.shape[-3:])
    n, _, h, w = xb.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input {tuple(x.shape)} smaller than kernel {k}")
    wmat = kernels.reshape(c_out, c_in * k * k)

    if k == 1 and padding == 0:
        xs = xb[:, :, ::stride, ::stride]
        cols = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(n, ho * wo, c_in)
    else:
        xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho * wo, c_in * k * k)
    out = np.matmul(cols, wmat.T)
    if bias is not None:
        out = out + bias
    y = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(lead + (c_out, ho, wo))

    def backward(dy):
        dyb = dy.reshape(n, c_out, ho * wo).transpose(0, 2, 1)
        dw = np.matmul(cols.reshape(-1, cols.shape[-1]).T, dyb.reshape(-1, c_out)).T
        dw = dw.reshape(kernels.shape)
        db = dyb.sum(axis=(0, 1)) if bias is not None else None
        dcols = np.matmul(dyb, wmat)
        if k == 1 and padding == 0:
            dx = np.zeros_like(xb)
            dx[:, :, ::stride, ::stride] = dcols.reshape(n, ho, wo, c_in).transpose(0, 3, 1, 2)
        else:
            dcols = dcols.reshape(n, ho, wo, c_in, k, k)
            dxp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return np.ascontiguousarray(dx).reshape(x.shape), dw, db

    return y, backward


def conv2d(x, kernels, stride: int = 1, padding: int = 0, bias=None):
    return conv2d_vjp(x, kernels, bias, stride, padding)[0]


# -- gradient checking ------------------------------------------------------

@dataclass
class DiffOp:
    """A single-input differentiable function for ``check_gradient``.

    ``forward(x)`` must return ``(y, vjp)`` with ``vjp(dy) -> dx``.
    ``degenerate(x)`` optionally flags inputs where the op is not smooth.
    """

    name: str
    forward: Callable
    degenerate: Optional[Callable] = None


def check_gradient(op: DiffOp, x, seed: int = 0, step: float = 1e-3) -> float:
    """Normwise max relative error between reverse-mode and central-difference gradients.

    The probed scalar is ``sum(r * op(x))`` for a seeded random ``r``.  The
    error is ``max|a - n| / max(max|a|, max|n|)``: single-precision central
    differences carry absolute noise of order 1e-3 of the gradient's peak, so
    elementwise ratios on near-zero entries would measure noise, not bugs.
    """
    x = as_tensor(x).copy()
    if op.degenerate is not None and op.degenerate(x):
        raise DegenerateInputError(f"{op.name}: input is a degenerate point")
    y, vjp = op.forward(x)
    if not np.all(np.isfinite(y)):
        raise NumericError(f"{op.name}: forward produced non-finite values")
    rng = np.random.default_rng(seed)
    r = rng.standard_normal(y.shape).astype(DTYPE)
    analytic = np.asarray(vjp(r), dtype=np.float64).reshape(x.shape)
    r64 = r.astype(np.float64)

    numeric = np.empty(x.size, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(x.size):
        orig = flat[i]
        flat[i] = orig + DTYPE(step)
        up = float((op.forward(x)[0].astype(np.float64) * r64).sum())
        flat[i] = orig - DTYPE(step)
        down = float((op.forward(x)[0].astype(np.float64) * r64).sum())
        flat[i] = orig
        # actual float32 step, not the nominal one
        h = float(np.float32(orig + DTYPE(step))) - float(np.float32(orig - DTYPE(step)))
        numeric[i] = (up - down) / h
    numeric = numeric.reshape(x.shape)
    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
        raise NumericError(f"{op.name}: non-finite gradient")
    scale = max(np.abs(analytic).max(), np.abs(numeric).max())
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)
