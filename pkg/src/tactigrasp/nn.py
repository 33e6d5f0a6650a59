"""Attention machinery shared by the touch and slip models.

Parameters live in a flat ``dict[str, ndarray]`` addressed through
:class:`Params` scopes (``"blocks.0.time_attn.qkv.w"``).  Layer functions
named ``*_vjp`` return ``(y, backward)``; ``backward(dy, grads)`` returns the
input gradient and adds parameter gradients into ``grads`` under their full
names.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DimensionError, GeometryError
from .tensor import DTYPE, _unbroadcast, activation_vjp, layer_norm_vjp, softmax_vjp


class Params:
    """Scoped view over a flat name -> array store."""

    def __init__(self, store: Optional[dict] = None, prefix: str = ""):
        self.store = {} if store is None else store
        self.prefix = prefix

    def __getitem__(self, name: str) -> np.ndarray:
        return self.store[self.prefix + name]

    def __setitem__(self, name: str, value) -> None:
        self.store[self.prefix + name] = np.ascontiguousarray(value, dtype=DTYPE)

    def __contains__(self, name: str) -> bool:
        return self.prefix + name in self.store

    def scope(self, name) -> "Params":
        return Params(self.store, f"{self.prefix}{name}.")

    def key(self, name: str) -> str:
        return self.prefix + name

    def accumulate(self, grads: dict, name: str, g) -> None:
        k = self.prefix + name
        g = np.asarray(g, dtype=DTYPE)
        if k in grads:
            grads[k] = grads[k] + g
        else:
            grads[k] = g


def count_parameters(store: dict) -> int:
    return int(sum(a.size for a in store.values()))


# -- configs ----------------------------------------------------------------

@dataclass(frozen=True)
class MultiHeadConfig:
    hidden_size: int
    heads: int
    dropout: float = 0.0

    def __post_init__(self):
        if self.hidden_size < 1 or self.heads < 1:
            raise ValueError("hidden_size and heads must be positive")
        if self.hidden_size % self.heads:
            raise ValueError(f"hidden size {self.hidden_size} not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.heads


@dataclass(frozen=True)
class BlockConfig:
    """One pre-norm transformer block: attention plus an MLP of width ``mlp_hidden``."""

    hidden_size: int
    heads: int
    mlp_hidden: int
    activation: str = "gelu"
    ln_eps: float = 1e-6

    @property
    def attention(self) -> MultiHeadConfig:
        return MultiHeadConfig(self.hidden_size, self.heads)

    @classmethod
    def from_ratio(cls, hidden_size, heads, mlp_ratio, **kw):
        return cls(hidden_size, heads, int(round(hidden_size * mlp_ratio)), **kw)


# -- initialisation ---------------------------------------------------------

def init_linear(p: Params, d_in: int, d_out: int, rng: np.random.Generator, std: float = 0.02):
    p["w"] = rng.standard_normal((d_in, d_out), dtype=DTYPE) * DTYPE(std)
    p["b"] = np.zeros(d_out, DTYPE)


def init_layer_norm(p: Params, d: int):
    p["g"] = np.ones(d, DTYPE)
    p["b"] = np.zeros(d, DTYPE)


def init_attention(p: Params, cfg: MultiHeadConfig, rng):
    init_linear(p.scope("qkv"), cfg.hidden_size, 3 * cfg.hidden_size, rng)
    init_linear(p.scope("proj"), cfg.hidden_size, cfg.hidden_size, rng)


def init_mlp(p: Params, d: int, d_hidden: int, rng):
    init_linear(p.scope("fc1"), d, d_hidden, rng)
    init_linear(p.scope("fc2"), d_hidden, d, rng)


def init_transformer_block(p: Params, cfg: BlockConfig, rng):
    init_layer_norm(p.scope("norm1"), cfg.hidden_size)
    init_attention(p.scope("attn"), cfg.attention, rng)
    init_layer_norm(p.scope("norm2"), cfg.hidden_size)
    init_mlp(p.scope("mlp"), cfg.hidden_size, cfg.mlp_hidden, rng)


def init_divided_block(p: Params, cfg: BlockConfig, rng):
    init_layer_norm(p.scope("time_norm"), cfg.hidden_size)
    init_attention(p.scope("time_attn"), cfg.attention, rng)
    init_layer_norm(p.scope("space_norm"), cfg.hidden_size)
    init_attention(p.scope("space_attn"), cfg.attention, rng)
    init_layer_norm(p.scope("mlp_norm"), cfg.hidden_size)
    init_mlp(p.scope("mlp"), cfg.hidden_size, cfg.mlp_hidden, rng)


def block_parameter_count(cfg: BlockConfig, divided: bool) -> int:
    d, m = cfg.hidden_size, cfg.mlp_hidden
    attn = 4 * d * d + 4 * d
    mlp = 2 * d * m + m + d
    if divided:
        return 3 * 2 * d + 2 * attn + mlp
    return 2 * 2 * d + attn + mlp


# -- basic layers -----------------------------------------------------------

def linear_vjp(x: np.ndarray, p: Params):
    w, b = p["w"], p["b"]
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {tuple(x.shape)} does not match weight {w.shape}")
    y = np.matmul(x, w) + b

    def backward(dy, grads):
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        p.accumulate(grads, "w", x2.T @ dy2)
        p.accumulate(grads, "b", dy2.sum(axis=0))
        return np.matmul(dy, w.T)

    return y, backward


def layer_norm_layer_vjp(x, p: Params, eps: float):
    y, back = layer_norm_vjp(x, p["g"], p["b"], eps)

    def backward(dy, grads):
        dx, dg, db = back(dy)
        p.accumulate(grads, "g", dg)
        p.accumulate(grads, "b", db)
        return dx

    return y, backward


def mlp_vjp(x, p: Params, kind: str):
    h, b1 = linear_vjp(x, p.scope("fc1"))
    a, ba = activation_vjp(h, kind)
    y, b2 = linear_vjp(a, p.scope("fc2"))

    def backward(dy, grads):
        da = b2(dy, grads)
        (dh,) = ba(da)
        return b1(dh, grads)

    return y, backward


# -- attention --------------------------------------------------------------

def self_attention_vjp(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: Optional[float] = None):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes; leading axes broadcast.

    Returns ``(out, weights, backward)`` with ``backward(dout) -> (dq, dk, dv)``.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"self_attention: query {tuple(q.shape)} vs key {tuple(k.shape)}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"self_attention: key {tuple(k.shape)} vs value {tuple(v.shape)}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    scale = DTYPE(scale)
    kt = np.swapaxes(k, -1, -2)
    s = np.matmul(q, kt) * scale
    a, sm_back = softmax_vjp(s, -1)
    out = np.matmul(a, v)

    def backward(dout):
        da = np.matmul(dout, np.swapaxes(v, -1, -2))
        dv = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), dout), v.shape)
        (ds,) = sm_back(da)
        ds = ds * scale
        dq = _unbroadcast(np.matmul(ds, k), q.shape)
        dk = _unbroadcast(np.matmul(np.swapaxes(ds, -1, -2), q), k.shape)
        return dq, dk, dv

    return out, a, backward


def self_attention(q, k, v):
    return self_attention_vjp(q, k, v)[0]


def _split_heads(qkv: np.ndarray, heads: int):
    """(..., n, 3D) -> three arrays (..., n, A, Dh)."""
    *lead, n, d3 = qkv.shape
    d = d3 // 3
    x = qkv.reshape(tuple(lead) + (n, 3, heads, d // heads))
    return x[..., 0, :, :], x[..., 1, :, :], x[..., 2, :, :]


def _merge_qkv_grads(dq, dk, dv):
    """Inverse of :func:`_split_heads` for gradients."""
    *lead, n, a, dh = dq.shape
    return np.stack([dq, dk, dv], axis=-3).reshape(tuple(lead) + (n, 3 * a * dh))


def multi_head_attention_vjp(x: np.ndarray, p: Params, cfg: MultiHeadConfig):
    """Full multi-head self-attention over the token axis of ``x[..., n, D]``."""
    if x.shape[-1] != cfg.hidden_size:
        raise DimensionError(f"attention: input {tuple(x.shape)} vs hidden size {cfg.hidden_size}")
    if p["qkv.w"].shape != (cfg.hidden_size, 3 * cfg.hidden_size):
        raise DimensionError(f"attention: qkv weight {p['qkv.w'].shape} does not fit {cfg}")
    qkv, qkv_back = linear_vjp(x, p.scope("qkv"))
    q, k, v = (np.swapaxes(t, -2, -3) for t in _split_heads(qkv, cfg.heads))
    o, _, attn_back = self_attention_vjp(q, k, v)
    o = np.swapaxes(o, -2, -3)
    merged = o.reshape(o.shape[:-2] + (cfg.hidden_size,))
    y, proj_back = linear_vjp(merged, p.scope("proj"))

    def backward(dy, grads):
        dm = proj_back(dy, grads)
        do = np.swapaxes(dm.reshape(o.shape), -2, -3)
        dq, dk, dv = (np.swapaxes(t, -2, -3) for t in attn_back(do))
        return qkv_back(_merge_qkv_grads(dq, dk, dv), grads)

    return y, backward


def multi_head_attention(x, p, cfg):
    return multi_head_attention_vjp(x, p, cfg)[0]


def transformer_block_vjp(x: np.ndarray, p: Params, cfg: BlockConfig):
    """Pre-norm residual block: x + MSA(LN(x)), then + MLP(LN(.))."""
    h1, n1 = layer_norm_layer_vjp(x, p.scope("norm1"), cfg.ln_eps)
    a, ab = multi_head_attention_vjp(h1, p.scope("attn"), cfg.attention)
    x1 = x + a
    h2, n2 = layer_norm_layer_vjp(x1, p.scope("norm2"), cfg.ln_eps)
    m, mb = mlp_vjp(h2, p.scope("mlp"), cfg.activation)
    y = x1 + m

    def backward(dy, grads):
        dx1 = dy + n2(mb(dy, grads), grads)
        return dx1 + n1(ab(dx1, grads), grads)

    return y, backward


def transformer_block(x, p, cfg):
    return transformer_block_vjp(x, p, cfg)[0]


# -- video tokens -----------------------------------------------------------

@dataclass
class TokenGrid:
    """Tokens of a clip: index 0 is the classification token, then frame-major patches.

    Patch ``p`` (1-based) of frame ``t`` (1-based) sits at ``(t - 1) * N + p``.
    """

    tokens: np.ndarray  # (..., N*F + 1, D)
    n_patches: int
    frames: int

    def __post_init__(self):
        if self.tokens.shape[-2] != self.n_patches * self.frames + 1:
            raise GeometryError(
                f"token count {self.tokens.shape[-2]} != N*F + 1 = "
                f"{self.n_patches * self.frames + 1}"
            )

    def index(self, p: int, t: int) -> int:
        if p == 0 and t == 0:
            return 0
        if not (1 <= p <= self.n_patches and 1 <= t <= self.frames):
            raise IndexError(f"(p={p}, t={t}) outside grid N={self.n_patches}, F={self.frames}")
        return (t - 1) * self.n_patches + p


def init_patch_embed(p: Params, channels: int, patch: int, hidden: int, n_patches: int,
                     frames: int, rng):
    init_linear(p.scope("proj"), channels * patch * patch, hidden, rng)
    p["cls"] = rng.standard_normal(hidden, dtype=DTYPE) * DTYPE(0.02)
    p["pos"] = rng.standard_normal((n_patches + 1, hidden), dtype=DTYPE) * DTYPE(0.02)
    p["time"] = rng.standard_normal((frames, hidden), dtype=DTYPE) * DTYPE(0.02)


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """(..., F, C, H, W) -> (..., F*N, C*P*P), patches row-major within each frame."""
    *lead, f, c, h, w = frames.shape
    if h % patch or w % patch:
        raise GeometryError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = frames.reshape(tuple(lead) + (f, c, gh, patch, gw, patch))
    nl = len(lead)
    perm = tuple(range(nl)) + tuple(nl + i for i in (0, 2, 4, 1, 3, 5))
    return np.ascontiguousarray(x.transpose(perm)).reshape(tuple(lead) + (f * gh * gw, c * patch * patch))


def patch_embed_vjp(frames: np.ndarray, p: Params, patch: int):
    """Embed ``frames[..., F, C, H, W]`` as a :class:`TokenGrid` of width D.

    Token (p, t) = W x_patch + b + pos[p] + time[t]; the CLS token is
    ``cls + pos[0]``.
    """
    *lead, f, c, h, w = frames.shape
    lead = tuple(lead)
    x = patchify(frames, patch)
    n = (h // patch) * (w // patch)
    if p["pos"].shape[0] != n + 1 or p["time"].shape[0] != f:
        raise GeometryError(
            f"positional tables {p['pos'].shape}/{p['time'].shape} do not fit N={n}, F={f}"
        )
    e, lin_back = linear_vjp(x, p.scope("proj"))
    d = e.shape[-1]
    e = e.reshape(lead + (f, n, d)) + p["pos"][1:] + p["time"][:, None, :]
    cls = np.broadcast_to(p["cls"] + p["pos"][0], lead + (1, d))
    tokens = np.concatenate([cls, e.reshape(lead + (f * n, d))], axis=-2)

    def backward(dtok, grads):
        red = tuple(range(len(lead)))
        dcls = dtok[..., 0, :].sum(axis=red) if red else dtok[..., 0, :]
        de = dtok[..., 1:, :].reshape(lead + (f, n, d))
        dpos = np.empty_like(p["pos"])
        dpos[0] = dcls
        dpos[1:] = de.sum(axis=red + (len(lead),))
        p.accumulate(grads, "cls", dcls)
        p.accumulate(grads, "pos", dpos)
        p.accumulate(grads, "time", de.sum(axis=red + (len(lead) + 1,)))
        dx = lin_back(de.reshape(lead + (f * n, d)), grads)
        dx = dx.reshape(lead + (f, h // patch, w // patch, c, patch, patch))
        nl = len(lead)
        perm = tuple(range(nl)) + tuple(nl + i for i in (0, 3, 1, 4, 2, 5))
        return np.ascontiguousarray(dx.transpose(perm)).reshape(frames.shape)

    return TokenGrid(tokens, n, f), backward


# -- divided space-time attention -------------------------------------------

def comparisons_per_patch(n_patches: int, frames: int) -> int:
    """Keys a patch query is compared against across both divided passes."""
    if n_patches < 1 or frames < 1:
        raise ValueError("N and F must be >= 1")
    return n_patches + frames + 2


# permutations of the trailing (F, N, A, Dh) axes that bring the grouping
# axis first and the attended axis next to Dh
_GROUPING = {"time": (1, 2, 0, 3), "space": (0, 2, 1, 3)}


def _permute_last4(t: np.ndarray, perm) -> np.ndarray:
    base = t.ndim - 4
    return t.transpose(tuple(range(base)) + tuple(base + i for i in perm))


def _divided_pass_vjp(x: np.ndarray, p: Params, norm: Params, cfg: BlockConfig, n: int, f: int,
                      mode: str):
    """One residual attention pass; every patch query sees its group plus the CLS key."""
    perm = _GROUPING[mode]
    inv = tuple(int(i) for i in np.argsort(perm))
    a_heads = cfg.heads
    d = cfg.hidden_size
    dh = d // a_heads
    lead = x.shape[:-2]
    t_count = x.shape[-2]

    h, ln_back = layer_norm_layer_vjp(x, norm, cfg.ln_eps)
    qkv, qkv_back = linear_vjp(h, p.scope("qkv"))
    q, k, v = _split_heads(qkv, a_heads)  # (..., T, A, Dh)

    # classification query attends over every token
    q0 = np.swapaxes(q[..., 0:1, :, :], -2, -3)
    o0, _, back0 = self_attention_vjp(q0, np.swapaxes(k, -2, -3), np.swapaxes(v, -2, -3))

    def grouped(t):
        return _permute_last4(t[..., 1:, :, :].reshape(lead + (f, n, a_heads, dh)), perm)

    qg = grouped(q)
    n_groups, _n_members = qg.shape[-4], qg.shape[-2]

    def with_cls(t, tg):
        c = t[..., 0, :, :][..., None, :, None, :]  # (..., 1, A, 1, Dh)
        c = np.broadcast_to(c, lead + (n_groups, a_heads, 1, dh))
        return np.concatenate([c, tg], axis=-2)

    kg = with_cls(k, grouped(k))
    vg = with_cls(v, grouped(v))
    og, _, backg = self_attention_vjp(qg, kg, vg)
    keys_per_query = kg.shape[-2]

    on = _permute_last4(og, inv).reshape(lead + (f * n, d))
    o = np.concatenate([np.swapaxes(o0, -2, -3).reshape(lead + (1, d)), on], axis=-2)
    out, proj_back = linear_vjp(o, p.scope("proj"))
    y = x + out

    def backward(dy, grads):
        do = proj_back(dy, grads)
        do0 = np.swapaxes(do[..., 0:1, :].reshape(lead + (1, a_heads, dh)), -2, -3)
        dog = _permute_last4(do[..., 1:, :].reshape(lead + (f, n, a_heads, dh)), perm)
        dq0, dk_all, dv_all = back0(do0)
        dqg, dkg, dvg = backg(dog)

        def ungroup(tg):
            return _permute_last4(tg, inv).reshape(lead + (f * n, a_heads, dh))

        dq = np.empty(lead + (t_count, a_heads, dh), DTYPE)
        dq[..., 0:1, :, :] = np.swapaxes(dq0, -2, -3)
        dq[..., 1:, :, :] = ungroup(dqg)
        dk = np.ascontiguousarray(np.swapaxes(dk_all, -2, -3))
        dv = np.ascontiguousarray(np.swapaxes(dv_all, -2, -3))
        for full, g in ((dk, dkg), (dv, dvg)):
            full[..., 0, :, :] += g[..., 0, :].sum(axis=-3)
            full[..., 1:, :, :] += ungroup(g[..., 1:, :])
        dh_ = qkv_back(_merge_qkv_grads(dq, dk, dv), grads)
        return dy + ln_back(dh_, grads)

    return y, keys_per_query, backward


def divided_st_attention_vjp(x: np.ndarray, p: Params, cfg: BlockConfig, n_patches: int,
                             frames: int, probe: Optional[Callable] = None):
    """Temporal pass then spatial pass, each pre-norm with a residual.

    Temporal: patch (p, t) attends to {(p, t') : t' = 1..F} plus the CLS token.
    Spatial: patch (p, t) attends to {(p', t) : p' = 1..N} plus the CLS token.
    The CLS token attends to all tokens in both passes.  ``probe`` receives a
    dict of the attended key counts per patch query.
    """
    if x.shape[-2] != n_patches * frames + 1:
        raise GeometryError(
            f"divided attention: {x.shape[-2]} tokens but N={n_patches}, F={frames}"
        )
    xt, keys_t, back_t = _divided_pass_vjp(
        x, p.scope("time_attn"), p.scope("time_norm"), cfg, n_patches, frames, "time")
    xs, keys_s, back_s = _divided_pass_vjp(
        xt, p.scope("space_attn"), p.scope("space_norm"), cfg, n_patches, frames, "space")
    expected = comparisons_per_patch(n_patches, frames)
    if keys_t + keys_s != expected:
        raise RuntimeError(f"divided attention compared {keys_t + keys_s} keys, expected {expected}")
    if probe is not None:
        probe({"temporal": keys_t, "spatial": keys_s, "total": keys_t + keys_s})

    def backward(dy, grads):
        return back_t(back_s(dy, grads), grads)

    return xs, backward


def divided_st_attention(x, p, cfg, n_patches, frames, probe=None):
    return divided_st_attention_vjp(x, p, cfg, n_patches, frames, probe)[0]


def divided_block_vjp(x, p: Params, cfg: BlockConfig, n_patches: int, frames: int, probe=None):
    """Divided attention followed by a pre-norm residual MLP."""
    x1, att_back = divided_st_attention_vjp(x, p, cfg, n_patches, frames, probe)
    h, n_back = layer_norm_layer_vjp(x1, p.scope("mlp_norm"), cfg.ln_eps)
    m, m_back = mlp_vjp(h, p.scope("mlp"), cfg.activation)
    y = x1 + m

    def backward(dy, grads):
        dx1 = dy + n_back(m_back(dy, grads), grads)
        return att_back(dx1, grads)

    return y, backward
