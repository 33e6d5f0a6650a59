"""MobileViT-style touch classifier over a single tactile image."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import GeometryError
from .nn import (
    BlockConfig,
    Params,
    init_layer_norm,
    init_linear,
    init_transformer_block,
    layer_norm_layer_vjp,
    linear_vjp,
    transformer_block_vjp,
)
from .tensor import DTYPE, activation_vjp, conv2d_vjp, softmax

LABELS = ("no-touch", "touch")


@dataclass(frozen=True)
class TouchNetConfig:
    image_size: int = 256
    channels: int = 3
    stem_channels: int = 16
    stage_channels: tuple = (96, 128, 160)
    hidden_dims: tuple = (144, 192, 240)
    heads: int = 4
    depth: int = 2
    mlp_ratio: float = 2.0
    patch: tuple = (2, 2)  # (w, h)
    kernel: int = 3
    activation: str = "silu"
    ln_eps: float = 1e-5
    classes: int = 2
    init_seed: int = 0
    preset: str = "paper"

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        object.__setattr__(self, "patch", tuple(self.patch))
        if len(self.stage_channels) != len(self.hidden_dims):
            raise ValueError("stage_channels and hidden_dims must have equal length")
        if any(b <= a for a, b in zip(self.hidden_dims, self.hidden_dims[1:])):
            raise ValueError(f"hidden dims must increase strictly, got {self.hidden_dims}")
        if any(d % self.heads for d in self.hidden_dims):
            raise ValueError(f"hidden dims {self.hidden_dims} not divisible by {self.heads} heads")
        w, h = self.patch
        for size in self.stage_sizes():
            if size % h or size % w:
                raise GeometryError(f"feature map {size} not divisible by patch {self.patch}")

    def stage_sizes(self) -> list[int]:
        """Spatial extent seen by each MobileViT stage."""
        sizes, s = [], self.image_size // 2
        for _ in self.hidden_dims:
            if s % 2:
                raise GeometryError(f"image size {self.image_size} cannot be halved per stage")
            s //= 2
            sizes.append(s)
        return sizes

    def block_config(self, stage: int) -> BlockConfig:
        return BlockConfig.from_ratio(self.hidden_dims[stage], self.heads, self.mlp_ratio,
                                      activation=self.activation, ln_eps=self.ln_eps)

    @classmethod
    def full(cls, **kw) -> "TouchNetConfig":
        return cls(**kw)

    @classmethod
    def toy(cls, **kw) -> "TouchNetConfig":
        base = dict(image_size=64, stem_channels=16, stage_channels=(16, 24, 32),
                    hidden_dims=(24, 32, 40), preset="toy")
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["hidden_dims"] = list(self.hidden_dims)
        d["patch"] = list(self.patch)
        return d


# -- unfold / fold ----------------------------------------------------------

def unfold(x_l: np.ndarray, w: int, h: int) -> np.ndarray:
    """(..., d, H, W) -> (..., P, N, d) with P = w*h offsets and N = H*W/(w*h) patches.

    ``out[..., p, n, :]`` is the feature at intra-patch offset ``p`` (row-major
    over the h x w patch) of patch ``n`` (row-major over the patch grid).
    """
    *lead, d, hh, ww = x_l.shape
    if hh % h or ww % w:
        raise GeometryError(f"unfold: {hh}x{ww} not divisible by patch {h}x{w}")
    gy, gx = hh // h, ww // w
    x = x_l.reshape(tuple(lead) + (d, gy, h, gx, w))
    nl = len(lead)
    x = x.transpose(tuple(range(nl)) + tuple(nl + i for i in (2, 4, 1, 3, 0)))
    return np.ascontiguousarray(x).reshape(tuple(lead) + (h * w, gy * gx, d))


def fold(x_g: np.ndarray, H: int, W: int, w: int, h: int) -> np.ndarray:
    """Exact inverse of :func:`unfold`."""
    *lead, pp, nn_, d = x_g.shape
    if H % h or W % w or pp != w * h or nn_ != (H * W) // (w * h):
        raise GeometryError(
            f"fold: P={pp}, N={nn_} inconsistent with {H}x{W} image and {h}x{w} patches"
        )
    gy, gx = H // h, W // w
    x = x_g.reshape(tuple(lead) + (h, w, gy, gx, d))
    nl = len(lead)
    x = x.transpose(tuple(range(nl)) + tuple(nl + i for i in (4, 2, 0, 3, 1)))
    return np.ascontiguousarray(x).reshape(tuple(lead) + (d, H, W))


# -- layers -----------------------------------------------------------------

def init_conv(p: Params, c_in: int, c_out: int, k: int, rng, gain: float = 2.0):
    std = math.sqrt(gain / (c_in * k * k))
    p["w"] = rng.standard_normal((c_out, c_in, k, k), dtype=DTYPE) * DTYPE(std)
    p["b"] = np.zeros(c_out, DTYPE)


def conv_layer_vjp(x, p: Params, stride: int = 1, act: str | None = None):
    k = p["w"].shape[-1]
    y, cback = conv2d_vjp(x, p["w"], p["b"], stride, (k - 1) // 2)
    if act is not None:
        y, aback = activation_vjp(y, act)

    def backward(dy, grads):
        if act is not None:
            (dy,) = aback(dy)
        dx, dw, db = cback(dy)
        p.accumulate(grads, "w", dw)
        p.accumulate(grads, "b", db)
        return dx

    return y, backward


def run_transformers(seq: np.ndarray, p: Params, cfg: BlockConfig, depth: int):
    """Transformer stack plus final norm over one length-N sequence ``seq[..., N, d]``."""
    backs = []
    x = seq
    for j in range(depth):
        x, b = transformer_block_vjp(x, p.scope(f"blocks.{j}"), cfg)
        backs.append(b)
    y, nb = layer_norm_layer_vjp(x, p.scope("norm"), cfg.ln_eps)

    def backward(dy, grads):
        dx = nb(dy, grads)
        for b in reversed(backs):
            dx = b(dx, grads)
        return dx

    return y, backward


def init_mobilevit_block(p: Params, channels: int, cfg: BlockConfig, depth: int, kernel: int, rng):
    d = cfg.hidden_size
    init_conv(p.scope("local"), channels, channels, kernel, rng)
    init_conv(p.scope("expand"), channels, d, 1, rng, gain=1.0)
    for j in range(depth):
        init_transformer_block(p.scope(f"blocks.{j}"), cfg, rng)
    init_layer_norm(p.scope("norm"), d)
    init_conv(p.scope("project"), d, channels, 1, rng)
    init_conv(p.scope("fuse"), 2 * channels, channels, kernel, rng)


def mobilevit_block_vjp(x: np.ndarray, p: Params, cfg: BlockConfig, depth: int,
                        patch=(2, 2), act: str = "silu"):
    """Local conv -> unfold -> per-offset transformers -> fold -> project -> concat -> fuse.

    ``x`` is ``(..., C, H, W)``; the output has the same shape.
    """
    w, h = patch
    H, W = x.shape[-2:]
    if H % h or W % w:
        raise GeometryError(f"mobilevit: {H}x{W} not divisible by patch {h}x{w}")
    c = x.shape[-3]
    local, b_local = conv_layer_vjp(x, p.scope("local"), act=act)
    x_l, b_expand = conv_layer_vjp(local, p.scope("expand"))
    x_u = unfold(x_l, w, h)  # (..., P, N, d)
    outs, backs = [], []
    for off in range(w * h):
        o, b = run_transformers(x_u[..., off, :, :], p, cfg, depth)
        outs.append(o)
        backs.append(b)
    x_g = np.stack(outs, axis=-3)
    x_f = fold(x_g, H, W, w, h)
    proj, b_proj = conv_layer_vjp(x_f, p.scope("project"), act=act)
    cat = np.concatenate([x, proj], axis=-3)
    y, b_fuse = conv_layer_vjp(cat, p.scope("fuse"), act=act)

    def backward(dy, grads):
        dcat = b_fuse(dy, grads)
        dx = dcat[..., :c, :, :]
        dxf = b_proj(dcat[..., c:, :, :], grads)
        dxg = unfold(dxf, w, h)
        dxu = np.stack([backs[off](dxg[..., off, :, :], grads) for off in range(w * h)], axis=-3)
        dxl = fold(dxu, H, W, w, h)
        return dx + b_local(b_expand(dxl, grads), grads)

    return y, backward


# -- full model -------------------------------------------------------------

def init_touch_params(cfg: TouchNetConfig, seed: int | None = None) -> dict:
    rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
    p = Params()
    init_conv(p.scope("stem"), cfg.channels, cfg.stem_channels, 3, rng)
    init_conv(p.scope("conv0"), cfg.stem_channels, cfg.stem_channels, 3, rng)
    c_prev = cfg.stem_channels
    for i, c in enumerate(cfg.stage_channels):
        s = p.scope(f"stages.{i}")
        init_conv(s.scope("down"), c_prev, c, 3, rng)
        init_mobilevit_block(s.scope("mvit"), c, cfg.block_config(i), cfg.depth, cfg.kernel, rng)
        c_prev = c
    init_linear(p.scope("head"), c_prev, cfg.classes, rng)
    return p.store


def touch_logits_vjp(images: np.ndarray, params: dict, cfg: TouchNetConfig):
    s = cfg.image_size
    if images.ndim < 3 or images.shape[-3:] != (cfg.channels, s, s):
        raise GeometryError(
            f"touch model expects (..., {cfg.channels}, {s}, {s}), got {tuple(images.shape)}"
        )
    p = Params(params)
    backs = []
    x, b = conv_layer_vjp(images, p.scope("stem"), stride=2, act=cfg.activation)
    backs.append(b)
    x, b = conv_layer_vjp(x, p.scope("conv0"), act=cfg.activation)
    backs.append(b)
    for i in range(len(cfg.stage_channels)):
        st = p.scope(f"stages.{i}")
        x, b = conv_layer_vjp(x, st.scope("down"), stride=2, act=cfg.activation)
        backs.append(b)
        x, b = mobilevit_block_vjp(x, st.scope("mvit"), cfg.block_config(i), cfg.depth,
                                   cfg.patch, cfg.activation)
        backs.append(b)
    hw = x.shape[-2] * x.shape[-1]
    pooled = x.mean(axis=(-2, -1))
    logits, head_back = linear_vjp(pooled, p.scope("head"))
    fshape = x.shape

    def backward(dlogits, grads):
        dpool = head_back(dlogits, grads)
        dx = np.broadcast_to(dpool[..., None, None] / DTYPE(hw), fshape).astype(DTYPE)
        for b in reversed(backs):
            dx = b(dx, grads)
        return dx

    return logits, backward


def touch_forward(image: np.ndarray, params: dict, cfg: TouchNetConfig) -> np.ndarray:
    """Class probabilities over (no-touch, touch)."""
    logits, _ = touch_logits_vjp(np.asarray(image, DTYPE), params, cfg)
    return softmax(logits, -1)
