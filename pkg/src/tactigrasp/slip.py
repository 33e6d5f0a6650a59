"""Divided space-time transformer that labels an F-frame tactile clip stable / slip."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Callable, Optional

import numpy as np

from .errors import GeometryError, UnknownVariantError
from .nn import (
    BlockConfig,
    Params,
    divided_block_vjp,
    init_divided_block,
    init_layer_norm,
    init_linear,
    init_patch_embed,
    layer_norm_layer_vjp,
    linear_vjp,
    patch_embed_vjp,
)
from .tensor import DTYPE, softmax

LABELS = ("stable", "slip")


@dataclass(frozen=True)
class SlipNetConfig:
    frames: int = 8
    image_size: int = 224
    channels: int = 3
    patch: int = 16
    hidden: int = 768
    heads: int = 12
    blocks: int = 12
    intermediate: int = 3078
    ln_eps: float = 1e-6
    activation: str = "gelu"
    classes: int = 2
    dropout: float = 0.0
    pixel_mean: float = 0.45
    pixel_std: float = 0.225
    variant: str = "baseline"
    init_seed: int = 0
    preset: str = "paper"

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if self.image_size % self.patch:
            raise GeometryError(f"image size {self.image_size} not divisible by patch {self.patch}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def block(self) -> BlockConfig:
        return BlockConfig(self.hidden, self.heads, self.intermediate, self.activation, self.ln_eps)

    @classmethod
    def toy(cls, **kw) -> "SlipNetConfig":
        base = dict(frames=8, image_size=32, patch=8, hidden=64, heads=4, blocks=2,
                    intermediate=256, variant="toy", preset="toy")
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Variant:
    name: str
    row: int
    hidden: int
    heads: int
    blocks: int
    reported_accuracy: float  # provenance only; not reproducible without the original data


VARIANTS = {
    v.name: v
    for v in (
        Variant("baseline", 1, 768, 12, 12, 0.8615),
        Variant("AB1-384", 2, 384, 12, 12, 0.7307),
        Variant("AB1-576", 3, 576, 12, 12, 0.7076),
        Variant("AB2-16", 4, 768, 16, 12, 0.8923),
        Variant("AB2-8", 5, 768, 8, 12, 0.7923),
        Variant("AB3-8", 6, 768, 12, 8, 0.8923),
        Variant("AB3-6", 7, 768, 12, 6, 0.8615),
        Variant("AB3-4", 8, 768, 12, 4, 0.8076),
    )
}
PROPOSED = ("AB2-16", "AB3-8")


def build_variant(name: str, **overrides) -> SlipNetConfig:
    """Config for an ablation row; fields other than the (hidden, heads, blocks) triple
    keep their defaults unless overridden (e.g. toy geometry)."""
    try:
        v = VARIANTS[name]
    except KeyError:
        raise UnknownVariantError(f"unknown variant {name!r}; known: {', '.join(VARIANTS)}") from None
    cfg = SlipNetConfig(hidden=v.hidden, heads=v.heads, blocks=v.blocks, variant=name)
    return replace(cfg, **overrides) if overrides else cfg


def parameter_count(cfg: SlipNetConfig) -> int:
    d, m, n = cfg.hidden, cfg.intermediate, cfg.n_patches
    embed = cfg.channels * cfg.patch**2 * d + d + d + (n + 1) * d + cfg.frames * d
    # per block: three norms, temporal and spatial attention, MLP
    block = 3 * 2 * d + 2 * (3 * d * d + 3 * d + d * d + d) + (d * m + m + m * d + d)
    return embed + cfg.blocks * block + 2 * d + d * cfg.classes + cfg.classes


def init_slip_params(cfg: SlipNetConfig, seed: int | None = None) -> dict:
    rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
    p = Params()
    init_patch_embed(p.scope("embed"), cfg.channels, cfg.patch, cfg.hidden, cfg.n_patches,
                     cfg.frames, rng)
    for i in range(cfg.blocks):
        init_divided_block(p.scope(f"blocks.{i}"), cfg.block, rng)
    init_layer_norm(p.scope("norm"), cfg.hidden)
    init_linear(p.scope("head"), cfg.hidden, cfg.classes, rng)
    return p.store


def slip_logits_vjp(clips: np.ndarray, params: dict, cfg: SlipNetConfig,
                    probe: Optional[Callable] = None):
    want = (cfg.frames, cfg.channels, cfg.image_size, cfg.image_size)
    if clips.ndim < 4 or clips.shape[-4:] != want:
        raise GeometryError(f"slip model expects (..., {', '.join(map(str, want))}), "
                            f"got {tuple(clips.shape)}")
    p = Params(params)
    inv_std = DTYPE(1.0 / cfg.pixel_std)
    grid, embed_back = patch_embed_vjp((clips - DTYPE(cfg.pixel_mean)) * inv_std,
                                       p.scope("embed"), cfg.patch)
    x = grid.tokens
    backs = []
    for i in range(cfg.blocks):
        x, b = divided_block_vjp(x, p.scope(f"blocks.{i}"), cfg.block, grid.n_patches,
                                 grid.frames, probe)
        backs.append(b)
    h, norm_back = layer_norm_layer_vjp(x, p.scope("norm"), cfg.ln_eps)
    logits, head_back = linear_vjp(h[..., 0, :], p.scope("head"))
    tshape = x.shape

    def backward(dlogits, grads):
        dh = np.zeros(tshape, DTYPE)
        dh[..., 0, :] = head_back(dlogits, grads)
        dx = norm_back(dh, grads)
        for b in reversed(backs):
            dx = b(dx, grads)
        return embed_back(dx, grads) * inv_std

    return logits, backward


def slip_forward(clip: np.ndarray, params: dict, cfg: SlipNetConfig, probe=None) -> np.ndarray:
    """Class probabilities over (stable, slip)."""
    logits, _ = slip_logits_vjp(np.asarray(clip, DTYPE), params, cfg, probe)
    return softmax(logits, -1)


class SlipDebouncer:
    """Hysteresis over P(slip): flips state only after ``debounce`` consecutive
    evaluations on the other side of ``threshold`` (ties count as slip)."""

    def __init__(self, threshold: float = 0.5, debounce: int = 2):
        if not 0.0 < threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")
        if debounce < 1:
            raise ValueError("debounce must be >= 1")
        self.threshold = threshold
        self.debounce = debounce
        self.state = "stable"
        self.run = 0

    def update(self, p_slip: float) -> str:
        above = p_slip >= self.threshold
        if above == (self.state == "slip"):
            self.run = 0
        else:
            self.run += 1
            if self.run >= self.debounce:
                self.state = "slip" if above else "stable"
                self.run = 0
        return self.state


def classify(probabilities, threshold: float = 0.5, debounce: int = 2,
             history: SlipDebouncer | None = None) -> str:
    """Debounced decision for one evaluation.

    ``probabilities`` is either a 2-vector (stable, slip) or P(slip).  Pass the
    same ``history`` across calls to carry the debounce state.
    """
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    p_slip = float(p[-1])
    if history is None:
        history = SlipDebouncer(threshold, debounce)
    return history.update(p_slip)
