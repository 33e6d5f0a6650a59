"""Synthetic GelSight-style sensor: marker-field stick/slip mechanics and frame rendering.

Forces are in newtons, displacements in pixels of the rendered frame.  All
randomness flows from explicit seeds so datasets regenerate bit-identically.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DatasetError, NumericError
from .tensorio import load_tensor, save_tensor

GRAVITY = 9.81
MARKER_ROWS, MARKER_COLS = 7, 9
D_MAX = 6.0  # px, elastomer shear limit
SHEAR_STIFFNESS = 2.0  # N per px
SLIP_GAIN = 40.0  # px/s per N of excess load
FRAME_RATE = 30.0
RELAX = 0.5  # fraction of elastic mismatch recovered per slipping step
REFERENCE_SIZE = 64  # sizes below are given at this resolution and scale with the frame

GEL_RGB = np.array([0.52, 0.50, 0.58])
BLOB_RGB = np.array([0.34, 0.30, 0.22])
BLOB_GAIN = 1.0
BLOB_HALF_FORCE = 2.0  # N at which the blob reaches half its full brightness
MARKER_SIGMA = 0.9
MARKER_DEPTH = 0.8
SENSOR_NOISE = 0.02
TOUCH_THRESHOLD = 0.5  # N


@dataclass(frozen=True)
class ObjectParams:
    name: str = "object"
    mass: float = 0.2  # kg
    friction: float = 0.5
    contact_radius: float = 12.0  # px at the reference resolution
    texture_amplitude: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.friction <= 2.0:
            raise ValueError(f"friction coefficient must be in (0, 2], got {self.friction}")
        if self.mass <= 0.0:
            raise ValueError("mass must be positive")


@dataclass(frozen=True)
class SimScene:
    obj: ObjectParams = field(default_factory=ObjectParams)
    grip_force: float = 0.0  # F_n
    tangential_load: float = 0.0  # F_t, signed along load_angle
    load_angle: float = math.pi / 2  # image coordinates, +y points down
    contact_center: tuple = (0.5, 0.5)  # fraction of frame width / height
    gravity: float = GRAVITY
    shear_stiffness: float = SHEAR_STIFFNESS
    slip_gain: float = SLIP_GAIN
    d_max: float = D_MAX
    frame_rate: float = FRAME_RATE
    seed: int = 0

    def __post_init__(self):
        if self.grip_force < 0.0:
            raise ValueError("grip force must be >= 0")

    @property
    def friction_limit(self) -> float:
        return self.obj.friction * self.grip_force

    @property
    def load_direction(self) -> np.ndarray:
        return np.array([math.cos(self.load_angle), math.sin(self.load_angle)])


@dataclass
class MarkerField:
    rest: np.ndarray  # (M, 2) x, y
    displacement: np.ndarray  # (M, 2) elastic shear
    slip_offset: np.ndarray  # (2,) rigid translation accumulated while slipping
    slip_distance: float
    width: int
    height: int

    @classmethod
    def grid(cls, width: int, height: int, rows: int = MARKER_ROWS, cols: int = MARKER_COLS):
        ys = (np.arange(rows) + 0.5) * height / rows
        xs = (np.arange(cols) + 0.5) * width / cols
        gx, gy = np.meshgrid(xs, ys)
        rest = np.stack([gx.ravel(), gy.ravel()], axis=1)
        return cls(rest, np.zeros_like(rest), np.zeros(2), 0.0, width, height)

    def positions(self) -> np.ndarray:
        return self.rest + self.slip_offset + self.displacement

    def copy(self) -> "MarkerField":
        return MarkerField(self.rest, self.displacement.copy(), self.slip_offset.copy(),
                           self.slip_distance, self.width, self.height)


def step_contact_dynamics(scene: SimScene, fld: MarkerField, dt: float):
    """Advance the contact by ``dt`` seconds; returns ``(new_field, slipping)``.

    Coulomb stick/slip: while |F_t| <= mu F_n the gel shears elastically by
    F_t / k_s (capped at d_max).  Beyond the limit the contact slides at
    k_v (|F_t| - mu F_n) px/s along the load and the shear partially relaxes.
    """
    f_n, f_t = scene.grip_force, scene.tangential_load
    if not (math.isfinite(f_n) and math.isfinite(f_t)):
        raise NumericError(f"non-finite forces F_n={f_n}, F_t={f_t}")
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    load = abs(f_t)
    direction = scene.load_direction * (1.0 if f_t >= 0 else -1.0)
    target = min(load / scene.shear_stiffness, scene.d_max) * direction
    out = fld.copy()
    if load <= scene.friction_limit:
        out.displacement[:] = target
        return out, False
    ds = scene.slip_gain * (load - scene.friction_limit) * dt
    out.slip_offset = out.slip_offset + ds * direction
    out.slip_distance = fld.slip_distance + ds
    out.displacement += RELAX * (target - out.displacement)
    return out, True


# -- rendering --------------------------------------------------------------

def _value_noise(seed: int, xs: np.ndarray, ys: np.ndarray, cell: float, period: int = 64):
    """Smooth periodic noise in [-1, 1] sampled at arbitrary coordinates."""
    lattice = np.random.default_rng(seed).random((period, period)) * 2.0 - 1.0
    gx, gy = xs / cell, ys / cell
    x0, y0 = np.floor(gx), np.floor(gy)
    fx, fy = gx - x0, gy - y0
    fx = fx * fx * (3 - 2 * fx)
    fy = fy * fy * (3 - 2 * fy)
    ix0, iy0 = x0.astype(np.int64) % period, y0.astype(np.int64) % period
    ix1, iy1 = (ix0 + 1) % period, (iy0 + 1) % period
    top = lattice[iy0, ix0] * (1 - fx) + lattice[iy0, ix1] * fx
    bot = lattice[iy1, ix0] * (1 - fx) + lattice[iy1, ix1] * fx
    return top * (1 - fy) + bot * fy


def _noise_seeds(seed: int) -> tuple[int, int]:
    s = np.random.SeedSequence([seed, 0x5e45]).generate_state(2)
    return int(s[0]), int(s[1])


def render_frame(scene: SimScene, fld: MarkerField, width: int | None = None,
                 height: int | None = None, sensor_noise: float = SENSOR_NOISE) -> np.ndarray:
    """(3, H, W) float32 frame in [0, 1].

    Gel background with seeded sensor noise, a textured contact blob whose
    brightness saturates with F_n and which moves with the accumulated slip,
    and dark Gaussian marker dots at the current marker positions.
    """
    w = fld.width if width is None else width
    h = fld.height if height is None else height
    scale = w / REFERENCE_SIZE
    sensor_seed, texture_seed = _noise_seeds(scene.seed)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    img = np.empty((3, h, w))
    img[:] = GEL_RGB[:, None, None]
    if sensor_noise:
        img += sensor_noise * _value_noise(sensor_seed, xs, ys, 2.0 * scale)
    if scene.grip_force > 0.0:
        cx = scene.contact_center[0] * w + fld.slip_offset[0]
        cy = scene.contact_center[1] * h + fld.slip_offset[1]
        radius = scene.obj.contact_radius * scale
        profile = np.clip(1.0 - ((xs - cx) ** 2 + (ys - cy) ** 2) / radius**2, 0.0, 1.0)
        tex = 1.0 + scene.obj.texture_amplitude * _value_noise(
            texture_seed, xs - fld.slip_offset[0], ys - fld.slip_offset[1], 3.0 * scale)
        strength = BLOB_GAIN * scene.grip_force / (scene.grip_force + BLOB_HALF_FORCE)
        img += BLOB_RGB[:, None, None] * (strength * profile * tex)[None]
    pos = fld.positions()
    sigma = MARKER_SIGMA * scale
    dx = xs[None] - pos[:, 0, None, None]
    dy = ys[None] - pos[:, 1, None, None]
    dots = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).sum(axis=0)
    img *= 1.0 - MARKER_DEPTH * np.clip(dots, 0.0, 1.0)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def no_contact_background(width: int, height: int, seed: int,
                          sensor_noise: float = SENSOR_NOISE) -> np.ndarray:
    """Frame of an untouched sensor: markers at rest, no blob."""
    return render_frame(SimScene(seed=seed), MarkerField.grid(width, height),
                        sensor_noise=sensor_noise)


def downsample(frames: np.ndarray, factor: int) -> np.ndarray:
    """Box-filter the trailing (H, W) axes by an integer factor."""
    if factor == 1:
        return frames
    *lead, h, w = frames.shape
    x = frames.reshape(tuple(lead) + (h // factor, factor, w // factor, factor))
    return x.mean(axis=(-3, -1), dtype=np.float64).astype(np.float32)


# -- datasets ---------------------------------------------------------------

# loosely modelled on everyday grocery/kitchen items: (mass kg, friction range,
# contact radius px, texture amplitude)
OBJECTS = {
    "apple": (0.20, (0.5, 0.8), 14.0, 0.15),
    "cup": (0.15, (0.3, 0.5), 10.0, 0.05),
    "capsicum": (0.15, (0.4, 0.7), 13.0, 0.20),
    "orange": (0.18, (0.6, 0.9), 14.0, 0.35),
    "tomato": (0.10, (0.4, 0.6), 11.0, 0.10),
    "bottle": (0.30, (0.3, 0.5), 9.0, 0.05),
    "gelatin_box": (0.10, (0.4, 0.6), 12.0, 0.10),
    "bread": (0.10, (0.7, 1.0), 16.0, 0.40),
    "jam_jar": (0.40, (0.3, 0.5), 10.0, 0.05),
}
MAX_TEXTURE = max(v[3] for v in OBJECTS.values())


@dataclass(frozen=True)
class DataPreset:
    name: str
    touch_size: int
    slip_size: int
    slip_render_size: int
    frames: int = 8


PRESETS = {
    "toy": DataPreset("toy", touch_size=64, slip_size=32, slip_render_size=64),
    "paper": DataPreset("paper", touch_size=256, slip_size=224, slip_render_size=224),
}

TOUCH_FORCE_RANGE = (1.0, 10.0)
SLIP_FORCE_RANGE = (1.0, 8.0)
# slip already arrested before the clip starts, in px at a 64 px render
PRIOR_SLIP_RANGE = (0.0, 32.0)


def get_preset(preset) -> DataPreset:
    if isinstance(preset, DataPreset):
        return preset
    try:
        return PRESETS[preset]
    except KeyError:
        raise ValueError(f"unknown preset {preset!r}") from None


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def random_object(rng: np.random.Generator) -> ObjectParams:
    name = sorted(OBJECTS)[int(rng.integers(len(OBJECTS)))]
    mass, (mu_lo, mu_hi), radius, tex = OBJECTS[name]
    return ObjectParams(
        name=name,
        mass=float(mass * rng.uniform(0.8, 1.2)),
        friction=float(rng.uniform(mu_lo, mu_hi)),
        contact_radius=float(radius * rng.uniform(0.85, 1.15)),
        texture_amplitude=tex,
    )


def min_blob_delta() -> float:
    """Lower bound on the brightest blob-vs-background difference of a touch image.

    Taken over the marker-free pixels with profile >= 1/2 around the contact
    centre, at the weakest touch force and strongest texture dip.
    """
    f = TOUCH_FORCE_RANGE[0]
    strength = BLOB_GAIN * f / (f + BLOB_HALF_FORCE)
    return float(strength * 0.5 * (1.0 - MAX_TEXTURE) * BLOB_RGB.min())


def touch_sample(index: int, seed: int, preset="toy"):
    """One labelled touch image; even indices are touch, odd are no-touch."""
    pr = get_preset(preset)
    s = sample_seed(seed, index)
    rng = np.random.default_rng(s)
    obj = random_object(rng)
    label = 1 if index % 2 == 0 else 0
    fld = MarkerField.grid(pr.touch_size, pr.touch_size)
    if label:
        f_n = float(rng.uniform(*TOUCH_FORCE_RANGE))
        scene = SimScene(
            obj=obj, grip_force=f_n,
            tangential_load=float(rng.uniform(0.0, 0.8) * obj.friction * f_n),
            load_angle=float(rng.uniform(0.0, 2 * math.pi)),
            contact_center=(float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.3, 0.7))),
            seed=s,
        )
        fld, _ = step_contact_dynamics(scene, fld, 1.0 / scene.frame_rate)
    else:
        scene = SimScene(obj=obj, seed=s)
    image = render_frame(scene, fld)
    meta = {"label": label, "frames": 1, "seed": s, "object": obj.name,
            "grip_force": round(scene.grip_force, 6)}
    return image, label, meta


def slip_schedule(label: int, frames: int, limit: float, rng) -> np.ndarray:
    """Tangential load per frame.  Stable clips stay below ``limit``; slip clips
    cross it at a random frame in 2..5 and keep sliding to the end."""
    if label == 0:
        a, b = rng.uniform(0.0, 0.85, size=2) * limit
        return np.linspace(a, b, frames)
    onset = int(rng.integers(2, min(6, frames - 1)))
    excess = rng.uniform(0.2, 3.0)
    k = np.arange(frames)
    before = limit * (0.6 + 0.4 * k / onset)
    after = limit * (1.0 + excess * (k - onset + 1) / (frames - onset))
    return np.where(k < onset, before, after)


def slip_sample(index: int, seed: int, preset="toy"):
    """One labelled clip ``(F, 3, H, W)``; even indices slip, odd are stable."""
    pr = get_preset(preset)
    s = sample_seed(seed, index)
    rng = np.random.default_rng(s)
    obj = random_object(rng)
    label = 1 if index % 2 == 0 else 0
    f_n = float(rng.uniform(*SLIP_FORCE_RANGE))
    scene = SimScene(
        obj=obj, grip_force=f_n,
        load_angle=float(math.pi / 2 + rng.uniform(-math.pi / 6, math.pi / 6)),
        contact_center=(float(rng.uniform(0.35, 0.65)), float(rng.uniform(0.3, 0.5))),
        seed=s,
    )
    loads = slip_schedule(label, pr.frames, scene.friction_limit, rng)
    fld = MarkerField.grid(pr.slip_render_size, pr.slip_render_size)
    # both classes may begin displaced by an earlier, already arrested slip
    prior = rng.uniform(*PRIOR_SLIP_RANGE) * pr.slip_render_size / 64
    fld.slip_offset = prior * scene.load_direction
    dt = 1.0 / scene.frame_rate
    frames, slipping, distance = [], [], []
    for f_t in loads:
        scene = replace(scene, tangential_load=float(f_t))
        fld, sl = step_contact_dynamics(scene, fld, dt)
        frames.append(render_frame(scene, fld))
        slipping.append(bool(sl))
        distance.append(round(float(fld.slip_distance), 6))
    clip = downsample(np.stack(frames), pr.slip_render_size // pr.slip_size)
    meta = {"label": label, "frames": pr.frames, "seed": s, "object": obj.name,
            "slipping": slipping, "slip_distance": distance}
    return clip, label_from_slipping(slipping), meta


def label_from_slipping(slipping, tail: int = 2) -> int:
    """A clip is 'slip' when slippage occurs in any of its last ``tail`` frames."""
    return int(any(slipping[-tail:]))


SAMPLERS = {"touch": touch_sample, "slip": slip_sample}


def generate_dataset(kind: str, out_dir, count: int, seed: int, preset="toy") -> list[dict]:
    """Write ``count`` samples plus ``manifest.jsonl`` into ``out_dir``."""
    if count < 2:
        raise ValueError("count must be >= 2")
    sampler = SAMPLERS[kind]
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        records = []
        for i in range(count):
            data, label, meta = sampler(i, seed, preset)
            rel = f"{kind}_{i:05d}.vtsf"
            save_tensor(out / rel, data)
            records.append({"path": rel, "kind": kind, **meta, "label": label})
        with open(out / "manifest.jsonl", "w", encoding="utf-8") as f:
            for r in records:
                f.write(json.dumps(r, sort_keys=True) + "\n")
    except OSError as e:
        raise DatasetError(f"cannot write dataset to {out}: {e}") from e
    return records


def generate_touch_dataset(out_dir, count: int, seed: int, preset="toy") -> list[dict]:
    return generate_dataset("touch", out_dir, count, seed, preset)


def generate_slip_dataset(out_dir, count: int, seed: int, preset="toy") -> list[dict]:
    return generate_dataset("slip", out_dir, count, seed, preset)


def read_manifest(path) -> list[dict]:
    p = Path(path) / "manifest.jsonl"
    try:
        with open(p, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"unreadable dataset manifest {p}: {e}") from e


def load_dataset(path):
    """Returns ``(samples, labels, records)`` with samples stacked on axis 0."""
    records = read_manifest(path)
    if not records:
        raise DatasetError(f"empty dataset at {path}")
    try:
        xs = [load_tensor(Path(path) / r["path"]) for r in records]
    except (OSError, ValueError) as e:
        raise DatasetError(f"unreadable sample in {path}: {e}") from e
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise DatasetError(f"inconsistent sample shapes {sorted(shapes)}")
    return np.stack(xs), np.array([r["label"] for r in records], dtype=np.int64), records


def write_pgm(path, gray: np.ndarray) -> None:
    """Binary 8-bit PGM from a float image in [0, 1]."""
    g = np.clip(np.round(gray * 255.0), 0, 255).astype(np.uint8)
    h, w = g.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(g.tobytes())


def iter_frames(sample: np.ndarray) -> Iterator[np.ndarray]:
    """Yield (3, H, W) frames from an image or a clip."""
    if sample.ndim == 3:
        yield sample
    else:
        yield from sample


def export_frames(data_dir, out_dir) -> int:
    """Grayscale PGM per frame of every sample; returns the number written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for r in read_manifest(data_dir):
        x = load_tensor(Path(data_dir) / r["path"])
        stem = Path(r["path"]).stem
        for t, frame in enumerate(iter_frames(x)):
            write_pgm(out / f"{stem}_f{t:02d}.pgm", frame.mean(axis=0))
            n += 1
    return n
