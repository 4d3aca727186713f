"""Deterministic synthetic video feature streams with motion/size labels.

Each class owns a spatial "texture" pattern living in a low-rank channel
subspace; an object reveals its class pattern on the grid cells its box
covers and the rest of the map shows a shared background vector. Frames
are then degraded with isotropic noise whose magnitude grows as the
object's motion IoU drops.
"""

from __future__ import annotations

import dataclasses
import functools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import SpecError
from .features import PrototypeBank
from .policy import (
    Box,
    PolicyConfig,
    box_iou,
    frame_motion_iou,
    size_score,
    speed_category_gt,
)

CLIP_FORMAT = "dynagg-clips"
CLIP_FORMAT_VERSION = 1

# motion-IoU target ranges used when generating clips of a given speed;
# kept away from the 0.9 / 0.7 cut points so categories are separable
SPEED_RANGES = {
    "slow": (0.93, 0.99),
    "medium": (0.74, 0.86),
    "fast": (0.35, 0.62),
    "any": (0.35, 0.99),
}


@dataclass(frozen=True)
class World:
    bank: PrototypeBank
    background: np.ndarray
    basis: np.ndarray


@functools.lru_cache(maxsize=32)
def make_world(num_classes: int, shape: tuple[int, int, int], seed: int) -> World:
    """Class prototypes and background for one synthetic domain.

    Patterns lie in a rank ``max(1, C // 2)`` channel subspace and have zero
    spatial mean per channel, so the constant background is orthogonal to
    every prototype.
    """
    c, h, w = shape
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    rank = max(1, c // 2)
    basis, _ = np.linalg.qr(rng.normal(size=(c, rank)))
    codes = rng.normal(size=(num_classes, rank, h, w))
    if h * w > 1:
        codes -= codes.mean(axis=(2, 3), keepdims=True)
    patterns = np.einsum("cr,krhw->kchw", basis, codes)
    bank = PrototypeBank.normalized(patterns)
    bg = basis @ rng.normal(size=rank)
    bg /= np.linalg.norm(bg) * np.sqrt(h * w)
    return World(bank, bg, basis)


@dataclass(frozen=True)
class ClipSpec:
    """Everything needed to regenerate one clip bit-for-bit.

    ``boxes`` are the objects' boxes in frame 0 and ``velocities`` their
    per-frame pixel displacement ``(dx, dy)``.
    """

    num_frames: int
    shape: tuple[int, int, int]
    class_id: int
    boxes: tuple[Box, ...]
    velocities: tuple[tuple[float, float], ...]
    frame_size: tuple[float, float] = (320.0, 240.0)
    base_noise: float = 0.05
    motion_gain: float = 3.0
    num_classes: int = 10
    world_seed: int = 0
    motion_radius: int = 10
    amplitude: float | None = None
    seed: int = 0

    @property
    def feature_amplitude(self) -> float:
        """Global norm of a clean full-frame object; defaults to sqrt(C*H*W)."""
        if self.amplitude is not None:
            return float(self.amplitude)
        return float(np.sqrt(np.prod(self.shape)))

    def validate(self) -> None:
        if self.num_frames < 2:
            raise SpecError("a clip needs at least 2 frames")
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise SpecError(f"bad feature shape {self.shape}")
        if not 0 <= self.class_id < self.num_classes:
            raise SpecError(f"class id {self.class_id} outside [0, {self.num_classes})")
        if not self.boxes or len(self.boxes) != len(self.velocities):
            raise SpecError("need one velocity per box and at least one box")
        for v in (self.base_noise, self.motion_gain):
            if not np.isfinite(v) or v < 0:
                raise SpecError("noise scales must be finite and >= 0")
        if self.motion_radius < 1:
            raise SpecError("motion radius must be >= 1")
        width, height = self.frame_size
        for box, (vx, vy) in zip(self.boxes, self.velocities):
            end = box.shifted(vx * (self.num_frames - 1), vy * (self.num_frames - 1))
            if not (box.inside(width, height) and end.inside(width, height)):
                raise SpecError(f"trajectory of {box} with velocity {(vx, vy)} leaves the frame")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["boxes"] = [list(b.as_tuple()) for b in self.boxes]
        d["velocities"] = [list(v) for v in self.velocities]
        d["shape"] = list(self.shape)
        d["frame_size"] = list(self.frame_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClipSpec":
        d = dict(d)
        d["boxes"] = tuple(Box(*b) for b in d["boxes"])
        d["velocities"] = tuple(tuple(float(x) for x in v) for v in d["velocities"])
        d["shape"] = tuple(int(x) for x in d["shape"])
        d["frame_size"] = tuple(float(x) for x in d["frame_size"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class SyntheticClip:
    spec: ClipSpec
    features: np.ndarray  # (T, C, H, W)
    boxes: np.ndarray  # (T, n_objects, 4)
    s_m: np.ndarray
    s_s: np.ndarray
    delta: np.ndarray
    thresholds: tuple[float, ...] = field(default=(0.9, 0.7))

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def class_id(self) -> int:
        return self.spec.class_id

    def tracks(self) -> list[list[Box]]:
        return [[Box(*row) for row in self.boxes[:, o]] for o in range(self.boxes.shape[1])]


def trajectory(spec: ClipSpec) -> np.ndarray:
    t = np.arange(spec.num_frames, dtype=np.float64)[:, None]
    rows = []
    for box, (vx, vy) in zip(spec.boxes, spec.velocities):
        offset = np.hstack([t * vx, t * vy, t * vx, t * vy])
        rows.append(np.asarray(box.as_tuple()) + offset)
    return np.stack(rows, axis=1)


def coverage_mask(boxes: np.ndarray, frame_size: tuple[float, float], grid: tuple[int, int]) -> np.ndarray:
    """Fraction of each grid cell covered by the union-clipped boxes, ``(H, W)``."""
    width, height = frame_size
    h, w = grid
    xs = np.linspace(0.0, width, w + 1)
    ys = np.linspace(0.0, height, h + 1)
    mask = np.zeros((h, w))
    for x0, y0, x1, y1 in np.atleast_2d(boxes):
        ox = np.clip(np.minimum(x1, xs[1:]) - np.maximum(x0, xs[:-1]), 0.0, None) / np.diff(xs)
        oy = np.clip(np.minimum(y1, ys[1:]) - np.maximum(y0, ys[:-1]), 0.0, None) / np.diff(ys)
        mask += np.outer(oy, ox)
    return np.minimum(mask, 1.0)


def render(world: World, class_id: int, mask: np.ndarray) -> np.ndarray:
    proto = world.bank.prototypes[class_id]
    bg = world.background[:, None, None]
    return mask[None] * proto + (1.0 - mask[None]) * bg


def degrade(feature, magnitude: float, rng: np.random.Generator, reference_norm: float = 1.0) -> np.ndarray:
    """Add zero-mean Gaussian noise of std ``magnitude * reference_norm / sqrt(N)``.

    ``N`` is the element count, so the expected noise norm is
    ``magnitude * reference_norm``.
    """
    feature = np.asarray(feature, dtype=np.float64)
    if magnitude == 0:
        return feature.copy()
    std = magnitude * reference_norm / np.sqrt(feature.size)
    return feature + rng.normal(0.0, std, size=feature.shape)


def motion_window(t: int, radius: int, num_frames: int) -> range:
    return range(max(0, t - radius), min(num_frames, t + radius + 1))


def compute_labels(
    boxes: np.ndarray,
    frame_size: tuple[float, float],
    radius: int,
    config: PolicyConfig | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    num_frames = boxes.shape[0]
    tracks = [[Box(*row) for row in boxes[:, o]] for o in range(boxes.shape[1])]
    s_m = np.array([frame_motion_iou(tracks, t, motion_window(t, radius, num_frames)) for t in range(num_frames)])
    s_s = np.array([size_score([tr[t] for tr in tracks], *frame_size) for t in range(num_frames)])
    delta = np.array([speed_category_gt(v, config) for v in s_m], dtype=np.int64)
    return s_m, s_s, delta


def generate_clip(spec: ClipSpec, config: PolicyConfig | None = None) -> SyntheticClip:
    spec.validate()
    world = make_world(spec.num_classes, tuple(spec.shape), spec.world_seed)
    boxes = trajectory(spec)
    s_m, s_s, delta = compute_labels(boxes, spec.frame_size, spec.motion_radius, config)
    rng = np.random.default_rng(spec.seed)
    amp = spec.feature_amplitude
    feats = np.empty((spec.num_frames, *spec.shape))
    for t in range(spec.num_frames):
        mask = coverage_mask(boxes[t], spec.frame_size, spec.shape[1:])
        clean = amp * render(world, spec.class_id, mask)
        feats[t] = degrade(clean, spec.base_noise + spec.motion_gain * (1.0 - s_m[t]), rng, amp)
    thresholds = config.thresholds if config is not None else (0.9, 0.7)
    return SyntheticClip(spec, feats, boxes, s_m, s_s, delta, tuple(thresholds))


def label_clip(clip: SyntheticClip, config: PolicyConfig | None = None) -> SyntheticClip:
    s_m, s_s, delta = compute_labels(clip.boxes, clip.spec.frame_size, clip.spec.motion_radius, config)
    thresholds = config.thresholds if config is not None else (0.9, 0.7)
    return dataclasses.replace(clip, s_m=s_m, s_s=s_s, delta=delta, thresholds=tuple(thresholds))


def world_of(clip: SyntheticClip) -> World:
    spec = clip.spec
    return make_world(spec.num_classes, tuple(spec.shape), spec.world_seed)


# -- dataset construction ------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for a set of single-object clips.

    ``speed`` is one of slow / medium / fast / any, or ``mixed`` to cycle
    slow, medium, fast by clip index. ``box_side`` bounds the box side as a
    fraction of the shorter frame side.
    """

    clips: int = 36
    frames: int = 30
    speed: str = "mixed"
    shape: tuple[int, int, int] = (16, 6, 6)
    num_classes: int = 10
    frame_size: tuple[float, float] = (320.0, 240.0)
    box_side: tuple[float, float] = (0.25, 0.4)
    base_noise: float = 0.05
    motion_gain: float = 3.0
    motion_radius: int = 10
    world_seed: int = 0


def _mean_iou_at_speed(w: float, h: float, ux: float, uy: float, speed: float, radius: int) -> float:
    box = Box(0.0, 0.0, w, h)
    return float(np.mean([box_iou(box, box.shifted(d * speed * ux, d * speed * uy)) for d in range(1, radius + 1)]))


def speed_for_motion_iou(w: float, h: float, ux: float, uy: float, target: float, radius: int) -> float:
    """Pixel speed along ``(ux, uy)`` giving an interior-frame motion IoU of ``target``."""
    lo, hi = 0.0, max(w, h)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _mean_iou_at_speed(w, h, ux, uy, mid, radius) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def clip_speed(ds: DatasetSpec, index: int) -> str:
    if ds.speed == "mixed":
        return ("slow", "medium", "fast")[index % 3]
    if ds.speed not in SPEED_RANGES:
        raise SpecError(f"unknown speed {ds.speed!r}")
    return ds.speed


def clip_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def make_clip_spec(ds: DatasetSpec, index: int, seed: int) -> ClipSpec:
    rng = np.random.default_rng(clip_seed(seed, index))
    width, height = ds.frame_size
    lo_iou, hi_iou = SPEED_RANGES[clip_speed(ds, index)]
    for _ in range(100):
        side = rng.uniform(*ds.box_side) * min(width, height)
        w = side * rng.uniform(0.8, 1.25)
        h = side
        angle = rng.uniform(0.0, 2.0 * np.pi)
        ux, uy = np.cos(angle), np.sin(angle)
        target = rng.uniform(lo_iou, hi_iou)
        speed = speed_for_motion_iou(w, h, ux, uy, target, ds.motion_radius)
        dx, dy = speed * ux * (ds.frames - 1), speed * uy * (ds.frames - 1)
        x_lo, x_hi = max(0.0, -dx), width - w - max(0.0, dx)
        y_lo, y_hi = max(0.0, -dy), height - h - max(0.0, dy)
        if x_lo <= x_hi and y_lo <= y_hi:
            x0, y0 = rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi)
            return ClipSpec(
                num_frames=ds.frames,
                shape=tuple(ds.shape),
                class_id=int(rng.integers(ds.num_classes)),
                boxes=(Box(x0, y0, x0 + w, y0 + h),),
                velocities=((speed * ux, speed * uy),),
                frame_size=tuple(ds.frame_size),
                base_noise=ds.base_noise,
                motion_gain=ds.motion_gain,
                num_classes=ds.num_classes,
                world_seed=ds.world_seed,
                motion_radius=ds.motion_radius,
                seed=clip_seed(seed, 10_000_019 + index),
            )
    raise SpecError("could not fit a trajectory inside the frame; use smaller boxes or shorter clips")


def make_dataset(ds: DatasetSpec, seed: int, config: PolicyConfig | None = None) -> list[SyntheticClip]:
    return [generate_clip(make_clip_spec(ds, i, seed), config) for i in range(ds.clips)]


# -- serialisation -------------------------------------------------------------


def save_clips(path, clips: Sequence[SyntheticClip]) -> Path:
    """Write clips to an ``.npz`` archive.

    Layout: ``meta`` holds a JSON document ``{"format", "version", "clips":
    [{"spec": ClipSpec fields, "thresholds": [...]}, ...]}``; clip ``i``
    stores ``c{i}.features`` (T, C, H, W) float64, ``c{i}.boxes``
    (T, objects, 4) float64 as x_min, y_min, x_max, y_max, ``c{i}.s_m``,
    ``c{i}.s_s`` (T,) float64 and ``c{i}.delta`` (T,) int64.
    """
    path = Path(path)
    meta = {
        "format": CLIP_FORMAT,
        "version": CLIP_FORMAT_VERSION,
        "clips": [{"spec": c.spec.to_dict(), "thresholds": list(c.thresholds)} for c in clips],
    }
    arrays = {"meta": np.array(json.dumps(meta, sort_keys=True))}
    for i, c in enumerate(clips):
        arrays[f"c{i}.features"] = c.features
        arrays[f"c{i}.boxes"] = c.boxes
        arrays[f"c{i}.s_m"] = c.s_m
        arrays[f"c{i}.s_s"] = c.s_s
        arrays[f"c{i}.delta"] = c.delta
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_clips(path) -> list[SyntheticClip]:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != CLIP_FORMAT:
            raise SpecError(f"{path} is not a clip archive")
        if meta.get("version") != CLIP_FORMAT_VERSION:
            raise SpecError(f"unsupported clip archive version {meta.get('version')}")
        clips = []
        for i, entry in enumerate(meta["clips"]):
            clips.append(
                SyntheticClip(
                    ClipSpec.from_dict(entry["spec"]),
                    data[f"c{i}.features"],
                    data[f"c{i}.boxes"],
                    data[f"c{i}.s_m"],
                    data[f"c{i}.s_s"],
                    data[f"c{i}.delta"],
                    tuple(entry["thresholds"]),
                )
            )
    return clips
