"""Frame budgets, frame sampling, mapping functions and motion/size labels."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError

MODES = ("fixed", "vanilla", "deformable")
MAPPINGS = ("linear", "sqrt", "quadratic", "learnable")
STRATEGIES = ("nearest", "furthest", "bin", "random")
DEFAULT_THRESHOLDS = (0.9, 0.7)
SPEED_BUCKETS = ("slow", "medium", "fast")

# ceil() slack so that e.g. (1 - 0.7) * 10 still maps to 3 frames
_CEIL_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class MappingFn:
    """Maps a combined motion/size score in [0, 1] to a neighbourhood fraction.

    The learnable variant is a 1 -> hidden -> 1 ReLU MLP whose output is
    clamped to [0, 1]; its weights are ``w1, b1, w2`` (each ``(hidden,)``)
    and the scalar ``b2``.
    """

    variant: str = "linear"
    w1: np.ndarray | None = None
    b1: np.ndarray | None = None
    w2: np.ndarray | None = None
    b2: float = 0.0

    def __post_init__(self):
        if self.variant not in MAPPINGS:
            raise DomainError(f"unknown mapping variant {self.variant!r}")
        if self.variant == "learnable":
            if self.w1 is None or self.b1 is None or self.w2 is None:
                raise DomainError("learnable mapping needs w1, b1, w2")
            for name in ("w1", "b1", "w2"):
                arr = np.asarray(getattr(self, name), dtype=np.float64).ravel()
                object.__setattr__(self, name, arr)
            if not (self.w1.shape == self.b1.shape == self.w2.shape):
                raise DomainError("learnable mapping weights must share one hidden width")
            object.__setattr__(self, "b2", float(self.b2))

    @classmethod
    def learnable_init(cls, hidden: int = 8, seed: int = 0) -> "MappingFn":
        """A learnable mapping that starts out close to ``1 - s`` on [0, 1]."""
        rng = np.random.default_rng(seed)
        w1 = rng.normal(0.0, 1.0, hidden)
        b1 = rng.normal(0.0, 0.5, hidden)
        w2 = rng.normal(0.0, 0.01, hidden)
        w1[0], b1[0], w2[0] = 1.0, 0.0, -1.0
        b2 = 1.0 - float(np.sum(w2[1:] * np.maximum(b1[1:], 0.0)))
        return cls("learnable", w1, b1, w2, b2)

    def raw(self, s):
        s = np.asarray(s, dtype=np.float64)
        hidden = np.maximum(np.multiply.outer(s, self.w1) + self.b1, 0.0)
        return hidden @ self.w2 + self.b2

    def __call__(self, s):
        return apply_mapping(self, s)


@dataclass(frozen=True)
class SamplingStrategy:
    variant: str = "nearest"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in STRATEGIES:
            raise DomainError(f"unknown sampling strategy {self.variant!r}")


@dataclass(frozen=True)
class PolicyConfig:
    """Which aggregation policy runs and with what parameters.

    ``thresholds`` are the motion-IoU cut points between speed categories,
    strictly decreasing; they default to (0.9, 0.7) only when ``theta == 3``.
    """

    mode: str = "fixed"
    k: int = 30
    theta: int = 3
    thresholds: tuple[float, ...] | None = None
    mapping: MappingFn = field(default_factory=MappingFn)
    strategy: SamplingStrategy = field(default_factory=SamplingStrategy)
    name: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise DomainError(f"unknown policy mode {self.mode!r}")
        if self.k < 1:
            raise DomainError("k must be >= 1")
        if self.theta < 1:
            raise DomainError("theta must be >= 1")
        thresholds = self.thresholds
        if thresholds is None:
            if self.theta == 3:
                thresholds = DEFAULT_THRESHOLDS
            elif self.theta == 1:
                thresholds = ()
            else:
                raise DomainError(f"theta={self.theta} needs an explicit threshold list")
        thresholds = tuple(float(t) for t in thresholds)
        if len(thresholds) != self.theta - 1:
            raise DomainError(f"expected {self.theta - 1} thresholds, got {len(thresholds)}")
        if any(not 0.0 < t < 1.0 for t in thresholds):
            raise DomainError("thresholds must lie in (0, 1)")
        if any(a <= b for a, b in zip(thresholds, thresholds[1:])):
            raise DomainError("thresholds must be strictly decreasing")
        object.__setattr__(self, "thresholds", thresholds)
        if not self.name:
            object.__setattr__(self, "name", default_policy_name(self))


def default_policy_name(cfg: PolicyConfig) -> str:
    if cfg.mode == "fixed":
        return f"fixed_k{cfg.k}_{cfg.strategy.variant}"
    if cfg.mode == "vanilla":
        return f"vanilla_t{cfg.theta}_k{cfg.k}_{cfg.strategy.variant}"
    return f"deformable_{cfg.mapping.variant}_k{cfg.k}_{cfg.strategy.variant}"


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DomainError(f"degenerate box {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def inside(self, width: float, height: float) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height

    def shifted(self, dx: float, dy: float) -> "Box":
        return Box(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def vanilla_budget(delta: int, k: int, theta: int) -> int:
    if theta < 1 or k < 1:
        raise DomainError("k and theta must be >= 1")
    if not 1 <= delta <= theta:
        raise DomainError(f"category {delta} outside [1, {theta}]")
    return -(-delta * k // theta)


def apply_mapping(mapping: MappingFn, s):
    s_arr = np.asarray(s, dtype=np.float64)
    if np.any(~np.isfinite(s_arr)) or np.any(s_arr < 0.0) or np.any(s_arr > 1.0):
        raise DomainError(f"score {s} outside [0, 1]")
    if mapping.variant == "linear":
        out = 1.0 - s_arr
    elif mapping.variant == "sqrt":
        out = 1.0 - np.sqrt(s_arr)
    elif mapping.variant == "quadratic":
        out = 1.0 - s_arr**2
    else:
        out = np.clip(mapping.raw(s_arr), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def fraction_to_budget(fraction: float, k: int) -> int:
    return max(1, min(k, math.ceil(fraction * k - _CEIL_SLACK)))


def deformable_budget(s_m: float, s_s: float, mapping: MappingFn, k: int) -> int:
    if k < 1:
        raise DomainError("k must be >= 1")
    for name, v in (("motion iou", s_m), ("size score", s_s)):
        if not 0.0 <= v <= 1.0:
            raise DomainError(f"{name} {v} outside [0, 1]")
    return fraction_to_budget(apply_mapping(mapping, s_m * s_s), k)


def neighborhood(key: int, k: int, num_frames: int) -> tuple[int, ...]:
    """The k frames around ``key`` (key included), shifted to stay inside the clip."""
    if not 0 <= key < num_frames:
        raise DomainError(f"key {key} outside clip of {num_frames} frames")
    k = min(k, num_frames)
    start = key - (k - 1) // 2
    start = max(0, min(start, num_frames - k))
    return tuple(range(start, start + k))


def sample_frames(
    frames: Sequence[int],
    key: int,
    k_sel: int,
    strategy: SamplingStrategy,
    rng: np.random.Generator | None = None,
) -> tuple[int, ...]:
    """Pick ``k_sel`` frames (always including ``key``) from ``frames``.

    ``rng`` overrides the strategy seed for the random variant.
    """
    frames = sorted(int(f) for f in frames)
    if key not in frames:
        raise DomainError(f"key {key} not in neighborhood")
    if not 1 <= k_sel <= len(frames):
        raise DomainError(f"cannot select {k_sel} of {len(frames)} frames")
    others = [f for f in frames if f != key]
    variant = strategy.variant
    if variant == "nearest":
        chosen = sorted(frames, key=lambda f: (abs(f - key), f))[:k_sel]
    elif variant == "furthest":
        chosen = [key] + sorted(others, key=lambda f: (-abs(f - key), f))[: k_sel - 1]
    elif variant == "bin":
        buckets = np.array_split(np.asarray(frames), k_sel)
        chosen = [int(b[(len(b) - 1) // 2]) for b in buckets]
        if key not in chosen:
            slot = next(i for i, b in enumerate(buckets) if key in b)
            chosen[slot] = key
    else:
        if rng is None:
            rng = np.random.default_rng(strategy.seed)
        picks = rng.choice(len(others), size=k_sel - 1, replace=False) if k_sel > 1 else []
        chosen = [key] + [others[i] for i in picks]
    return tuple(sorted(chosen))


def box_iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def motion_iou(track: Sequence[Box], key: int, frames: Sequence[int]) -> float:
    """Mean IoU between the key-frame box and the same object's box in each neighbour."""
    others = [f for f in frames if f != key]
    if not others:
        raise DomainError("motion IoU needs at least one neighbor besides the key")
    ref = track[key]
    return float(np.mean([box_iou(ref, track[f]) for f in others]))


def frame_motion_iou(tracks: Sequence[Sequence[Box]], key: int, frames: Sequence[int]) -> float:
    """Motion IoU averaged over every object in the frame."""
    if not tracks:
        raise DomainError("no objects to measure")
    return float(np.mean([motion_iou(t, key, frames) for t in tracks]))


def speed_category_gt(s_m: float, config: PolicyConfig | None = None) -> int:
    """Speed category (1 = slowest) from a motion IoU.

    The first category is open (``s_m > t1``), the last is open
    (``s_m < t_last``) and every middle category is closed on both ends, so
    ``s_m == 0.9`` and ``s_m == 0.7`` fall in the medium bucket for theta=3.
    A cut point shared by two middle categories goes to the slower one, and
    with two categories the single cut point belongs to the faster one.
    """
    thresholds = config.thresholds if config is not None else DEFAULT_THRESHOLDS
    theta = len(thresholds) + 1
    if theta == 1 or s_m > thresholds[0]:
        return 1
    if theta == 2 or s_m < thresholds[-1]:
        return theta
    for delta in range(2, theta):
        if s_m >= thresholds[delta - 1]:
            return delta
    return theta - 1


def size_score(boxes: Sequence[Box], frame_width: float, frame_height: float) -> float:
    if not boxes:
        return 0.0
    mean_area = float(np.mean([b.area for b in boxes]))
    return float(min(1.0, max(0.0, mean_area / (frame_width * frame_height))))
