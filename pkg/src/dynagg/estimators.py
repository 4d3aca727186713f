"""Motion/size mini-networks, the distillation feature adapter and their training.

All three estimators share one layout: a 1x1 convolution with ReLU over
the input channels, global average pooling over neighbours and space,
then a two-layer ReLU MLP. Gradients are written out by hand and checked
against central finite differences in :func:`gradient_check`.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import CheckpointError, DimensionError, DomainError, TrainingError
from .features import DEGENERATE_NORM, AggregationResult, as_feature_map, global_cosine, softmax
from .policy import (
    MappingFn,
    SamplingStrategy,
    deformable_budget,
    neighborhood,
    sample_frames,
    vanilla_budget,
)

NETS = ("motion_v", "motion_d", "size")
NET_FIELDS = ("conv_w", "conv_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b")
ADAPTER_FIELDS = ("weight", "bias")
CHECKPOINT_FORMAT = "dynagg-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class MiniNetParams:
    conv_w: np.ndarray  # (C, C_in)
    conv_b: np.ndarray  # (C,)
    fc1_w: np.ndarray  # (C, C)
    fc1_b: np.ndarray  # (C,)
    fc2_w: np.ndarray  # (out, C)
    fc2_b: np.ndarray  # (out,)

    @classmethod
    def init(cls, in_channels: int, channels: int, out: int, rng: np.random.Generator) -> "MiniNetParams":
        return cls(
            rng.normal(0.0, math.sqrt(2.0 / in_channels), (channels, in_channels)),
            np.zeros(channels),
            rng.normal(0.0, math.sqrt(2.0 / channels), (channels, channels)),
            np.zeros(channels),
            rng.normal(0.0, math.sqrt(1.0 / channels), (out, channels)),
            np.zeros(out),
        )

    @classmethod
    def zeros(cls, in_channels: int, channels: int, out: int) -> "MiniNetParams":
        return cls(
            np.zeros((channels, in_channels)),
            np.zeros(channels),
            np.zeros((channels, channels)),
            np.zeros(channels),
            np.zeros((out, channels)),
            np.zeros(out),
        )

    @property
    def channels(self) -> int:
        return self.conv_w.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {f: getattr(self, f) for f in NET_FIELDS}


@dataclass
class FeatureAdapter:
    """Channel-mixing linear map applied at every spatial location."""

    weight: np.ndarray  # (C, C)
    bias: np.ndarray  # (C,)

    @classmethod
    def identity(cls, channels: int) -> "FeatureAdapter":
        return cls(np.eye(channels), np.zeros(channels))

    def apply(self, features: np.ndarray) -> np.ndarray:
        """Adapt a ``(C, H, W)`` map or an ``(n, C, H, W)`` stack."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 3:
            return np.einsum("oc,chw->ohw", self.weight, features) + self.bias[:, None, None]
        return np.einsum("oc,nchw->nohw", self.weight, features) + self.bias[None, :, None, None]

    def arrays(self) -> dict[str, np.ndarray]:
        return {f: getattr(self, f) for f in ADAPTER_FIELDS}


@dataclass
class Estimators:
    """Everything learned: three mini-nets, the adapter and an optional learnable mapping."""

    motion_v: MiniNetParams
    motion_d: MiniNetParams
    size: MiniNetParams
    adapter: FeatureAdapter
    mapping: MappingFn | None = None

    @classmethod
    def init(cls, channels: int, theta: int = 3, seed: int = 0) -> "Estimators":
        rng = np.random.default_rng(seed)
        return cls(
            MiniNetParams.init(2 * channels, channels, theta, rng),
            MiniNetParams.init(2 * channels, channels, 1, rng),
            MiniNetParams.init(channels, channels, 1, rng),
            FeatureAdapter.identity(channels),
        )

    @property
    def channels(self) -> int:
        return self.size.channels

    @property
    def theta(self) -> int:
        return self.motion_v.fc2_w.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for net in NETS:
            for name, arr in getattr(self, net).arrays().items():
                out[f"{net}.{name}"] = arr
        for name, arr in self.adapter.arrays().items():
            out[f"adapter.{name}"] = arr
        return out

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "Estimators":
        nets = {
            net: MiniNetParams(**{f: np.array(arrays[f"{net}.{f}"], dtype=np.float64) for f in NET_FIELDS})
            for net in NETS
        }
        adapter = FeatureAdapter(*(np.array(arrays[f"adapter.{f}"], dtype=np.float64) for f in ADAPTER_FIELDS))
        return Estimators(adapter=adapter, mapping=self.mapping, **nets)

    def copy(self) -> "Estimators":
        return self.with_arrays(self.arrays())


# -- forward / backward of one mini-net ----------------------------------------


def _net_forward(p: MiniNetParams, x: np.ndarray):
    """``x`` is ``(n, C_in, H, W)``; returns raw outputs and a backward cache."""
    if x.shape[1] != p.conv_w.shape[1]:
        raise DimensionError(f"network expects {p.conv_w.shape[1]} input channels, got {x.shape[1]}")
    z = np.einsum("oc,nchw->nohw", p.conv_w, x) + p.conv_b[None, :, None, None]
    pooled = np.maximum(z, 0.0).mean(axis=(0, 2, 3))
    h_pre = p.fc1_w @ pooled + p.fc1_b
    h = np.maximum(h_pre, 0.0)
    out = p.fc2_w @ h + p.fc2_b
    return out, (x, z, pooled, h_pre, h)


def _net_backward(p: MiniNetParams, cache, dout: np.ndarray) -> dict[str, np.ndarray]:
    x, z, pooled, h_pre, h = cache
    dh_pre = (p.fc2_w.T @ dout) * (h_pre > 0)
    dpooled = p.fc1_w.T @ dh_pre
    n, _, hh, ww = z.shape
    dz = (z > 0) * (dpooled[None, :, None, None] / (n * hh * ww))
    return {
        "conv_w": np.einsum("nohw,nchw->oc", dz, x),
        "conv_b": dz.sum(axis=(0, 2, 3)),
        "fc1_w": np.outer(dh_pre, pooled),
        "fc1_b": dh_pre,
        "fc2_w": np.outer(dout, h),
        "fc2_b": dout.copy(),
    }


def _net_signature(cache) -> tuple[bytes, bytes]:
    _, z, _, h_pre, _ = cache
    return (np.packbits(z > 0).tobytes(), np.packbits(h_pre > 0).tobytes())


def _pair_input(f_i, neighbors) -> np.ndarray:
    f_i = as_feature_map(f_i, "key")
    stack = np.asarray(neighbors, dtype=np.float64)
    if stack.ndim == 3:
        stack = stack[None]
    if stack.shape[0] == 0:
        raise DomainError("estimator needs a non-empty neighborhood")
    if stack.shape[1:] != f_i.shape:
        raise DimensionError(f"neighbor shape {stack.shape[1:]} does not match key {f_i.shape}")
    return np.concatenate([np.broadcast_to(f_i, stack.shape), stack], axis=1)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def motion_net_v_forward(f_i, neighbors, params: MiniNetParams) -> np.ndarray:
    """Speed-category logits for the key frame (index 0 is category 1)."""
    return _net_forward(params, _pair_input(f_i, neighbors))[0]


def motion_net_d_forward(f_i, neighbors, params: MiniNetParams) -> float:
    return float(sigmoid(_net_forward(params, _pair_input(f_i, neighbors))[0][0]))


def size_net_forward(f_i, params: MiniNetParams) -> float:
    f_i = as_feature_map(f_i)
    return float(sigmoid(_net_forward(params, f_i[None])[0][0]))


# -- losses --------------------------------------------------------------------


def loss_mot_v(logits, delta_gt: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if not 1 <= delta_gt <= logits.shape[0]:
        raise DomainError(f"category {delta_gt} outside [1, {logits.shape[0]}]")
    shifted = logits - logits.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[delta_gt - 1])


def loss_mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def loss_dst(full: AggregationResult, reduced: AggregationResult) -> float:
    """Mean squared gap between full-neighbourhood and reduced aggregations."""
    return loss_mse(reduced.feature, full.feature)


# -- aggregation with gradients (for the distillation path) --------------------


def _agg_forward(g: np.ndarray, key_pos: int):
    key = g[key_pos]
    key_norm = np.sqrt(np.einsum("chw,chw->hw", key, key))
    norms = np.sqrt(np.einsum("nchw,nchw->nhw", g, g))
    valid = (key_norm[None] >= DEGENERATE_NORM) & (norms >= DEGENERATE_NORM)
    inv = np.where(valid, 1.0 / np.where(valid, key_norm[None] * norms, 1.0), 0.0)
    cos = np.einsum("chw,nchw->nhw", key, g) * inv
    w = softmax(cos, axis=0)
    out = np.einsum("nhw,nchw->chw", w, g)
    return out, (g, key_pos, key_norm, norms, valid, inv, cos, w)


def _agg_backward(cache, dout: np.ndarray) -> np.ndarray:
    g, key_pos, key_norm, norms, valid, inv, cos, w = cache
    key = g[key_pos]
    dg = w[:, None] * dout[None]
    dw = np.einsum("chw,nchw->nhw", dout, g)
    dcos = w * (dw - (w * dw).sum(axis=0, keepdims=True))
    dcos = np.where(valid, dcos, 0.0)
    inv_n2 = np.where(valid, 1.0 / np.where(valid, norms**2, 1.0), 0.0)
    dg += (dcos * inv)[:, None] * key[None] - (dcos * cos * inv_n2)[:, None] * g
    inv_k2 = np.where(key_norm >= DEGENERATE_NORM, 1.0 / np.maximum(key_norm, DEGENERATE_NORM) ** 2, 0.0)
    dkey = np.einsum("nhw,nchw->chw", dcos * inv, g) - (dcos * cos).sum(axis=0)[None] * inv_k2[None] * key
    dg[key_pos] += dkey
    return dg


def distill_forward(adapter: FeatureAdapter, frames: np.ndarray, key_pos: int, student: Sequence[int]):
    """Distillation loss for one key frame; ``student`` are positions into ``frames``.

    The teacher is the full-neighbourhood aggregation of the raw features
    and carries no gradient. The student aggregates adapted features of its
    reduced selection; a student that selects every frame is the teacher
    itself, so the loss is exactly 0 there whatever the adapter holds.
    """
    student = np.asarray(student, dtype=np.int64)
    full, _ = _agg_forward(np.asarray(frames, dtype=np.float64), key_pos)
    if len(student) == len(frames):
        return 0.0, (frames, student, None, np.zeros_like(full), full, full)
    s_key = int(np.flatnonzero(student == key_pos)[0])
    reduced, c_red = _agg_forward(adapter.apply(frames[student]), s_key)
    diff = reduced - full
    return float(np.mean(diff**2)), (frames, student, c_red, diff, full, reduced)


def distill_backward(cache) -> dict[str, np.ndarray]:
    frames, student, c_red, diff, _, _ = cache
    if c_red is None:
        return {"weight": np.zeros((frames.shape[1],) * 2), "bias": np.zeros(frames.shape[1])}
    dg = _agg_backward(c_red, 2.0 * diff / diff.size)
    sub = frames[student]
    return {
        "weight": np.einsum("nohw,nchw->oc", dg, sub),
        "bias": dg.sum(axis=(0, 2, 3)),
    }


def adapted_aggregate(adapter: FeatureAdapter, frames: np.ndarray, key_pos: int, selected: Sequence[int]) -> np.ndarray:
    """Aggregation used at inference: adapted features unless every frame is selected."""
    selected = np.asarray(selected, dtype=np.int64)
    if len(selected) == len(frames):
        return _agg_forward(np.asarray(frames, dtype=np.float64), key_pos)[0]
    s_key = int(np.flatnonzero(selected == key_pos)[0])
    return _agg_forward(adapter.apply(frames[selected]), s_key)[0]


# -- training examples ---------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser and loss settings.

    ``distill`` picks how the student budget is set for the distillation
    term: ``fixed`` uses ``student_k``; ``vanilla`` and ``deformable`` use
    the ground-truth labels with the corresponding budget rule (linear
    mapping for deformable).
    """

    lr: float = 0.05
    steps: int = 300
    batch_size: int = 16
    lambda_mot: float = 1.0
    lambda_size: float = 1.0
    lambda_dst: float = 1.0
    seed: int = 0
    k: int = 30
    distill: str = "deformable"
    student_k: int = 4
    strategy: str = "nearest"

    def __post_init__(self):
        if not self.lr > 0:
            raise DomainError("learning rate must be > 0")
        if min(self.lambda_mot, self.lambda_size, self.lambda_dst) < 0:
            raise DomainError("loss weights must be >= 0")
        if self.steps < 0 or self.batch_size < 1 or self.k < 1 or self.student_k < 1:
            raise DomainError("steps >= 0, batch_size >= 1, k >= 1 and student_k >= 1 are required")
        if self.distill not in ("fixed", "vanilla", "deformable"):
            raise DomainError(f"unknown distill mode {self.distill!r}")
        SamplingStrategy(self.strategy)


@dataclass(frozen=True, eq=False)
class Example:
    frames: np.ndarray  # (k, C, H, W) raw neighbourhood features
    key_pos: int
    delta: int
    s_m: float
    s_s: float
    student: tuple[int, ...]


def student_budget(cfg: TrainConfig, clip, t: int, k: int) -> int:
    if cfg.distill == "fixed":
        return min(cfg.student_k, k)
    if cfg.distill == "vanilla":
        return vanilla_budget(int(clip.delta[t]), k, len(clip.thresholds) + 1)
    return deformable_budget(float(clip.s_m[t]), float(clip.s_s[t]), MappingFn("linear"), k)


def make_example(clip, t: int, cfg: TrainConfig, rng: np.random.Generator | None = None) -> Example:
    nb = neighborhood(t, cfg.k, clip.num_frames)
    k_sel = student_budget(cfg, clip, t, len(nb))
    chosen = sample_frames(nb, t, k_sel, SamplingStrategy(cfg.strategy), rng=rng)
    start = nb[0]
    return Example(
        clip.features[start : start + len(nb)],
        t - start,
        int(clip.delta[t]),
        float(clip.s_m[t]),
        float(clip.s_s[t]),
        tuple(c - start for c in chosen),
    )


def all_examples(clips, cfg: TrainConfig, seed: int = 0) -> list[Example]:
    rng = np.random.default_rng(seed)
    return [make_example(c, t, cfg, rng) for c in clips for t in range(c.num_frames)]


# -- total loss and its gradient -------------------------------------------------


def example_loss(est: Estimators, ex: Example, cfg: TrainConfig, grads: dict | None = None):
    """Weighted loss of one example; accumulates gradients into ``grads`` if given.

    Returns ``(total, parts, signature)`` where ``signature`` records every
    ReLU activation pattern (used to spot kinks during gradient checks).
    """
    key = ex.frames[ex.key_pos]
    pair = _pair_input(key, ex.frames)
    sig = []
    parts = {}

    logits, c_v = _net_forward(est.motion_v, pair)
    parts["mot_v"] = loss_mot_v(logits, ex.delta)
    out_d, c_d = _net_forward(est.motion_d, pair)
    pred_m = float(sigmoid(out_d[0]))
    parts["mot_d"] = (pred_m - ex.s_m) ** 2
    out_s, c_s = _net_forward(est.size, key[None])
    pred_s = float(sigmoid(out_s[0]))
    parts["size"] = (pred_s - ex.s_s) ** 2
    if cfg.lambda_dst > 0 or grads is not None:
        parts["dst"], c_dst = distill_forward(est.adapter, ex.frames, ex.key_pos, ex.student)
    else:
        parts["dst"], c_dst = 0.0, None
    sig.extend(_net_signature(c) for c in (c_v, c_d, c_s))

    total = (
        cfg.lambda_mot * (parts["mot_v"] + parts["mot_d"])
        + cfg.lambda_size * parts["size"]
        + cfg.lambda_dst * parts["dst"]
    )
    if grads is not None:
        probs = softmax(logits)
        probs[ex.delta - 1] -= 1.0
        _accumulate(grads, "motion_v", _net_backward(est.motion_v, c_v, cfg.lambda_mot * probs))
        dd = cfg.lambda_mot * 2.0 * (pred_m - ex.s_m) * pred_m * (1.0 - pred_m)
        _accumulate(grads, "motion_d", _net_backward(est.motion_d, c_d, np.array([dd])))
        ds = cfg.lambda_size * 2.0 * (pred_s - ex.s_s) * pred_s * (1.0 - pred_s)
        _accumulate(grads, "size", _net_backward(est.size, c_s, np.array([ds])))
        if c_dst is not None:
            g = distill_backward(c_dst)
            _accumulate(grads, "adapter", {k: cfg.lambda_dst * v for k, v in g.items()})
    return total, parts, tuple(sig)


def _accumulate(grads: dict, prefix: str, local: dict) -> None:
    for name, g in local.items():
        grads[f"{prefix}.{name}"] += g


def loss_and_grads(est: Estimators, batch: Sequence[Example], cfg: TrainConfig):
    """Mean total loss over ``batch`` and the exact gradient for every parameter array."""
    grads = {name: np.zeros_like(arr) for name, arr in est.arrays().items()}
    total = 0.0
    parts = {"mot_v": 0.0, "mot_d": 0.0, "size": 0.0, "dst": 0.0}
    for ex in batch:
        t, p, _ = example_loss(est, ex, cfg, grads)
        total += t
        for key in parts:
            parts[key] += p[key]
    n = len(batch)
    for g in grads.values():
        g /= n
    return total / n, {k: v / n for k, v in parts.items()}, grads


def batch_loss(est: Estimators, batch: Sequence[Example], cfg: TrainConfig):
    vals = [example_loss(est, ex, cfg) for ex in batch]
    return float(np.mean([v[0] for v in vals])), tuple(v[2] for v in vals)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    return {name: p - lr * grads[name] for name, p in params.items()}


# -- training ------------------------------------------------------------------


@dataclass
class TrainResult:
    estimators: Estimators
    history: list[dict] = field(default_factory=list)


def train(
    clips,
    cfg: TrainConfig,
    init: Estimators | None = None,
    progress: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Plain SGD on the weighted sum of the motion, size and distillation losses."""
    if not clips:
        raise DomainError("training needs at least one clip")
    theta = len(clips[0].thresholds) + 1
    channels = clips[0].features.shape[1]
    est = init.copy() if init is not None else Estimators.init(channels, theta, cfg.seed)
    if est.channels != channels or est.theta != theta:
        raise DimensionError("initial estimators do not match the dataset")
    rng = np.random.default_rng(cfg.seed)
    index = [(ci, t) for ci, c in enumerate(clips) for t in range(c.num_frames)]
    params = est.arrays()
    history = []
    for step in range(cfg.steps):
        picks = rng.choice(len(index), size=min(cfg.batch_size, len(index)), replace=False)
        batch = [make_example(clips[index[i][0]], index[i][1], cfg, rng) for i in picks]
        est = est.with_arrays(params)
        total, parts, grads = loss_and_grads(est, batch, cfg)
        if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(f"non-finite loss at step {step}: total={total} parts={parts}")
        record = {"step": step, "total": total, **parts}
        history.append(record)
        if progress is not None:
            progress(step, record)
        params = sgd_step(params, grads, cfg.lr)
    return TrainResult(est.with_arrays(params), history)


def evaluate(est: Estimators, examples: Sequence[Example], cfg: TrainConfig) -> dict:
    """Mean loss parts plus category accuracy and distillation cosine over ``examples``."""
    parts = {"mot_v": 0.0, "mot_d": 0.0, "size": 0.0, "dst": 0.0}
    correct = 0
    cos = 0.0
    for ex in examples:
        _, p, _ = example_loss(est, ex, dataclasses.replace(cfg, lambda_dst=1.0))
        for key in parts:
            parts[key] += p[key]
        key = ex.frames[ex.key_pos]
        correct += int(np.argmax(motion_net_v_forward(key, ex.frames, est.motion_v))) + 1 == ex.delta
        _, cache = distill_forward(est.adapter, ex.frames, ex.key_pos, ex.student)
        cos += global_cosine(cache[5], cache[4])
    n = max(1, len(examples))
    out = {k: v / n for k, v in parts.items()}
    out["acc_v"] = correct / n
    out["cos_to_full"] = cos / n
    return out


# -- learnable mapping ----------------------------------------------------------


def distillation_curve(est: Estimators, clip, t: int, k: int, strategy: str = "nearest") -> np.ndarray:
    """Distillation loss for every student budget 1..k at one key frame."""
    nb = neighborhood(t, k, clip.num_frames)
    start = nb[0]
    frames = clip.features[start : start + len(nb)]
    curve = []
    for b in range(1, len(nb) + 1):
        chosen = sample_frames(nb, t, b, SamplingStrategy(strategy, seed=t))
        curve.append(distill_forward(est.adapter, frames, t - start, [c - start for c in chosen])[0])
    return np.asarray(curve)


def train_mapping(
    est: Estimators,
    clips,
    k: int = 30,
    steps: int = 300,
    lr: float = 0.05,
    budget_weight: float = 0.5,
    hidden: int = 8,
    seed: int = 0,
    max_frames: int = 400,
) -> MappingFn:
    """Fit a learnable mapping against distillation error plus a budget penalty.

    Each frame contributes ``curve(sigma(s) * k) + budget_weight * sigma(s)``
    where ``curve`` is its distillation loss over budgets (normalised by the
    one-frame loss and linearly interpolated) and ``s = s_m * s_s`` is the
    ground-truth score. The clamp is treated as identity for gradients.
    """
    rng = np.random.default_rng(seed)
    frames = [(ci, t) for ci, c in enumerate(clips) for t in range(c.num_frames)]
    if len(frames) > max_frames:
        frames = [frames[i] for i in sorted(rng.choice(len(frames), max_frames, replace=False))]
    scores = np.array([clips[ci].s_m[t] * clips[ci].s_s[t] for ci, t in frames])
    curves = []
    for ci, t in frames:
        c = distillation_curve(est, clips[ci], t, k)
        curves.append(c / max(c[0], 1e-12))
    mapping = MappingFn.learnable_init(hidden, seed)
    w1, b1, w2, b2 = mapping.w1.copy(), mapping.b1.copy(), mapping.w2.copy(), mapping.b2
    for _ in range(steps):
        pre = np.multiply.outer(scores, w1) + b1
        hid = np.maximum(pre, 0.0)
        raw = hid @ w2 + b2
        frac = np.clip(raw, 0.0, 1.0)
        dfrac = np.empty_like(frac)
        for i, curve in enumerate(curves):
            pos = frac[i] * len(curve) - 1.0
            lo = int(np.clip(np.floor(pos), 0, len(curve) - 2)) if len(curve) > 1 else 0
            slope = (curve[lo + 1] - curve[lo]) * len(curve) if len(curve) > 1 else 0.0
            dfrac[i] = slope + budget_weight
        dfrac /= len(curves)
        gw2 = hid.T @ dfrac
        gb2 = dfrac.sum()
        dpre = np.outer(dfrac, w2) * (pre > 0)
        gw1 = (dpre * scores[:, None]).sum(axis=0)
        gb1 = dpre.sum(axis=0)
        w1, b1, w2, b2 = w1 - lr * gw1, b1 - lr * gb1, w2 - lr * gw2, b2 - lr * gb2
    return MappingFn("learnable", w1, b1, w2, b2)


# -- gradient checking ------------------------------------------------------------


def random_examples(rng: np.random.Generator, channels: int, hw: int, k: int, theta: int, count: int) -> list[Example]:
    out = []
    for _ in range(count):
        frames = rng.normal(size=(k, channels, hw, hw))
        key_pos = int(rng.integers(k))
        n_student = int(rng.integers(1, k))
        others = [i for i in range(k) if i != key_pos]
        student = sorted([key_pos] + list(rng.choice(others, n_student - 1, replace=False)))
        out.append(
            Example(frames, key_pos, int(rng.integers(1, theta + 1)), float(rng.uniform()), float(rng.uniform()), tuple(student))
        )
    return out


def numeric_gradient(
    loss_fn: Callable[[dict], tuple[float, tuple]],
    params: dict[str, np.ndarray],
    step: float = 1e-4,
    fine_step: float = 1e-7,
) -> dict[str, np.ndarray]:
    """Central differences; falls back to ``fine_step`` where a ReLU flips inside the stencil."""
    _, base_sig = loss_fn(params)
    out = {}
    for name, arr in params.items():
        grad = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            for h in (step, fine_step):
                arr[idx] = orig + h
                lp, sp = loss_fn(params)
                arr[idx] = orig - h
                lm, sm = loss_fn(params)
                arr[idx] = orig
                grad[idx] = (lp - lm) / (2 * h)
                if sp == base_sig and sm == base_sig:
                    break
        out[name] = grad
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def gradient_check(
    seed: int = 0, channels: int = 4, hw: int = 3, k: int = 5, theta: int = 3, batch: int = 2, step: float = 1e-4
) -> dict[str, float]:
    """Relative error between analytic and numeric gradients for every parameter array."""
    rng = np.random.default_rng(seed)
    est = Estimators.init(channels, theta, seed)
    for net in NETS:
        p = getattr(est, net)
        p.conv_b += rng.normal(0.0, 0.1, p.conv_b.shape)
        p.fc1_b += rng.normal(0.0, 0.1, p.fc1_b.shape)
        p.fc2_b += rng.normal(0.0, 0.1, p.fc2_b.shape)
    est.adapter.weight += rng.normal(0.0, 0.2, est.adapter.weight.shape)
    est.adapter.bias += rng.normal(0.0, 0.2, est.adapter.bias.shape)
    examples = random_examples(rng, channels, hw, k, theta, batch)
    cfg = TrainConfig()
    _, _, analytic = loss_and_grads(est, examples, cfg)
    params = {name: arr.copy() for name, arr in est.arrays().items()}
    numeric = numeric_gradient(lambda p: batch_loss(est.with_arrays(p), examples, cfg), params, step)
    return {name: relative_error(analytic[name], numeric[name]) for name in analytic}


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, est: Estimators, extra: dict | None = None) -> Path:
    """Write ``est`` as an ``.npz`` of named float64 arrays.

    ``__meta__`` is a JSON document ``{"format", "version", "channels",
    "theta", "arrays": {name: shape}, "mapping": variant or null, ...extra}``.
    Array names are ``<net>.<field>`` for nets motion_v, motion_d, size
    (fields conv_w, conv_b, fc1_w, fc1_b, fc2_w, fc2_b), ``adapter.weight``,
    ``adapter.bias`` and, for a learnable mapping, ``mapping.w1``,
    ``mapping.b1``, ``mapping.w2``, ``mapping.b2``.
    """
    arrays = dict(est.arrays())
    if est.mapping is not None and est.mapping.variant == "learnable":
        m = est.mapping
        arrays.update({"mapping.w1": m.w1, "mapping.b1": m.b1, "mapping.w2": m.w2, "mapping.b2": np.array([m.b2])})
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "channels": est.channels,
        "theta": est.theta,
        "mapping": est.mapping.variant if est.mapping is not None else None,
        "arrays": {name: list(arr.shape) for name, arr in sorted(arrays.items())},
        **(extra or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path) -> Estimators:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path} is not a version {CHECKPOINT_VERSION} checkpoint")
        arrays = {name: np.array(data[name]) for name in meta["arrays"]}
    for name, shape in meta["arrays"].items():
        if list(arrays[name].shape) != shape:
            raise CheckpointError(f"array {name} has shape {arrays[name].shape}, expected {shape}")
    channels = meta["channels"]
    est = Estimators.init(channels, meta["theta"]).with_arrays(arrays)
    if meta.get("mapping") == "learnable":
        est.mapping = MappingFn(
            "learnable", arrays["mapping.w1"], arrays["mapping.b1"], arrays["mapping.w2"], float(arrays["mapping.b2"][0])
        )
    return est
