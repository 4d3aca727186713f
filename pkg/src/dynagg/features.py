"""Temporal feature aggregation and the nearest-prototype task head.

Feature maps are plain float64 arrays of shape ``(C, H, W)``. A stack of
neighbour maps is ``(n, C, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateInputError, DimensionError

DEGENERATE_NORM = 1e-12


def as_feature_map(x, name: str = "feature") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise DimensionError(f"{name} must be a non-empty (C, H, W) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DimensionError(f"{name} contains non-finite values")
    return arr


def stack_maps(key: np.ndarray, neighbors: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    key = as_feature_map(key, "key")
    if len(neighbors) == 0:
        raise DimensionError("neighbors must be non-empty")
    if isinstance(neighbors, np.ndarray) and neighbors.ndim == 4:
        stack = neighbors.astype(np.float64, copy=False)
        if not np.all(np.isfinite(stack)):
            raise DimensionError("neighbor contains non-finite values")
    else:
        maps = [as_feature_map(f, "neighbor") for f in neighbors]
        if any(m.shape != key.shape for m in maps):
            raise DimensionError("neighbor shapes do not match key shape")
        stack = np.stack(maps)
    if stack.shape[1:] != key.shape:
        raise DimensionError(f"neighbor shape {stack.shape[1:]} does not match key shape {key.shape}")
    return key, stack


def cosine_scores(key: np.ndarray, stack: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-location cosine between ``key`` and every map in ``stack``.

    Returns ``(scores, valid)``, both ``(n, H, W)``. Locations where either
    channel vector has norm below ``DEGENERATE_NORM`` score 0 and are marked
    invalid.
    """
    key_norm = np.sqrt(np.einsum("chw,chw->hw", key, key))
    nb_norm = np.sqrt(np.einsum("nchw,nchw->nhw", stack, stack))
    dots = np.einsum("chw,nchw->nhw", key, stack)
    valid = (key_norm[None] >= DEGENERATE_NORM) & (nb_norm >= DEGENERATE_NORM)
    denom = np.where(valid, key_norm[None] * nb_norm, 1.0)
    scores = np.where(valid, dots / denom, 0.0)
    return scores, valid


def softmax(scores: np.ndarray, axis: int = 0) -> np.ndarray:
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def cosine_weights(key, neighbors, diagnostics: bool = False):
    """Softmax-normalised per-location cosine weights, shape ``(n, H, W)``.

    With ``diagnostics=True`` also returns an ``(H, W)`` boolean mask of
    locations where no neighbour had a usable channel vector; those
    locations fall back to uniform weights.
    """
    key, stack = stack_maps(key, neighbors)
    scores, valid = cosine_scores(key, stack)
    weights = softmax(scores, axis=0)
    if diagnostics:
        return weights, ~valid.any(axis=0)
    return weights


def global_cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


@dataclass(frozen=True)
class AggregationResult:
    feature: np.ndarray
    selected: tuple[int, ...]
    weights: np.ndarray
    multiplies: int


def aggregate(key, neighbors, indices: Sequence[int] | None = None) -> AggregationResult:
    """Weighted sum of neighbour features using per-location cosine weights.

    ``indices`` labels the neighbours (frame numbers); it defaults to
    ``0..n-1``. The key frame is expected to be one of the neighbours.
    """
    key, stack = stack_maps(key, neighbors)
    weights = softmax(cosine_scores(key, stack)[0], axis=0)
    out = np.einsum("nhw,nchw->chw", weights, stack)
    if indices is None:
        indices = range(stack.shape[0])
    selected = tuple(int(i) for i in indices)
    if len(selected) != stack.shape[0]:
        raise DimensionError("indices must label every neighbor")
    return AggregationResult(out, selected, weights, int(stack.size))


@dataclass(frozen=True)
class PrototypeBank:
    """One unit-norm, feature-shaped prototype per class."""

    prototypes: np.ndarray

    def __post_init__(self):
        protos = np.asarray(self.prototypes, dtype=np.float64)
        if protos.ndim != 4 or protos.shape[0] < 1:
            raise DimensionError(f"prototypes must be (K, C, H, W), got {protos.shape}")
        norms = np.linalg.norm(protos.reshape(protos.shape[0], -1), axis=1)
        if np.any(norms < DEGENERATE_NORM):
            raise DegenerateInputError("prototype with zero norm")
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise DimensionError("prototypes must have unit global norm; use PrototypeBank.normalized")
        protos.setflags(write=False)
        object.__setattr__(self, "prototypes", protos)

    @classmethod
    def normalized(cls, prototypes) -> "PrototypeBank":
        protos = np.asarray(prototypes, dtype=np.float64)
        norms = np.linalg.norm(protos.reshape(protos.shape[0], -1), axis=1)
        if np.any(norms < DEGENERATE_NORM):
            raise DegenerateInputError("prototype with zero norm")
        return cls(protos / norms[:, None, None, None])

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.prototypes.shape[1:])


def class_scores(feature, bank: PrototypeBank) -> np.ndarray:
    feature = as_feature_map(feature)
    if feature.shape != bank.shape:
        raise DimensionError(f"feature shape {feature.shape} does not match bank {bank.shape}")
    norm = np.linalg.norm(feature)
    if norm < DEGENERATE_NORM:
        raise DegenerateInputError("cannot classify a near-zero feature")
    flat = bank.prototypes.reshape(bank.num_classes, -1)
    return flat @ feature.ravel() / norm


def classify(feature, bank: PrototypeBank) -> tuple[int, float]:
    """Nearest prototype by global cosine; ties go to the lowest class id."""
    scores = class_scores(feature, bank)
    best = int(np.argmax(scores))
    return best, float(np.clip(scores[best], -1.0, 1.0))
