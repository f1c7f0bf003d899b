"""Mask distributions over embedding windows.

``uniform_time`` hides a uniformly random subset of whole tokens (MAE
protocol), ``uniform_feature`` hides a random subset of individual cells,
and the two fixed kinds hide a single deterministic position: the last
token of a history window (next-step prediction) or the only token of a
length-1 window (current-step reconstruction).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .autodiff import ContractError

__all__ = [
    "MaskKind",
    "MaskSpec",
    "Mask",
    "time_keep_count",
    "feature_mask_count",
    "sample_time_mask",
    "sample_feature_mask",
    "fixed_mask",
    "sample_mask",
    "sample_mask_batch",
    "apply_mask",
]


class MaskKind(str, Enum):
    UNIFORM_TIME = "uniform_time"
    UNIFORM_FEATURE = "uniform_feature"
    FIXED_LAST_TOKEN = "fixed_last_token"
    FIXED_CURRENT_TOKEN = "fixed_current_token"


@dataclass(frozen=True)
class MaskSpec:
    kind: MaskKind = MaskKind.UNIFORM_TIME
    ratio: float = 0.70
    num_samples: int = 5

    def __post_init__(self):
        object.__setattr__(self, "kind", MaskKind(self.kind))
        if not 0.0 <= self.ratio < 1.0:
            raise ContractError(f"mask ratio must lie in [0, 1), got {self.ratio}")
        if self.num_samples < 1:
            raise ContractError(f"num_samples must be >= 1, got {self.num_samples}")

    @property
    def is_fixed(self) -> bool:
        return self.kind in (MaskKind.FIXED_LAST_TOKEN, MaskKind.FIXED_CURRENT_TOKEN)


@dataclass
class Mask:
    """``time_mask[T]`` marks hidden tokens; ``feature_mask[T, D]`` hidden cells."""

    time_mask: np.ndarray
    feature_mask: np.ndarray | None = None

    @property
    def is_feature(self) -> bool:
        return self.feature_mask is not None


def time_keep_count(T: int, ratio: float) -> int:
    if T < 1:
        raise ContractError("window length must be >= 1")
    if T == 1:
        return 0
    keep = math.floor(T * (1.0 - ratio) + 1e-9)
    return min(max(keep, 1), T - 1)


def feature_mask_count(T: int, D: int, ratio: float) -> int:
    n = T * D
    if n < 2:
        raise ContractError("feature masking needs at least two cells")
    count = math.floor(n * ratio + 1e-9)
    return min(max(count, 1), n - 1)


def sample_time_mask(T: int, ratio: float, rng: np.random.Generator) -> Mask:
    keep = time_keep_count(T, ratio)
    order = rng.permutation(T)
    mask = np.ones(T, dtype=bool)
    mask[order[:keep]] = False
    return Mask(mask)


def sample_feature_mask(T: int, D: int, ratio: float, rng: np.random.Generator) -> Mask:
    count = feature_mask_count(T, D, ratio)
    order = rng.permutation(T * D)
    cells = np.zeros(T * D, dtype=bool)
    cells[order[:count]] = True
    return Mask(np.zeros(T, dtype=bool), cells.reshape(T, D))


def fixed_mask(kind: MaskKind | str, T: int) -> Mask:
    kind = MaskKind(kind)
    if kind == MaskKind.FIXED_LAST_TOKEN:
        if T < 2:
            raise ContractError("fixed_last_token needs T >= 2 (history to condition on)")
        mask = np.zeros(T, dtype=bool)
        mask[-1] = True
        return Mask(mask)
    if kind == MaskKind.FIXED_CURRENT_TOKEN:
        if T != 1:
            raise ContractError("fixed_current_token is defined for a single-token window (T = 1)")
        return Mask(np.ones(1, dtype=bool))
    raise ContractError(f"{kind.value} is not a fixed mask kind")


def sample_mask(spec: MaskSpec, T: int, D: int, rng: np.random.Generator) -> Mask:
    if spec.kind == MaskKind.UNIFORM_TIME:
        return sample_time_mask(T, spec.ratio, rng)
    if spec.kind == MaskKind.UNIFORM_FEATURE:
        return sample_feature_mask(T, D, spec.ratio, rng)
    return fixed_mask(spec.kind, T)


def sample_mask_batch(spec: MaskSpec, B: int, T: int, D: int, rng: np.random.Generator) -> Mask:
    """Independent masks for ``B`` windows, stacked along a leading axis.

    Each row is drawn with a Fisher-Yates shuffle (``Generator.permuted``),
    so every subset of the prescribed size is equally likely.
    """
    if spec.kind == MaskKind.UNIFORM_TIME:
        keep = time_keep_count(T, spec.ratio)
        order = rng.permuted(np.tile(np.arange(T), (B, 1)), axis=1)
        mask = np.ones((B, T), dtype=bool)
        np.put_along_axis(mask, order[:, :keep], False, axis=1)
        return Mask(mask)
    if spec.kind == MaskKind.UNIFORM_FEATURE:
        count = feature_mask_count(T, D, spec.ratio)
        order = rng.permuted(np.tile(np.arange(T * D), (B, 1)), axis=1)
        cells = np.zeros((B, T * D), dtype=bool)
        np.put_along_axis(cells, order[:, :count], True, axis=1)
        return Mask(np.zeros((B, T), dtype=bool), cells.reshape(B, T, D))
    one = fixed_mask(spec.kind, T)
    return Mask(np.tile(one.time_mask, (B, 1)))


def apply_mask(window: np.ndarray, mask: Mask) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(kept_tokens, kept_positions)`` for one ``[T, D]`` window.

    Feature masks keep every token and zero the hidden cells in place.
    """
    window = np.asarray(window)
    T = window.shape[0]
    if mask.time_mask.shape != (T,):
        raise ContractError(f"mask length {mask.time_mask.shape} does not match window length {T}")
    if mask.is_feature:
        if mask.feature_mask.shape != window.shape:
            raise ContractError("feature mask shape does not match window")
        return np.where(mask.feature_mask, 0, window).astype(window.dtype), np.arange(T)
    if T >= 2 and mask.time_mask.all():
        raise ContractError("uniform time masks must leave at least one token visible")
    positions = np.flatnonzero(~mask.time_mask)
    return window[positions], positions
