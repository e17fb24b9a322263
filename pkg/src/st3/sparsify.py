"""Soft-thresholded sparse weights with straight-through gradients.

Each training step re-derives the forward weights from the dense ("raw")
weights: one global threshold is picked so that the requested fraction of
scores falls at or below it, every layer is thresholded (soft or hard),
optionally rescaled filter-wise, and the result is wrapped so that the backward
pass hands the gradient straight to the raw weights.

Threshold selection runs in float64 on exact upcasts of the float32 weights;
the emitted forward weights are float32.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, straight_through

THRESHOLD_MODES = ("soft", "hard")
ALLOCATIONS = ("global_l1", "sigma", "lamp")


@dataclass(frozen=True)
class SparsifyConfig:
    threshold_mode: str = "soft"
    rescale: bool = True
    allocation: str = "global_l1"

    def __post_init__(self):
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ValueError(f"threshold_mode must be one of {THRESHOLD_MODES}, got {self.threshold_mode!r}")
        if self.allocation not in ALLOCATIONS:
            raise ValueError(f"allocation must be one of {ALLOCATIONS}, got {self.allocation!r}")

    @property
    def arm(self) -> str:
        return f"{self.threshold_mode}{'+rescale' if self.rescale else ''}/{self.allocation}"


@dataclass
class PrunableParam:
    """A conv or linear weight; output filters index axis 0."""

    layer_name: str
    raw: Tensor
    kind: str = "linear"
    filter_axis: int = 0

    def __post_init__(self):
        if self.kind not in ("conv", "linear"):
            raise ValueError(f"kind must be 'conv' or 'linear', got {self.kind!r}")
        if self.filter_axis != 0:
            raise ValueError("only filter_axis=0 is supported")

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.raw.shape[1:], dtype=np.int64))

    @property
    def sigma_factor(self) -> float:
        return math.sqrt(self.fan_in)

    @property
    def size(self) -> int:
        return self.raw.size


@dataclass
class SparseWeights:
    """Forward weights for one step plus the thresholds that produced them."""

    values: dict[str, np.ndarray]
    threshold: float
    layer_thresholds: dict[str, float] = field(default_factory=dict)
    target_zeros: int = 0

    def zero_count(self) -> int:
        return sum(int(np.count_nonzero(v == 0)) for v in self.values.values())


# ---------------------------------------------------------------------------
# elementwise operators

def soft_threshold(w, th: float) -> np.ndarray:
    if th < 0:
        raise ValueError(f"threshold must be non-negative, got {th}")
    w = np.asarray(w)
    return np.sign(w) * np.maximum(np.abs(w) - th, 0)


def hard_threshold(w, th: float) -> np.ndarray:
    if th < 0:
        raise ValueError(f"threshold must be non-negative, got {th}")
    w = np.asarray(w)
    return np.where(np.abs(w) > th, w, 0)


def filter_scales(w2d: np.ndarray, th: float) -> np.ndarray:
    """Per-row ratio of total magnitude to the magnitude of weights above ``th``.

    Rows with nothing above ``th`` get 1.
    """
    a = np.abs(w2d)
    num = a.sum(axis=1)
    den = np.where(a > th, a, 0).sum(axis=1)
    out = np.ones_like(num)
    live = den > 0
    out[live] = num[live] / den[live]
    return out


def filter_scale(raw_filter, th: float) -> float:
    if th < 0:
        raise ValueError(f"threshold must be non-negative, got {th}")
    v = np.asarray(raw_filter, dtype=np.float64).reshape(1, -1)
    if not np.all(np.isfinite(v)):
        raise ValueError("filter contains non-finite values")
    return float(filter_scales(v, th)[0])


def lamp_scores(w_flat) -> np.ndarray:
    """LAMP score: squared magnitude over the sum of squares of all weights not smaller than it."""
    w = np.asarray(w_flat, dtype=np.float64).ravel()
    if w.size == 0:
        raise ValueError("lamp_scores needs at least one weight")
    sq = w * w
    order = np.argsort(sq, kind="stable")
    s = sq[order]
    suffix = np.cumsum(s[::-1])[::-1]
    sorted_scores = np.zeros_like(s)
    nz = suffix > 0
    sorted_scores[nz] = s[nz] / suffix[nz]
    out = np.empty_like(sorted_scores)
    out[order] = sorted_scores
    return out


def zero_mask(sparse_w) -> np.ndarray:
    data = sparse_w.data if isinstance(sparse_w, Tensor) else np.asarray(sparse_w)
    return data == 0


# ---------------------------------------------------------------------------
# global selection

def target_zero_count(sp_ratio: float, n: int) -> int:
    # rounding guards against representation error, e.g. 0.29 * 100 = 28.999999999999996
    return int(math.floor(round(sp_ratio * n, 9)))


def param_scores(p: PrunableParam, allocation: str) -> np.ndarray:
    a = np.abs(p.raw.data.astype(np.float64)).ravel()
    if allocation == "global_l1":
        return a
    if allocation == "sigma":
        return a * p.sigma_factor
    if allocation == "lamp":
        return lamp_scores(a)
    raise ValueError(f"unknown allocation {allocation!r}")


def _kth_smallest(scores: np.ndarray, k: int) -> float:
    if k <= 0:
        return 0.0
    return float(np.partition(scores, k - 1)[k - 1])


def global_threshold(params, sp_ratio: float, allocation: str = "global_l1") -> float:
    params = list(params)
    if not params:
        raise ValueError("global_threshold needs at least one prunable parameter")
    if not 0.0 <= sp_ratio < 1.0:
        raise ValueError(f"sp_ratio must lie in [0, 1), got {sp_ratio}")
    scores = np.concatenate([param_scores(p, allocation) for p in params])
    if scores.size == 0:
        raise ValueError("no prunable weights")
    return _kth_smallest(scores, target_zero_count(sp_ratio, scores.size))


def _layer_threshold(a: np.ndarray, mask: np.ndarray, base: float) -> float:
    """Magnitude threshold that zeroes exactly ``mask`` within a layer.

    ``base`` is the nominal value (global threshold, or its sigma-rescaled
    version); it is nudged by at most rounding error so the zero set agrees
    with the score ranking. When a tie across the mask boundary makes that
    impossible, the tied weights are zeroed too.
    """
    lo = float(a[mask].max()) if mask.any() else 0.0
    keep = a[~mask]
    if keep.size:
        hi = float(np.nextafter(keep.min(), -np.inf))
        base = min(base, hi)
    return max(base, lo)


def sparse_values(params, sp_ratio: float, config: SparsifyConfig) -> SparseWeights:
    """Thresholded (and optionally rescaled) forward weights, as plain arrays."""
    params = list(params)
    if not params:
        raise ValueError("no prunable parameters")
    if not 0.0 <= sp_ratio < 1.0:
        raise ValueError(f"sp_ratio must lie in [0, 1), got {sp_ratio}")
    scores = [param_scores(p, config.allocation) for p in params]
    flat = np.concatenate(scores)
    k = target_zero_count(sp_ratio, flat.size)
    th = _kth_smallest(flat, k)
    values, mths = {}, {}
    for p, sc in zip(params, scores):
        w = p.raw.data.astype(np.float64)
        a = np.abs(w).ravel()
        if k == 0:
            mth = 0.0
        else:
            mask = sc <= th
            if config.allocation == "global_l1":
                base = th
            elif config.allocation == "sigma":
                base = th / p.sigma_factor
            else:
                base = 0.0
            mth = _layer_threshold(a, mask, base)
        if config.threshold_mode == "soft":
            v = soft_threshold(w, mth)
        else:
            v = hard_threshold(w, mth)
        if config.rescale:
            w2 = w.reshape(w.shape[0], -1)
            scale = filter_scales(w2, mth)
            v = (v.reshape(w.shape[0], -1) * scale[:, None]).reshape(w.shape)
        values[p.layer_name] = v.astype(np.float32)
        mths[p.layer_name] = mth
    return SparseWeights(values, th, mths, k)


def make_sparse_weights(params, sp_ratio: float, config: SparsifyConfig):
    """Forward weights for every prunable layer, each behind a straight-through node.

    Returns ``(weights, info)`` where ``weights`` maps layer name to a Tensor
    whose gradient flows unchanged into ``param.raw``.
    """
    params = list(params)
    info = sparse_values(params, sp_ratio, config)
    weights = {p.layer_name: straight_through(p.raw, info.values[p.layer_name]) for p in params}
    return weights, info
