"""Kernel temporal segmentation (linear kernel) and the shot-level first layer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layers import (
    GraphOptions,
    LayerOutput,
    convolve,
    convolve_backward,
    glorot,
    pool_mean,
    pool_mean_backward,
    propagate,
    propagate_backward,
    segment_index,
)
from .tensor_core import DimensionError, ParamTensor, Tensor2


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True)
class ShotBoundaries:
    n: int
    cuts: tuple[int, ...]

    def __post_init__(self):
        prev = 0
        for c in self.cuts:
            if not prev < c < self.n:
                raise SegmentationError(f"cuts {list(self.cuts)} invalid for n={self.n}")
            prev = c

    @property
    def m(self) -> int:
        return len(self.cuts) + 1

    @property
    def starts(self) -> list[int]:
        return [0, *self.cuts]

    @property
    def stops(self) -> list[int]:
        return [*self.cuts, self.n]

    def segments(self) -> list[tuple[int, int]]:
        return list(zip(self.starts, self.stops))


class SegmentCostTable:
    """Within-segment scatter cost(i, j) = sum_{t in [i, j)} ||f_t - mean||^2.

    Backed by an (n+1) x (n+1) array; entries with j <= i are unused.
    """

    def __init__(self, table: np.ndarray):
        self.table = table
        self.n = table.shape[0] - 1

    def cost(self, i: int, j: int) -> float:
        if not 0 <= i < j <= self.n:
            raise IndexError(f"segment [{i}, {j}) out of range for n={self.n}")
        return float(self.table[i, j])

    def total(self, boundaries: ShotBoundaries) -> float:
        # Left-to-right accumulation, matching the brute-force enumerators.
        acc = 0.0
        for a, b in boundaries.segments():
            acc += self.table[a, b]
        return float(acc)


def segment_costs(features: Tensor2) -> SegmentCostTable:
    n = features.shape[0]
    if n < 1:
        raise SegmentationError("need at least one frame")
    s1 = np.vstack([np.zeros((1, features.shape[1])), np.cumsum(features, axis=0)])
    s2 = np.concatenate([[0.0], np.cumsum(np.einsum("ij,ij->i", features, features))])
    table = np.zeros((n + 1, n + 1))
    for i in range(n - 1):
        diff = s1[i + 2:] - s1[i]
        energy = s2[i + 2:] - s2[i]
        row = energy - np.einsum("jd,jd->j", diff, diff) / np.arange(2, n - i + 1)
        # Cancellation noise: anything below 1e-12 of the raw energy is zero.
        row[np.abs(row) <= 1e-12 * np.abs(energy)] = 0.0
        table[i, i + 2:] = np.maximum(row, 0.0)
    return SegmentCostTable(table)


def _suffix_table(costs: SegmentCostTable, m_max: int) -> np.ndarray:
    """best[k, i] = min cost of splitting [i, n) into exactly k segments."""
    n, t = costs.n, costs.table
    best = np.full((m_max + 1, n + 1), np.inf)
    best[0, n] = 0.0
    for k in range(1, m_max + 1):
        for i in range(0, n - k + 1):
            ends = np.arange(i + 1, n - k + 2)
            best[k, i] = np.min(t[i, ends] + best[k - 1, ends])
    return best


def _tie_tol(value: float) -> float:
    return 1e-12 * max(1.0, abs(value))


def _trace(costs: SegmentCostTable, best: np.ndarray, m: int) -> ShotBoundaries:
    # Greedy left-to-right: the smallest feasible cut at each step yields the
    # lexicographically smallest optimal cut sequence.
    n, t = costs.n, costs.table
    cuts = []
    i = 0
    for k in range(m, 1, -1):
        target = best[k, i]
        for end in range(i + 1, n - k + 2):
            if t[i, end] + best[k - 1, end] <= target + _tie_tol(target):
                cuts.append(end)
                i = end
                break
    return ShotBoundaries(n, tuple(cuts))


def kts_fixed(costs: SegmentCostTable, m: int) -> ShotBoundaries:
    """Exact minimum total scatter over all splits into ``m`` segments."""
    if not 1 <= m <= costs.n:
        raise SegmentationError(f"shot count m={m} must be in [1, {costs.n}]")
    return _trace(costs, _suffix_table(costs, m), m)


def penalty(m: int, n: int) -> float:
    return m * (math.log(n / m) + 1.0)


@dataclass
class AutoResult:
    boundaries: ShotBoundaries
    objective: list[float]  # J(m) for m = 1..m_max


def kts_auto(costs: SegmentCostTable, c_penalty: float, m_max: int) -> ShotBoundaries:
    return kts_auto_detail(costs, c_penalty, m_max).boundaries


def kts_auto_detail(costs: SegmentCostTable, c_penalty: float, m_max: int) -> AutoResult:
    if c_penalty < 0:
        raise SegmentationError("c_penalty must be non-negative")
    if not 1 <= m_max <= costs.n:
        raise SegmentationError(f"m_max={m_max} must be in [1, {costs.n}]")
    best = _suffix_table(costs, m_max)
    n = costs.n
    objective = [float(best[m, 0]) + c_penalty * penalty(m, n) for m in range(1, m_max + 1)]
    chosen = int(np.argmin(objective)) + 1  # argmin returns the first, i.e. smallest m
    return AutoResult(_trace(costs, best, chosen), objective)


def similarity_matrix(features: Tensor2) -> Tensor2:
    """Frame-by-frame linear-kernel Gram matrix (the kernel KTS implicitly uses)."""
    return features @ features.T


# -- shot-level layer --------------------------------------------------------

@dataclass
class ShotLayerParams:
    k_max: int
    d_in: int
    d_out: int
    w_conv: ParamTensor
    w_prop: ParamTensor

    def __post_init__(self):
        if self.w_conv.shape != (self.k_max * self.d_in, self.d_out):
            raise DimensionError(
                f"w_conv has shape {self.w_conv.shape}, expected "
                f"{(self.k_max * self.d_in, self.d_out)}")
        if self.w_prop.shape != (self.d_out, self.d_out):
            raise DimensionError(f"w_prop has shape {self.w_prop.shape}")

    @classmethod
    def init(cls, rng: np.random.Generator, k_max: int, d_in: int, d_out: int) -> "ShotLayerParams":
        return cls(k_max, d_in, d_out,
                   w_conv=ParamTensor(glorot(rng, k_max * d_in, d_out)),
                   w_prop=ParamTensor(glorot(rng, d_out, d_out)))

    def named(self) -> dict[str, ParamTensor]:
        return {"w_conv": self.w_conv, "w_prop": self.w_prop}


def _shot_indices(boundaries: ShotBoundaries, k_max: int):
    pool_idx = segment_index(boundaries.starts, boundaries.stops)
    conv_idx = segment_index(boundaries.starts, boundaries.stops, k_max)
    return pool_idx, conv_idx


def shot_layer_forward(frames: Tensor2, boundaries: ShotBoundaries, params: ShotLayerParams,
                       activation: str | GraphOptions = "sigmoid") -> LayerOutput:
    """Mean-pool each shot, convolve its first ``k_max`` frames, propagate."""
    if boundaries.n != frames.shape[0]:
        raise DimensionError(f"boundaries cover {boundaries.n} frames, input has {frames.shape[0]}")
    pool_idx, conv_idx = _shot_indices(boundaries, params.k_max)
    pooled = pool_mean(frames, pool_idx)
    convolved = convolve(frames, conv_idx, params.w_conv.value)
    hidden = propagate(pooled, convolved, params.w_prop.value, activation)
    return LayerOutput(pooled, convolved, hidden)


def shot_layer_backward(frames: Tensor2, boundaries: ShotBoundaries, params: ShotLayerParams,
                        out: LayerOutput, grad_hidden: Tensor2,
                        activation: str | GraphOptions = "sigmoid") -> Tensor2:
    opts = activation if isinstance(activation, GraphOptions) else GraphOptions(activation)
    pool_idx, conv_idx = _shot_indices(boundaries, params.k_max)
    g_pooled, g_conv, g_wprop = propagate_backward(
        out.pooled, out.convolved, params.w_prop.value, opts, grad_hidden)
    params.w_prop.grad += g_wprop
    g_frames, g_wconv = convolve_backward(frames, conv_idx, params.w_conv.value, g_conv)
    params.w_conv.grad += g_wconv
    g_frames += pool_mean_backward(frames, pool_idx, g_pooled)
    return g_frames
