"""Kernel temporal segmentation: change-point detection on frame features.

A dynamic program places up to ``max_segments`` interval boundaries so that
total within-segment scatter of the dot-product Gram matrix is minimal; the
number of segments itself is chosen by a model-selection penalty.  Pure
numpy, no gradients involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["Segmentation", "segment_scatter", "best_split", "kts",
           "default_max_segments"]


@dataclass(frozen=True)
class Segmentation:
    """Disjoint cover of [0, n_frames) by intervals cut at change_points."""

    n_frames: int
    change_points: tuple[int, ...]

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError(f"n_frames must be >= 1, got {self.n_frames}")
        object.__setattr__(self, "change_points", tuple(int(c) for c in self.change_points))
        cps = self.change_points
        if any(not 0 < c < self.n_frames for c in cps):
            raise ValueError(f"change points {cps} out of range (0, {self.n_frames})")
        if any(a >= b for a, b in zip(cps, cps[1:])):
            raise ValueError(f"change points {cps} not strictly increasing")

    def intervals(self) -> list[tuple[int, int]]:
        bounds = (0,) + self.change_points + (self.n_frames,)
        return list(zip(bounds, bounds[1:]))


def _prefix_sums(features: np.ndarray):
    """csum[i] = sum of rows < i; csq[i] = sum of squared norms of rows < i."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"expected a T x D feature matrix with T >= 1, got {x.shape}")
    csum = np.zeros((x.shape[0] + 1, x.shape[1]))
    np.cumsum(x, axis=0, out=csum[1:])
    csq = np.zeros(x.shape[0] + 1)
    np.cumsum((x * x).sum(axis=1), out=csq[1:])
    return csum, csq


def segment_scatter(features, start: int, end: int) -> float:
    """Within-segment scatter of frames [start, end) under the linear kernel.

    Equals sum_t k(x_t, x_t) - (1/len) * sum_{t,t'} k(x_t, x_t'); zero for
    single-frame or constant segments.
    """
    csum, csq = _prefix_sums(features)
    T = len(csq) - 1
    if not 0 <= start < end <= T:
        raise ValueError(f"empty or invalid segment [{start}, {end}) for T={T}")
    seg = csum[end] - csum[start]
    return float(csq[end] - csq[start] - (seg @ seg) / (end - start))


def _scatter_matrix(features: np.ndarray) -> np.ndarray:
    """S[a, b] = scatter of [a, b) for all 0 <= a < b <= T, else 0."""
    csum, csq = _prefix_sums(features)
    T = len(csq) - 1
    cross = csum @ csum.T
    norms = np.diag(cross)
    lengths = np.arange(T + 1)[None, :] - np.arange(T + 1)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = norms[None, :] - 2 * cross + norms[:, None]
        S = (csq[None, :] - csq[:, None]) - sq / lengths
    S[lengths <= 0] = 0.0
    # Scatter is a variance-like quantity; clamp tiny negative round-off.
    np.maximum(S, 0.0, out=S)
    return S


def _dp(features: np.ndarray, max_m: int):
    """Cost C[m][t] of an optimal m-segment split of the first t frames,
    plus backtracking pointers. Ties take the earliest split point."""
    S = _scatter_matrix(features)
    T = S.shape[0] - 1
    max_m = min(max_m, T)
    cost = np.full((max_m + 1, T + 1), np.inf)
    arg = np.zeros((max_m + 1, T + 1), dtype=int)
    cost[1][1:] = S[0, 1:]
    for m in range(2, max_m + 1):
        for t in range(m, T + 1):
            cands = cost[m - 1][m - 1:t] + S[m - 1:t, t]
            best = int(np.argmin(cands))  # first minimum = earliest cut
            cost[m][t] = cands[best]
            arg[m][t] = best + m - 1
    return cost, arg, max_m


def _backtrack(arg: np.ndarray, m: int, T: int) -> tuple[int, ...]:
    cps = []
    t = T
    for layer in range(m, 1, -1):
        t = int(arg[layer][t])
        cps.append(t)
    return tuple(reversed(cps))


def best_split(features, n_segments: int) -> Segmentation:
    """Minimum-scatter segmentation with exactly n_segments intervals."""
    x = np.asarray(features, dtype=np.float64)
    cost, arg, max_m = _dp(x, n_segments)
    T = x.shape[0]
    if n_segments > max_m:
        raise ValueError(f"cannot cut {T} frames into {n_segments} segments")
    return Segmentation(T, _backtrack(arg, n_segments, T))


def kts(features, max_segments: int, penalty_weight: float = 1.0) -> Segmentation:
    """Change points minimizing scatter plus penalty_weight * m * (log(T/m) + 1).

    The segment count m ranges over 1..max_segments; ties prefer fewer
    segments, then earlier change points.
    """
    if max_segments < 1:
        raise ValueError(f"max_segments must be >= 1, got {max_segments}")
    x = np.asarray(features, dtype=np.float64)
    cost, arg, max_m = _dp(x, max_segments)
    T = x.shape[0]
    best_obj, best_m = np.inf, 1
    for m in range(1, max_m + 1):
        obj = cost[m][T] + penalty_weight * m * (math.log(T / m) + 1)
        if obj < best_obj:
            best_obj, best_m = obj, m
    return Segmentation(T, _backtrack(arg, best_m, T))


def default_max_segments(n_frames: int) -> int:
    """Segment ceiling of one shot per ~40 frames (about 20 s at 2 fps)."""
    return max(1, math.ceil(n_frames / 40))
