"""Keyshot selection: frame scores + segmentation -> budgeted summary.

Intervals inherit the mean score of their frames; a summary is the subset of
intervals fitting a duration budget (default 15% of the frame count), chosen
either greedily by score rank or by an exact 0/1 knapsack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .segmentation import Segmentation

__all__ = ["Summary", "interval_scores", "select_keyshots", "DEFAULT_BUDGET"]

DEFAULT_BUDGET = 0.15


@dataclass(frozen=True)
class Summary:
    """Chosen keyshots: a frame mask plus the intervals behind it."""

    selected: np.ndarray  # bool, length T
    intervals_chosen: tuple  # of (start, end, interval_score)

    def total_frames(self) -> int:
        return int(self.selected.sum())

    def frame_indices(self) -> np.ndarray:
        return np.flatnonzero(self.selected)


def interval_scores(frame_scores, seg: Segmentation) -> list[float]:
    """Arithmetic mean of the frame scores inside each interval."""
    scores = np.asarray(frame_scores, dtype=np.float64)
    if scores.ndim != 1 or len(scores) != seg.n_frames:
        raise ValueError(
            f"scores length {scores.shape} does not match segmentation over "
            f"{seg.n_frames} frames")
    return [float(scores[a:b].mean()) for a, b in seg.intervals()]


def select_keyshots(seg: Segmentation, scores, budget: float = DEFAULT_BUDGET,
                    strategy: str = "rank") -> Summary:
    """Pick intervals worth at most floor(budget * T) frames.

    ``rank``: descending interval score (ties to the earlier interval), take
    whatever still fits and keep scanning.  ``knapsack``: exact 0/1 DP
    maximizing total score * length under the same capacity.
    """
    if not 0 < budget <= 1:
        raise ValueError(f"budget must be in (0, 1], got {budget}")
    ivals = seg.intervals()
    scores = [float(s) for s in scores]
    if len(scores) != len(ivals):
        raise ValueError(f"{len(scores)} scores for {len(ivals)} intervals")
    T = seg.n_frames
    capacity = math.floor(budget * T)

    if strategy == "rank":
        chosen = _rank_select(ivals, scores, capacity)
    elif strategy == "knapsack":
        chosen = _knapsack_select(ivals, scores, capacity)
    else:
        raise ValueError(f"unknown strategy {strategy!r}; use 'rank' or 'knapsack'")

    selected = np.zeros(T, dtype=bool)
    out = []
    for i in chosen:
        a, b = ivals[i]
        selected[a:b] = True
        out.append((a, b, scores[i]))
    return Summary(selected=selected, intervals_chosen=tuple(out))


def _rank_select(ivals, scores, capacity) -> list[int]:
    order = sorted(range(len(ivals)), key=lambda i: (-scores[i], ivals[i][0]))
    remaining = capacity
    chosen = []
    for i in order:
        length = ivals[i][1] - ivals[i][0]
        if length <= remaining:
            chosen.append(i)
            remaining -= length
    return sorted(chosen)


def _knapsack_select(ivals, scores, capacity) -> list[int]:
    n = len(ivals)
    lengths = [b - a for a, b in ivals]
    values = [scores[i] * lengths[i] for i in range(n)]
    # dp[i][w]: best value using the first i items within weight w.
    dp = np.zeros((n + 1, capacity + 1))
    for i in range(1, n + 1):
        dp[i] = dp[i - 1]
        li, vi = lengths[i - 1], values[i - 1]
        if li <= capacity:
            cand = dp[i - 1][: capacity + 1 - li] + vi
            dp[i][li:] = np.maximum(dp[i - 1][li:], cand)
    chosen = []
    w = capacity
    for i in range(n, 0, -1):
        # Item taken only where it strictly changed the table (deterministic).
        if dp[i][w] != dp[i - 1][w]:
            chosen.append(i - 1)
            w -= lengths[i - 1]
    return sorted(chosen)
