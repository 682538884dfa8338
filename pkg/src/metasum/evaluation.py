"""Keyshot-overlap metrics, annotator aggregation, ground-truth consolidation.

Sets of selected frames are boolean vectors.  F-scores are percentages in
[0, 100].  Consolidation builds a single reference keyframe set from several
annotators by greedily adding the frame that maximizes the summed F-score.
"""

from __future__ import annotations

import numpy as np

__all__ = ["frame_set", "prf", "eval_against_users", "consolidate_gt",
           "sweep_stats", "SWEEP_BETAS"]

# Canonical sweep grid for the meta learning rate.
SWEEP_BETAS = (0.1, 0.01, 0.001, 0.0001, 0.00001)


def frame_set(indices, n_frames: int) -> np.ndarray:
    """Boolean membership vector from a list of frame indices."""
    mask = np.zeros(n_frames, dtype=bool)
    idx = np.asarray(indices, dtype=int)
    if idx.size:
        if idx.min() < 0 or idx.max() >= n_frames:
            raise ValueError(f"frame index out of range [0, {n_frames})")
        mask[idx] = True
    return mask


def _as_mask(s) -> np.ndarray:
    m = np.asarray(s)
    if m.dtype != bool:
        raise ValueError(f"expected a boolean frame mask, got dtype {m.dtype}")
    if m.ndim != 1:
        raise ValueError(f"expected a 1-d frame mask, got shape {m.shape}")
    return m


def prf(a, b) -> tuple[float, float, float]:
    """Precision, recall and percentage F-score of frame-set overlap.

    P = |A&B|/|A|, R = |A&B|/|B|, F = 2PR/(P+R) * 100, with empty-set
    conventions: |A|=0 gives P=0, |B|=0 gives R=0, P+R=0 gives F=0.
    """
    a, b = _as_mask(a), _as_mask(b)
    if a.shape != b.shape:
        raise ValueError(f"frame sets differ in length: {a.shape} vs {b.shape}")
    inter = int((a & b).sum())
    na, nb = int(a.sum()), int(b.sum())
    p = inter / na if na else 0.0
    r = inter / nb if nb else 0.0
    f = 200.0 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def eval_against_users(a, users, agg: str = "mean") -> float:
    """F-score of a summary against every annotator, aggregated by mean or max."""
    if not len(users):
        raise ValueError("eval_against_users: no user annotations")
    if agg not in ("mean", "max"):
        raise ValueError(f"agg must be 'mean' or 'max', got {agg!r}")
    fs = [prf(a, u)[2] for u in users]
    return float(np.mean(fs) if agg == "mean" else np.max(fs))


def consolidate_gt(users, trace: list | None = None) -> np.ndarray:
    """Greedy single reference set maximizing the summed per-user F-score.

    Starting empty, repeatedly add the frame giving the largest strict
    increase of sum_j F(y* + {f}, y_j); ties take the lowest frame index.
    Uses the identity F = 200*|A&B| / (|A|+|B|) on running intersection
    counts, so each candidate is O(#users).
    """
    masks = [_as_mask(u) for u in users]
    if not masks:
        raise ValueError("consolidate_gt: no user annotations")
    T = masks[0].shape[0]
    if any(m.shape[0] != T for m in masks):
        raise ValueError("consolidate_gt: user sets differ in length")

    sizes = [int(m.sum()) for m in masks]
    inter = [0] * len(masks)
    chosen = np.zeros(T, dtype=bool)
    n_chosen = 0
    current = 0.0

    while True:
        best_f, best_gain = -1, 0.0
        for f in range(T):
            if chosen[f]:
                continue
            obj = 0.0
            for j, m in enumerate(masks):
                i2 = inter[j] + (1 if m[f] else 0)
                denom = n_chosen + 1 + sizes[j]
                if i2 and denom:
                    obj += 200.0 * i2 / denom
            if obj - current > best_gain + 1e-12:
                best_f, best_gain = f, obj - current
        if best_f < 0:
            break
        chosen[best_f] = True
        n_chosen += 1
        current += best_gain
        for j, m in enumerate(masks):
            if m[best_f]:
                inter[j] += 1
        if trace is not None:
            trace.append((best_f, current))
    return chosen


def sweep_stats(grid: dict, alpha: float, betas=None) -> tuple[float, float]:
    """Mean and max F-score over the beta axis at a fixed alpha.

    ``betas`` defaults to every beta present anywhere in the grid; a missing
    (alpha, beta) cell is an error, as is any non-finite or out-of-range F.
    """
    if betas is None:
        betas = sorted({b for _, b in grid})
    if not betas:
        raise ValueError("sweep_stats: empty grid")
    vals = []
    for b in betas:
        if (alpha, b) not in grid:
            raise ValueError(f"sweep_stats: missing cell (alpha={alpha}, beta={b})")
        v = float(grid[(alpha, b)])
        if not np.isfinite(v) or not 0.0 <= v <= 100.0:
            raise ValueError(f"sweep_stats: F value {v} out of [0, 100]")
        vals.append(v)
    return float(np.mean(vals)), float(np.max(vals))
