"""Score -> segment -> select -> evaluate, per video and per dataset.

Reference keyshot sets come from user annotations when present: boolean
annotations are used directly, score-vector annotations are pushed through
the same segment-and-select path as the predictions.  Videos without any
annotation fall back to a single pseudo-user derived from gt_scores, which
keeps synthetic datasets evaluable end to end.
"""

from __future__ import annotations

import numpy as np

from .data import VideoRecord
from .evaluation import eval_against_users, prf
from .gradcore import no_grad
from .learner import forward
from .segmentation import Segmentation, default_max_segments, kts
from .summary import DEFAULT_BUDGET, Summary, interval_scores, select_keyshots

__all__ = ["score_video", "summarize_video", "reference_sets",
           "evaluate_video", "evaluate_dataset", "timeline_rows"]


def score_video(params: dict, video: VideoRecord) -> np.ndarray:
    """Per-frame selection probabilities, no gradients recorded."""
    with no_grad():
        return forward(params, video.features.astype(np.float64)).data


def _segment(video: VideoRecord, max_segments: int | None,
             penalty: float) -> Segmentation:
    if max_segments is None:
        max_segments = default_max_segments(video.n_frames)
    return kts(video.features.astype(np.float64), max_segments, penalty)


def _select(scores, seg: Segmentation, budget: float, strategy: str) -> Summary:
    return select_keyshots(seg, interval_scores(scores, seg), budget, strategy)


def summarize_video(params: dict, video: VideoRecord, *,
                    budget: float = DEFAULT_BUDGET, strategy: str = "rank",
                    max_segments: int | None = None, penalty: float = 1.0):
    """Full summarization of one video: (scores, segmentation, summary)."""
    scores = score_video(params, video)
    seg = _segment(video, max_segments, penalty)
    return scores, seg, _select(scores, seg, budget, strategy)


def reference_sets(video: VideoRecord, *, budget: float = DEFAULT_BUDGET,
                   strategy: str = "rank", seg: Segmentation | None = None,
                   max_segments: int | None = None,
                   penalty: float = 1.0) -> list[np.ndarray]:
    """Boolean keyshot sets to evaluate against, one per annotator."""
    if seg is None:
        seg = _segment(video, max_segments, penalty)
    annotations = video.user_annotations
    if not annotations:
        annotations = [video.gt_scores]
    refs = []
    for ann in annotations:
        if ann.dtype == bool:
            refs.append(ann.copy())
        else:
            refs.append(_select(ann.astype(np.float64), seg, budget, strategy).selected)
    return refs


def evaluate_video(params: dict, video: VideoRecord, *, agg: str = "mean",
                   budget: float = DEFAULT_BUDGET, strategy: str = "rank",
                   max_segments: int | None = None, penalty: float = 1.0) -> dict:
    """P/R/F of the predicted summary against all annotators.

    Each metric is aggregated over annotators with the same rule (mean/max).
    """
    scores = score_video(params, video)
    seg = _segment(video, max_segments, penalty)
    summary = _select(scores, seg, budget, strategy)
    users = reference_sets(video, budget=budget, strategy=strategy, seg=seg)

    triples = [prf(summary.selected, u) for u in users]
    reduce = np.mean if agg == "mean" else np.max
    f = eval_against_users(summary.selected, users, agg=agg)
    return {
        "video_id": video.id,
        "n_frames": video.n_frames,
        "n_users": len(users),
        "precision": float(reduce([t[0] for t in triples])),
        "recall": float(reduce([t[1] for t in triples])),
        "f_score": f,
        "summary_frames": summary.total_frames(),
        "change_points": [int(c) for c in seg.change_points],
    }


def evaluate_dataset(params: dict, videos: list, *, agg: str = "mean",
                     budget: float = DEFAULT_BUDGET, strategy: str = "rank",
                     max_segments: int | None = None, penalty: float = 1.0) -> dict:
    """Per-video metrics plus their mean F-score."""
    if not videos:
        raise ValueError("evaluate_dataset: no videos")
    rows = [evaluate_video(params, v, agg=agg, budget=budget, strategy=strategy,
                           max_segments=max_segments, penalty=penalty)
            for v in videos]
    return {"videos": rows,
            "mean_f": float(np.mean([r["f_score"] for r in rows])),
            "mean_precision": float(np.mean([r["precision"] for r in rows])),
            "mean_recall": float(np.mean([r["recall"] for r in rows]))}


def timeline_rows(video: VideoRecord, scores: np.ndarray,
                  summary: Summary) -> list[tuple]:
    """(frame_index, gt_score, predicted_score, selected) rows for CSV export."""
    idx = video.picks if video.picks is not None else np.arange(video.n_frames)
    return [(int(idx[t]), float(video.gt_scores[t]), float(scores[t]),
             int(summary.selected[t]))
            for t in range(video.n_frames)]
