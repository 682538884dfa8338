"""End-to-end orchestration: score, segment, select, evaluate, export."""

import numpy as np
import pytest

from metasum.data import VideoRecord
from metasum.evaluation import eval_against_users, prf
from metasum.gradcore import no_grad
from metasum.learner import LearnerConfig, forward, init_params
from metasum.pipeline import (
    evaluate_dataset,
    evaluate_video,
    reference_sets,
    score_video,
    summarize_video,
    timeline_rows,
)
from metasum.segmentation import default_max_segments, kts
from metasum.summary import interval_scores, select_keyshots

CFG = LearnerConfig(input_dim=4, lstm_hidden=3, mlp_hidden=3)


def make_video(seed, T=36, users="none"):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(T, CFG.input_dim))
    gt = rng.uniform(0.05, 0.95, size=T)
    anns = None
    if users == "bool":
        anns = [rng.random(T) < 0.3 for _ in range(2)]
    elif users == "scores":
        anns = [rng.uniform(0.0, 1.0, size=T) for _ in range(3)]
    return VideoRecord(id=f"v{seed}", features=feats, gt_scores=gt,
                       user_annotations=anns)


@pytest.fixture(scope="module")
def params():
    return init_params(CFG, seed=7)


def same_segmentation(video):
    return kts(video.features.astype(np.float64),
               default_max_segments(video.n_frames), 1.0)


def test_score_video_matches_forward(params):
    video = make_video(0)
    scores = score_video(params, video)
    with no_grad():
        expected = forward(params, video.features.astype(np.float64)).data
    assert scores.shape == (video.n_frames,)
    np.testing.assert_array_equal(scores, expected)
    assert scores.min() > 0.0 and scores.max() < 1.0


def test_summarize_video_budget_and_mask(params):
    video = make_video(1, T=50)
    scores, seg, summary = summarize_video(params, video, budget=0.2)
    assert summary.selected.shape == (50,)
    assert summary.total_frames() <= int(0.2 * 50)
    rebuilt = np.zeros(50, dtype=bool)
    for start, end, _ in summary.intervals_chosen:
        rebuilt[start:end] = True
    np.testing.assert_array_equal(summary.selected, rebuilt)
    np.testing.assert_array_equal(scores, score_video(params, video))


def test_summarize_video_deterministic(params):
    video = make_video(2)
    s1, g1, m1 = summarize_video(params, video)
    s2, g2, m2 = summarize_video(params, video)
    np.testing.assert_array_equal(s1, s2)
    assert g1.change_points == g2.change_points
    np.testing.assert_array_equal(m1.selected, m2.selected)


def test_reference_sets_pseudo_user_from_gt(params):
    video = make_video(3, users="none")
    refs = reference_sets(video)
    assert len(refs) == 1
    seg = same_segmentation(video)
    expected = select_keyshots(
        seg, interval_scores(video.gt_scores.astype(np.float64), seg))
    np.testing.assert_array_equal(refs[0], expected.selected)


def test_reference_sets_bool_annotations_copied(params):
    video = make_video(4, users="bool")
    refs = reference_sets(video)
    assert len(refs) == 2
    for ref, ann in zip(refs, video.user_annotations):
        np.testing.assert_array_equal(ref, ann)
    refs[0][:] = False
    assert video.user_annotations[0].any()


def test_reference_sets_score_annotations_routed_through_selection(params):
    video = make_video(5, users="scores")
    seg = same_segmentation(video)
    refs = reference_sets(video, seg=seg)
    assert len(refs) == 3
    for ref, ann in zip(refs, video.user_annotations):
        expected = select_keyshots(
            seg, interval_scores(ann.astype(np.float64), seg))
        np.testing.assert_array_equal(ref, expected.selected)


@pytest.mark.parametrize("agg", ["mean", "max"])
def test_evaluate_video_matches_manual_reduction(params, agg):
    video = make_video(6, users="bool")
    row = evaluate_video(params, video, agg=agg)
    _, seg, summary = summarize_video(params, video)
    users = reference_sets(video, seg=seg)
    triples = [prf(summary.selected, u) for u in users]
    reduce = np.mean if agg == "mean" else np.max
    assert row["precision"] == pytest.approx(reduce([t[0] for t in triples]))
    assert row["recall"] == pytest.approx(reduce([t[1] for t in triples]))
    assert row["f_score"] == pytest.approx(
        eval_against_users(summary.selected, users, agg=agg))
    assert row["video_id"] == video.id
    assert row["n_users"] == 2
    assert row["summary_frames"] == summary.total_frames()
    assert tuple(row["change_points"]) == seg.change_points


def test_evaluate_dataset_mean_arithmetic(params):
    videos = [make_video(s, users="bool") for s in (7, 8, 9)]
    result = evaluate_dataset(params, videos)
    assert len(result["videos"]) == 3
    for key, col in (("mean_f", "f_score"), ("mean_precision", "precision"),
                     ("mean_recall", "recall")):
        manual = np.mean([r[col] for r in result["videos"]])
        assert result[key] == pytest.approx(manual)
    with pytest.raises(ValueError):
        evaluate_dataset(params, [])


def test_evaluate_output_is_json_safe(params):
    import json
    result = evaluate_dataset(params, [make_video(10, users="scores")])
    json.dumps(result, sort_keys=True)


def test_timeline_rows_use_picks(params):
    video = make_video(11, T=12)
    video.picks = np.arange(0, 120, 10)
    scores, _, summary = summarize_video(params, video)
    rows = timeline_rows(video, scores, summary)
    assert [r[0] for r in rows] == list(range(0, 120, 10))
    for t, (_, gt, pred, sel) in enumerate(rows):
        assert gt == pytest.approx(float(video.gt_scores[t]))
        assert pred == pytest.approx(float(scores[t]))
        assert sel == int(summary.selected[t])


def test_timeline_rows_default_indices(params):
    video = make_video(12, T=9)
    scores, _, summary = summarize_video(params, video)
    rows = timeline_rows(video, scores, summary)
    assert [r[0] for r in rows] == list(range(9))
