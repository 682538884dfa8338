"""Container round trips, corruption diagnostics, generator, splits, subsampling."""

import struct

import numpy as np
import pytest

from metasum import gradcore as gc
from metasum.data import (
    MAGIC,
    ContainerError,
    Dataset,
    SyntheticSpec,
    VideoRecord,
    gen_synthetic,
    load,
    load_checkpoint,
    save,
    save_checkpoint,
    split_transfer,
    subsample,
    synthetic_scores,
    tasks_from_dataset,
)
from metasum.gradcore import Graph, Tensor, backward
from metasum.learner import LearnerConfig, init_params, linear_probe_forward


def random_dataset(seed, n_videos=3, with_annotations=True):
    rng = np.random.default_rng(seed)
    videos = []
    for i in range(n_videos):
        T = int(rng.integers(4, 12))
        anns = None
        if with_annotations:
            anns = [rng.uniform(size=T).astype(np.float32), rng.random(T) < 0.3]
        videos.append(VideoRecord(
            id=f"v{i}", features=rng.normal(size=(T, 5)).astype(np.float32),
            gt_scores=rng.uniform(size=T).astype(np.float32),
            fps=float(rng.choice([2.0, 25.0, 30.0])),
            user_annotations=anns,
            picks=np.arange(T) * 3 if i % 2 == 0 else None))
    return Dataset(name=f"ds{seed}", videos=videos, feature_kind="synthetic",
                   extra={"note": 1})


def datasets_equal(a, b):
    assert a.name == b.name and a.feature_kind == b.feature_kind
    assert a.extra == b.extra
    assert len(a.videos) == len(b.videos)
    for va, vb in zip(a.videos, b.videos):
        assert va.id == vb.id and va.fps == vb.fps
        assert va.features.dtype == vb.features.dtype
        assert np.array_equal(va.features, vb.features)
        assert np.array_equal(va.gt_scores, vb.gt_scores)
        if va.picks is None:
            assert vb.picks is None
        else:
            assert np.array_equal(va.picks, vb.picks)
        if va.user_annotations is None:
            assert vb.user_annotations is None
        else:
            for x, y in zip(va.user_annotations, vb.user_annotations):
                assert x.dtype == y.dtype
                assert np.array_equal(x, y)


def test_record_and_dataset_validation():
    with pytest.raises(ValueError):
        VideoRecord("x", np.zeros((3, 2), np.float32), np.zeros(4, np.float32))
    with pytest.raises(ValueError):
        VideoRecord("x", np.zeros((3, 2), np.float32),
                    np.array([0.0, 0.5, 1.5], np.float32))
    with pytest.raises(ValueError):
        VideoRecord("x", np.zeros((3, 2), np.float32), np.zeros(3, np.float32), fps=0)
    v = VideoRecord("x", np.zeros((3, 2), np.float32), np.zeros(3, np.float32))
    with pytest.raises(ValueError):
        Dataset("d", [v, v])  # duplicate ids
    w = VideoRecord("y", np.zeros((3, 4), np.float32), np.zeros(3, np.float32))
    with pytest.raises(ValueError):
        Dataset("d", [v, w])  # mixed dims
    with pytest.raises(ValueError):
        Dataset("d", [v], feature_kind="rgb")


def test_save_load_round_trip(tmp_path):
    for seed in (1, 2, 3):
        ds = random_dataset(seed)
        p = str(tmp_path / f"d{seed}.mlvs")
        save(ds, p)
        datasets_equal(ds, load(p))


def test_save_is_byte_deterministic(tmp_path):
    ds = random_dataset(7)
    p1, p2 = str(tmp_path / "a.mlvs"), str(tmp_path / "b.mlvs")
    save(ds, p1)
    save(ds, p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_corruption_diagnostics(tmp_path):
    ds = random_dataset(4, with_annotations=False)
    p = str(tmp_path / "d.mlvs")
    save(ds, p)
    raw = open(p, "rb").read()

    def rewrite(b):
        q = str(tmp_path / "bad.mlvs")
        open(q, "wb").write(b)
        return q

    with pytest.raises(ContainerError, match="bad magic"):
        load(rewrite(b"XXXX" + raw[4:]))
    with pytest.raises(ContainerError, match="version"):
        load(rewrite(MAGIC + struct.pack("<I", 99) + raw[8:]))
    with pytest.raises(ContainerError, match="truncated header"):
        load(rewrite(raw[:10]))
    with pytest.raises(ContainerError, match="truncated metadata"):
        load(rewrite(raw[:8] + struct.pack("<Q", 10 ** 9) + raw[16:]))
    with pytest.raises(ContainerError, match="truncated blob"):
        load(rewrite(raw[:-20]))
    with pytest.raises(ContainerError, match="corrupt metadata"):
        (meta_len,) = struct.unpack("<Q", raw[8:16])
        load(rewrite(raw[:16] + b"{" * meta_len + raw[16 + meta_len:]))


def test_shape_mismatch_diagnostic(tmp_path):
    # Metadata claims one more row than the features blob holds.
    ds = random_dataset(5, n_videos=1, with_annotations=False)
    p = str(tmp_path / "d.mlvs")
    save(ds, p)
    raw = open(p, "rb").read()
    (meta_len,) = struct.unpack("<Q", raw[8:16])
    meta = raw[16:16 + meta_len].decode()
    T = ds.videos[0].n_frames
    bad_meta = meta.replace(f'"T":{T}', f'"T":{T + 1}').replace(
        f'"shape":[{T},5]', f'"shape":[{T + 1},5]', 1).encode()
    q = str(tmp_path / "bad.mlvs")
    open(q, "wb").write(raw[:8] + struct.pack("<Q", len(bad_meta)) + bad_meta
                        + raw[16 + meta_len:])
    with pytest.raises(ContainerError, match="shape mismatch|truncated blob"):
        load(q)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    cfg = LearnerConfig(input_dim=6, lstm_hidden=3, mlp_hidden=4)
    params = init_params(cfg, seed=9)
    # Give parameters non-trivial bit patterns.
    rng = np.random.default_rng(10)
    params = {k: Tensor(v.data + rng.normal(size=v.shape)) for k, v in params.items()}
    p = str(tmp_path / "ck.mlvs")
    save_checkpoint(p, cfg, params, extra={"alpha": 1e-4})
    cfg2, params2, extra = load_checkpoint(p)
    assert cfg2 == cfg
    assert extra == {"alpha": 1e-4}
    assert list(params2) == list(params)
    for k in params:
        assert params2[k].data.dtype == np.float64
        assert np.array_equal(params2[k].data, params[k].data)
        assert params2[k].data.tobytes() == params[k].data.tobytes()


def test_checkpoint_kind_and_config_mismatch(tmp_path):
    ds = random_dataset(6)
    p = str(tmp_path / "d.mlvs")
    save(ds, p)
    with pytest.raises(ContainerError, match="expected kind 'checkpoint'"):
        load_checkpoint(p)
    cfg = LearnerConfig(input_dim=4, lstm_hidden=2, mlp_hidden=2)
    q = str(tmp_path / "ck.mlvs")
    save_checkpoint(q, cfg, init_params(cfg, 0))
    with pytest.raises(ContainerError, match="expected kind 'dataset'"):
        load(q)


def test_gen_synthetic_determinism_and_ranges():
    spec = SyntheticSpec(num_videos=5, t_range=(10, 30), input_dim=6,
                         cp_range=(1, 3), noise=0.1, seed=11)
    d1, d2 = gen_synthetic(spec), gen_synthetic(spec)
    datasets_equal(d1, d2)
    d3 = gen_synthetic(SyntheticSpec(num_videos=5, t_range=(10, 30), input_dim=6,
                                     cp_range=(1, 3), noise=0.1, seed=12))
    assert not np.array_equal(d1.videos[0].features, d3.videos[0].features)
    for v in d1.videos:
        assert 10 <= v.n_frames <= 30
        assert np.all(v.gt_scores > 0) and np.all(v.gt_scores < 1)
    assert "gen_w" in d1.extra


def test_gen_synthetic_scoring_seed_shares_the_rule_across_datasets():
    base = dict(num_videos=3, t_range=(10, 20), input_dim=5, noise=0.1)
    d1 = gen_synthetic(SyntheticSpec(**base, seed=1, name="a", scoring_seed=40))
    d2 = gen_synthetic(SyntheticSpec(**base, seed=2, name="b", scoring_seed=40))
    # Different videos, one hidden scoring rule.
    assert not np.array_equal(d1.videos[0].features, d2.videos[0].features)
    assert d1.extra["gen_w"] == d2.extra["gen_w"]
    assert d1.extra["gen_b"] == d2.extra["gen_b"]
    # Without the shared rule the weights differ per seed.
    d3 = gen_synthetic(SyntheticSpec(**base, seed=1, name="a"))
    d4 = gen_synthetic(SyntheticSpec(**base, seed=2, name="b"))
    assert d3.extra["gen_w"] != d4.extra["gen_w"]
    # The override leaves the video stream untouched.
    np.testing.assert_array_equal(d1.videos[0].features, d3.videos[0].features)
    # And the stored scores still come from the stored weights.
    v = d2.videos[0]
    want = synthetic_scores(v.features, d2.extra["gen_w"], d2.extra["gen_b"])
    np.testing.assert_array_equal(v.gt_scores, want.astype(np.float32))


def test_gen_synthetic_scores_are_function_of_feature_window():
    # Same feature window (sigma=0 piecewise-constant interior) => same score.
    spec = SyntheticSpec(num_videos=2, t_range=(12, 12), input_dim=4,
                         cp_range=(0, 0), noise=0.0, seed=13)
    ds = gen_synthetic(spec)
    w, b = ds.extra["gen_w"], ds.extra["gen_b"]
    v = ds.videos[0]
    # Interior frames of a constant video share their whole window.
    assert v.gt_scores[3] == v.gt_scores[7]
    # The exposed rule reproduces the stored scores for both videos.
    for vid in ds.videos:
        want = synthetic_scores(vid.features.astype(np.float64), w, b)
        np.testing.assert_allclose(vid.gt_scores, want.astype(np.float32),
                                   rtol=0, atol=0)
    # Two different videos evaluated on the SAME features agree exactly.
    np.testing.assert_array_equal(
        synthetic_scores(v.features, w, b), synthetic_scores(v.features.copy(), w, b))


def test_gen_synthetic_smoothing_is_three_frame_mean():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(7, 3))
    w, b = rng.normal(size=3), 0.2
    got = synthetic_scores(x, w, b)
    s = 1 / (1 + np.exp(-np.clip(x @ w + b, -12, 12)))
    want = np.array([s[max(0, t - 1): t + 2].mean() for t in range(7)])
    np.testing.assert_allclose(got, want, rtol=1e-15)


def test_synthetic_family_is_linear_probe_learnable():
    # One low-noise video; plain SGD on the tiny probe must fit it well.
    spec = SyntheticSpec(num_videos=1, t_range=(60, 60), input_dim=5,
                         cp_range=(2, 2), noise=0.0, seed=15)
    video = gen_synthetic(spec).videos[0]
    x = video.features.astype(np.float64)
    target = Tensor(video.gt_scores.astype(np.float64))

    # The L1 sign gradient needs a decaying rate to settle instead of cycling.
    w, b = Tensor(np.zeros(5)), Tensor(0.0)
    loss_val = None
    for k in range(1500):
        lr = 2.0 / (1 + 0.01 * k)
        with Graph():
            wl, bl = w.detach(), b.detach()
            loss = gc.mean_abs_error(linear_probe_forward(wl, bl, x), target)
            gw, gb = backward(loss, [wl, bl])
        loss_val = float(loss.data)
        w = Tensor(w.data - lr * gw.data)
        b = Tensor(b.data - lr * gb.data)
    assert loss_val < 0.05, f"final L1 loss {loss_val:.4f}"


def test_split_transfer_arithmetic_and_disjointness():
    specs = [SyntheticSpec(num_videos=10, t_range=(5, 8), input_dim=3,
                           seed=s, name=f"d{s}") for s in (20, 21, 22)]
    datasets = [gen_synthetic(s) for s in specs]
    split = split_transfer(datasets, test_name="d21", val_fraction=0.2, seed=5)
    assert len(split.train) == 16 and len(split.val) == 4 and len(split.test) == 10

    ids = lambda tasks: {t.video.id for t in tasks}
    assert not ids(split.train) & ids(split.val)
    assert not ids(split.train) & ids(split.test)
    assert not ids(split.val) & ids(split.test)
    assert ids(split.test) == {v.id for v in datasets[1].videos}
    union = ids(split.train) | ids(split.val) | ids(split.test)
    assert union == {v.id for d in datasets for v in d.videos}


def test_split_transfer_zero_val_fraction_and_errors():
    datasets = [gen_synthetic(SyntheticSpec(num_videos=4, t_range=(5, 6),
                                            input_dim=3, seed=s, name=f"d{s}"))
                for s in (30, 31)]
    split = split_transfer(datasets, test_name="d31", val_fraction=0.0, seed=0)
    assert len(split.train) == 4 and len(split.val) == 0
    with pytest.raises(ValueError):
        split_transfer(datasets, test_name="nope")
    with pytest.raises(ValueError):
        split_transfer(datasets[:1], test_name="d30")
    with pytest.raises(ValueError):
        split_transfer(datasets, test_name="d30", val_fraction=1.0)


def test_split_transfer_determinism():
    datasets = [gen_synthetic(SyntheticSpec(num_videos=6, t_range=(5, 6),
                                            input_dim=3, seed=s, name=f"d{s}"))
                for s in (40, 41, 42)]
    s1 = split_transfer(datasets, "d40", seed=9)
    s2 = split_transfer(datasets, "d40", seed=9)
    assert [t.video.id for t in s1.train] == [t.video.id for t in s2.train]
    assert [t.video.id for t in s1.val] == [t.video.id for t in s2.val]


def test_subsample_stride_and_identity():
    rng = np.random.default_rng(16)
    T = 90
    v = VideoRecord("v", rng.normal(size=(T, 3)).astype(np.float32),
                    rng.uniform(size=T).astype(np.float32), fps=30.0,
                    user_annotations=[rng.uniform(size=T).astype(np.float32)])
    out = subsample(v, target_fps=2.0)
    assert np.array_equal(out.picks, np.arange(0, 90, 15))
    assert out.n_frames == 6 and out.fps == 2.0
    assert np.array_equal(out.features, v.features[::15])
    assert np.array_equal(out.gt_scores, v.gt_scores[::15])
    assert np.array_equal(out.user_annotations[0], v.user_annotations[0][::15])

    same = subsample(v, target_fps=30.0)
    assert np.array_equal(same.features, v.features)
    assert np.array_equal(same.picks, np.arange(T))

    with pytest.raises(ValueError):
        subsample(v, target_fps=60.0)


def test_subsample_long_video_cap():
    T = 324_000  # three hours at 30 fps
    v = VideoRecord("long", np.zeros((T, 2), np.float32),
                    np.zeros(T, np.float32), fps=30.0)
    out = subsample(v, target_fps=2.0)
    assert out.n_frames <= 1500
    # Stride is uniform: consecutive picks differ by a constant.
    d = np.diff(out.picks)
    assert len(set(d.tolist())) == 1
    assert out.picks[0] == 0


def test_subsample_composes_picks():
    rng = np.random.default_rng(17)
    T = 120
    v = VideoRecord("v", rng.normal(size=(T, 2)).astype(np.float32),
                    rng.uniform(size=T).astype(np.float32), fps=24.0)
    once = subsample(v, target_fps=12.0)   # every 2nd
    twice = subsample(once, target_fps=4.0)  # then every 3rd
    assert np.array_equal(twice.picks, np.arange(0, T, 6))


def test_tasks_from_dataset():
    ds = random_dataset(50)
    tasks = tasks_from_dataset(ds)
    assert len(tasks) == len(ds.videos)
    for t, v in zip(tasks, ds.videos):
        assert t.video is v
        assert t.target.dtype == np.float64
        assert np.array_equal(t.target, v.gt_scores.astype(np.float64))
