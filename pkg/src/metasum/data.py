"""Dataset container, synthetic task generator, transfer splits, subsampling.

The on-disk container is deliberately primitive so any language can parse it:

    bytes 0-3   magic "MLVS"
    bytes 4-7   format version, u32 little-endian
    bytes 8-15  metadata length in bytes, u64 little-endian
    ...         UTF-8 JSON metadata
    ...         raw little-endian row-major blobs, byte offsets in metadata

Dataset tensors are 32-bit floats; checkpoints store 64-bit parameters, so
every blob descriptor carries its own dtype.  Writes are atomic (temp file
plus rename) and byte-deterministic for identical inputs.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .gradcore import Tensor
from .learner import PARAM_ORDER, LearnerConfig, param_shapes
from .meta import Task, TaskSplit

__all__ = [
    "ContainerError",
    "VideoRecord",
    "Dataset",
    "SyntheticSpec",
    "save",
    "load",
    "save_checkpoint",
    "load_checkpoint",
    "gen_synthetic",
    "synthetic_scores",
    "split_transfer",
    "subsample",
    "tasks_from_dataset",
    "MAX_FRAMES_DEFAULT",
]

MAGIC = b"MLVS"
VERSION = 1
FEATURE_KINDS = ("deep", "shallow", "synthetic")
MAX_FRAMES_DEFAULT = 1500


class ContainerError(ValueError):
    """Malformed container file; message states which contract broke."""


@dataclass
class VideoRecord:
    """One video: features, target scores, optional annotations and picks."""

    id: str
    features: np.ndarray          # (T, D) float32
    gt_scores: np.ndarray         # (T,) float32 in [0, 1]
    fps: float = 2.0
    user_annotations: list | None = None   # float32 score vectors or bool masks
    picks: np.ndarray | None = None        # (T,) original frame indices

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.gt_scores = np.ascontiguousarray(self.gt_scores, dtype=np.float32)
        if self.features.ndim != 2:
            raise ValueError(f"{self.id}: features must be T x D, got {self.features.shape}")
        T = self.features.shape[0]
        if self.gt_scores.shape != (T,):
            raise ValueError(
                f"{self.id}: gt_scores shape {self.gt_scores.shape} != ({T},)")
        if T and (self.gt_scores.min() < 0 or self.gt_scores.max() > 1):
            raise ValueError(f"{self.id}: gt_scores outside [0, 1]")
        if self.fps <= 0:
            raise ValueError(f"{self.id}: fps must be positive, got {self.fps}")
        if self.user_annotations is not None:
            norm = []
            for k, ann in enumerate(self.user_annotations):
                a = np.asarray(ann)
                a = a.astype(bool) if a.dtype == bool else np.ascontiguousarray(a, np.float32)
                if a.shape != (T,):
                    raise ValueError(f"{self.id}: annotation {k} shape {a.shape} != ({T},)")
                norm.append(a)
            self.user_annotations = norm
        if self.picks is not None:
            self.picks = np.ascontiguousarray(self.picks, dtype=np.int64)
            if self.picks.shape != (T,):
                raise ValueError(f"{self.id}: picks shape {self.picks.shape} != ({T},)")

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Dataset:
    name: str
    videos: list
    feature_kind: str = "synthetic"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.feature_kind not in FEATURE_KINDS:
            raise ValueError(f"feature_kind must be one of {FEATURE_KINDS}")
        ids = [v.id for v in self.videos]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate video ids in dataset {self.name!r}")
        dims = {v.features.shape[1] for v in self.videos}
        if len(dims) > 1:
            raise ValueError(f"mixed feature dims {sorted(dims)} in dataset {self.name!r}")

    def video_by_id(self, vid: str) -> VideoRecord:
        for v in self.videos:
            if v.id == vid:
                return v
        raise KeyError(f"no video {vid!r} in dataset {self.name!r}")


# ---------------------------------------------------------------------------
# low-level container IO


def _atomic_write(path: str, payload: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".mlvs-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _BlobWriter:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.offset = 0

    def put(self, arr: np.ndarray, dtype: str) -> dict:
        raw = np.ascontiguousarray(arr).astype(dtype, copy=False).tobytes()
        ref = {"offset": self.offset, "nbytes": len(raw), "dtype": dtype,
               "shape": list(arr.shape)}
        self.chunks.append(raw)
        self.offset += len(raw)
        return ref


def _write_container(path: str, meta: dict, blobs: _BlobWriter) -> None:
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join([MAGIC, struct.pack("<I", VERSION),
                        struct.pack("<Q", len(meta_bytes)), meta_bytes,
                        *blobs.chunks])
    _atomic_write(path, payload)


def _read_container(path: str) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise ContainerError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    (meta_len,) = struct.unpack("<Q", raw[8:16])
    if 16 + meta_len > len(raw):
        raise ContainerError(f"{path}: truncated metadata "
                             f"(claims {meta_len} bytes, file has {len(raw) - 16})")
    try:
        meta = json.loads(raw[16:16 + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"{path}: corrupt metadata: {e}") from None
    return meta, raw[16 + meta_len:]


_ALLOWED_DTYPES = {"<f4", "<f8", "<i8", "|b1"}


def _get_blob(blob_bytes: bytes, ref: dict, what: str) -> np.ndarray:
    dtype = ref["dtype"]
    if dtype not in _ALLOWED_DTYPES:
        raise ContainerError(f"{what}: unknown blob dtype {dtype!r}")
    off, nbytes = int(ref["offset"]), int(ref["nbytes"])
    if off < 0 or off + nbytes > len(blob_bytes):
        raise ContainerError(
            f"{what}: truncated blob (offset {off} + {nbytes} bytes exceeds "
            f"blob section of {len(blob_bytes)} bytes)")
    shape = tuple(int(s) for s in ref["shape"])
    expect = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
    if expect != nbytes:
        raise ContainerError(
            f"{what}: shape mismatch (shape {shape} needs {expect} bytes, "
            f"blob holds {nbytes})")
    return np.frombuffer(blob_bytes, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)),
                         offset=off).reshape(shape).copy()


# ---------------------------------------------------------------------------
# dataset save / load


def save(dataset: Dataset, path: str) -> None:
    blobs = _BlobWriter()
    videos_meta = []
    for v in dataset.videos:
        entry = {
            "id": v.id,
            "T": v.n_frames,
            "D": int(v.features.shape[1]),
            "fps": float(v.fps),
            "features": blobs.put(v.features, "<f4"),
            "gt_scores": blobs.put(v.gt_scores, "<f4"),
            "picks": blobs.put(v.picks, "<i8") if v.picks is not None else None,
            "annotations": None,
        }
        if v.user_annotations is not None:
            entry["annotations"] = [
                {"kind": "mask", "blob": blobs.put(a, "|b1")} if a.dtype == bool
                else {"kind": "scores", "blob": blobs.put(a, "<f4")}
                for a in v.user_annotations
            ]
        videos_meta.append(entry)
    meta = {"kind": "dataset", "name": dataset.name,
            "feature_kind": dataset.feature_kind, "extra": dataset.extra,
            "videos": videos_meta}
    _write_container(path, meta, blobs)


def load(path: str) -> Dataset:
    meta, blob_bytes = _read_container(path)
    if meta.get("kind") != "dataset":
        raise ContainerError(f"{path}: expected kind 'dataset', got {meta.get('kind')!r}")
    videos = []
    for vm in meta["videos"]:
        what = f"{path}:{vm.get('id', '?')}"
        feats = _get_blob(blob_bytes, vm["features"], what + ":features")
        gts = _get_blob(blob_bytes, vm["gt_scores"], what + ":gt_scores")
        if feats.shape != (int(vm["T"]), int(vm["D"])):
            raise ContainerError(
                f"{what}: metadata/blob inconsistency (T={vm['T']}, D={vm['D']} "
                f"vs features {feats.shape})")
        picks = (_get_blob(blob_bytes, vm["picks"], what + ":picks")
                 if vm.get("picks") else None)
        anns = None
        if vm.get("annotations") is not None:
            anns = [_get_blob(blob_bytes, a["blob"], what + f":annotation{k}")
                    for k, a in enumerate(vm["annotations"])]
        try:
            videos.append(VideoRecord(id=vm["id"], features=feats, gt_scores=gts,
                                      fps=float(vm["fps"]), user_annotations=anns,
                                      picks=picks))
        except ValueError as e:
            raise ContainerError(f"{what}: metadata inconsistency: {e}") from None
    try:
        return Dataset(name=meta["name"], videos=videos,
                       feature_kind=meta["feature_kind"],
                       extra=meta.get("extra", {}))
    except ValueError as e:
        raise ContainerError(f"{path}: metadata inconsistency: {e}") from None


# ---------------------------------------------------------------------------
# checkpoints (same container, 64-bit parameter blobs)


def save_checkpoint(path: str, config: LearnerConfig, params: dict,
                    extra: dict | None = None) -> None:
    blobs = _BlobWriter()
    entries = []
    for name in PARAM_ORDER:
        if name not in params:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        arr = params[name].data if isinstance(params[name], Tensor) else params[name]
        entries.append([name, blobs.put(np.asarray(arr, dtype=np.float64), "<f8")])
    meta = {"kind": "checkpoint",
            "config": {"input_dim": config.input_dim,
                       "lstm_hidden": config.lstm_hidden,
                       "mlp_hidden": config.mlp_hidden},
            "params": entries,
            "extra": extra or {}}
    _write_container(path, meta, blobs)


def load_checkpoint(path: str) -> tuple[LearnerConfig, dict, dict]:
    meta, blob_bytes = _read_container(path)
    if meta.get("kind") != "checkpoint":
        raise ContainerError(f"{path}: expected kind 'checkpoint', got {meta.get('kind')!r}")
    cfg = LearnerConfig(**{k: int(v) for k, v in meta["config"].items()})
    shapes = param_shapes(cfg)
    params = {}
    for name, ref in meta["params"]:
        arr = _get_blob(blob_bytes, ref, f"{path}:{name}")
        if arr.shape != shapes.get(name):
            raise ContainerError(
                f"{path}:{name}: shape {arr.shape} inconsistent with config "
                f"(expected {shapes.get(name)})")
        params[name] = Tensor(arr)
    if list(params) != list(PARAM_ORDER):
        raise ContainerError(f"{path}: parameter set incomplete or misordered")
    return cfg, params, meta.get("extra", {})


# ---------------------------------------------------------------------------
# synthetic task distribution


@dataclass(frozen=True)
class SyntheticSpec:
    num_videos: int
    t_range: tuple[int, int]
    input_dim: int
    cp_range: tuple[int, int] = (1, 4)
    noise: float = 0.1
    seed: int = 0
    name: str = "synthetic"
    # When set, the hidden scoring rule is drawn from this seed instead of
    # the main stream, so several datasets can share one scoring mechanism
    # (a transferable family) while their videos differ.
    scoring_seed: int | None = None

    def __post_init__(self):
        if self.num_videos < 1 or self.input_dim < 1:
            raise ValueError("num_videos and input_dim must be positive")
        lo, hi = self.t_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad t_range {self.t_range}")
        clo, chi = self.cp_range
        if not 0 <= clo <= chi:
            raise ValueError(f"bad cp_range {self.cp_range}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")


def synthetic_scores(features, w, b) -> np.ndarray:
    """The generator's frame-score rule: sigmoid(w.x + b), 3-frame smoothed.

    Purely a function of the features and shared weights, so equal feature
    windows always score equally.
    """
    x = np.asarray(features, dtype=np.float64)
    logits = x @ np.asarray(w, dtype=np.float64) + float(b)
    # Clip keeps scores strictly inside (0, 1) even after 32-bit rounding.
    s = 1.0 / (1.0 + np.exp(-np.clip(logits, -12.0, 12.0)))
    out = np.empty_like(s)
    for t in range(len(s)):
        out[t] = s[max(0, t - 1): t + 2].mean()
    return out


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Piecewise-constant latent videos scored by one hidden linear rule.

    All videos share the generator weights, so the tasks form one learnable
    family; segment structure gives the change-point stage something to find.
    """
    rng = np.random.default_rng(spec.seed)
    w = rng.normal(size=spec.input_dim)
    b = float(rng.normal())
    if spec.scoring_seed is not None:
        srng = np.random.default_rng([spec.scoring_seed, 101])
        w = srng.normal(size=spec.input_dim)
        b = float(srng.normal())
    videos = []
    for i in range(spec.num_videos):
        T = int(rng.integers(spec.t_range[0], spec.t_range[1] + 1))
        n_cp = min(int(rng.integers(spec.cp_range[0], spec.cp_range[1] + 1)), T - 1)
        cuts = np.sort(rng.choice(np.arange(1, T), size=n_cp, replace=False)) if n_cp else []
        bounds = [0, *map(int, cuts), T]
        latents = rng.normal(size=(len(bounds) - 1, spec.input_dim))
        x = np.empty((T, spec.input_dim))
        for s, (a, c) in enumerate(zip(bounds, bounds[1:])):
            x[a:c] = latents[s]
        x += spec.noise * rng.normal(size=x.shape)
        # Score the 32-bit features as stored, so gt is exactly reproducible
        # from the container contents.
        x = x.astype(np.float32)
        gt = synthetic_scores(x, w, b)
        videos.append(VideoRecord(id=f"{spec.name}-{i:03d}", features=x,
                                  gt_scores=gt, fps=2.0))
    return Dataset(name=spec.name, videos=videos, feature_kind="synthetic",
                   extra={"gen_w": [float(v) for v in w], "gen_b": b,
                          "noise": spec.noise, "seed": spec.seed})


# ---------------------------------------------------------------------------
# transfer splits and subsampling


def tasks_from_dataset(dataset: Dataset) -> list[Task]:
    return [Task(video=v, target=v.gt_scores.astype(np.float64))
            for v in dataset.videos]


def split_transfer(datasets: list[Dataset], test_name: str,
                   val_fraction: float = 0.2, seed: int = 0) -> TaskSplit:
    """Hold one dataset out for testing; shuffle the rest into train/val."""
    if len(datasets) < 2:
        raise ValueError("split_transfer: need at least 2 datasets")
    if not 0 <= val_fraction < 1:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")
    names = [d.name for d in datasets]
    if test_name not in names:
        raise ValueError(f"unknown test dataset {test_name!r}; have {names}")

    test_tasks, pool = [], []
    for d in datasets:
        if d.name == test_name:
            test_tasks.extend(tasks_from_dataset(d))
        else:
            pool.extend(tasks_from_dataset(d))
    order = np.random.default_rng(seed).permutation(len(pool))
    n_val = int(val_fraction * len(pool))
    val = [pool[i] for i in order[:n_val]]
    train = [pool[i] for i in order[n_val:]]
    return TaskSplit(train=train, val=val, test=test_tasks)


def subsample(video: VideoRecord, target_fps: float,
              max_frames: int = MAX_FRAMES_DEFAULT) -> VideoRecord:
    """Uniform stride selection down to target_fps, capped at max_frames.

    The stride grows past the fps ratio if needed to respect the cap; picks
    track original frame indices through repeated subsampling.
    """
    if target_fps <= 0 or target_fps > video.fps:
        raise ValueError(
            f"target_fps must be in (0, {video.fps}], got {target_fps}")
    if max_frames < 1:
        raise ValueError(f"max_frames must be >= 1, got {max_frames}")
    T = video.n_frames
    stride = max(1, int(round(video.fps / target_fps)))
    stride = max(stride, math.ceil(T / max_frames))
    sel = np.arange(0, T, stride)
    old_picks = video.picks if video.picks is not None else np.arange(T)
    anns = None
    if video.user_annotations is not None:
        anns = [a[sel] for a in video.user_annotations]
    return VideoRecord(id=video.id, features=video.features[sel],
                       gt_scores=video.gt_scores[sel],
                       fps=video.fps / stride,
                       user_annotations=anns, picks=old_picks[sel])
