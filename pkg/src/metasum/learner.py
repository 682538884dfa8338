"""Bidirectional-LSTM frame scorer.

Two independent LSTM passes (left-to-right and right-to-left, no interaction
between them) feed a per-frame MLP together with the raw frame feature; the
MLP emits one selection probability per frame.  All arithmetic goes through
:mod:`metasum.gradcore`, so losses built on `forward` are differentiable to
second order, which the meta update needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import ShapeError, Tensor

__all__ = ["LearnerConfig", "init_params", "forward", "linear_probe_forward",
           "PARAM_ORDER", "param_shapes"]


@dataclass(frozen=True)
class LearnerConfig:
    input_dim: int
    lstm_hidden: int = 256
    mlp_hidden: int = 256

    def __post_init__(self):
        for name in ("input_dim", "lstm_hidden", "mlp_hidden"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"LearnerConfig.{name} must be a positive int, got {v!r}")


# Stable enumeration order: gradient maps, serialization and update loops all
# iterate parameters in exactly this order.
PARAM_ORDER = (
    "fwd.w_x", "fwd.w_h", "fwd.b",
    "bwd.w_x", "bwd.w_h", "bwd.b",
    "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
)


def param_shapes(config: LearnerConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of all named parameters; gates are packed [input|forget|cell|output]."""
    d, h, m = config.input_dim, config.lstm_hidden, config.mlp_hidden
    lstm = {"w_x": (4 * h, d), "w_h": (4 * h, h), "b": (4 * h,)}
    shapes = {f"{side}.{k}": v for side in ("fwd", "bwd") for k, v in lstm.items()}
    shapes["mlp.w1"] = (m, 2 * h + d)
    shapes["mlp.b1"] = (m,)
    shapes["mlp.w2"] = (1, m)
    shapes["mlp.b2"] = (1,)
    return shapes


def init_params(config: LearnerConfig, seed: int) -> dict[str, Tensor]:
    """Fresh parameters: weights uniform in [-0.05, 0.05], biases zero.

    The forget-gate slice of each LSTM bias starts at 1.0 so early training
    does not wipe the cell state.  Deterministic per (config, seed).
    """
    rng = np.random.default_rng(seed)
    h = config.lstm_hidden
    params: dict[str, Tensor] = {}
    for name in PARAM_ORDER:
        shape = param_shapes(config)[name]
        if name.endswith(".b") or name.endswith("b1") or name.endswith("b2"):
            arr = np.zeros(shape, dtype=gc.default_dtype())
            if name.endswith(".b"):
                arr[h:2 * h] = 1.0
        else:
            arr = rng.uniform(-0.05, 0.05, size=shape).astype(gc.default_dtype())
        params[name] = Tensor(arr)
    return params


def _lstm_pass(params: dict[str, Tensor], prefix: str, xproj: Tensor, order) -> list:
    """One directional LSTM scan; returns hidden states indexed by frame."""
    w_h = params[f"{prefix}.w_h"]
    b = params[f"{prefix}.b"]
    hsize = w_h.shape[1]
    h = Tensor(np.zeros(hsize, dtype=gc.default_dtype()))
    c = Tensor(np.zeros(hsize, dtype=gc.default_dtype()))
    states: dict[int, Tensor] = {}
    for t in order:
        gates = gc.add(gc.add(gc.select_row(xproj, t), gc.matvec(w_h, h)), b)
        i = gc.sigmoid(gc.slice1d(gates, 0, hsize))
        f = gc.sigmoid(gc.slice1d(gates, hsize, 2 * hsize))
        g = gc.tanh(gc.slice1d(gates, 2 * hsize, 3 * hsize))
        o = gc.sigmoid(gc.slice1d(gates, 3 * hsize, 4 * hsize))
        c = gc.add(gc.mul(f, c), gc.mul(i, g))
        h = gc.mul(o, gc.tanh(c))
        states[t] = h
    return [states[t] for t in range(len(states))]


def forward(params: dict[str, Tensor], features) -> Tensor:
    """Per-frame selection probabilities for a T x D feature matrix.

    Output is a length-T vector with every entry strictly inside (0, 1);
    each entry depends on the whole sequence through the two LSTM passes.
    """
    feats = features if isinstance(features, Tensor) else Tensor(features)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ShapeError(f"forward: expected a T x D matrix with T >= 1, got {feats.shape}")
    din = params["fwd.w_x"].shape[1]
    if feats.shape[1] != din:
        raise ShapeError(f"forward: feature dim {feats.shape[1]} != model input dim {din}")
    T = feats.shape[0]

    # Input projections for all frames at once, one matmul per direction.
    xproj_f = gc.matmul(feats, gc.transpose(params["fwd.w_x"]))
    xproj_b = gc.matmul(feats, gc.transpose(params["bwd.w_x"]))
    h_fwd = _lstm_pass(params, "fwd", xproj_f, range(T))
    h_bwd = _lstm_pass(params, "bwd", xproj_b, range(T - 1, -1, -1))

    w1, b1 = params["mlp.w1"], params["mlp.b1"]
    w2, b2 = params["mlp.w2"], params["mlp.b2"]
    scores = []
    for t in range(T):
        z = gc.concat([h_fwd[t], h_bwd[t], gc.select_row(feats, t)])
        hidden = gc.sigmoid(gc.add(gc.matvec(w1, z), b1))
        scores.append(gc.sigmoid(gc.add(gc.matvec(w2, hidden), b2)))
    return gc.concat(scores)


def linear_probe_forward(w: Tensor, b: Tensor, features) -> Tensor:
    """sigmoid(w . x_t + b) per frame; a tiny stand-in scorer for analytic tests."""
    feats = features if isinstance(features, Tensor) else Tensor(features)
    if feats.ndim != 2:
        raise ShapeError(f"linear_probe_forward: expected T x D matrix, got {feats.shape}")
    w = w if isinstance(w, Tensor) else Tensor(w)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if w.ndim != 1 or w.shape[0] != feats.shape[1]:
        raise ShapeError(f"linear_probe_forward: weight {w.shape} vs features {feats.shape}")
    return gc.sigmoid(gc.add(gc.matvec(feats, w), b))
