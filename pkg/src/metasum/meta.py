"""Two-stage meta training over sampled task pairs.

Each iteration samples two distinct training tasks.  Stage one adapts the
current parameters to the first task by ``n`` recorded gradient steps; stage
two takes one meta step on the second task's loss evaluated at the adapted
parameters, differentiating through the adaptation itself (two-fold
backpropagation).  The single-stage and simultaneous variants exist as
comparison modes.

Early stopping watches the mean validation loss: training ends when it has
not improved for ``patience`` iterations (checked every ``eval_interval``
iterations) or when ``max_iters`` is reached, and the best-validation
parameters are returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from .gradcore import Graph, NumericalError, Tensor, backward, no_grad
from .learner import LearnerConfig, forward, init_params

__all__ = [
    "HyperParams",
    "Task",
    "TaskSplit",
    "TrainReport",
    "task_loss",
    "inner_adapt",
    "meta_step",
    "sample_pair",
    "validate",
    "train",
    "report_dict",
    "MODES",
    "INNER_GRAD_MODES",
]

MODES = ("two_stage_successive", "one_stage", "simultaneous")
INNER_GRAD_MODES = ("standard", "literal_paper")


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 1e-4
    beta: float = 1e-3
    n: int = 1
    max_iters: int = 30000
    patience: int = 800
    mode: str = "two_stage_successive"
    inner_grad: str = "standard"
    eval_interval: int = 10
    # Memory ceiling on the recorded inner trajectory.
    inner_cap: int = 2

    def __post_init__(self):
        # alpha == 0 is allowed: it turns the inner adaptation into the
        # identity, which the collapse checks rely on.
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.n > self.inner_cap:
            raise ValueError(f"n={self.n} exceeds inner step ceiling {self.inner_cap}")
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.max_iters > 0 and self.patience > self.max_iters:
            raise ValueError(f"patience {self.patience} exceeds max_iters {self.max_iters}")
        if self.eval_interval < 1:
            raise ValueError(f"eval_interval must be >= 1, got {self.eval_interval}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.inner_grad not in INNER_GRAD_MODES:
            raise ValueError(
                f"inner_grad must be one of {INNER_GRAD_MODES}, got {self.inner_grad!r}")


@dataclass
class Task:
    """One video-summarization task: a video plus its target frame scores.

    ``video`` is any object with a ``features`` (T x D) attribute; probe
    losses used in tests may ignore it entirely.
    """

    video: object
    target: np.ndarray

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.video is not None and hasattr(self.video, "features"):
            if len(self.target) != len(self.video.features):
                raise ValueError(
                    f"target length {len(self.target)} != frame count "
                    f"{len(self.video.features)}")
        if self.target.size and (self.target.min() < 0 or self.target.max() > 1):
            raise ValueError("target values must lie in [0, 1]")


@dataclass
class TaskSplit:
    train: list
    val: list
    test: list = field(default_factory=list)


@dataclass
class TrainReport:
    best_params: dict
    best_val_loss: float
    iterations_run: int
    val_loss_history: list


def task_loss(params: dict, task: Task) -> Tensor:
    """Mean absolute error between predicted and target frame scores."""
    return gc.mean_abs_error(forward(params, task.video.features), Tensor(task.target))


def _check_finite(grads: dict, where: str) -> None:
    for name, g in grads.items():
        if not np.isfinite(g.data).all():
            raise NumericalError(f"non-finite gradient for '{name}' during {where}")


def inner_adapt(theta: dict, task: Task, alpha: float, n: int,
                inner_grad: str = "standard", loss_fn=task_loss,
                create_graph: bool = True, losses_out: list | None = None) -> dict:
    """n recorded gradient steps on the task loss, starting from theta.

    The trajectory stays on the active graph (one is opened if needed), so a
    loss built on the result differentiates back to the input parameters.
    ``standard`` takes each step's gradient at the current iterate;
    ``literal_paper`` takes the gradient of the current iterate's loss with
    respect to the ORIGINAL theta for steps j >= 2.
    """
    if n < 1:
        raise ValueError(f"inner_adapt: n must be >= 1, got {n}")
    if inner_grad not in INNER_GRAD_MODES:
        raise ValueError(f"inner_adapt: unknown inner_grad {inner_grad!r}")

    own_graph = gc.active_graph() is None and create_graph
    ctx = Graph() if own_graph else _null_ctx()
    with ctx:
        current = dict(theta)
        for j in range(1, n + 1):
            loss = loss_fn(current, task)
            if not np.isfinite(loss.data).all():
                raise NumericalError(f"non-finite inner loss at step {j}")
            if losses_out is not None:
                losses_out.append(float(loss.data))
            wrt = theta if (inner_grad == "literal_paper" and j >= 2) else current
            grads = backward(loss, wrt, create_graph=create_graph)
            _check_finite(grads, f"inner step {j}")
            current = {k: gc.sub(current[k], gc.scale(grads[k], alpha)) for k in current}
    return current


class _null_ctx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def meta_step(theta: dict, tau1: Task, tau2: Task, hp: HyperParams,
              loss_fn=task_loss) -> tuple[dict, dict]:
    """One parameter update from a task pair; returns (new params, diagnostics).

    two_stage_successive: adapt on tau1, then descend the tau2 loss of the
    adapted parameters with rate beta, gradient taken THROUGH the adaptation.
    one_stage: the adaptation alone. simultaneous: one step at rate alpha on
    the sum of both losses at the current parameters.
    """
    if tau1 is tau2:
        raise ValueError("meta_step: tau1 and tau2 must be distinct tasks")
    diag: dict[str, float] = {}

    if hp.mode == "two_stage_successive":
        with Graph():
            live = {k: v.detach() for k, v in theta.items()}
            stage1 = []
            adapted = inner_adapt(live, tau1, hp.alpha, hp.n, hp.inner_grad,
                                  loss_fn, create_graph=True, losses_out=stage1)
            outer = loss_fn(adapted, tau2)
            if not np.isfinite(outer.data).all():
                raise NumericalError("non-finite outer loss in meta step")
            grads = backward(outer, live)
            _check_finite(grads, "meta step")
        new = {k: Tensor(theta[k].data - hp.beta * grads[k].data) for k in theta}
        diag["stage1_loss"] = stage1[0]
        diag["stage2_loss"] = float(outer.data)
        return new, diag

    if hp.mode == "one_stage":
        with Graph():
            live = {k: v.detach() for k, v in theta.items()}
            stage1 = []
            adapted = inner_adapt(live, tau1, hp.alpha, hp.n, hp.inner_grad,
                                  loss_fn, create_graph=False, losses_out=stage1)
        new = {k: v.detach() for k, v in adapted.items()}
        diag["stage1_loss"] = stage1[0]
        with no_grad():
            diag["stage2_loss"] = float(loss_fn(new, tau2).data)
        return new, diag

    # simultaneous: both losses at the current parameters, one step at alpha.
    with Graph():
        live = {k: v.detach() for k, v in theta.items()}
        l1 = loss_fn(live, tau1)
        l2 = loss_fn(live, tau2)
        total = gc.add(l1, l2)
        if not np.isfinite(total.data).all():
            raise NumericalError("non-finite loss in simultaneous step")
        grads = backward(total, live)
        _check_finite(grads, "simultaneous step")
    new = {k: Tensor(theta[k].data - hp.alpha * grads[k].data) for k in theta}
    diag["stage1_loss"] = float(l1.data)
    diag["stage2_loss"] = float(l2.data)
    return new, diag


def sample_pair(train_tasks: list, rng: np.random.Generator) -> tuple[Task, Task]:
    """Two distinct tasks, uniform without replacement, deterministic per rng."""
    if len(train_tasks) < 2:
        raise ValueError(f"need at least 2 training tasks, got {len(train_tasks)}")
    i, j = rng.choice(len(train_tasks), size=2, replace=False)
    return train_tasks[int(i)], train_tasks[int(j)]


def validate(theta: dict, val_tasks: list, loss_fn=task_loss) -> float:
    """Mean per-task loss with recording disabled."""
    if not val_tasks:
        raise ValueError("validate: empty task list")
    with no_grad():
        total = 0.0
        for task in val_tasks:
            total += float(loss_fn(theta, task).data)
    return total / len(val_tasks)


def _snapshot(theta: dict) -> dict:
    return {k: v.detach() for k, v in theta.items()}


def train(config: LearnerConfig, split: TaskSplit, hp: HyperParams,
          seed: int) -> TrainReport:
    """Full meta-training loop with early stopping on validation loss.

    Deterministic per (config, split, hp, seed): pair sampling uses its own
    seeded stream, parameters come from ``init_params(config, seed)``.
    """
    if len(split.train) < 2:
        raise ValueError("train: need at least 2 training tasks")
    if not split.val:
        raise ValueError("train: empty validation set")

    theta = init_params(config, seed)
    pair_rng = np.random.default_rng([seed, 1])

    best_val = validate(theta, split.val)
    best_params = _snapshot(theta)
    history: list[tuple[int, float]] = [(0, best_val)]
    last_improve = 0

    it = 0
    while it < hp.max_iters:
        it += 1
        tau1, tau2 = sample_pair(split.train, pair_rng)
        theta, _ = meta_step(theta, tau1, tau2, hp)
        if it % hp.eval_interval == 0 or it == hp.max_iters:
            v = validate(theta, split.val)
            history.append((it, v))
            if v < best_val:
                best_val = v
                best_params = _snapshot(theta)
                last_improve = it
            elif it - last_improve >= hp.patience:
                break

    return TrainReport(best_params=best_params, best_val_loss=best_val,
                       iterations_run=it, val_loss_history=history)


def report_dict(report: TrainReport, config: LearnerConfig, hp: HyperParams,
                seed: int) -> dict:
    """JSON-ready summary of a training run (no parameter blobs)."""
    return {
        "config": {"input_dim": config.input_dim, "lstm_hidden": config.lstm_hidden,
                   "mlp_hidden": config.mlp_hidden},
        "hyperparams": {"alpha": hp.alpha, "beta": hp.beta, "n": hp.n,
                        "max_iters": hp.max_iters, "patience": hp.patience,
                        "mode": hp.mode, "inner_grad": hp.inner_grad,
                        "eval_interval": hp.eval_interval},
        "seed": seed,
        "best_val_loss": report.best_val_loss,
        "iterations_run": report.iterations_run,
        "val_loss_history": [[it, v] for it, v in report.val_loss_history],
    }
