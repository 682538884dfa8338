"""Operator CLI: gen / train / eval / summarize / sweep / gradcheck.

Every command is deterministic given its flags and seed.  Outputs are written
atomically; JSON is key-sorted so repeated runs are byte-identical.  Exit
codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys

import numpy as np

from . import gradcore as gc
from . import pipeline
from .data import (
    ContainerError,
    SyntheticSpec,
    _atomic_write,
    gen_synthetic,
    load,
    load_checkpoint,
    save,
    save_checkpoint,
    split_transfer,
)
from .evaluation import SWEEP_BETAS, sweep_stats
from .gradcore import Graph, NumericalError, Tensor, backward
from .learner import LearnerConfig, forward, init_params
from .meta import HyperParams, MODES, meta_step, report_dict, train, validate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_MODE_ALIASES = {"two_stage": "two_stage_successive", "two": "two_stage_successive",
                 "one": "one_stage", "simu": "simultaneous"}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _write_text(path: str, text: str) -> None:
    _atomic_write(path, text.encode())


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _norm_mode(value: str) -> str:
    v = value.replace("-", "_")
    v = _MODE_ALIASES.get(v, v)
    if v not in MODES:
        raise _UsageError(f"unknown mode {value!r}; choose from {', '.join(MODES)}")
    return v


def _floats(csv: str) -> list[float]:
    try:
        return [float(tok) for tok in csv.split(",") if tok.strip()]
    except ValueError:
        raise _UsageError(f"expected comma-separated numbers, got {csv!r}") from None


def cell_seed(seed: int, cell: int, repeat: int) -> int:
    """Derived per-cell training seed; independent of execution order."""
    return int(np.random.SeedSequence([seed, cell, repeat]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    spec = SyntheticSpec(num_videos=args.num_videos,
                         t_range=(args.t_min, args.t_max),
                         input_dim=args.dim,
                         cp_range=(args.cp_min, args.cp_max),
                         noise=args.noise, seed=args.seed, name=args.name,
                         scoring_seed=args.scoring_seed)
    ds = gen_synthetic(spec)
    ds.extra["spec"] = {"num_videos": spec.num_videos, "t_range": list(spec.t_range),
                        "input_dim": spec.input_dim, "cp_range": list(spec.cp_range),
                        "noise": spec.noise, "seed": spec.seed, "name": spec.name,
                        "scoring_seed": spec.scoring_seed}
    save(ds, args.out)
    print(f"wrote {args.out}: {len(ds.videos)} videos, D={spec.input_dim}")
    return EXIT_OK


def _load_datasets(paths: list[str]):
    datasets = [load(p) for p in paths]
    dims = {v.features.shape[1] for d in datasets for v in d.videos}
    if len(dims) != 1:
        raise ContainerError(f"datasets disagree on feature dim: {sorted(dims)}")
    return datasets, dims.pop()


def _hyperparams(args) -> HyperParams:
    return HyperParams(alpha=args.alpha, beta=args.beta, n=args.n,
                       max_iters=args.max_iters, patience=args.patience,
                       mode=_norm_mode(args.mode), inner_grad=args.inner_grad,
                       eval_interval=args.eval_interval)


def _train_echo(args, hp: HyperParams) -> dict:
    return {"alpha": hp.alpha, "beta": hp.beta, "n": hp.n,
            "max_iters": hp.max_iters, "patience": hp.patience,
            "mode": hp.mode, "inner_grad": hp.inner_grad,
            "eval_interval": hp.eval_interval, "seed": args.seed,
            "test_dataset": args.test_dataset, "val_fraction": args.val_fraction,
            "lstm_hidden": args.lstm_hidden, "mlp_hidden": args.mlp_hidden,
            "precision": args.precision}


def cmd_train(args) -> int:
    datasets, dim = _load_datasets(args.data)
    split = split_transfer(datasets, args.test_dataset, args.val_fraction, args.seed)
    config = LearnerConfig(input_dim=dim, lstm_hidden=args.lstm_hidden,
                           mlp_hidden=args.mlp_hidden)
    hp = _hyperparams(args)
    report = train(config, split, hp, args.seed)
    save_checkpoint(args.out, config, report.best_params, extra=_train_echo(args, hp))
    doc = report_dict(report, config, hp, args.seed)
    doc["flags"] = _train_echo(args, hp)
    doc["split_sizes"] = {"train": len(split.train), "val": len(split.val),
                          "test": len(split.test)}
    _write_text(args.report or args.out + ".report.json", _dump_json(doc))
    print(f"trained {report.iterations_run} iterations, "
          f"best val loss {report.best_val_loss!r}, checkpoint {args.out}")
    return EXIT_OK


def _eval_echo(args) -> dict:
    return {"agg": args.agg, "strategy": args.strategy, "budget": args.budget,
            "penalty": args.penalty, "max_segments": args.max_segments,
            "precision": args.precision}


def cmd_eval(args) -> int:
    config, params, _ = load_checkpoint(args.ckpt)
    ds = load(args.data)
    dims = {v.features.shape[1] for v in ds.videos}
    if dims and dims != {config.input_dim}:
        raise ContainerError(
            f"{args.data}: feature dim {sorted(dims)} != checkpoint input dim "
            f"{config.input_dim}")
    result = pipeline.evaluate_dataset(params, ds.videos, agg=args.agg,
                                       budget=args.budget, strategy=args.strategy,
                                       max_segments=args.max_segments,
                                       penalty=args.penalty)
    result["config_echo"] = _eval_echo(args)
    result["dataset"] = ds.name
    text = _dump_json(result)
    if args.out:
        _write_text(args.out, text)
        print(f"mean F {result['mean_f']!r} over {len(result['videos'])} videos "
              f"-> {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_summarize(args) -> int:
    config, params, _ = load_checkpoint(args.ckpt)
    ds = load(args.data)
    video = ds.video_by_id(args.video_id)
    if video.features.shape[1] != config.input_dim:
        raise ContainerError(f"{args.data}: feature dim {video.features.shape[1]} "
                             f"!= checkpoint input dim {config.input_dim}")
    scores, seg, summary = pipeline.summarize_video(
        params, video, budget=args.budget, strategy=args.strategy,
        max_segments=args.max_segments, penalty=args.penalty)
    lines = ["frame_index,gt_score,predicted_score,selected"]
    for idx, gt, pred, sel in pipeline.timeline_rows(video, scores, summary):
        lines.append(f"{idx},{gt!r},{pred!r},{sel}")
    _write_text(args.out, "\n".join(lines) + "\n")
    echo = _eval_echo(args)
    echo.update({"video_id": args.video_id,
                 "change_points": [int(c) for c in seg.change_points]})
    _write_text(args.out + ".config.json", _dump_json(echo))
    print(f"wrote {args.out}: {summary.total_frames()}/{video.n_frames} frames selected")
    return EXIT_OK


def cmd_sweep(args) -> int:
    datasets, dim = _load_datasets(args.data)
    split = split_transfer(datasets, args.test_dataset, args.val_fraction, args.seed)
    config = LearnerConfig(input_dim=dim, lstm_hidden=args.lstm_hidden,
                           mlp_hidden=args.mlp_hidden)
    alphas = _floats(args.alphas)
    betas = _floats(args.betas) if args.betas else list(SWEEP_BETAS)
    test_videos = [t.video for t in split.test]

    grid: dict[tuple[float, float], float] = {}
    for cell, (a, b) in enumerate(itertools.product(alphas, betas)):
        fs = []
        for rep in range(args.repeats):
            s = cell_seed(args.seed, cell, rep)
            hp = HyperParams(alpha=a, beta=b, n=args.n, max_iters=args.max_iters,
                             patience=args.patience, mode=_norm_mode(args.mode),
                             inner_grad=args.inner_grad,
                             eval_interval=args.eval_interval)
            report = train(config, split, hp, s)
            result = pipeline.evaluate_dataset(
                report.best_params, test_videos, agg=args.agg,
                budget=args.budget, strategy=args.strategy,
                max_segments=args.max_segments, penalty=args.penalty)
            fs.append(result["mean_f"])
        grid[(a, b)] = float(np.mean(fs))

    lines = ["alpha,beta,f_score,two_avg,two_max"]
    for a in alphas:
        avg, mx = sweep_stats(grid, a, betas)
        for b in betas:
            lines.append(f"{a!r},{b!r},{grid[(a, b)]!r},{avg!r},{mx!r}")
    _write_text(args.out, "\n".join(lines) + "\n")
    echo = _eval_echo(args)
    echo.update({"alphas": alphas, "betas": betas, "repeats": args.repeats,
                 "seed": args.seed, "n": args.n, "max_iters": args.max_iters,
                 "patience": args.patience, "mode": _norm_mode(args.mode),
                 "test_dataset": args.test_dataset})
    _write_text(args.out + ".config.json", _dump_json(echo))
    print(f"wrote {args.out}: {len(alphas)}x{len(betas)} grid, "
          f"{args.repeats} repeats per cell")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def _fd(f, arrays, idx, eps=1e-6):
    base = [np.array(a, dtype=np.float64) for a in arrays]
    g = np.zeros_like(base[idx])
    flat = g.reshape(-1)
    for i in range(flat.size):
        for sign in (1.0, -1.0):
            pert = [a.copy() for a in base]
            pert[idx].reshape(-1)[i] += sign * eps
            flat[i] += sign * f(pert)
    return g / (2 * eps)


def _rel(a, b):
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def _check_op_grads() -> float:
    rng = np.random.default_rng(0)
    worst = 0.0

    def case(build, ref, arrays):
        nonlocal worst
        ts = [Tensor(a) for a in arrays]
        with Graph():
            grads = backward(build(*ts), ts)
        for i in range(len(arrays)):
            worst = max(worst, _rel(grads[i].data, _fd(ref, arrays, i)))

    for _ in range(4):
        a, b = rng.normal(size=5), rng.normal(size=5)
        case(lambda x, y: gc.sum_all(gc.mul(gc.add(x, y), gc.sigmoid(gc.mul(x, y)))),
             lambda v: float(((v[0] + v[1]) / (1 + np.exp(-v[0] * v[1]))).sum()),
             [a, b])
        case(lambda x, y: gc.mean_abs_error(gc.tanh(x), y),
             lambda v: float(np.abs(np.tanh(v[0]) - v[1]).mean()),
             [a, b + 2.0])
        m, n = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        case(lambda x, y: gc.sum_all(gc.mul(gc.matmul(x, y), gc.matmul(x, y))),
             lambda v: float(((v[0] @ v[1]) ** 2).sum()),
             [m, n])
        v1 = rng.normal(size=4)
        case(lambda x, y: gc.sum_all(gc.tanh(gc.matvec(x, y))),
             lambda v: float(np.tanh(v[0] @ v[1]).sum()),
             [m, v1])
    return worst


def _check_learner_grads() -> float:
    from .meta import task_loss
    from types import SimpleNamespace

    rng = np.random.default_rng(1)
    cfg = LearnerConfig(input_dim=3, lstm_hidden=2, mlp_hidden=2)
    params = init_params(cfg, seed=2)
    params = {k: Tensor(v.data + 0.3 * rng.normal(size=v.shape))
              for k, v in params.items()}
    x = rng.normal(size=(5, 3))
    target = rng.uniform(0.1, 0.9, size=5)
    task = SimpleNamespace(video=SimpleNamespace(features=x), target=target)

    with Graph():
        live = {k: v.detach() for k, v in params.items()}
        grads = backward(task_loss(live, task), live)

    names = list(params)
    arrays = [params[k].data for k in names]

    def ref_for(idx):
        def f(vals):
            p = {k: Tensor(v) for k, v in zip(names, vals)}
            with gc.no_grad():
                return float(np.abs(forward(p, x).data - target).mean())
        return f

    worst = 0.0
    for i, k in enumerate(names):
        worst = max(worst, _rel(grads[k].data, _fd(ref_for(i), arrays, i)))
    return worst


def _check_meta_oracle() -> float:
    def quad_loss(params, task):
        d = gc.sub(params["theta"], Tensor(task["c"]))
        return gc.scale(gc.mul(d, d), 0.5)

    worst = 0.0
    hp = HyperParams(alpha=0.1, beta=1.0, n=1, max_iters=1, patience=1)
    new, _ = meta_step({"theta": Tensor(0.0)}, {"c": 1.0}, {"c": -1.0}, hp,
                       loss_fn=quad_loss)
    worst = max(worst, abs(new["theta"].item() - (-0.99)))

    for alpha in (0.1, 0.5):
        for n in (1, 2):
            theta0, a, b, beta = 0.4, 1.3, -0.7, 0.8
            hp = HyperParams(alpha=alpha, beta=beta, n=n, max_iters=1, patience=1)
            new, _ = meta_step({"theta": Tensor(theta0)}, {"c": a}, {"c": b}, hp,
                               loss_fn=quad_loss)
            adapted, d = theta0, 1.0
            for _ in range(n):
                adapted, d = adapted - alpha * (adapted - a), d * (1 - alpha)
            exact = theta0 - beta * (adapted - b) * d
            worst = max(worst, abs(new["theta"].item() - exact) / max(abs(exact), 1e-12))
    return worst


def cmd_gradcheck(args) -> int:
    # Tolerances below are defined for the 64-bit reference mode.
    gc.set_default_dtype(np.float64)
    checks = [
        ("op-gradients-vs-finite-diff", _check_op_grads, 1e-5),
        ("learner-loss-vs-finite-diff", _check_learner_grads, 1e-5),
        ("meta-quadratic-oracle", _check_meta_oracle, 1e-8),
    ]
    failed = False
    for name, fn, tol in checks:
        try:
            err = fn()
        except Exception as e:  # any blow-up is a failure, not a crash
            print(f"FAIL {name}: {e}")
            failed = True
            continue
        ok = err <= tol
        print(f"{'PASS' if ok else 'FAIL'} {name}: max rel err {err:.3e} "
              f"(tolerance {tol:.0e})")
        failed = failed or not ok
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser assembly


def _add_select_flags(p):
    p.add_argument("--strategy", choices=["rank", "knapsack"], default="rank")
    p.add_argument("--budget", type=float, default=0.15)
    p.add_argument("--penalty", type=float, default=1.0)
    p.add_argument("--max-segments", type=int, default=None)


def _add_train_flags(p):
    p.add_argument("--data", action="append", required=True,
                   help="dataset container; repeat for several")
    p.add_argument("--test-dataset", required=True)
    p.add_argument("--alpha", type=float, default=1e-4)
    p.add_argument("--beta", type=float, default=1e-3)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--mode", default="two_stage_successive")
    p.add_argument("--inner-grad", choices=["standard", "literal_paper"],
                   default="standard")
    p.add_argument("--max-iters", type=int, default=30000)
    p.add_argument("--patience", type=int, default=800)
    p.add_argument("--eval-interval", type=int, default=10)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--lstm-hidden", type=int, default=256)
    p.add_argument("--mlp-hidden", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> _Parser:
    parser = _Parser(prog="metasum",
                     description="meta-trained frame scoring and keyshot summaries")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--num-videos", type=int, required=True)
    p.add_argument("--t-min", type=int, required=True)
    p.add_argument("--t-max", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--cp-min", type=int, default=1)
    p.add_argument("--cp-max", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scoring-seed", type=int, default=None,
                   help="share one hidden scoring rule across datasets")
    p.add_argument("--name", default="synthetic")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="meta-train on a transfer split")
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", default=None, help="report JSON path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--agg", choices=["mean", "max"], default="mean")
    _add_select_flags(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("summarize", help="export one video's score timeline")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--video-id", required=True)
    p.add_argument("--agg", choices=["mean", "max"], default="mean")
    _add_select_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("sweep", help="train/eval over a learning-rate grid")
    _add_train_flags(p)
    p.add_argument("--alphas", required=True, help="comma-separated")
    p.add_argument("--betas", default=None, help="comma-separated")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--agg", choices=["mean", "max"], default="mean")
    _add_select_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="run gradient and meta-update checks")
    p.set_defaults(func=cmd_gradcheck)

    for sp in sub.choices.values():
        sp.add_argument("--config", default=None,
                        help="key=value file; flags given on the line win")
        sp.add_argument("--precision", choices=["float64", "float32"],
                        default="float64",
                        help="engine dtype (gradcheck always runs float64)")
        sp.add_argument("--output-dir", default=None,
                        help="directory prepended to relative output paths")
    return parser


def _merge_config(argv: list[str]) -> list[str]:
    if "--config" not in argv:
        return argv
    path = argv[argv.index("--config") + 1]
    merged = list(argv)
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise _UsageError(f"{path}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            flag = "--" + key.strip().replace("_", "-")
            if not any(tok == flag or tok.startswith(flag + "=") for tok in argv):
                merged += [flag, value.strip()]
    return merged


def _apply_output_dir(args) -> None:
    out_dir = getattr(args, "output_dir", None)
    if not out_dir:
        return
    os.makedirs(out_dir, exist_ok=True)
    for name in ("out", "report"):
        val = getattr(args, name, None)
        if val and not os.path.isabs(val):
            setattr(args, name, os.path.join(out_dir, val))


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    previous_dtype = gc.default_dtype()
    try:
        args = parser.parse_args(_merge_config(argv))
        gc.set_default_dtype(np.float32 if args.precision == "float32"
                             else np.float64)
        _apply_output_dir(args)
        return args.func(args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ContainerError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        gc.set_default_dtype(previous_dtype)


if __name__ == "__main__":
    sys.exit(main())
