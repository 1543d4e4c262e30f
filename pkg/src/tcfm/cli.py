"""Command-line entry points: train, eval, export-field, ablate, solver-bench.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .checkpoint import CheckpointVersionError, load_checkpoint, rotate, save_checkpoint
from .config import ConfigError, RunConfig, load_run_config, parse_run_config
from .solvers import METHODS, SolverConfig, bench
from .tasks import Task, make_task
from .training import (EvalReport, TrainingDiverged, eval_field, evaluate, init_state, train, with_weights,
                       write_metrics)

log = logging.getLogger("tcfm")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
ABLATABLE = ("rect", "multistep", "vel", "action", "rk4")
WEIGHT_OF = {"rect": "lambda_rect", "multistep": "lambda_multistep", "vel": "lambda_vel",
             "action": "lambda_action"}
REPORT_COLUMNS = ("config", "endpoint_mse", "mode_accuracy", "straightness", "velocity_roughness", "nfe",
                  "method", "steps")


class UsageError(Exception):
    pass


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


# --- train -----------------------------------------------------------------

def run_training(run: RunConfig, out: Path, resume: Path | None = None):
    """Train per ``run`` into ``out``; returns the final state."""
    out.mkdir(parents=True, exist_ok=True)
    doc = run.to_dict()
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    task = run.make_task()
    if resume is not None:
        state, _ = load_checkpoint(resume)
    else:
        state = init_state(run.model, run.train)

    def checkpoint(s):
        save_checkpoint(out / f"ckpt_{s.step}.json", s, doc)
        rotate(out, run.train.keep_checkpoints)

    rows = train(state, task, run.train, checkpoint=checkpoint)
    write_metrics(rows, out / "metrics.csv", append=resume is not None)
    if not (out / f"ckpt_{state.step}.json").exists():
        checkpoint(state)
    return state


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    out = Path(args.output_dir or run.output_dir)
    state = run_training(run, out, Path(args.resume) if args.resume else None)
    log.info("trained %d steps into %s", state.step, out)
    return EXIT_OK


# --- eval ------------------------------------------------------------------

def _load(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    state, doc = load_checkpoint(path)
    return state, parse_run_config(doc)


def _task(run: RunConfig, override: str | None) -> Task:
    if override is None:
        return run.make_task()
    try:
        spec = json.loads(override) if override.lstrip().startswith("{") else {"name": override}
        task = make_task(spec)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
        raise UsageError(f"--task: {err}") from err
    if task.action_dim != run.model.action_dim or task.cond_dim != run.model.cond_dim:
        raise UsageError(f"task {task.name} does not match the checkpoint's model dims")
    return task


def cmd_eval(args) -> int:
    state, run = _load(args.checkpoint)
    task = _task(run, args.task)
    solver = SolverConfig(args.method or run.solver.method, args.steps or run.solver.steps)
    report = evaluate(eval_field(state), task, solver, args.samples, np.random.default_rng(args.eval_seed),
                      n_obs=run.model.n_obs)
    text = json.dumps(report.to_dict(), indent=2) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- export-field ----------------------------------------------------------

def _vector(text: str, dim: int, name: str) -> np.ndarray:
    try:
        v = np.array([float(s) for s in text.split(",")])
    except ValueError as err:
        raise UsageError(f"{name}: {err}") from err
    if v.shape != (dim,):
        raise UsageError(f"{name} needs {dim} comma-separated values, got {text!r}")
    return v


def field_grid(field, action_dim: int, c: np.ndarray, t_range, x_range, y_range, resolution, oracle=None):
    """Rows of (t, x..., v..., [deviation]) over a regular grid.

    ``oracle(x, t)`` gives the reference velocity; when set, each row ends with
    the Euclidean norm of model minus reference.
    """
    if action_dim not in (1, 2):
        raise UsageError(f"field export needs action_dim 1 or 2, got {action_dim}")
    axes = [np.linspace(*t_range, resolution[0]), np.linspace(*x_range, resolution[1])]
    if action_dim == 2:
        axes.append(np.linspace(*y_range, resolution[2] if len(resolution) > 2 else resolution[1]))
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    t, x = mesh[:, 0], mesh[:, 1:]
    v = np.asarray(field(x, t, np.broadcast_to(c, (len(x), c.shape[-1]))))
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("non-finite velocity in exported grid")
    cols = [t[:, None], x, v]
    if oracle is not None:
        ref = np.stack([oracle(x[i], t[i]) for i in range(len(x))])
        cols.append(np.linalg.norm(v - ref, axis=1)[:, None])
    header = ["t"] + ["x", "y"][:action_dim] + ["v_x", "v_y"][:action_dim]
    if oracle is not None:
        header.append("deviation")
    return header, np.hstack(cols)


def write_grid(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.17g}" for v in r])


def cmd_export_field(args) -> int:
    state, run = _load(args.checkpoint)
    task = run.make_task()
    cfg = run.model
    if cfg.action_dim > 2:
        raise UsageError(f"field export needs action_dim 1 or 2, got {cfg.action_dim}")
    if args.cond is not None:
        c = _vector(args.cond, cfg.cond_dim, "--cond")
    else:
        # first condition label when the task has one; the empty vector otherwise
        c = np.eye(cfg.cond_dim)[0] if cfg.cond_dim else np.zeros(0)
    c = np.tile(c, cfg.n_obs)
    oracle = None
    if args.pin is not None:
        x0 = _vector(args.pin[0], cfg.action_dim, "--pin x0")
        x1 = _vector(args.pin[1], cfg.action_dim, "--pin x1")

        def oracle(x, t):
            return x1 - x0
    else:
        oracle = task.oracle
    header, rows = field_grid(eval_field(state), cfg.action_dim, c, args.t_range, args.x_range, args.y_range,
                              args.resolution, oracle)
    write_grid(args.output, header, rows)
    log.info("wrote %d grid rows to %s", len(rows), args.output)
    return EXIT_OK


# --- ablate ----------------------------------------------------------------

def ablation_matrix(run: RunConfig, disable: list[str]) -> list[tuple[str, RunConfig]]:
    """(name, config) for the full model and each single removal."""
    arms = [("full", run)]
    for term in disable:
        if term == "rk4":
            # one Euler step per evaluation keeps the NFE budget of the configured solver
            arms.append(("no_rk4", replace(run, solver=SolverConfig("euler", run.solver.nfe))))
        else:
            loss = with_weights(run.loss, **{WEIGHT_OF[term]: 0.0})
            arms.append((f"no_{term}", replace(run, loss=loss, train=replace(run.train, loss=loss))))
    return arms


def cmd_ablate(args) -> int:
    run = load_run_config(args.config)
    out = Path(args.output_dir or run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    disable = list(dict.fromkeys(args.disable or ABLATABLE))
    reports: list[tuple[str, EvalReport]] = []
    trained = {}
    for name, arm in ablation_matrix(run, disable):
        key = json.dumps(arm.loss.to_dict(), sort_keys=True)
        if key not in trained:
            # a solver-only arm reuses the identically trained model
            arm_dir = out / name
            trained[key] = run_training(replace(arm, output_dir=str(arm_dir)), arm_dir)
        state = trained[key]
        report = evaluate(eval_field(state), arm.make_task(), arm.solver, args.samples,
                          np.random.default_rng(args.eval_seed), n_obs=arm.model.n_obs)
        reports.append((name, report))
        log.info("%s: %s", name, report)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for name, r in reports:
            d = r.to_dict()
            w.writerow([name] + [_fmt(d[k]) for k in REPORT_COLUMNS[1:]])
    return EXIT_OK


# --- solver-bench ----------------------------------------------------------

def cmd_solver_bench(args) -> int:
    report = bench(tuple(args.steps), args.budget)
    text = json.dumps(report, indent=2) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- wiring ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcfm", description="Train and evaluate conditional flow policies on toy tasks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("config")
    t.add_argument("--output-dir")
    t.add_argument("--resume", help="checkpoint to continue from; metrics are appended")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint's EMA weights")
    e.add_argument("checkpoint")
    e.add_argument("--task", help="task name or JSON spec; defaults to the checkpoint's task")
    e.add_argument("--method", choices=METHODS)
    e.add_argument("--steps", type=int)
    e.add_argument("--samples", type=int, default=1000)
    e.add_argument("--eval-seed", type=int, default=0)
    e.add_argument("--output")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-field", help="write the learned velocity on a (t, x[, y]) grid as CSV")
    x.add_argument("checkpoint")
    x.add_argument("--output", required=True)
    x.add_argument("--t-range", type=float, nargs=2, default=(0.0, 1.0))
    x.add_argument("--x-range", type=float, nargs=2, default=(-2.0, 2.0))
    x.add_argument("--y-range", type=float, nargs=2, default=(-2.0, 2.0))
    x.add_argument("--resolution", type=int, nargs="+", default=[21, 21], help="points along t, x[, y]")
    x.add_argument("--cond", help="comma-separated conditioning vector")
    x.add_argument("--pin", nargs=2, metavar=("X0", "X1"), help="reference pair; deviation is against x1 - x0")
    x.set_defaults(func=cmd_export_field)

    a = sub.add_parser("ablate", help="train the full model and each single removal, then compare")
    a.add_argument("config")
    a.add_argument("--disable", nargs="+", choices=ABLATABLE, metavar="TERM",
                   help=f"components to remove one at a time; any of {', '.join(ABLATABLE)}")
    a.add_argument("--output-dir")
    a.add_argument("--samples", type=int, default=1000)
    a.add_argument("--eval-seed", type=int, default=0)
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("solver-bench", help="convergence slopes and NFE-matched errors on dx/dt = x")
    b.add_argument("--steps", type=int, nargs="+", default=[5, 10, 20, 40, 80])
    b.add_argument("--budget", type=int, default=120)
    b.add_argument("--output")
    b.set_defaults(func=cmd_solver_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        where = f" (field: {err.field})" if err.field else ""
        print(f"tcfm: config error: {err}{where}", file=sys.stderr)
    except (UsageError, CheckpointVersionError, FileNotFoundError) as err:
        print(f"tcfm: {err}", file=sys.stderr)
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as err:
        print(f"tcfm: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
