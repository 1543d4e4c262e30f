"""Adam training loop with EMA shadow weights, CSV logging, checkpoints and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .losses import TERMS, LossConfig, LossReport, total_loss
from .model import EmaState, ModelConfig, VelocityModel, ema_update, init_params
from .solvers import SolverConfig, integrate
from .tasks import FrozenDataset, Task, freeze

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step",) + TERMS + ("total",)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, report: LossReport | None):
        super().__init__(f"non-finite loss at step {step}; last report: {report}")
        self.step = step
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    # streaming mode only; frozen mode derives it from the dataset size
    steps_per_epoch: int = 64
    max_steps: int | None = None
    batch_size: int = 64
    learning_rate: float = 3e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    eval_every: int = 0
    dataset_mode: str = "streaming"
    dataset_size: int = 4096
    grad_clip: float | None = 10.0
    ema_decay: float = 0.9999
    # effective decay min(ema_decay, (1 + n) / (10 + n)) after n updates
    ema_warmup: bool = True
    keep_checkpoints: int = 3

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if not isinstance(self.loss, LossConfig):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.dataset_mode not in ("streaming", "frozen"):
            raise ValueError(f"dataset_mode must be 'streaming' or 'frozen', got {self.dataset_mode!r}")

    @property
    def steps_in_epoch(self) -> int:
        if self.dataset_mode == "frozen":
            return math.ceil(self.dataset_size / self.batch_size)
        return self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.max_steps if self.max_steps is not None else self.epochs * self.steps_in_epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["loss"] = self.loss.to_dict()
        return d


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """Bias-corrected Adam, updating ``params`` and ``state`` in place."""
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ValueError(f"adam: shape mismatch for {k}: param {p.shape}, grad {g.shape}")
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


@dataclass
class TrainState:
    model: VelocityModel
    ema: EmaState
    opt: OptimizerState
    rng: np.random.Generator
    step: int = 0
    ema_updates: int = 0


def seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(init rng, training rng) as children 0 and 1 of SeedSequence(seed)."""
    init_ss, train_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(train_ss)


def init_state(model_cfg: ModelConfig, cfg: TrainConfig) -> TrainState:
    init_rng, train_rng = seed_streams(cfg.seed)
    model = init_params(model_cfg, init_rng)
    return TrainState(model, EmaState.from_model(model, cfg.ema_decay), OptimizerState.zeros_like(model.params),
                      train_rng)


def frozen_dataset(task: Task, cfg: TrainConfig) -> FrozenDataset:
    return freeze(task, np.random.default_rng([cfg.seed, 1]), cfg.dataset_size)


def _batch(task: Task, cfg: TrainConfig, state: TrainState, data: FrozenDataset | None):
    if data is None:
        return task.sample(state.rng, cfg.batch_size)
    per_epoch = cfg.steps_in_epoch
    epoch, pos = divmod(state.step, per_epoch)
    # the permutation depends only on (seed, epoch), so resuming mid-epoch needs no extra state
    perm = np.random.default_rng([cfg.seed, 2, epoch]).permutation(len(data))
    b = data.batch(perm[pos * cfg.batch_size:(pos + 1) * cfg.batch_size])
    # demonstrations are finite, the noise is not
    b.x0 = state.rng.standard_normal(b.x0.shape)
    return b


def train(state: TrainState, task: Task, cfg: TrainConfig, *, until: int | None = None,
          on_step: Callable[[int, LossReport], None] | None = None,
          checkpoint: Callable[[TrainState], None] | None = None) -> list[dict]:
    """Run optimizer steps from ``state.step`` up to ``until`` (default: the config's total).

    Mutates ``state``; returns one metrics row per step.
    """
    if state.model.config.action_dim != task.action_dim or \
            state.model.config.cond_input_dim != task.cond_dim * state.model.config.n_obs:
        raise ValueError("model and task dimensions disagree")
    data = frozen_dataset(task, cfg) if cfg.dataset_mode == "frozen" else None
    stop = cfg.total_steps if until is None else until
    rows = []
    report = None
    while state.step < stop:
        batch = _batch(task, cfg, state, data)
        if state.model.config.n_obs > 1:
            batch.c = np.tile(batch.c, (1, state.model.config.n_obs))
        bound = state.model.bind()
        loss, report_now = total_loss(bound, batch, cfg.loss, state.rng)
        if not math.isfinite(report_now.total):
            raise TrainingDiverged(state.step + 1, report)
        report = report_now
        ad.backward(loss)
        grads = {k: n.grad for k, n in bound.nodes.items()}
        if cfg.grad_clip is not None:
            clip_global_norm(grads, cfg.grad_clip)
        adam_step(state.model.params, grads, state.opt, cfg.learning_rate, cfg.adam_betas, cfg.adam_eps)
        n = state.ema_updates
        decay = min(cfg.ema_decay, (1.0 + n) / (10.0 + n)) if cfg.ema_warmup else cfg.ema_decay
        ema_update(state.ema, state.model, decay)
        state.ema_updates += 1
        state.step += 1
        rows.append({"step": state.step, **dict(zip(TERMS + ("total",), report.row()))})
        if on_step is not None:
            on_step(state.step, report)
        if checkpoint is not None and cfg.eval_every and state.step % cfg.eval_every == 0:
            checkpoint(state)
    return rows


def write_metrics(rows: list[dict], path, append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists()
    with open(path, "a" if append else "w") as fh:
        if new:
            fh.write(",".join(METRIC_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join([str(r["step"])] + [f"{r[k]:.17g}" for k in METRIC_COLUMNS[1:]]) + "\n")


# --- evaluation ------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    endpoint_mse: float | None
    mode_accuracy: float | None
    straightness: float
    velocity_roughness: float
    nfe: int
    num_samples: int
    method: str
    steps: int

    def to_dict(self) -> dict:
        return asdict(self)


def straightness(states: np.ndarray) -> np.ndarray:
    """Max perpendicular distance of each path from its start-end chord, over chord length.

    ``states`` has shape (N + 1, B, d). Paths with a zero-length chord score 0.
    """
    start, end = states[0], states[-1]
    chord = end - start
    length = np.linalg.norm(chord, axis=-1)
    out = np.zeros(states.shape[1])
    if states.shape[0] <= 2:
        return out
    ok = length > 0
    u = np.zeros_like(chord)
    u[ok] = chord[ok] / length[ok, None]
    rel = states[1:-1] - start
    perp = rel - np.sum(rel * u, axis=-1, keepdims=True) * u
    dev = np.linalg.norm(perp, axis=-1).max(axis=0)
    out[ok] = dev[ok] / length[ok]
    return out


def velocity_roughness(field, traj, c) -> float:
    """Mean squared change of the field between consecutive states of a trajectory."""
    v = np.stack([field(x, t, c) for t, x in zip(traj.times, traj.states)])
    return float(np.mean(np.sum((v[1:] - v[:-1]) ** 2, axis=-1)))


def evaluate(field, task: Task, solver_cfg: SolverConfig, num_samples: int, rng: np.random.Generator,
             n_obs: int = 1) -> EvalReport:
    """Generate ``num_samples`` endpoints from noise with ``field`` and score them."""
    batch = task.sample(rng, num_samples)
    c = np.asarray(batch.c)
    c_in = np.tile(c, (1, n_obs)) if n_obs > 1 else c
    traj = integrate(field, batch.x0, c_in, solver_cfg)
    x_hat = traj.endpoint
    mse = None
    if task.valid_targets is not None:
        cand = task.valid_targets(c)
        d2 = np.sum((cand - x_hat[:, None, :]) ** 2, axis=-1)
        mse = float(np.mean(d2.min(axis=1)) / task.action_dim)
    acc = None
    if task.mode_targets is not None:
        centers = np.stack([task.mode_targets[k] for k in sorted(task.mode_targets)])
        nearest = np.argmin(np.sum((x_hat[:, None, :] - centers[None]) ** 2, axis=-1), axis=1)
        acc = float(np.mean(nearest == task.mode_of(c)))
    return EvalReport(mse, acc, float(np.mean(straightness(traj.states))),
                      velocity_roughness(field, traj, c_in), traj.nfe, num_samples,
                      solver_cfg.method, solver_cfg.steps)


def eval_field(state: TrainState):
    """Numpy field on the EMA weights; live parameters are untouched."""
    return state.model.field(state.ema.shadow)


def with_weights(cfg: LossConfig, **weights) -> LossConfig:
    return replace(cfg, **weights)
