"""Run configuration documents (JSON) with explicit defaults and field-level diagnostics."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .flowpath import SegmentPartition
from .losses import LossConfig
from .model import ModelConfig
from .solvers import SolverConfig
from .tasks import Task, make_task
from .training import TrainConfig

OUTPUT_ROOT_ENV = "TCFM_OUTPUT_ROOT"
REQUIRED = ("task", "seed")


class ConfigError(ValueError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


@dataclass
class RunConfig:
    task: dict
    model: ModelConfig
    loss: LossConfig
    train: TrainConfig
    solver: SolverConfig = field(default_factory=SolverConfig)
    output_dir: str = "runs/default"
    seed: int = 0

    def make_task(self) -> Task:
        return make_task(self.task)

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("loss")
        train.pop("seed")
        return {
            "task": dict(self.task),
            "model": self.model.to_dict(),
            "loss": self.loss.to_dict(),
            "train": train,
            "solver": dataclasses.asdict(self.solver),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }


def _section(cls, raw, name: str, **fixed):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"'{name}' must be an object", name)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names or key in fixed:
            raise ConfigError(f"unknown field '{name}.{key}'", f"{name}.{key}")
    try:
        return cls(**raw, **fixed)
    except TypeError as err:
        raise ConfigError(f"'{name}': {err}", name) from err
    except ValueError as err:
        raise ConfigError(f"'{name}': {err}", name) from err


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for key in REQUIRED:
        if key not in doc:
            raise ConfigError(f"missing required field '{key}'", key)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown field '{key}'", key)
    task_spec = doc["task"]
    if not isinstance(task_spec, dict) or "name" not in task_spec:
        raise ConfigError("missing required field 'task.name'", "task.name")
    try:
        task = make_task(task_spec)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"'task': {err}", "task") from err
    seed = doc["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("'seed' must be an integer", "seed")

    model_raw = dict(doc.get("model") or {})
    model_raw.setdefault("action_dim", task.action_dim)
    model_raw.setdefault("cond_dim", task.cond_dim)
    model = _section(ModelConfig, model_raw, "model")
    if model.action_dim != task.action_dim or model.cond_dim != task.cond_dim:
        raise ConfigError("model dims do not match the task", "model")

    loss_raw = dict(doc.get("loss") or {})
    if "partition" in loss_raw:
        try:
            loss_raw["partition"] = SegmentPartition(tuple(loss_raw["partition"]))
        except (TypeError, ValueError) as err:
            raise ConfigError(f"'loss.partition': {err}", "loss.partition") from err
    loss = _section(LossConfig, loss_raw, "loss")
    train = _section(TrainConfig, doc.get("train"), "train", loss=loss, seed=seed)
    solver = _section(SolverConfig, doc.get("solver"), "solver")
    out = doc.get("output_dir") or os.path.join(os.environ.get(OUTPUT_ROOT_ENV, "runs"), task.name)
    return RunConfig(task.spec(), model, loss, train, solver, str(out), seed)


def load_run_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: malformed JSON at line {err.lineno}, column {err.colno}: {err.msg}") from err
    return parse_run_config(doc)
