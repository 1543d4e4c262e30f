"""Self-describing JSON checkpoints: config, live and EMA weights, Adam moments, RNG state."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .model import EmaState, VelocityModel
from .training import OptimizerState, TrainState

FORMAT_VERSION = 1


class CheckpointVersionError(ValueError):
    pass


def _enc(arrays: dict[str, np.ndarray]) -> dict:
    # json writes floats with repr(), which round-trips doubles exactly
    return {k: {"shape": list(a.shape), "data": a.reshape(-1).tolist()} for k, a in arrays.items()}


def _dec(doc: dict) -> dict[str, np.ndarray]:
    return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc.items()}


def save_checkpoint(path, state: TrainState, config: dict) -> Path:
    path = Path(path)
    doc = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "step": state.step,
        "params": _enc(state.model.params),
        "ema": {"decay": state.ema.decay, "updates": state.ema_updates, "shadow": _enc(state.ema.shadow)},
        "optimizer": {"step": state.opt.step, "m": _enc(state.opt.m), "v": _enc(state.opt.v)},
        "rng_state": state.rng.bit_generator.state,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[TrainState, dict]:
    """Returns the training state and the run-config document stored with it."""
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    from .config import parse_run_config

    run = parse_run_config(doc["config"])
    model = VelocityModel(run.model, _dec(doc["params"]))
    ema = EmaState(_dec(doc["ema"]["shadow"]), doc["ema"]["decay"])
    opt = OptimizerState(_dec(doc["optimizer"]["m"]), _dec(doc["optimizer"]["v"]), doc["optimizer"]["step"])
    rng = np.random.default_rng()
    rng.bit_generator.state = doc["rng_state"]
    state = TrainState(model, ema, opt, rng, doc["step"], doc["ema"]["updates"])
    return state, doc["config"]


def rotate(directory, keep: int) -> None:
    """Delete all but the ``keep`` newest ``ckpt_*.json`` files."""
    files = sorted(Path(directory).glob("ckpt_*.json"), key=lambda p: int(p.stem.split("_")[1]))
    for old in files[:-keep] if keep > 0 else []:
        old.unlink()
