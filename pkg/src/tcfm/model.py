"""Conditioned MLP velocity field with sinusoidal time embedding, FiLM and EMA."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Node


@dataclass(frozen=True)
class ModelConfig:
    action_dim: int
    cond_dim: int = 0
    hidden_dims: tuple[int, ...] = (64, 64)
    time_embed_dim: int = 128
    time_base: float = 10000.0
    # stack this many conditioning vectors (observation history)
    n_obs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.action_dim <= 0 or self.cond_dim < 0 or self.n_obs <= 0:
            raise ValueError(f"invalid dims in {self}")
        if not self.hidden_dims or any(h <= 0 for h in self.hidden_dims):
            raise ValueError(f"hidden_dims must be non-empty and positive, got {self.hidden_dims}")
        if self.time_embed_dim <= 0 or self.time_embed_dim % 2:
            raise ValueError(f"time_embed_dim must be a positive even integer, got {self.time_embed_dim}")

    @property
    def cond_input_dim(self) -> int:
        return self.cond_dim * self.n_obs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


def time_embed(t, dim: int, base: float = 10000.0) -> np.ndarray:
    """Interleaved sin/cos features; ``t`` scalar gives (dim,), a vector gives (B, dim)."""
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    freqs = base ** (-2.0 * np.arange(dim // 2) / dim)
    angles = t[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    cond_in = config.time_embed_dim + config.cond_input_dim
    fan_in = config.action_dim
    for i, width in enumerate(config.hidden_dims):
        shapes[f"W{i}"] = (fan_in, width)
        shapes[f"b{i}"] = (width,)
        shapes[f"film_gamma_W{i}"] = (cond_in, width)
        shapes[f"film_gamma_b{i}"] = (width,)
        shapes[f"film_beta_W{i}"] = (cond_in, width)
        shapes[f"film_beta_b{i}"] = (width,)
        fan_in = width
    shapes["W_out"] = (fan_in, config.action_dim)
    shapes["b_out"] = (config.action_dim,)
    return shapes


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


@dataclass
class VelocityModel:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.config)
        if list(expected) != list(self.params):
            raise ValueError("parameter names do not match the model config")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {self.params[name].shape}")

    def copy(self) -> "VelocityModel":
        return VelocityModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def bind(self, params: Mapping[str, np.ndarray] | None = None) -> "BoundField":
        """Wrap parameters as fresh leaf nodes for one differentiable graph."""
        src = self.params if params is None else params
        return BoundField(self.config, {k: ad.parameter(v) for k, v in src.items()})

    def field(self, params: Mapping[str, np.ndarray] | None = None):
        """Plain numpy ``(x, t, c) -> v`` closure for solvers and evaluation."""
        src = self.params if params is None else params
        nodes = {k: ad.constant(v) for k, v in src.items()}
        config = self.config

        def v(x, t, c):
            return forward(nodes, config, ad.constant(x), t, ad.constant(c)).value
        return v


@dataclass
class BoundField:
    config: ModelConfig
    nodes: dict[str, Node]

    def __call__(self, x: Node, t, c: Node) -> Node:
        return forward(self.nodes, self.config, x, t, c)

    def grads(self) -> dict[str, np.ndarray]:
        return {k: n.grad for k, n in self.nodes.items()}


def init_params(config: ModelConfig, rng: np.random.Generator) -> VelocityModel:
    """Uniform fan-in weights, zero biases, FiLM scale bias at one."""
    params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, shape)
        elif name.startswith("film_gamma_b"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return VelocityModel(config, params)


def forward(params: Mapping[str, Node], config: ModelConfig, x: Node, t, c: Node) -> Node:
    """Velocity at ``x`` (shape (d,) or (B, d)) for time(s) ``t`` and condition ``c``."""
    single = x.value.ndim == 1
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    if x.value.ndim != 2 or x.shape[1] != config.action_dim:
        raise ValueError(f"x has shape {x.shape}, model expects action_dim={config.action_dim}")
    B = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    if c.value.ndim == 1:
        if c.shape[0] != config.cond_input_dim:
            raise ValueError(f"c has shape {c.shape}, model expects cond_dim={config.cond_input_dim}")
        c = ad.broadcast_rows(c, B)
    if c.shape != (B, config.cond_input_dim):
        raise ValueError(f"c has shape {c.shape}, expected {(B, config.cond_input_dim)}")
    emb = ad.constant(time_embed(t, config.time_embed_dim, config.time_base))
    cond = ad.concat([emb, c], axis=1) if config.cond_input_dim else emb

    h = x
    for i in range(len(config.hidden_dims)):
        h = ad.tanh(ad.matmul(h, params[f"W{i}"]) + ad.broadcast_rows(params[f"b{i}"], B))
        gamma = ad.matmul(cond, params[f"film_gamma_W{i}"]) + ad.broadcast_rows(params[f"film_gamma_b{i}"], B)
        beta = ad.matmul(cond, params[f"film_beta_W{i}"]) + ad.broadcast_rows(params[f"film_beta_b{i}"], B)
        h = ad.mul(gamma, h) + beta
    out = ad.matmul(h, params["W_out"]) + ad.broadcast_rows(params["b_out"], B)
    if single:
        out = ad.reshape(out, (config.action_dim,))
    return out


@dataclass
class EmaState:
    shadow: dict[str, np.ndarray]
    decay: float = 0.9999

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {self.decay}")

    @classmethod
    def from_model(cls, model: VelocityModel, decay: float = 0.9999) -> "EmaState":
        return cls({k: v.copy() for k, v in model.params.items()}, decay)


def ema_update(ema: EmaState, model: VelocityModel, decay: float | None = None) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * live, in place.

    ``decay`` overrides ``ema.decay`` for this update (warmup schedules).
    """
    if ema.shadow.keys() != model.params.keys():
        raise ValueError("EMA shadow and model have different parameter sets")
    d = ema.decay if decay is None else decay
    for k, live in model.params.items():
        s = ema.shadow[k]
        if s.shape != live.shape:
            raise ValueError(f"EMA shape mismatch for {k}: {s.shape} vs {live.shape}")
        s *= d
        s += (1.0 - d) * live
    return ema
