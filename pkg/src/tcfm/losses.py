"""The five training objectives and their weighted sum.

Every loss takes a velocity ``field(x: Node, t: ndarray, c: Node) -> Node``.
That is either a bound network or an analytic closure. Per-sample squared
norms are averaged over the batch in a fixed order, so
``mean_b ||a_b||^2 == d * reduce_mean_sq(a)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .flowpath import EPS_CFM, PathPair, SegmentPartition, TimeSampler, interpolate, pair_time, \
    sample_times, segment_endpoint

Field = Callable[[Node, np.ndarray, Node], Node]
TERMS = ("cfm", "rect", "multistep", "vel", "action")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.8
    delta: float = 0.7
    eps: float = EPS_CFM
    partition: SegmentPartition = field(default_factory=SegmentPartition)
    s_multistep: int = 4
    k_segments: int = 3
    s_vel: int = 5
    s_act: int = 5
    lambda_rect: float = 1.0
    lambda_multistep: float = 0.5
    lambda_vel: float = 0.1
    lambda_action: float = 0.1
    min_gap: float = 0.05

    def __post_init__(self):
        if not isinstance(self.partition, SegmentPartition):
            object.__setattr__(self, "partition", SegmentPartition(tuple(self.partition)))
        for name in ("alpha", "lambda_rect", "lambda_multistep", "lambda_vel", "lambda_action"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if min(self.s_multistep, self.k_segments, self.s_act) < 1:
            raise ValueError("step and segment counts must be >= 1")
        if self.s_vel < 2:
            raise ValueError("s_vel must be >= 2")
        # validates eps, delta, min_gap
        self.sampler

    @property
    def sampler(self) -> TimeSampler:
        return TimeSampler(eps=self.eps, delta=self.delta, min_gap=self.min_gap)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["partition"] = list(self.partition.boundaries)
        return d


@dataclass
class Batch:
    x0: np.ndarray
    x1: np.ndarray
    c: np.ndarray | Node

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.x1 = np.asarray(self.x1, dtype=np.float64)
        if self.x0.ndim != 2 or self.x0.shape != self.x1.shape:
            raise ValueError(f"batch x0/x1 must be matching (B, d) arrays, got {self.x0.shape}, {self.x1.shape}")
        if len(self.x0) == 0:
            raise ValueError("empty batch")
        if not isinstance(self.c, Node):
            self.c = np.asarray(self.c, dtype=np.float64).reshape(len(self.x0), -1)

    @property
    def size(self) -> int:
        return self.x0.shape[0]

    @property
    def dim(self) -> int:
        return self.x0.shape[1]

    def c_node(self, repeats: int = 1) -> Node:
        c = self.c if isinstance(self.c, Node) else ad.constant(self.c)
        return c if repeats == 1 else ad.concat([c] * repeats, axis=0)


@dataclass(frozen=True)
class LossReport:
    cfm: float
    rect: float
    multistep: float
    vel: float
    action: float
    total: float

    def row(self) -> list[float]:
        return [self.cfm, self.rect, self.multistep, self.vel, self.action, self.total]


def _rows(coef: np.ndarray, d: int) -> Node:
    return ad.constant(np.repeat(coef[:, None], d, axis=1))


def _sq_norm_mean(diff: Node) -> Node:
    return ad.scale(ad.reduce_mean_sq(diff), diff.shape[1])


def cfm_loss(field: Field, batch: Batch, cfg: LossConfig, rng: np.random.Generator,
             times: np.ndarray | None = None) -> Node:
    """Segment-endpoint consistency between x_t and x_r, plus alpha-weighted velocity agreement."""
    B, d = batch.x0.shape
    t = sample_times(cfg.sampler, rng, "cfm", B) if times is None else np.broadcast_to(times, (B,)).astype(float)
    r = pair_time(t, cfg.delta)
    pair = PathPair(batch.x0, batch.x1)
    xt, xr = interpolate(pair, t), interpolate(pair, r)
    v = field(ad.constant(np.concatenate([xt, xr])), np.concatenate([t, r]), batch.c_node(2))
    vt, vr = ad.slice_rows(v, 0, B), ad.slice_rows(v, B, 2 * B)
    jump_t = segment_endpoint(cfg.partition, t) - t
    jump_r = segment_endpoint(cfg.partition, r) - r
    f_diff = ad.constant(xt - xr) + ad.mul(_rows(jump_t, d), vt) - ad.mul(_rows(jump_r, d), vr)
    return _sq_norm_mean(f_diff) + ad.scale(_sq_norm_mean(vt - vr), cfg.alpha)


def rect_loss(field: Field, batch: Batch, cfg: LossConfig, rng: np.random.Generator,
              times: np.ndarray | None = None) -> Node:
    B = batch.size
    t = sample_times(cfg.sampler, rng, "rect", B) if times is None else np.broadcast_to(times, (B,)).astype(float)
    pair = PathPair(batch.x0, batch.x1)
    v = field(ad.constant(interpolate(pair, t)), t, batch.c_node())
    return _sq_norm_mean(v - ad.constant(batch.x1 - batch.x0))


def multistep_loss(field: Field, batch: Batch, cfg: LossConfig, rng: np.random.Generator,
                   times: tuple | None = None) -> Node:
    """S-step Euler rollout displacement against the straight-path displacement.

    ``k_segments`` segments per sample are stacked block-wise (segment k owns
    rows ``k*B:(k+1)*B``) and share one rollout graph.
    """
    B, d = batch.x0.shape
    K, S = cfg.k_segments, cfg.s_multistep
    if times is None:
        t0, t1 = sample_times(cfg.sampler, rng, "multistep", K * B)
    else:
        t0 = np.broadcast_to(np.asarray(times[0], dtype=float), (K * B,)).copy()
        t1 = np.broadcast_to(np.asarray(times[1], dtype=float), (K * B,)).copy()
    pair = PathPair(np.tile(batch.x0, (K, 1)), np.tile(batch.x1, (K, 1)))
    start = interpolate(pair, t0)
    target = start + (t1 - t0)[:, None] * (pair.x1 - pair.x0)
    h = (t1 - t0) / S
    step = _rows(h, d)
    c = batch.c_node(K)
    x = ad.constant(start)
    for s in range(S):
        x = x + ad.mul(step, field(x, t0 + s * h, c))
    return _sq_norm_mean(x - ad.constant(target))


def vel_smooth_loss(field: Field, batch: Batch, cfg: LossConfig, rng: np.random.Generator | None = None) -> Node:
    """Mean squared change of velocity between consecutive grid times on each sample's own path."""
    B = batch.size
    S = cfg.s_vel
    grid = np.arange(S) / (S - 1)
    t = np.repeat(grid, B)
    pair = PathPair(np.tile(batch.x0, (S, 1)), np.tile(batch.x1, (S, 1)))
    v = field(ad.constant(interpolate(pair, t)), t, batch.c_node(S))
    return _sq_norm_mean(ad.slice_rows(v, B, S * B) - ad.slice_rows(v, 0, (S - 1) * B))


def action_loss(field: Field, batch: Batch, cfg: LossConfig, rng: np.random.Generator,
                noise: np.ndarray | None = None) -> Node:
    """Endpoint error of an S_act-step Euler rollout from fresh Gaussian noise."""
    B, d = batch.x0.shape
    S = cfg.s_act
    x0 = rng.standard_normal((B, d)) if noise is None else np.asarray(noise, dtype=float)
    c = batch.c_node()
    x = ad.constant(x0)
    for s in range(S):
        x = x + ad.scale(field(x, np.full(B, s / S), c), 1.0 / S)
    return _sq_norm_mean(x - ad.constant(batch.x1))


def total_loss(field: Field, batch: Batch, cfg: LossConfig,
               rng: np.random.Generator) -> tuple[Node, LossReport]:
    """Weighted objective. Every term is evaluated (and draws its own times) even
    at zero weight, so ablation arms consume identical random streams."""
    terms = {
        "cfm": cfm_loss(field, batch, cfg, rng),
        "rect": rect_loss(field, batch, cfg, rng),
        "multistep": multistep_loss(field, batch, cfg, rng),
        "vel": vel_smooth_loss(field, batch, cfg, rng),
        "action": action_loss(field, batch, cfg, rng),
    }
    weights = {"rect": cfg.lambda_rect, "multistep": cfg.lambda_multistep,
               "vel": cfg.lambda_vel, "action": cfg.lambda_action}
    total = terms["cfm"]
    for name, w in weights.items():
        if w != 0.0:
            total = total + ad.scale(terms[name], w)
    # zero-weight terms stay out of the graph; adding w * val = 0.0 leaves the sum bit-identical
    report = LossReport(*(float(terms[k].value) for k in TERMS), total=float(total.value))
    return total, report


def straight_oracle(batch: Batch) -> Field:
    """Analytic closure that transports every state of pair b straight onto x1_b.

    Returns (x1 - x) / (1 - t) for t < 1 and x1 - x0 at t = 1. On the pair's
    own path this is the constant x1 - x0, and Euler from any start lands on
    x1. Rows are matched to pairs modulo the batch size, which fits the
    block-stacked layout used by the losses.
    """
    x0, x1 = batch.x0, batch.x1
    B = len(x0)

    def v(x: Node, t, c: Node) -> Node:
        n = x.shape[0]
        reps = n // B
        tx1 = np.tile(x1, (reps, 1))
        t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
        out = np.tile(x1 - x0, (reps, 1))
        live = t < 1.0
        out[live] = (tx1[live] - x.value[live]) / (1.0 - t[live])[:, None]
        return ad.constant(out)
    return v
