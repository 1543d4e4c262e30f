"""Closed-form path quantities: interpolation, targets, segment endpoints, time draws."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_CFM = 5e-3


@dataclass(frozen=True)
class PathPair:
    x0: np.ndarray
    x1: np.ndarray

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=np.float64)
        x1 = np.asarray(self.x1, dtype=np.float64)
        if x0.shape != x1.shape:
            raise ValueError(f"x0 and x1 shapes differ: {x0.shape} vs {x1.shape}")
        if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(x1))):
            raise ValueError("path endpoints must be finite")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "x1", x1)


@dataclass(frozen=True)
class SegmentPartition:
    boundaries: tuple[float, ...] = (0.0, 1.0)

    def __post_init__(self):
        b = tuple(float(s) for s in self.boundaries)
        if len(b) < 2 or b[0] != 0.0 or b[-1] != 1.0:
            raise ValueError(f"partition must start at 0 and end at 1, got {b}")
        if any(lo >= hi for lo, hi in zip(b[:-1], b[1:])):
            raise ValueError(f"partition boundaries must be strictly increasing, got {b}")
        object.__setattr__(self, "boundaries", b)

    @property
    def num_segments(self) -> int:
        return len(self.boundaries) - 1


@dataclass(frozen=True)
class TimeSampler:
    eps: float = EPS_CFM
    delta: float = 0.7
    min_gap: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")
        if not 0.0 < self.delta <= 1.0:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if not 0.0 <= self.min_gap < 1.0:
            raise ValueError(f"min_gap must lie in [0, 1), got {self.min_gap}")


def _check_time(t, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < lo) or np.any(t > hi):
        raise ValueError(f"time outside [{lo}, {hi}]: {t}")
    return t


def _col(t: np.ndarray, x: np.ndarray) -> np.ndarray:
    # per-sample times against (B, d) points
    return t[..., None] if t.ndim and x.ndim > t.ndim else t


def interpolate(pair: PathPair, t) -> np.ndarray:
    t = _col(_check_time(t), pair.x0)
    return (1.0 - t) * pair.x0 + t * pair.x1


def target_velocity(pair: PathPair) -> np.ndarray:
    return pair.x1 - pair.x0


def true_displacement(pair: PathPair, t0, t1) -> np.ndarray:
    t0 = _check_time(t0)
    t1 = _check_time(t1)
    if np.any(t0 >= t1):
        raise ValueError("true_displacement needs t0 < t1")
    return _col(t1 - t0, pair.x0) * (pair.x1 - pair.x0)


def segment_endpoint(partition: SegmentPartition, t):
    """Right end of the segment holding ``t``; a boundary maps to itself."""
    t = _check_time(t)
    b = np.asarray(partition.boundaries)
    out = b[np.searchsorted(b, t, side="left")]
    return float(out) if out.ndim == 0 else out


def pair_time(t, delta: float):
    out = np.minimum(_check_time(t) + delta, 1.0)
    return float(out) if out.ndim == 0 else out


def sample_times(sampler: TimeSampler, rng: np.random.Generator, kind: str, size: int | None = None):
    """Draw CFM, rectified or ordered multistep times.

    ``kind`` is one of ``"cfm"`` (U[eps, 1]), ``"rect"`` (U(0, 1)) or
    ``"multistep"`` (sorted pair with ``t1 - t0 >= min_gap``). With ``size``
    given, arrays of that length are returned.
    """
    n = 1 if size is None else size
    if kind == "cfm":
        t = rng.uniform(sampler.eps, 1.0, n)
    elif kind == "rect":
        t = rng.uniform(0.0, 1.0, n)
        # Generator.uniform may return the lower bound; the open interval excludes it
        while np.any(t == 0.0):
            bad = t == 0.0
            t[bad] = rng.uniform(0.0, 1.0, int(bad.sum()))
    elif kind == "multistep":
        pairs = np.sort(rng.uniform(0.0, 1.0, (n, 2)), axis=1)
        bad = (pairs[:, 1] - pairs[:, 0] < sampler.min_gap) | (pairs[:, 1] <= pairs[:, 0])
        while np.any(bad):
            pairs[bad] = np.sort(rng.uniform(0.0, 1.0, (int(bad.sum()), 2)), axis=1)
            bad = (pairs[:, 1] - pairs[:, 0] < sampler.min_gap) | (pairs[:, 1] <= pairs[:, 0])
        if size is None:
            return float(pairs[0, 0]), float(pairs[0, 1])
        return pairs[:, 0].copy(), pairs[:, 1].copy()
    else:
        raise ValueError(f"unknown time kind {kind!r}")
    return float(t[0]) if size is None else t
