"""Toy transport problems with (x0, x1, c) samplers and, where known, marginal-velocity oracles."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .losses import Batch

Sampler = Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray, np.ndarray]]


@dataclass
class Task:
    name: str
    action_dim: int
    cond_dim: int
    sampler: Sampler
    oracle: Callable[[np.ndarray, float], np.ndarray] | None = None
    # condition index -> mode center; set for conditional tasks
    mode_targets: dict[int, np.ndarray] | None = None
    # (n, k) conditions -> (n, m, d) candidate endpoints; nearest one scores the MSE
    valid_targets: Callable[[np.ndarray], np.ndarray] | None = None
    params: dict = field(default_factory=dict)

    def sample(self, rng: np.random.Generator, n: int) -> Batch:
        x0, x1, c = self.sampler(rng, n)
        return Batch(x0, x1, c)

    def mode_of(self, c: np.ndarray) -> np.ndarray:
        return np.argmax(c, axis=1)

    def spec(self) -> dict:
        return {"name": self.name, **self.params}


def toy1d_task() -> Task:
    """Noise to an equal mixture of point masses at -1 and +1; no conditioning."""
    def sampler(rng, n):
        x0 = rng.standard_normal((n, 1))
        x1 = np.where(rng.random((n, 1)) < 0.5, -1.0, 1.0)
        return x0, x1, np.zeros((n, 0))

    def targets(c):
        return np.broadcast_to(np.array([[-1.0], [1.0]]), (len(c), 2, 1))
    return Task("toy1d", 1, 0, sampler, valid_targets=targets)


def gauss_marginal_velocity(x, t, mu, sigma):
    """E[x1 - x0 | x_t = x] for x0 ~ N(0, 1), x1 ~ N(mu, sigma^2), independent, per dimension."""
    gain = (t * sigma**2 - (1.0 - t)) / ((1.0 - t) ** 2 + t**2 * sigma**2)
    return mu + gain * (x - t * mu)


def gauss2gauss_task(mu: float = 0.0, sigma: float = 1.0, dim: int = 1) -> Task:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")

    def sampler(rng, n):
        x0 = rng.standard_normal((n, dim))
        x1 = mu + sigma * rng.standard_normal((n, dim))
        return x0, x1, np.zeros((n, 0))

    def oracle(x, t):
        return gauss_marginal_velocity(np.asarray(x, dtype=float), t, mu, sigma)
    return Task("gauss2gauss", dim, 0, sampler, oracle=oracle,
                params={"mu": mu, "sigma": sigma, "dim": dim})


def conditional_modes_task(num_modes: int = 2, radius: float = 1.0, jitter: float = 0.05) -> Task:
    """One-hot condition selects a mode center on a circle; x1 = center + N(0, jitter^2)."""
    if num_modes < 2:
        raise ValueError(f"num_modes must be >= 2, got {num_modes}")
    theta = 2.0 * np.pi * np.arange(num_modes) / num_modes
    centers = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    # cos(pi) etc. leave ~1e-16 residue
    centers[np.abs(centers) < 1e-12] = 0.0

    def sampler(rng, n):
        x0 = rng.standard_normal((n, 2))
        labels = rng.integers(0, num_modes, n)
        x1 = centers[labels] + jitter * rng.standard_normal((n, 2))
        return x0, x1, np.eye(num_modes)[labels]

    def targets(c):
        return centers[np.argmax(c, axis=1)][:, None, :]
    return Task("conditional_modes", 2, num_modes, sampler,
                mode_targets={k: centers[k].copy() for k in range(num_modes)}, valid_targets=targets,
                params={"num_modes": num_modes, "radius": radius, "jitter": jitter})


TASKS = {"toy1d": toy1d_task, "gauss2gauss": gauss2gauss_task, "conditional_modes": conditional_modes_task}


def make_task(spec: dict) -> Task:
    spec = dict(spec)
    name = spec.pop("name")
    if name not in TASKS:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(TASKS)}")
    return TASKS[name](**spec)


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent per-thread streams: child i of SeedSequence(seed)."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass
class FrozenDataset:
    x0: np.ndarray
    x1: np.ndarray
    c: np.ndarray

    def __len__(self) -> int:
        return len(self.x0)

    def batch(self, idx: np.ndarray) -> Batch:
        return Batch(self.x0[idx], self.x1[idx], self.c[idx])

    def to_csv(self, path) -> None:
        d, k = self.x0.shape[1], self.c.shape[1]
        header = [f"x0_{i}" for i in range(d)] + [f"x1_{i}" for i in range(d)] + [f"c_{i}" for i in range(k)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in np.hstack([self.x0, self.x1, self.c]):
                w.writerow([f"{v:.17g}" for v in row])

    @classmethod
    def from_csv(cls, path) -> "FrozenDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=np.float64).reshape(len(rows) - 1, len(rows[0]))
        cols = {p: [i for i, h in enumerate(header) if h.startswith(p + "_")] for p in ("x0", "x1", "c")}
        return cls(body[:, cols["x0"]], body[:, cols["x1"]], body[:, cols["c"]])


def freeze(task: Task, rng: np.random.Generator, size: int = 4096) -> FrozenDataset:
    b = task.sample(rng, size)
    return FrozenDataset(b.x0, b.x1, np.asarray(b.c))
