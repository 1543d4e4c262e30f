"""Fixed-grid Euler, midpoint and RK4 integration of dx/dt = v(x, t, c) on [0, 1]."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import NonFiniteError

NumpyField = Callable[[np.ndarray, float, np.ndarray], np.ndarray]
METHODS = ("euler", "midpoint", "rk4")
EVALS_PER_STEP = {"euler": 1, "midpoint": 2, "rk4": 4}


@dataclass(frozen=True)
class SolverConfig:
    method: str = "rk4"
    steps: int = 30

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")

    @property
    def nfe(self) -> int:
        return EVALS_PER_STEP[self.method] * self.steps


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    nfe: int

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self, path, sample: int | None = None) -> None:
        """Write ``step,t,x_0..x_{d-1}`` rows and a trailing ``# nfe=`` line."""
        states = self.states if sample is None else self.states[:, sample]
        states = states.reshape(len(self.times), -1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "t"] + [f"x_{i}" for i in range(states.shape[1])])
            for n, (t, x) in enumerate(zip(self.times, states)):
                w.writerow([n, f"{t:.17g}"] + [f"{v:.17g}" for v in x])
            fh.write(f"# nfe={self.nfe}\n")


class CountingField:
    """Wraps a field and counts calls."""

    def __init__(self, field: NumpyField):
        self.field = field
        self.calls = 0

    def __call__(self, x, t, c):
        self.calls += 1
        return self.field(x, t, c)


def _eval(field, x, t, c, label: str):
    v = np.asarray(field(x, t, c), dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"non-finite field value ({label}) at t={t!r}, x={x!r}")
    return v


def _check_dt(dt: float) -> None:
    if not dt > 0:
        raise ValueError(f"step size must be positive, got {dt}")


def euler_step(field: NumpyField, x, t: float, dt: float, c=None) -> np.ndarray:
    _check_dt(dt)
    return x + dt * _eval(field, x, t, c, "euler")


def midpoint_step(field: NumpyField, x, t: float, dt: float, c=None) -> np.ndarray:
    _check_dt(dt)
    k1 = _eval(field, x, t, c, "k1")
    return x + dt * _eval(field, x + 0.5 * dt * k1, t + 0.5 * dt, c, "k2")


def rk4_step(field: NumpyField, x, t: float, dt: float, c=None) -> np.ndarray:
    _check_dt(dt)
    k1 = dt * _eval(field, x, t, c, "k1")
    k2 = dt * _eval(field, x + 0.5 * k1, t + 0.5 * dt, c, "k2")
    k3 = dt * _eval(field, x + 0.5 * k2, t + 0.5 * dt, c, "k3")
    k4 = dt * _eval(field, x + k3, t + dt, c, "k4")
    return x + (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0


STEPPERS = {"euler": euler_step, "midpoint": midpoint_step, "rk4": rk4_step}


def integrate(field: NumpyField, x0, c, cfg: SolverConfig) -> Trajectory:
    """Integrate from t=0 to t=1 on a uniform grid; ``x0`` may be (d,) or (B, d)."""
    counter = CountingField(field)
    stepper = STEPPERS[cfg.method]
    N = cfg.steps
    times = np.arange(N + 1) / N
    x = np.array(x0, dtype=np.float64)
    states = np.empty((N + 1,) + x.shape)
    states[0] = x
    for n in range(N):
        try:
            x = stepper(counter, x, times[n], times[n + 1] - times[n], c)
        except NonFiniteError as err:
            raise NonFiniteError(f"step {n}: {err}") from err
        states[n + 1] = x
    return Trajectory(times, states, counter.calls)


@dataclass(frozen=True)
class OrderFit:
    method: str
    steps: tuple[int, ...]
    errors: tuple[float, ...]
    slope: float | None

    @property
    def exact(self) -> bool:
        return self.slope is None

    def __str__(self) -> str:
        return "exact" if self.exact else f"{self.slope:.4f}"


def convergence_order(field: NumpyField, x0, exact_endpoint, steps: Sequence[int], method: str,
                      c=None, rtol: float = 64 * np.finfo(float).eps) -> OrderFit:
    """Least-squares slope of log(endpoint error) against log(dt).

    An error within ``rtol`` (relative to the endpoint) on any grid means the
    method integrates the field exactly; no slope is fitted then.
    """
    if len(steps) < 3:
        raise ValueError("need at least three step counts")
    exact_endpoint = np.asarray(exact_endpoint, dtype=np.float64)
    errors = []
    for N in steps:
        traj = integrate(field, x0, c, SolverConfig(method, N))
        errors.append(float(np.max(np.abs(traj.endpoint - exact_endpoint))))
    floor = rtol * max(1.0, float(np.max(np.abs(exact_endpoint))))
    if min(errors) <= floor:
        return OrderFit(method, tuple(steps), tuple(errors), None)
    dts = 1.0 / np.asarray(steps, dtype=np.float64)
    slope = np.polyfit(np.log(dts), np.log(errors), 1)[0]
    return OrderFit(method, tuple(steps), tuple(errors), float(slope))


def exp_field(x, t, c=None):
    return x


def bench(steps: Sequence[int] = (5, 10, 20, 40, 80), budget: int = 120) -> dict:
    """Order slopes on dx/dt = x, x(0) = 1 and the NFE-matched Euler/RK4 error ratio."""
    fits = {m: convergence_order(exp_field, np.array([1.0]), np.array([np.e]), steps, m) for m in METHODS}
    err = {}
    for m in METHODS:
        n = budget // EVALS_PER_STEP[m]
        traj = integrate(exp_field, np.array([1.0]), None, SolverConfig(m, n))
        err[m] = float(abs(traj.endpoint[0] - np.e))
    return {
        "slopes": {m: fits[m].slope for m in METHODS},
        "errors": {m: list(fits[m].errors) for m in METHODS},
        "steps": list(steps),
        "budget": budget,
        "budget_errors": err,
        "euler_over_rk4": err["euler"] / err["rk4"],
    }
