import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcfm.autodiff import NonFiniteError
from tcfm.solvers import (EVALS_PER_STEP, METHODS, CountingField, SolverConfig, bench, convergence_order,
                          euler_step, exp_field, integrate, midpoint_step, rk4_step)


def const(v):
    return lambda x, t, c: np.full_like(np.asarray(x, dtype=float), v)


def time_field(x, t, c):
    return np.full_like(np.asarray(x, dtype=float), t)


def test_euler_examples():
    assert euler_step(const(2.0), np.array([0.0]), 0.0, 0.5)[0] == 1.0
    assert euler_step(exp_field, np.array([1.0]), 0.0, 0.1)[0] == pytest.approx(1.1, abs=1e-15)
    x = np.array([0.3, -2.0])
    assert np.array_equal(euler_step(const(0.0), x, 0.4, 0.2), x)


def test_rk4_examples():
    x = np.array([0.7, -1.3])
    assert np.array_equal(rk4_step(const(1.5), x, 0.2, 0.25), euler_step(const(1.5), x, 0.2, 0.25))
    h = 0.1
    taylor = 1 + h + h**2 / 2 + h**3 / 6 + h**4 / 24
    assert rk4_step(exp_field, np.array([1.0]), 0.0, h)[0] == pytest.approx(taylor, abs=1e-15)
    assert taylor == pytest.approx(1.1051708333333334, abs=1e-15)
    assert rk4_step(time_field, np.array([0.0]), 0.0, 1.0)[0] == 0.5


def test_midpoint_is_second_order_taylor_on_linear_field():
    h = 0.1
    assert midpoint_step(exp_field, np.array([1.0]), 0.0, h)[0] == pytest.approx(1 + h + h**2 / 2, abs=1e-15)


@pytest.mark.parametrize("step", [euler_step, midpoint_step, rk4_step])
def test_steppers_reject_nonpositive_dt(step):
    with pytest.raises(ValueError):
        step(exp_field, np.array([1.0]), 0.0, 0.0)


def test_nonfinite_stage_is_named():
    def bad_after_first(x, t, c):
        return np.array([np.nan]) if t > 0 else np.array([1.0])
    with pytest.raises(NonFiniteError, match="k2"):
        rk4_step(bad_after_first, np.array([0.0]), 0.0, 0.5)


def test_integrate_reports_failing_step():
    def blows_up(x, t, c):
        return np.array([np.inf]) if t >= 0.5 else np.array([0.0])
    with pytest.raises(NonFiniteError, match="step 2"):
        integrate(blows_up, np.array([0.0]), None, SolverConfig("euler", 4))


def test_rk4_thirty_steps_costs_120_evaluations():
    traj = integrate(exp_field, np.array([1.0]), None, SolverConfig("rk4", 30))
    assert traj.nfe == 120
    assert integrate(exp_field, np.array([1.0]), None, SolverConfig("euler", 120)).nfe == 120


@settings(max_examples=40, deadline=None)
@given(method=st.sampled_from(METHODS), n=st.integers(1, 50), seed=st.integers(0, 2**32 - 1))
def test_constant_field_transports_exactly(method, n, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(4, 2))
    x1 = rng.normal(size=(4, 2))
    traj = integrate(lambda x, t, c: x1 - x0, x0, None, SolverConfig(method, n))
    np.testing.assert_allclose(traj.endpoint, x1, rtol=0, atol=1e-13)
    assert traj.nfe == EVALS_PER_STEP[method] * n
    assert np.array_equal(traj.states[0], x0)
    np.testing.assert_allclose(np.diff(traj.times), 1.0 / n, atol=1e-15)
    assert traj.times[0] == 0.0 and traj.times[-1] == 1.0


def test_counting_field():
    f = CountingField(exp_field)
    for _ in range(3):
        f(np.ones(1), 0.0, None)
    assert f.calls == 3


def test_order_examples():
    steps = (5, 10, 20, 40, 80)
    euler = convergence_order(exp_field, np.array([1.0]), np.array([math.e]), steps, "euler")
    rk4 = convergence_order(exp_field, np.array([1.0]), np.array([math.e]), steps, "rk4")
    mid = convergence_order(exp_field, np.array([1.0]), np.array([math.e]), steps, "midpoint")
    assert abs(euler.slope - 1.0) <= 0.15
    assert abs(rk4.slope - 4.0) <= 0.3
    assert abs(mid.slope - 2.0) <= 0.2


def test_rk4_integrates_cubic_time_field_exactly():
    fit = convergence_order(lambda x, t, c: np.full_like(x, 3 * t * t), np.array([0.0]), np.array([1.0]),
                            (1, 2, 4), "rk4")
    assert fit.exact and str(fit) == "exact"
    with pytest.raises(ValueError):
        convergence_order(exp_field, np.array([1.0]), np.array([math.e]), (5, 10), "rk4")


def test_bench_dominance():
    report = bench()
    assert report["euler_over_rk4"] > 100
    assert set(report["slopes"]) == set(METHODS)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig("heun", 10)
    with pytest.raises(ValueError):
        SolverConfig("rk4", 0)
    assert SolverConfig("midpoint", 7).nfe == 14


def test_trajectory_csv(tmp_path):
    traj = integrate(exp_field, np.array([[1.0, 2.0], [0.5, 0.0]]), None, SolverConfig("rk4", 3))
    path = tmp_path / "traj.csv"
    traj.to_csv(path, sample=0)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,t,x_0,x_1"
    assert len(lines) == 1 + 4 + 1 and lines[-1] == "# nfe=12"
    assert float(lines[4].split(",")[2]) == traj.states[3, 0, 0]


def test_integration_is_deterministic():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(3, 3))
    field = lambda x, t, c: np.tanh(x @ W) * (1 + t)
    x0 = rng.normal(size=(5, 3))
    a = integrate(field, x0, None, SolverConfig("rk4", 17))
    b = integrate(field, x0, None, SolverConfig("rk4", 17))
    assert np.array_equal(a.states, b.states)
