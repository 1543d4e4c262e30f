"""Acceptance suite: one pass/fail line per criterion.

Runs under pytest (lines are collected into the terminal summary) or directly:
``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import functools
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tcfm import autodiff as ad  # noqa: E402
from tcfm.flowpath import TimeSampler, pair_time, sample_times  # noqa: E402
from tcfm.losses import (Batch, LossConfig, action_loss, cfm_loss, multistep_loss, rect_loss,  # noqa: E402
                         straight_oracle, total_loss, vel_smooth_loss)
from tcfm.model import ModelConfig, init_params  # noqa: E402
from tcfm.solvers import METHODS, CountingField, SolverConfig, convergence_order, exp_field, integrate  # noqa: E402
from tcfm.tasks import conditional_modes_task, gauss2gauss_task, gauss_marginal_velocity  # noqa: E402
from tcfm.training import (METRIC_COLUMNS, TrainConfig, eval_field, evaluate, init_state, train,  # noqa: E402
                           write_metrics)

from conftest import ACCEPTANCE_LINES, TINY  # noqa: E402

ORDER_STEPS = (5, 10, 20, 40, 80)
SEEDS = range(5)
# shared budget for the trained-policy and ablation checks
POLICY = dict(max_steps=1000, batch_size=64, learning_rate=1e-3)
POLICY_MODEL = (64, 64)
EVAL = SolverConfig("rk4", 30)
EVAL_SAMPLES = 1000
EVAL_SEED = 12345
ARMS = {
    "full": LossConfig(),
    "cfm_only": LossConfig(lambda_rect=0.0, lambda_multistep=0.0, lambda_vel=0.0, lambda_action=0.0),
    "no_vel": LossConfig(lambda_vel=0.0),
}


def record(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def check(name: str, ok: bool, detail: str) -> None:
    record(name, ok, detail)
    assert ok, detail


# --- solvers ---------------------------------------------------------------

def test_solver_order():
    start = time.perf_counter()
    e = convergence_order(exp_field, np.array([1.0]), np.array([math.e]), ORDER_STEPS, "euler")
    r = convergence_order(exp_field, np.array([1.0]), np.array([math.e]), ORDER_STEPS, "rk4")
    elapsed = time.perf_counter() - start
    ok = 0.85 <= e.slope <= 1.15 and 3.7 <= r.slope <= 4.3 and elapsed < 1.0
    check("solver order", ok, f"euler slope {e.slope:.4f}, rk4 slope {r.slope:.4f}, {elapsed:.3f}s")


def test_nfe_matched_dominance():
    start = time.perf_counter()
    x0 = np.array([1.0])
    rk4 = abs(integrate(exp_field, x0, None, SolverConfig("rk4", 30)).endpoint[0] - math.e)
    euler = abs(integrate(exp_field, x0, None, SolverConfig("euler", 120)).endpoint[0] - math.e)
    elapsed = time.perf_counter() - start
    ok = rk4 < euler / 100 and elapsed < 1.0
    check("NFE-matched dominance", ok,
          f"rk4(30) err {rk4:.3e}, euler(120) err {euler:.3e}, ratio {euler / rk4:.0f}, {elapsed:.3f}s")


def test_nfe_accounting():
    counter = CountingField(exp_field)
    traj = integrate(counter, np.array([1.0]), None, SolverConfig("rk4", 30))
    ok = counter.calls == 120 and traj.nfe == 120
    check("NFE accounting", ok, f"wrapper counted {counter.calls}, trajectory reports {traj.nfe}")


# --- losses ----------------------------------------------------------------

def _tiny_fixture():
    model = init_params(TINY, np.random.default_rng(0))
    rng = np.random.default_rng(100)
    batch = Batch(rng.uniform(-2, 2, (3, 1)), rng.uniform(-2, 2, (3, 1)), ad.parameter(rng.uniform(-2, 2, (3, 2))))
    return model, batch


LOSS_FNS = {"cfm": cfm_loss, "rect": rect_loss, "multistep": multistep_loss, "vel": vel_smooth_loss,
            "action": action_loss}


def test_gradient_suite():
    start = time.perf_counter()
    cfg = LossConfig()
    errors = {}
    for name, fn in LOSS_FNS.items():
        model, batch = _tiny_fixture()
        bound = model.bind()
        params = list(bound.nodes.values()) + [batch.c]
        # a fresh generator per call keeps the sampled times fixed across perturbations
        errors[name] = ad.grad_check(lambda: fn(bound, batch, cfg, np.random.default_rng(1)), params, h=1e-5)
    elapsed = time.perf_counter() - start
    ok = all(e < 1e-5 for e in errors.values()) and elapsed < 30
    detail = ", ".join(f"{k} {v:.2e}" for k, v in errors.items())
    check("gradient suite", ok, f"max rel err {detail}; {elapsed:.1f}s")


def test_oracle_zero_suite():
    rng = np.random.default_rng(0)
    batch = Batch(rng.normal(size=(64, 2)), rng.normal(size=(64, 2)), rng.normal(size=(64, 3)))
    oracle = straight_oracle(batch)
    _, report = total_loss(oracle, batch, LossConfig(), rng)
    losses = dict(zip(("cfm", "rect", "multistep", "vel", "action"), report.row()))
    field = lambda x, t, c: oracle(ad.constant(x), t, None).value  # noqa: E731
    # floating point cannot promise bit equality; "exact" means round-off of the state magnitude
    tol = 8 * np.finfo(float).eps * max(1.0, np.abs(batch.x0).max(), np.abs(batch.x1).max())
    worst = 0.0
    for method in METHODS:
        for n in (1, 7, 30):
            end = integrate(field, batch.x0, None, SolverConfig(method, n)).endpoint
            worst = max(worst, float(np.abs(end - batch.x1).max()))
    ok = all(v < 1e-24 for v in losses.values()) and worst <= tol
    detail = ", ".join(f"{k} {v:.1e}" for k, v in losses.items())
    check("oracle-zero suite", ok, f"{detail}; worst endpoint gap {worst:.1e} (tol {tol:.1e})")


def test_collapsed_supervision():
    rng = np.random.default_rng(0)
    t_hi = rng.uniform(0.3, 1.0, 1000)
    t_hi = t_hi[t_hi > 0.3]
    clamped = bool(np.all(pair_time(t_hi, 0.7) == 1.0))
    t = sample_times(TimeSampler(), np.random.default_rng(1), "cfm", 100_000)
    frac = float(np.mean(pair_time(t, 0.7) < 1.0))
    eps = TimeSampler().eps
    measure = (0.3 - eps) / (1.0 - eps)
    ok = clamped and len(t_hi) == 1000 and abs(frac - measure) <= 0.02 * measure
    check("collapsed supervision", ok, f"all r=1 above 0.3: {clamped}; r<1 fraction {frac:.4f} vs {measure:.4f}")


# --- trained models --------------------------------------------------------

@functools.lru_cache(maxsize=None)
def trained_arm(arm: str, seed: int):
    task = conditional_modes_task(2, 1.0)
    cfg = TrainConfig(seed=seed, loss=ARMS[arm], **POLICY)
    state = init_state(ModelConfig(2, 2, hidden_dims=POLICY_MODEL), cfg)
    train(state, task, cfg)
    return evaluate(eval_field(state), task, EVAL, EVAL_SAMPLES, np.random.default_rng(EVAL_SEED))


def test_trained_policy_mode_accuracy():
    start = time.perf_counter()
    report = trained_arm("full", 0)
    elapsed = time.perf_counter() - start
    ok = report.mode_accuracy >= 0.95
    check("trained toy policy", ok, f"mode accuracy {report.mode_accuracy:.3f} over {report.num_samples} samples, "
                                    f"endpoint mse {report.endpoint_mse:.4f}, {elapsed:.0f}s")


def _ablation(metric: str, other: str) -> tuple[int, list[str]]:
    wins, parts = 0, []
    for seed in SEEDS:
        full = getattr(trained_arm("full", seed), metric)
        alt = getattr(trained_arm(other, seed), metric)
        wins += full < alt
        parts.append(f"{full:.4g}<{alt:.4g}" if full < alt else f"{full:.4g}>={alt:.4g}")
    return wins, parts


def test_straightness_ablation():
    wins, parts = _ablation("straightness", "cfm_only")
    check("straightness ablation", wins >= 4, f"full straighter in {wins}/5 seeds ({', '.join(parts)})")


def test_smoothness_ablation():
    wins, parts = _ablation("velocity_roughness", "no_vel")
    check("smoothness ablation", wins >= 4, f"full smoother in {wins}/5 seeds ({', '.join(parts)})")


def monte_carlo_oracle_gap(seed: int = 0) -> float:
    """Worst gap between the analytic field and a kernel regression of x1 - x0 on x_t."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in np.arange(1, 10) / 10:
        x0 = rng.standard_normal(1_000_000)
        x1 = rng.standard_normal(1_000_000)
        xt, u = (1 - t) * x0 + t * x1, x1 - x0
        for x in np.linspace(-2, 2, 21):
            dx = xt - x
            w = np.exp(-0.5 * (dx / 0.5) ** 2)
            s0, s1, s2 = w.sum(), (w * dx).sum(), (w * dx * dx).sum()
            t0, t1 = (w * u).sum(), (w * u * dx).sum()
            worst = max(worst, abs((s2 * t0 - s1 * t1) / (s0 * s2 - s1 * s1) - gauss_marginal_velocity(x, t, 0, 1)))
    return worst


def test_gauss2gauss_oracle_agreement():
    mc_gap = monte_carlo_oracle_gap()
    task = gauss2gauss_task(0.0, 1.0)
    # alpha=0 and delta=1 make the consistency term a (1-t)^2-weighted regression onto x1 - x0,
    # so together with the rect term the population minimizer is the marginal field
    loss = LossConfig(alpha=0.0, delta=1.0, lambda_multistep=0.0, lambda_vel=0.0, lambda_action=0.0)
    cfg = TrainConfig(max_steps=1000, batch_size=256, learning_rate=1e-3, seed=0, loss=loss)
    state = init_state(ModelConfig(1, 0, hidden_dims=(64, 64)), cfg)
    train(state, task, cfg)
    field = eval_field(state)
    xs = np.linspace(-2, 2, 21)
    gaps = [np.abs(field(xs[:, None], np.full(21, t), np.zeros((21, 0)))[:, 0] - task.oracle(xs, t))
            for t in np.linspace(0.1, 0.9, 9)]
    mae = float(np.mean(gaps))
    ok = mc_gap < 0.02 and mae < 0.1
    check("gauss2gauss oracle agreement", ok, f"field MAE {mae:.4f}; Monte-Carlo oracle gap {mc_gap:.4f}")


def test_determinism_and_resume(tmp_path):
    from tcfm.checkpoint import load_checkpoint, save_checkpoint

    task = conditional_modes_task(2, 1.0)
    cfg = TrainConfig(max_steps=1000, batch_size=32, learning_rate=1e-3, seed=7)
    model_cfg = ModelConfig(2, 2, hidden_dims=(16, 16), time_embed_dim=16)

    def straight_run(path):
        state = init_state(model_cfg, cfg)
        rows = train(state, task, cfg)
        write_metrics(rows, path)
        return rows

    rows = straight_run(tmp_path / "a.csv")
    straight_run(tmp_path / "b.csv")
    identical = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    state = init_state(model_cfg, cfg)
    first = train(state, task, cfg, until=500)
    save_checkpoint(tmp_path / "ckpt_500.json", state, {"task": task.spec(), "seed": 7,
                                                         "model": model_cfg.to_dict()})
    resumed, _ = load_checkpoint(tmp_path / "ckpt_500.json")
    second = train(resumed, task, cfg)
    got = np.array([[r[k] for k in METRIC_COLUMNS] for r in first + second])
    want = np.array([[r[k] for k in METRIC_COLUMNS] for r in rows])
    gap = float(np.abs(got - want).max()) if got.shape == want.shape else math.inf
    ok = identical and gap <= 1e-9
    check("determinism and resume", ok, f"byte-identical metrics: {identical}; resume max gap {gap:.1e}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
