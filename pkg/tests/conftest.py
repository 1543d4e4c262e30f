import numpy as np
import pytest

from tcfm import autodiff as ad
from tcfm.losses import Batch
from tcfm.model import ModelConfig, init_params

# pass/fail lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []

# hidden=[4], action_dim=1, cond_dim=2; a 2-wide embedding keeps every time feature O(1)
TINY = ModelConfig(action_dim=1, cond_dim=2, hidden_dims=(4,), time_embed_dim=2)


@pytest.fixture
def tiny_model():
    return init_params(TINY, np.random.default_rng(0))


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(100)
    return Batch(rng.uniform(-2, 2, (3, 1)), rng.uniform(-2, 2, (3, 1)), rng.uniform(-2, 2, (3, 2)))


def np_forward(params, config, x, t, c):
    """Straight numpy reimplementation of the velocity MLP for a single sample."""
    from tcfm.model import time_embed

    cond = np.concatenate([time_embed(t, config.time_embed_dim, config.time_base), c])
    h = x
    for i in range(len(config.hidden_dims)):
        h = np.tanh(h @ params[f"W{i}"] + params[f"b{i}"])
        gamma = cond @ params[f"film_gamma_W{i}"] + params[f"film_gamma_b{i}"]
        beta = cond @ params[f"film_beta_W{i}"] + params[f"film_beta_b{i}"]
        h = gamma * h + beta
    return h @ params["W_out"] + params["b_out"]


def c_param(batch):
    return Batch(batch.x0, batch.x1, ad.parameter(batch.c))


@pytest.fixture(scope="session")
def trained_modes():
    """Small model trained briefly on the two-mode conditional task, shared across tests."""
    from tcfm.tasks import conditional_modes_task
    from tcfm.training import TrainConfig, init_state, train

    task = conditional_modes_task(2, 1.0)
    cfg = TrainConfig(max_steps=300, batch_size=64, learning_rate=1e-3, seed=0)
    state = init_state(ModelConfig(action_dim=2, cond_dim=2, hidden_dims=(32, 32)), cfg)
    train(state, task, cfg)
    return state.model, task


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
