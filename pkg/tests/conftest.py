import dataclasses

import numpy as np
import pytest

from ebcharge import data_path
from ebcharge.config import EnvConfig, TrainConfig, load_config
from ebcharge.env import BusChargingEnv
from ebcharge.prices import load_prices, series_from_hourly, split_train_test


@pytest.fixture(scope="session")
def run_config():
    return load_config(data_path("default.ini"))


@pytest.fixture(scope="session")
def price_series():
    return load_prices(data_path("synthetic_prices.csv"))


@pytest.fixture(scope="session")
def split_prices(price_series):
    return split_train_test(price_series, 31)


@pytest.fixture
def env(run_config, split_prices):
    return BusChargingEnv(run_config.env, split_prices[0])


def flat_price_env(price=0.03921, **overrides):
    cfg = dataclasses.replace(EnvConfig(), **overrides)
    return BusChargingEnv(cfg, series_from_hourly([price] * 48, cfg.dt_minutes))


def small_train_config(**overrides):
    base = TrainConfig(episodes=10, phase_threshold=5, eval_every=10, eval_episodes=2, hidden=(16, 16),
                       hidden_low_baseline=(16, 16), batch_high=8, batch_low=8, batch_flat=8,
                       batch_low_baseline=8, buffer_low=5000, buffer_high=1000)
    return dataclasses.replace(base, **overrides)


def rollout(env, rng, day=0, seed=0, policy=None):
    """Random feasible charging; returns the list of (state, outcome)."""
    s = env.reset(day, seed)
    steps = []
    while True:
        power = None
        if s.period_flag == 1:
            _, powers = env.feasible_actions(s)
            power = float(powers[rng.integers(powers.size)]) if policy is None else policy(s)
        out = env.step(power)
        steps.append((s, out))
        if out.done:
            return steps
        s = out.next_state


# acceptance verdict lines, echoed in the terminal summary
ACCEPTANCE = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> bool:
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
