import dataclasses
from collections import Counter, defaultdict

import numpy as np
import pytest

from conftest import flat_price_env, small_train_config
from ebcharge.agents import (MODES, Features, PeriodRecord, PolicyBundle, Trainer, counterfactual_high_reward,
                             epsilon_greedy, episodes_to_converge, evaluate, high_reward_accumulate,
                             low_reward, mode_flags, pi_q, range_anxiety_penalty, run_episode, eval_protocol,
                             write_log)
from ebcharge.config import EnvConfig, TrainConfig
from ebcharge.env import BusChargingEnv, feasible_options


# -- building blocks ------------------------------------------------------------

def test_greedy_limit_and_tie_break():
    rng = np.random.default_rng(0)
    assert epsilon_greedy(np.array([3.0, 7.0, 7.0]), [0, 1, 2], 0.0, rng) == 1
    assert epsilon_greedy(np.array([9.0, 1.0, 2.0]), [2, 1], 0.0, rng) == 2


def test_full_exploration_is_uniform_over_feasible():
    rng = np.random.default_rng(1)
    feasible = [0, 2, 3, 5]
    n = 100_000
    c = Counter(epsilon_greedy(np.zeros(6), feasible, 1.0, rng) for _ in range(n))
    assert set(c) == set(feasible)
    for i in feasible:
        assert abs(c[i] / n - 0.25) < 0.01


def test_empty_feasible_set_rejected():
    with pytest.raises(ValueError):
        epsilon_greedy(np.zeros(3), [], 0.1, np.random.default_rng(0))


def test_low_rewards():
    assert low_reward(0, 0, 1 / 6, option=200, achieved_end_soc=180, kappa=0.005) == pytest.approx(-2.0)
    assert low_reward(0, 0, 1 / 6, option=180, achieved_end_soc=180, kappa=0.005) == 0.0
    assert low_reward(60, 0.02, 1 / 6) == pytest.approx(-0.2)
    assert range_anxiety_penalty(220, 240, 0.0006) == pytest.approx(-0.24)


def test_fixed_rule_charges_flat_out_towards_a_far_target():
    cfg = EnvConfig()
    assert pi_q(100.0, 200.0, cfg)[1] == 120.0
    assert pi_q(230.0, 240.0, cfg)[1] == pytest.approx(60.0)
    assert pi_q(235.0, 240.0, cfg)[1] == pytest.approx(30.0)


def test_fixed_rule_holds_at_target_and_discharges_from_above():
    cfg = EnvConfig()
    assert pi_q(150.0, 150.0, cfg)[1] == 0.0
    assert pi_q(110.0, 100.0, cfg)[1] == pytest.approx(-60.0)
    assert pi_q(110.0, 100.0, dataclasses.replace(cfg, clip_actions=False))[1] == pytest.approx(-60.0)
    # equal distance on both sides: do not pass the target
    assert pi_q(100.0, 105.0, cfg)[1] == 0.0


def test_fixed_rule_never_passes_the_target_by_more_than_half_a_step():
    cfg = EnvConfig()
    rng = np.random.default_rng(3)
    for _ in range(500):
        soc, w = rng.uniform(0, 240), rng.choice(cfg.option_grid)
        for _ in range(12):
            _, p = pi_q(soc, w, cfg)
            nxt = soc + p * cfg.dt_hours
            assert abs(nxt - w) <= abs(soc - w) + 1e-9
            soc = nxt
        assert abs(soc - w) <= 5.0 + 1e-9


def test_high_reward_accumulation():
    r = 0.0
    for x in (-0.5, 0.0, 0.0, -50.0):
        r = high_reward_accumulate(r, x)
    assert r == -50.5
    assert high_reward_accumulate(-3.0, 0.0) == -3.0


def test_counterfactual_replay_under_constant_price():
    cfg = EnvConfig()
    p = 0.025
    rec = PeriodRecord(100.0, [p] * 4, 0.0)
    r = counterfactual_high_reward(rec, 140.0, cfg, episode=0, phase_threshold=10)
    assert r == pytest.approx(-2 * 120 * (1 / 6) * p)
    assert counterfactual_high_reward(PeriodRecord(100.0, [p] * 4, 0.0), 100.0, cfg, 0, 10) == 0.0
    rec_term = PeriodRecord(100.0, [p] * 4, -50.0)
    assert counterfactual_high_reward(rec_term, 100.0, cfg, 0, 10) == -50.0


def test_second_phase_returns_actual_reward():
    cfg = EnvConfig()
    assert counterfactual_high_reward(None, 140.0, cfg, episode=10, phase_threshold=10, actual=-1.234) == -1.234
    with pytest.raises(ValueError):
        counterfactual_high_reward(None, 140.0, cfg, episode=3, phase_threshold=10)


def test_epsilon_schedule_is_monotone_and_reaches_floor():
    tc = TrainConfig(episodes=100, phase_threshold=25)
    eps = [tc.epsilon(e) for e in range(100)]
    assert eps[0] == 1.0 and eps[-1] == pytest.approx(0.05)
    assert all(a >= b for a, b in zip(eps, eps[1:]))


def test_mode_flags():
    assert mode_flags("hddqn").her is False and mode_flags("hddqn").relabel is False
    assert mode_flags("hddqn_her").restrict_options
    with pytest.raises(ValueError):
        mode_flags("sarsa")


# -- training loops --------------------------------------------------------------

def _envs(split_prices, run_config):
    return BusChargingEnv(run_config.env, split_prices[0]), BusChargingEnv(run_config.env, split_prices[1])


@pytest.mark.parametrize("mode", MODES)
def test_smoke_training_each_mode(mode, split_prices, run_config, tmp_path):
    env, tenv = _envs(split_prices, run_config)
    tr = Trainer(mode, env, small_train_config(), range(31), tenv, range(7))
    res = tr.train(log_path=tmp_path / "log.csv")
    assert len(res.log) == 1
    fl = mode_flags(mode)
    if fl.low or fl.flat:
        assert len(res.low_buffer) > 0
    if fl.high:
        assert len(res.high_buffer) > 0
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "episode,phase,eps_low,eps_high,low_loss,high_loss,eval_mean,eval_stderr"
    assert len(lines) == 2


def test_training_log_is_reproducible(split_prices, run_config, tmp_path):
    env, tenv = _envs(split_prices, run_config)
    tc = small_train_config(episodes=20, eval_every=5)
    a = Trainer("hddqn_her", env, tc, range(31), tenv, range(7)).train(tmp_path / "a.csv")
    b = Trainer("hddqn_her", env, tc, range(31), tenv, range(7)).train(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


class PeriodAudit:
    def __init__(self):
        self.periods = defaultdict(int)

    def __call__(self, trainer, episode, instance, achieved, option):
        self.periods[episode] += 1


@pytest.mark.parametrize("mode", ["hddqn_her", "hddqn", "ddqn_high"])
def test_one_high_transition_per_cycle(mode, split_prices, run_config):
    env, _ = _envs(split_prices, run_config)
    audit = PeriodAudit()
    tc = small_train_config(episodes=30, phase_threshold=10)
    res = Trainer(mode, env, tc, range(31), on_period_end=audit).train()
    per_episode = Counter(r.episode_id for r in res.high_buffer.live_records())
    assert per_episode == Counter(audit.periods)
    assert max(per_episode.values()) <= env.schedule.K - 1


def test_relabeled_and_prescribed_options(split_prices, run_config):
    env, _ = _envs(split_prices, run_config)
    cfg = env.cfg
    tc = small_train_config(episodes=30, phase_threshold=10)
    res = Trainer("hddqn_her", env, tc, range(31)).train()
    for r in res.high_buffer.live_records():
        allowed = feasible_options(r.start_state.soc, r.start_state.steps_to_departure, cfg)
        assert np.any(np.abs(allowed - r.prescribed_option) < 1e-9)
        nearest = int(np.argmin(np.abs(cfg.option_grid - r.relabeled_option)))
        assert r.option_index == nearest
    res_plain = Trainer("hddqn", env, tc, range(31)).train()
    assert all(r.relabeled_option == r.prescribed_option for r in res_plain.high_buffer.live_records())


def test_phase_switch(split_prices, run_config):
    env, _ = _envs(split_prices, run_config)
    tc = small_train_config(episodes=12, phase_threshold=4)
    audit = PeriodAudit()
    res = Trainer("hddqn_her", env, tc, range(31), on_period_end=audit).train()
    early = sum(v for k, v in audit.periods.items() if k < 4)
    assert res.stats.counterfactual_replays == early
    res2 = Trainer("hddqn", env, tc, range(31)).train()
    assert res2.stats.counterfactual_replays == 0


def test_low_rewards_match_trace_charging_cost(split_prices, run_config):
    env, _ = _envs(split_prices, run_config)
    tc = small_train_config(episodes=8)
    res = Trainer("hddqn_her", env, tc, range(31)).train()
    recs = [r for r in res.low_buffer.live_records() if not r.hindsight]
    by_instance = defaultdict(list)
    for r in recs:
        by_instance[(r.episode_id, r.option_instance_id)].append(r)
    assert by_instance
    for rows in by_instance.values():
        interior = sum(r.reward - r.target_penalty for r in rows)
        cost = -sum((r.next_state.soc - r.state.soc) * r.state.price for r in rows)
        assert interior == pytest.approx(cost, abs=1e-9)
        assert all(r.target_penalty == 0.0 for r in rows if not r.done)


class InstanceAudit:
    def __init__(self):
        self.last = {}

    def __call__(self, trainer, episode, instance, achieved, option):
        self.last[episode] = instance


def test_terminal_entry_deletes_current_option_records(split_prices, run_config):
    env, _ = _envs(split_prices, run_config)
    audit = InstanceAudit()
    res = Trainer("hddqn_her", env, small_train_config(episodes=20), range(31), on_period_end=audit).train()
    assert res.stats.terminal_episodes > 0 and res.stats.deleted > 0
    live = {(r.episode_id, r.option_instance_id) for r in res.low_buffer.live_records()}
    wiped = [ep for ep, inst in audit.last.items() if (ep, inst) not in live]
    assert len(wiped) == res.stats.terminal_episodes


# -- evaluation -------------------------------------------------------------------

class _FixedBundle(PolicyBundle):
    """ddqn_high-shaped bundle whose target rule is supplied directly."""

    def __init__(self, cfg, rule):
        feats = Features(cfg, 8, 11, 0.0, 0.05)
        tc = small_train_config()
        base = PolicyBundle.build("ddqn_high", cfg, tc, feats)
        super().__init__("ddqn_high", cfg, feats, base.high, base.high_target)
        self.rule = rule

    def choose_option(self, s, epsilon, rng):
        return self.rule(s), -1


def test_never_charging_depletes(split_prices, run_config):
    _, tenv = _envs(split_prices, run_config)
    bundle = _FixedBundle(run_config.env, lambda s: s.soc)
    summ = evaluate(bundle, tenv, *eval_protocol(10, range(7)))
    assert summ.terminals == 10 and np.all(summ.returns <= -run_config.env.c_end)


def test_full_battery_rule_never_depletes(split_prices, run_config):
    _, tenv = _envs(split_prices, run_config)
    bundle = _FixedBundle(run_config.env, lambda s: 240.0)
    summ = evaluate(bundle, tenv, *eval_protocol(100, range(7)))
    assert summ.terminals == 0


def test_episode_return_equals_sum_of_step_rewards(split_prices, run_config):
    _, tenv = _envs(split_prices, run_config)
    bundle = _FixedBundle(run_config.env, lambda s: 200.0)
    r = run_episode(bundle, tenv, 2, 77, trace=True)
    assert r.ret == pytest.approx(sum(row[8] for row in r.trace), abs=1e-12)
    assert r.charging_cost == pytest.approx(sum(row[8] for row in r.trace if row[2] == 1), abs=1e-12)


def test_flat_return_identity(split_prices, run_config):
    env, tenv = _envs(split_prices, run_config)
    res = Trainer("ddqn_original", env, small_train_config(), range(31)).train()
    r = run_episode(res.bundle, tenv, 1, 5, trace=True)
    assert r.ret == pytest.approx(sum(row[8] for row in r.trace), abs=1e-12)


def test_checkpoint_round_trip(split_prices, run_config, tmp_path):
    env, tenv = _envs(split_prices, run_config)
    tc = small_train_config()
    res = Trainer("hddqn_her", env, tc, range(31)).train()
    res.bundle.save(tmp_path / "c.npz")
    back = PolicyBundle.load(tmp_path / "c.npz", run_config.env, tc)
    d, s = eval_protocol(5, range(7))
    assert np.array_equal(evaluate(res.bundle, tenv, d, s).returns, evaluate(back, tenv, d, s).returns)


def test_convergence_metric():
    rows = [{"episode": 100 * (i + 1), "eval_mean": v} for i, v in
            enumerate([-40, -30, -20, -15, -12, -10.5, -10, -10, -10.2, -9.9, -10])]
    # final level -10.02, threshold -10.52: first 3-point average above it ends at episode 800
    assert episodes_to_converge(rows) == 800
    assert episodes_to_converge([]) is None
