"""Learners for the charging problem.

Five training modes share one episode loop:

``hddqn_her``      two-level double-Q with hindsight copies, counterfactual
                   high rewards during the first phase, achieved-SoC
                   relabeling, reachable-option restriction and deletion of
                   low-level records that led into the terminal state.
``hddqn``          the same two-level learner with all of the above off.
``ddqn_high``      high-level learner; charging executed by ``pi_q``.
``ddqn_low``       low-level learner always aiming at a full battery, with a
                   range-anxiety boundary penalty.
``ddqn_original``  one flat network over charging decisions.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .config import EnvConfig, TrainConfig
from .env import CHARGING, BusChargingEnv, EnvState, feasible_actions, feasible_options, option_indices
from .qnet import FeatureBounds, QNetwork, encode_state, sync_target, td_update
from .replay import (Encoded, FlatTransition, HighTransition, HindsightStager, LowTransition, ReplayBuffer,
                     delete_option_transitions, her_store)

MODES = ("hddqn_her", "hddqn", "ddqn_high", "ddqn_original", "ddqn_low")
LOG_HEADER = ("episode", "phase", "eps_low", "eps_high", "low_loss", "high_loss", "eval_mean", "eval_stderr")
TRACE_HEADER = ("t", "clock", "B", "k", "tau", "soc", "price", "power", "reward", "charging_cost", "terminal_cost",
                "option", "target_cost", "range_anxiety_cost")


class InvariantBreach(RuntimeError):
    pass


@dataclass(frozen=True)
class ModeFlags:
    high: bool = False
    low: bool = False
    flat: bool = False
    her: bool = False
    counterfactual: bool = False
    relabel: bool = False
    restrict_options: bool = False
    delete_on_terminal: bool = False
    full_target: bool = False  # ddqn_low: target fixed at E_max


def mode_flags(mode: str) -> ModeFlags:
    if mode == "hddqn_her":
        return ModeFlags(high=True, low=True, her=True, counterfactual=True, relabel=True,
                         restrict_options=True, delete_on_terminal=True)
    if mode == "hddqn":
        return ModeFlags(high=True, low=True)
    if mode == "ddqn_high":
        return ModeFlags(high=True, restrict_options=True)
    if mode == "ddqn_low":
        return ModeFlags(low=True, full_target=True)
    if mode == "ddqn_original":
        return ModeFlags(flat=True)
    raise ValueError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")


# ---------------------------------------------------------------------------
# selection and reward building blocks

def epsilon_greedy(values, feasible, epsilon: float, rng: np.random.Generator) -> int:
    """Uniform feasible index with probability epsilon, else the feasible argmax (lowest index on ties)."""
    feasible = np.asarray(feasible)
    if feasible.size == 0:
        raise ValueError("epsilon_greedy needs a non-empty feasible set")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(feasible[rng.integers(feasible.size)])
    feasible = np.sort(feasible)
    return int(feasible[int(np.argmax(np.asarray(values)[feasible]))])


def low_reward(power: float, price: float, dt: float, option: float | None = None,
               achieved_end_soc: float | None = None, kappa: float = 0.005) -> float:
    """Interior steps: negated charging cost.  Boundary (achieved SoC given): target penalty."""
    if achieved_end_soc is None:
        return -power * dt * price
    return -kappa * (option - achieved_end_soc) ** 2


def range_anxiety_penalty(achieved_end_soc: float, e_max: float, kappa_prime: float) -> float:
    return -kappa_prime * (e_max - achieved_end_soc) ** 2


def pi_q(soc: float, option: float, cfg: EnvConfig):
    """Fixed charging rule: the feasible power whose next SoC is closest to the target.

    Far from the target this is the largest charge (or discharge) power.
    Equal-distance ties prefer not passing the target, then the smaller
    magnitude.  Returns ``(grid index, power)``.
    """
    idx, powers = feasible_actions(soc, cfg)
    nxt = soc + powers * cfg.dt_hours
    dist = np.abs(nxt - option)
    best = dist.min()
    cand = np.flatnonzero(dist <= best + 1e-9)
    if cand.size > 1:
        overshoot = (nxt[cand] - option) * (option - soc) > 1e-12
        if not overshoot.all():
            cand = cand[~overshoot]
        cand = cand[np.argsort(np.abs(powers[cand]), kind="stable")]
    j = cand[0]
    return int(idx[j]), float(powers[j])


def high_reward_accumulate(running: float, step_reward: float) -> float:
    return running + step_reward


@dataclass
class PeriodRecord:
    """What a charging period needs to be replayed offline."""

    start_soc: float
    prices: list = field(default_factory=list)  # price at each charging step
    operating_reward: float = 0.0  # rewards collected in the following operating period


def counterfactual_high_reward(record: PeriodRecord | None, target: float, cfg: EnvConfig, episode: int,
                               phase_threshold: int, actual: float | None = None) -> float:
    """High-level reward for a cycle toward ``target``.

    Before ``phase_threshold`` the charging period is replayed under
    ``pi_q`` over the recorded prices; the recorded operating outcome is
    added unchanged.  From ``phase_threshold`` on the actual reward is
    returned.
    """
    if episode >= phase_threshold:
        if actual is None:
            raise ValueError("actual reward required in the second phase")
        return actual
    if record is None:
        raise ValueError("counterfactual replay needs the period record")
    soc, total = record.start_soc, 0.0
    for price in record.prices:
        _, power = pi_q(soc, target, cfg)
        total -= power * cfg.dt_hours * price
        soc += power * cfg.dt_hours
    return total + record.operating_reward


# ---------------------------------------------------------------------------
# features and policies

class Features:
    def __init__(self, cfg: EnvConfig, tau_max: int, k_max: int, price_lo: float, price_hi: float):
        self.cfg = cfg
        self.bounds = FeatureBounds(cfg.e_min_kwh, cfg.e_max_kwh, tau_max, k_max, price_lo, price_hi,
                                    cfg.feature_scheme)
        self.dim_state = 4 + cfg.w_p + 1
        self.dim_low = self.dim_state + 1

    @classmethod
    def for_env(cls, env: BusChargingEnv, price_values=None):
        p = env.prices.per_step_prices if price_values is None else np.asarray(price_values)
        return cls(env.cfg, env.schedule.tau_max, env.schedule.K - 1, float(p.min()), float(p.max()))

    def state(self, s: EnvState):
        return encode_state(s, None, self.bounds)

    def low(self, s: EnvState, option: float):
        return encode_state(s, option, self.bounds)

    def to_dict(self):
        b = self.bounds
        return {"feat_bounds": np.array([b.tau_max, b.k_max, b.price_lo, b.price_hi])}

    @classmethod
    def from_dict(cls, cfg, d):
        tau_max, k_max, lo, hi = d["feat_bounds"]
        return cls(cfg, int(tau_max), int(k_max), float(lo), float(hi))


@dataclass
class PolicyBundle:
    mode: str
    cfg: EnvConfig
    features: Features
    high: QNetwork | None = None
    high_target: QNetwork | None = None
    low: QNetwork | None = None
    low_target: QNetwork | None = None
    flat: QNetwork | None = None
    flat_target: QNetwork | None = None

    def __post_init__(self):
        fl = mode_flags(self.mode)
        self.flags = fl
        present = (self.high is not None, self.low is not None, self.flat is not None)
        if present != (fl.high, fl.low, fl.flat):
            raise ValueError(f"networks present {present} do not match mode {self.mode}")
        self.option_grid = self.cfg.option_grid
        self.n_actions = self.cfg.action_levels

    @classmethod
    def build(cls, mode: str, cfg: EnvConfig, tcfg: TrainConfig, features: Features, seed: int = 0):
        fl = mode_flags(mode)
        n_opt, n_act = cfg.option_grid.size, cfg.action_levels
        kw = {}
        if fl.high:
            kw["high"] = QNetwork((features.dim_state, *tcfg.hidden, n_opt), tcfg.lr_high, seed=seed + 1)
        if fl.low:
            hidden = tcfg.hidden_low_baseline if fl.full_target else tcfg.hidden
            lr = tcfg.lr_low_baseline if fl.full_target else tcfg.lr_low
            kw["low"] = QNetwork((features.dim_low, *hidden, n_act), lr, seed=seed + 2)
        if fl.flat:
            kw["flat"] = QNetwork((features.dim_state, *tcfg.hidden, n_act), tcfg.lr_flat, seed=seed + 3)
        for name in ("high", "low", "flat"):
            if name in kw:
                kw[name + "_target"] = kw[name].clone()
        return cls(mode, cfg, features, **kw)

    # -- decisions --------------------------------------------------------------
    def option_set(self, s: EnvState):
        if self.flags.restrict_options:
            return feasible_options(s.soc, s.steps_to_departure, self.cfg)
        return self.option_grid

    def choose_option(self, s: EnvState, epsilon: float, rng):
        """Charging target for the period starting at ``s`` as ``(kWh, grid index)``."""
        if self.flags.full_target:
            return float(self.cfg.e_max_kwh), self.option_grid.size - 1
        idxs = option_indices(self.option_set(s), self.cfg)
        values = self.high.forward(self.features.state(s))
        i = epsilon_greedy(values, idxs, epsilon, rng)
        return float(self.option_grid[i]), i

    def choose_action(self, s: EnvState, option: float | None, epsilon: float, rng):
        """Charging power at ``s`` as ``(grid index, kW)``."""
        if self.mode == "ddqn_high":
            return pi_q(s.soc, option, self.cfg)
        idx, powers = feasible_actions(s.soc, self.cfg)
        if self.flags.flat:
            values = self.flat.forward(self.features.state(s))
        else:
            values = self.low.forward(self.features.low(s, option))
        i = epsilon_greedy(values, idx, epsilon, rng)
        return i, float(powers[np.searchsorted(idx, i)])

    # -- persistence ------------------------------------------------------------
    def save(self, path, extra=None):
        d = {"mode": np.array(self.mode)}
        d.update(self.features.to_dict())
        for name in ("high", "low", "flat"):
            net = getattr(self, name)
            if net is not None:
                d.update(net.state_dict(prefix=f"{name}."))
        for k, v in (extra or {}).items():
            d[k] = np.asarray(v)
        np.savez(path, **d)

    @classmethod
    def load(cls, path, cfg: EnvConfig, tcfg: TrainConfig):
        with np.load(path) as d:
            mode = str(d["mode"])
            feats = Features.from_dict(cfg, d)
            bundle = cls.build(mode, cfg, tcfg, feats)
            for name in ("high", "low", "flat"):
                net = getattr(bundle, name)
                if net is not None:
                    net.load_state_dict(d, prefix=f"{name}.")
                    sync_target(net, getattr(bundle, name + "_target"))
        return bundle


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EpisodeResult:
    ret: float
    terminal: bool
    charging_cost: float  # sum of charging-step rewards (<= 0 unless discharging pays)
    target_penalty: float  # kappa * squared target miss, summed over departures
    range_anxiety: float = 0.0  # kappa' * (E_max - departure soc)^2, summed over departures
    trace: list | None = None


@dataclass
class EvalSummary:
    returns: np.ndarray
    terminals: int
    episodes: list

    @property
    def mean(self):
        return float(np.mean(self.returns))

    @property
    def stderr(self):
        n = self.returns.size
        return float(np.std(self.returns, ddof=1) / math.sqrt(n)) if n > 1 else 0.0


def _clock(minutes: int) -> str:
    minutes %= 1440
    return f"{minutes // 60:02d}:{minutes % 60:02d}"


def run_episode(bundle: PolicyBundle, env: BusChargingEnv, day: int, seed, epsilon: float = 0.0,
                rng=None, trace: bool = False, kappa: float = 0.005, kappa_prime: float = 0.0006) -> EpisodeResult:
    """One episode; trace rows follow ``TRACE_HEADER`` (costs are positive numbers)."""
    rng = rng or np.random.default_rng(0)
    s = env.reset(day, seed)
    ret = cost = pen = anx = 0.0
    option = None
    rows = [] if trace else None
    while True:
        power = None
        if s.period_flag == CHARGING:
            if option is None and not bundle.flags.flat:
                option, _ = bundle.choose_option(s, epsilon, rng)
            _, power = bundle.choose_action(s, option, epsilon, rng)
        out = env.step(power)
        ret += out.reward
        step_pen = step_anx = 0.0
        if s.period_flag == CHARGING:
            cost += out.reward
            if out.next_state.period_flag != CHARGING:
                step_anx = kappa_prime * (env.cfg.e_max_kwh - out.next_state.soc) ** 2
                if option is not None:
                    step_pen = kappa * (option - out.next_state.soc) ** 2
        pen += step_pen
        anx += step_anx
        if trace:
            term = -out.reward if out.terminal else 0.0
            rows.append((s.step_index, _clock(env.clock_minutes(s.step_index)), s.period_flag, s.period_index,
                         s.steps_to_departure, s.soc, s.price, out.power, out.reward,
                         0.0 if out.terminal else -out.reward, term,
                         "" if option is None else option, step_pen, step_anx))
        if out.period_boundary == "operating_started" or out.done:
            option = None
        s = out.next_state
        if out.done:
            return EpisodeResult(ret, out.terminal, cost, pen, anx, rows)


def evaluate(bundle: PolicyBundle, env: BusChargingEnv, days, seeds, trace: bool = False,
             kappa: float = 0.005, kappa_prime: float = 0.0006) -> EvalSummary:
    """Greedy returns (sum of environment rewards) on the given (day, seed) pairs."""
    eps = [run_episode(bundle, env, d, s, 0.0, trace=trace, kappa=kappa, kappa_prime=kappa_prime)
           for d, s in zip(days, seeds)]
    return EvalSummary(np.array([e.ret for e in eps]), sum(e.terminal for e in eps), eps)


def eval_protocol(n: int, test_days, base_seed: int = 20_000):
    days = [int(test_days[i % len(test_days)]) for i in range(n)]
    return days, [base_seed + i for i in range(n)]


def write_trace(path, rows):
    def num(v, digits):
        return "" if v == "" else f"{v:.{digits}f}"

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for r in rows:
            w.writerow([r[0], r[1], r[2], r[3], r[4], num(r[5], 6), num(r[6], 6), num(r[7], 6), num(r[8], 8),
                        num(r[9], 8), num(r[10], 8), num(r[11], 6), num(r[12], 8), num(r[13], 8)])


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainStats:
    counterfactual_replays: int = 0
    counterfactual_after_phase: int = 0
    her_pushed: int = 0
    deleted: int = 0
    high_transitions: int = 0
    cycles: int = 0
    terminal_episodes: int = 0
    low_updates: int = 0
    high_updates: int = 0


@dataclass
class TrainResult:
    bundle: PolicyBundle
    log: list
    stats: TrainStats
    seconds: float
    low_buffer: ReplayBuffer | None = None
    high_buffer: ReplayBuffer | None = None


class Trainer:
    """One training run of one mode.

    ``on_period_end(trainer, episode, option_instance_id, achieved)`` is
    called after each charging period's records are stored (used by tests
    to audit the low buffer).
    """

    def __init__(self, mode: str, env: BusChargingEnv, tcfg: TrainConfig, train_days, eval_env=None,
                 eval_days=None, features: Features | None = None, seed: int | None = None,
                 on_period_end=None, check_invariants: bool = True):
        self.mode = mode
        self.flags = mode_flags(mode)
        self.env, self.cfg, self.tcfg = env, env.cfg, tcfg
        self.train_days = np.asarray(train_days, int)
        self.eval_env = eval_env
        self.eval_days = eval_days
        seed = tcfg.seed if seed is None else seed
        ss = np.random.SeedSequence(seed)
        s_net, s_agent, s_env = ss.spawn(3)
        self.rng = np.random.default_rng(s_agent)
        self.env_seeds = np.random.default_rng(s_env)
        self.features = features or Features.for_env(env)
        self.bundle = PolicyBundle.build(mode, self.cfg, tcfg, self.features,
                                         seed=int(s_net.generate_state(1)[0] % (2 ** 31)))
        self.on_period_end = on_period_end
        self.check = check_invariants
        self.stats = TrainStats()
        self.log = []
        self._losses = {"low": [], "high": []}
        fl = self.flags
        n_act, n_opt = self.cfg.action_levels, self.cfg.option_grid.size
        self.low_buf = self.high_buf = None
        if fl.low or fl.flat:
            dim = self.features.dim_low if fl.low else self.features.dim_state
            enc = self._encode_low if fl.low else self._encode_flat
            self.low_buf = ReplayBuffer(tcfg.buffer_low, dim, n_act, enc)
        if fl.high:
            self.high_buf = ReplayBuffer(tcfg.buffer_high, self.features.dim_state, n_opt, self._encode_high)
        self.stager = HindsightStager()
        self._instance = 0
        self._updates = {"low": 0, "high": 0}

    # -- encoders ---------------------------------------------------------------
    def _action_mask(self, s: EnvState):
        m = np.zeros(self.cfg.action_levels, bool)
        m[feasible_actions(s.soc, self.cfg)[0]] = True
        return m

    def _encode_low(self, tr: LowTransition) -> Encoded:
        f = self.features.low(tr.state, tr.option)
        if tr.done:
            return Encoded(f, tr.action_index, tr.reward, np.zeros_like(f), True,
                           np.ones(self.cfg.action_levels, bool))
        return Encoded(f, tr.action_index, tr.reward, self.features.low(tr.next_state, tr.option), False,
                       self._action_mask(tr.next_state))

    def _encode_flat(self, tr: FlatTransition) -> Encoded:
        f = self.features.state(tr.state)
        if tr.done:
            return Encoded(f, tr.action_index, tr.reward, np.zeros_like(f), True,
                           np.ones(self.cfg.action_levels, bool))
        return Encoded(f, tr.action_index, tr.reward, self.features.state(tr.next_state), False,
                       self._action_mask(tr.next_state))

    def _encode_high(self, tr: HighTransition) -> Encoded:
        f = self.features.state(tr.start_state)
        n_opt = self.cfg.option_grid.size
        if tr.done:
            return Encoded(f, tr.option_index, tr.reward, np.zeros_like(f), True, np.ones(n_opt, bool))
        m = np.zeros(n_opt, bool)
        m[option_indices(self.bundle.option_set(tr.next_state), self.cfg)] = True
        return Encoded(f, tr.option_index, tr.reward, self.features.state(tr.next_state), False, m)

    # -- updates ----------------------------------------------------------------
    def _update(self, level: str):
        tc = self.tcfg
        if level == "low":
            buf = self.low_buf
            if self.flags.flat:
                net, tgt, bs = self.bundle.flat, self.bundle.flat_target, tc.batch_flat
            else:
                net, tgt = self.bundle.low, self.bundle.low_target
                bs = tc.batch_low_baseline if self.flags.full_target else tc.batch_low
        else:
            buf, net, tgt = self.high_buf, self.bundle.high, self.bundle.high_target
            bs = tc.batch_flat if self.mode == "ddqn_high" else tc.batch_high
        batch = buf.sample_minibatch(bs, self.rng)
        if batch is None:
            return
        if tc.reward_scale != 1.0:
            batch.rewards = batch.rewards * tc.reward_scale
        loss = td_update(net, tgt, batch, tc.gamma)
        self._losses[level].append(loss)
        self._updates[level] += 1
        if self._updates[level] % tc.target_sync == 0:
            sync_target(net, tgt)
        if level == "low":
            self.stats.low_updates += 1
        else:
            self.stats.high_updates += 1

    # -- episodes ---------------------------------------------------------------
    def _episode_flat(self, ep: int, day: int, seed: int, eps: float):
        env = self.env
        s = env.reset(day, seed)
        pending, acc = None, 0.0
        while True:
            power = None
            if s.period_flag == CHARGING:
                if pending is not None:
                    self.low_buf.push(FlatTransition(pending[0], pending[1], acc, s, False, ep))
                a, power = self.bundle.choose_action(s, None, eps, self.rng)
                pending, acc = (s, a), 0.0
            out = env.step(power)
            acc += out.reward
            if out.done:
                self.low_buf.push(FlatTransition(pending[0], pending[1], acc, out.next_state, True, ep))
                self.stats.terminal_episodes += out.terminal
                self._update("low")
                return
            self._update("low")
            s = out.next_state

    def _start_cycle(self, s: EnvState, eps_high: float):
        option, oi = self.bundle.choose_option(s, eps_high, self.rng)
        if self.check and self.flags.restrict_options:
            allowed = feasible_options(s.soc, s.steps_to_departure, self.cfg)
            if not np.any(np.abs(allowed - option) < 1e-9):
                raise InvariantBreach(f"option {option} outside the reachable set at {s}")
        self._instance += 1
        return option, oi

    def _episode_hier(self, ep: int, day: int, seed: int, eps_low: float, eps_high: float):
        env, cfg, tc, fl = self.env, self.cfg, self.tcfg, self.flags
        s = env.reset(day, seed)
        s0 = s
        option, oi = self._start_cycle(s, eps_high)
        if fl.her:
            self.stager.begin(ep, self._instance)
        record = PeriodRecord(s.soc)
        r_high, achieved = 0.0, None
        while True:
            if s.period_flag == CHARGING:
                a, power = self.bundle.choose_action(s, option, eps_low, self.rng)
                out = env.step(power)
                s2 = out.next_state
                record.prices.append(s.price)
                if fl.low:
                    cost = out.reward
                    departs = s2.period_flag != CHARGING
                    penalty = 0.0
                    if departs:
                        if fl.full_target:
                            penalty = range_anxiety_penalty(s2.soc, cfg.e_max_kwh, tc.kappa_prime)
                        else:
                            penalty = low_reward(0.0, 0.0, cfg.dt_hours, option, s2.soc, tc.kappa)
                    tr = LowTransition(s, option, a, cost + penalty, s2, departs, ep, self._instance, cost, penalty)
                    self.low_buf.push(tr)
                    if fl.her:
                        self.stager.stage(tr)
                        if departs:
                            self.stats.her_pushed += her_store(self.low_buf, self.stager, s2.soc, option)
                if s2.period_flag != CHARGING:
                    achieved = s2.soc
                    if self.on_period_end is not None:
                        self.on_period_end(self, ep, self._instance, achieved, option)
            else:
                out = env.step()
                s2 = out.next_state
                record.operating_reward += out.reward
            if fl.low:
                self._update("low")
            r_high = high_reward_accumulate(r_high, out.reward)
            if out.terminal or out.period_boundary == "charging_started" or out.done:
                self.stats.cycles += 1
                if fl.high:
                    if fl.counterfactual and ep < tc.phase_threshold:
                        r_hat = counterfactual_high_reward(record, achieved, cfg, ep, tc.phase_threshold)
                        self.stats.counterfactual_replays += 1
                    else:
                        r_hat = r_high
                    stored = achieved if fl.relabel else option
                    idx = int(option_indices([stored], cfg)[0])
                    if fl.relabel and self.check and abs(stored - achieved) > 1e-12:
                        raise InvariantBreach("relabeled option differs from the achieved SoC")
                    self.high_buf.push(HighTransition(s0, stored, r_hat, s2, out.done, ep, idx, option))
                    self.stats.high_transitions += 1
                    for _ in range(tc.high_updates_per_close):
                        self._update("high")
                if out.terminal:
                    self.stats.terminal_episodes += 1
                    if fl.delete_on_terminal:
                        self.stats.deleted += delete_option_transitions(self.low_buf, ep, self._instance,
                                                                        self.stager)
                if out.done:
                    return
                s0 = s2
                option, oi = self._start_cycle(s2, eps_high)
                if fl.her:
                    self.stager.begin(ep, self._instance)
                record = PeriodRecord(s2.soc)
                r_high, achieved = 0.0, None
            s = s2

    def run_eval(self):
        if self.eval_env is None:
            return None
        days, seeds = eval_protocol(self.tcfg.eval_episodes, self.eval_days, base_seed=10_000)
        return evaluate(self.bundle, self.eval_env, days, seeds)

    def train(self, log_path=None, progress=None) -> TrainResult:
        tc = self.tcfg
        t0 = time.perf_counter()
        for ep in range(tc.episodes):
            eps = tc.epsilon(ep)
            day = int(self.train_days[self.rng.integers(self.train_days.size)])
            seed = int(self.env_seeds.integers(2 ** 63))
            if self.flags.flat:
                self._episode_flat(ep, day, seed, eps)
            else:
                self._episode_hier(ep, day, seed, eps, eps)
            if (ep + 1) % tc.eval_every == 0:
                summ = self.run_eval()
                row = {
                    "episode": ep + 1,
                    "phase": 1 if ep < tc.phase_threshold else 2,
                    "eps_low": eps if (self.flags.low or self.flags.flat) else "",
                    "eps_high": eps if self.flags.high else "",
                    "low_loss": _mean_or_blank(self._losses["low"]),
                    "high_loss": _mean_or_blank(self._losses["high"]),
                    "eval_mean": "" if summ is None else summ.mean,
                    "eval_stderr": "" if summ is None else summ.stderr,
                }
                self._losses = {"low": [], "high": []}
                self.log.append(row)
                if progress:
                    progress(row)
        if log_path is not None:
            write_log(log_path, self.log)
        return TrainResult(self.bundle, self.log, self.stats, time.perf_counter() - t0,
                           self.low_buf, self.high_buf)


def _mean_or_blank(xs):
    return float(np.mean(xs)) if xs else ""


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


def train_hddqn_her(env, tcfg, train_days, log_path=None, **kw) -> TrainResult:
    return Trainer("hddqn_her", env, tcfg, train_days, **kw).train(log_path)


def train_baseline(env, tcfg, train_days, mode: str, log_path=None, **kw) -> TrainResult:
    if mode == "hddqn_her":
        raise ValueError("hddqn_her is not a baseline; use train_hddqn_her")
    return Trainer(mode, env, tcfg, train_days, **kw).train(log_path)


def episodes_to_converge(log_rows, frac: float = 0.05, tail: int = 5, window: int = 3):
    """First logged episode whose moving-average eval return is within ``frac`` of the final level."""
    eps = [r["episode"] for r in log_rows if r["eval_mean"] != ""]
    vals = np.array([r["eval_mean"] for r in log_rows if r["eval_mean"] != ""], float)
    if vals.size == 0:
        return None
    final = vals[-tail:].mean()
    thresh = final - frac * abs(final)
    smooth = np.convolve(vals, np.ones(window) / window, mode="valid") if vals.size >= window else vals
    offset = vals.size - smooth.size
    for i, v in enumerate(smooth):
        if v >= thresh:
            return eps[i + offset]
    return eps[-1]
