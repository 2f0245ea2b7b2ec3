"""Discrete-time simulator of one electric bus over a service day.

The day alternates charging periods (bus at the terminal, the agent picks
the charging power) and operating periods (bus on the route, the battery
drains by an environment-sampled power).  Time step ``t`` counts steps
since the first scheduled departure; an episode starts at the first
arrival and ends on arrival from the last operating period, or earlier if
the state of charge drops below ``e_min_kwh`` (terminal state).

Step bookkeeping (one cycle = one headway of ``gap`` steps):

* on departure the steps-to-departure counter resets to ``gap - 1``;
* an operating step with counter ``tau`` has ``gap - tau`` elapsed
  operating steps and ends the trip with the travel-time hazard;
* a charging step with ``tau == 0`` is the last one before departure.

So a trip of ``x`` steps leaves ``gap - x`` charging steps, and the counter
on arrival equals the number of remaining charging actions minus one.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .config import ConfigError, EnvConfig
from .prices import PriceSeries, window

log = logging.getLogger(__name__)

CHARGING, OPERATING = 1, 0
_EPS = 1e-9


class SimulatorFault(RuntimeError):
    """Internal bookkeeping violated (e.g. a departure was missed)."""


class FeasibilityError(ValueError):
    """Requested charging power is outside the feasible set."""


class EpisodeComplete(RuntimeError):
    """step() called on a finished episode."""


@dataclass(frozen=True)
class EnvState:
    soc: float
    period_flag: int
    steps_to_departure: int
    price_window: tuple
    period_index: int
    step_index: int

    @property
    def price(self) -> float:
        return self.price_window[-1]


@dataclass(frozen=True)
class StepOutcome:
    next_state: EnvState
    reward: float
    terminal: bool
    period_boundary: str  # "none" | "charging_started" | "operating_started"
    done: bool
    power: float


def _minutes(hhmm: str) -> int:
    h, m = hhmm.split(":")
    return int(h) * 60 + int(m)


def travel_time_pmf(mean_minutes: float, std_minutes: float, gap: int, dt_minutes: int) -> np.ndarray:
    """Discretised normal travel time: ``pmf[x] = Pr(T = x steps)`` on ``{1, ..., gap-1}``.

    Mass is assigned by rounding to the nearest step, truncated to the support
    and renormalised.  ``pmf[0]`` is always zero.
    """
    if gap < 2:
        raise ConfigError("a cycle needs at least 2 steps (one operating, one charging)")
    x = np.arange(1, gap)
    if std_minutes <= 0:
        mass = (np.abs(x * dt_minutes - mean_minutes) == np.abs(x * dt_minutes - mean_minutes).min()).astype(float)
    else:
        hi = norm.cdf(((x + 0.5) * dt_minutes - mean_minutes) / std_minutes)
        lo = norm.cdf(((x - 0.5) * dt_minutes - mean_minutes) / std_minutes)
        mass = hi - lo
    if mass.sum() <= 0:
        raise ConfigError(f"travel-time distribution N({mean_minutes},{std_minutes}) has no mass on 1..{gap - 1} steps")
    pmf = np.zeros(gap)
    pmf[1:] = mass / mass.sum()
    return pmf


@dataclass(frozen=True)
class ScheduleConfig:
    """Resolved timetable of one bus: per-cycle gaps and travel-time laws."""

    dt_minutes: int
    departures: tuple  # clock minutes (from midnight of the episode day) of departure k
    gaps: tuple  # steps between departure k and departure k+1 (last entry: final cycle)
    travel_pmf: tuple  # travel_pmf[k][x] = Pr(T_k^o = x)
    rush: tuple = ()
    _hazard_cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        K = len(self.gaps)
        if K < 2:
            raise ConfigError("need at least two operating periods")
        if len(self.travel_pmf) != K or len(self.departures) != K:
            raise ConfigError("gaps, departures and travel_pmf must have one entry per operating period")
        pmfs = []
        for k, (g, p) in enumerate(zip(self.gaps, self.travel_pmf)):
            p = np.asarray(p, float)
            if p.size != g:
                raise ConfigError(f"travel pmf {k} must have {g} entries (support 0..{g - 1})")
            if p[0] != 0.0 or abs(p.sum() - 1.0) > 1e-9 or np.any(p < 0):
                raise ConfigError(f"travel pmf {k} must be a distribution on 1..{g - 1}")
            p = p.copy()
            p.setflags(write=False)
            pmfs.append(p)
        object.__setattr__(self, "travel_pmf", tuple(pmfs))
        if not self.rush:
            object.__setattr__(self, "rush", (False,) * K)

    @property
    def K(self) -> int:
        return len(self.gaps)

    @property
    def tau_max(self) -> int:
        return max(self.gaps) - 1

    def reset_tau(self, k: int) -> int:
        return self.gaps[k] - 1

    @property
    def horizon(self) -> int:
        """Upper bound on the step index of the final arrival."""
        return sum(self.gaps)

    def hazard_table(self, k: int, mode: str) -> tuple:
        key = (k, mode)
        if key not in self._hazard_cache:
            pmf = self.travel_pmf[k]
            vals, forced = [], []
            for e in range(self.gaps[k] + 1):
                h, exhausted = _hazard(pmf, e, mode)
                vals.append(h)
                forced.append(exhausted)
            self._hazard_cache[key] = (tuple(vals), tuple(forced))
        return self._hazard_cache[key]

    @classmethod
    def from_env_config(cls, cfg: EnvConfig) -> "ScheduleConfig":
        headway = cfg.headway_minutes
        if headway % cfg.dt_minutes:
            raise ConfigError("headway_minutes must be a multiple of dt_minutes")
        gap = headway // cfg.dt_minutes
        first = _minutes(cfg.first_departure) + cfg.bus_offset_minutes
        if first % cfg.dt_minutes:
            raise ConfigError("departure times must fall on step boundaries")
        windows = [(_minutes(a), _minutes(b)) for a, b in cfg.rush_windows]
        deps, pmfs, rush = [], [], []
        for k in range(cfg.num_operating_periods):
            dep = first + k * headway
            is_rush = any(a <= dep % 1440 < b for a, b in windows)
            mean = cfg.travel_mean_rush if is_rush else cfg.travel_mean_offpeak
            deps.append(dep)
            rush.append(is_rush)
            pmfs.append(travel_time_pmf(mean, cfg.travel_std, gap, cfg.dt_minutes))
        return cls(cfg.dt_minutes, tuple(deps), (gap,) * cfg.num_operating_periods, tuple(pmfs), tuple(rush))


@dataclass(frozen=True)
class DischargeProfile:
    """Operating-period power draw (kW, non-positive) per step."""

    kind: str  # "truncnorm" | "discrete"
    mean_kw: float = 0.0
    std_kw: float = 0.0
    d_max_kw: float = float("inf")
    rush_multiplier: float = 1.0
    values: tuple = ()
    probs: tuple = ()

    @classmethod
    def truncated_normal(cls, mean_kw, std_kw, d_max_kw, rush_multiplier=1.0):
        return cls("truncnorm", mean_kw=-abs(mean_kw), std_kw=std_kw, d_max_kw=d_max_kw,
                   rush_multiplier=rush_multiplier)

    @classmethod
    def point(cls, power_kw):
        return cls("discrete", values=(float(power_kw),), probs=(1.0,))

    @classmethod
    def discrete(cls, values, probs):
        probs = tuple(float(p) for p in probs)
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigError("discharge probabilities must sum to 1")
        return cls("discrete", values=tuple(float(v) for v in values), probs=probs)

    @classmethod
    def from_env_config(cls, cfg: EnvConfig):
        return cls.truncated_normal(cfg.discharge_mean, cfg.discharge_std_kw, cfg.d_max_kw,
                                    cfg.rush_discharge_multiplier)

    def support(self, rush: bool = False):
        if self.kind != "discrete":
            raise ConfigError("only discrete discharge profiles have an enumerable support")
        return list(zip(self.values, self.probs))

    def sample(self, rng: np.random.Generator, rush: bool = False) -> float:
        if self.kind == "discrete":
            if len(self.values) == 1:
                return self.values[0]
            return self.values[rng.choice(len(self.values), p=self.probs)]
        mean = self.mean_kw * (self.rush_multiplier if rush else 1.0)
        lo = -self.d_max_kw
        for _ in range(100):
            x = mean + self.std_kw * rng.standard_normal()
            if lo <= x <= 0.0:
                return float(x)
        return float(min(max(mean, lo), 0.0))


# ---------------------------------------------------------------------------
# pure dynamics

def advance_tau(state: EnvState, next_period_flag: int, reset_value: int) -> int:
    """Steps-to-departure after one step; resets to ``reset_value`` on departure."""
    if state.period_flag == CHARGING and next_period_flag == OPERATING:
        return reset_value
    nxt = state.steps_to_departure - 1
    if nxt < 0:
        raise SimulatorFault(
            f"departure missed at step {state.step_index}: steps_to_departure would become {nxt}"
        )
    return nxt


def _hazard(pmf, elapsed, mode):
    pmf = np.asarray(pmf, float)
    surv = float(pmf[elapsed:].sum()) if elapsed < pmf.size else 0.0
    if surv <= 1e-15:
        return 1.0, True
    p = float(pmf[elapsed]) if elapsed < pmf.size else 0.0
    if mode == "exact_hazard":
        h = p / surv
    elif mode == "product_formula":
        denom = float(np.prod(1.0 - pmf[:elapsed]))
        if denom <= 1e-15:
            return 1.0, True
        h = p / denom
    else:
        raise ConfigError(f"unknown hazard mode {mode!r}")
    return min(1.0, max(0.0, h)), False


def arrival_hazard(pmf, elapsed: int, mode: str = "exact_hazard") -> float:
    """Probability that a trip ends after exactly ``elapsed`` steps given it lasted that long."""
    h, exhausted = _hazard(pmf, elapsed, mode)
    if exhausted:
        log.warning("travel-time support exhausted at %d elapsed steps; forcing arrival", elapsed)
    return h


def termination_prob(state: EnvState, schedule: ScheduleConfig, mode: str = "exact_hazard") -> float:
    """Probability that the current period ends at this step."""
    if state.period_flag == CHARGING:
        return 1.0 if state.steps_to_departure == 0 else 0.0
    k = state.period_index
    elapsed = schedule.gaps[k] - state.steps_to_departure
    return arrival_hazard(schedule.travel_pmf[k], elapsed, mode)


def apply_battery_dynamics(soc: float, power: float, dt: float) -> float:
    return soc + power * dt


def feasible_actions(soc: float, cfg: EnvConfig):
    """Feasible charging powers at ``soc`` as ``(grid indices, powers)``.

    Grid levels are intersected with the battery window.  With
    ``clip_actions`` a level beyond the window is clipped onto it (duplicates
    keep the level nearest 0 kW), so the full battery range stays reachable.
    """
    dt = cfg.dt_hours
    lo = max(-cfg.d_max_kw, (cfg.e_min_kwh - soc) / dt)
    hi = min(cfg.c_max_kw, (cfg.e_max_kwh - soc) / dt)
    grid = cfg.action_grid
    if hi < lo - _EPS:
        raise FeasibilityError(f"no feasible power at soc={soc}")
    if not cfg.clip_actions:
        idx = np.flatnonzero((grid >= lo - _EPS) & (grid <= hi + _EPS))
        if idx.size == 0:
            raise ConfigError("action grid has no feasible level; it must contain 0 kW")
        return idx, grid[idx]
    clipped = np.clip(grid, lo, hi)
    order = np.argsort(np.abs(grid), kind="stable")
    seen, keep = set(), []
    for i in order:
        key = round(float(clipped[i]), 9)
        if key not in seen:
            seen.add(key)
            keep.append(i)
    idx = np.array(sorted(keep))
    return idx, clipped[idx]


def feasible_options(soc: float, tau: int, cfg: EnvConfig) -> np.ndarray:
    """Charging targets reachable before departure, on the option grid.

    The window spans the remaining charging actions (``tau + 1`` by default;
    ``tau`` with ``option_window_current_step`` off).  If no grid point lies
    inside, the grid point nearest ``soc`` is returned.
    """
    steps = tau + 1 if cfg.option_window_current_step else tau
    dt = cfg.dt_hours
    lo = max(cfg.e_min_kwh, soc - steps * cfg.d_max_kw * dt)
    hi = min(cfg.e_max_kwh, soc + steps * cfg.c_max_kw * dt)
    grid = cfg.option_grid
    sel = grid[(grid >= lo - _EPS) & (grid <= hi + _EPS)]
    if sel.size == 0:
        sel = grid[[int(np.argmin(np.abs(grid - soc)))]]
    return sel


def option_indices(options: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    return np.rint((np.asarray(options) - cfg.e_min_kwh) / cfg.option_step_kwh).astype(int)


def sample_operating_discharge(state: EnvState, rng: np.random.Generator, profile: DischargeProfile,
                               cfg: EnvConfig, rush: bool = False, floor_clip: bool = False) -> float:
    """Operating-period power draw for one step (kW, in ``[-d_max, 0]``)."""
    p = min(0.0, max(-cfg.d_max_kw, profile.sample(rng, rush)))
    if floor_clip:
        p = max(p, (cfg.e_min_kwh - state.soc) / cfg.dt_hours)
    return p


# ---------------------------------------------------------------------------

class BusChargingEnv:
    """Seedable single-bus environment over a replayed price trace."""

    def __init__(self, cfg: EnvConfig, prices: PriceSeries, schedule: ScheduleConfig | None = None,
                 discharge: DischargeProfile | None = None):
        self.cfg = cfg
        self.prices = prices
        self.schedule = schedule or ScheduleConfig.from_env_config(cfg)
        self.discharge = discharge or DischargeProfile.from_env_config(cfg)
        if prices.steps_per_hour * cfg.dt_minutes != 60:
            raise ConfigError("price series resolution does not match dt_minutes")
        if self.schedule.dt_minutes != cfg.dt_minutes:
            raise ConfigError("schedule resolution does not match dt_minutes")
        self.action_grid = cfg.action_grid
        self.option_grid = cfg.option_grid
        self._dep_step = self.schedule.departures[0] // cfg.dt_minutes
        self.state: EnvState | None = None
        self.done = True
        self.rng = np.random.default_rng(0)
        self.price_offset = self._dep_step
        self._warned = set()

    # -- helpers ------------------------------------------------------------
    def price_at(self, t: int) -> float:
        return self.prices.price(self.price_offset + t)

    def price_window(self, t: int) -> tuple:
        return window(self.prices, self.price_offset + t, self.cfg.w_p)

    def clock_minutes(self, t: int) -> int:
        return self.schedule.departures[0] + t * self.cfg.dt_minutes

    def feasible_actions(self, state: EnvState):
        return feasible_actions(state.soc, self.cfg)

    def feasible_options(self, state: EnvState) -> np.ndarray:
        return feasible_options(state.soc, state.steps_to_departure, self.cfg)

    def termination_prob(self, state: EnvState) -> float:
        if state.period_flag == CHARGING:
            return 1.0 if state.steps_to_departure == 0 else 0.0
        k = state.period_index
        e = self.schedule.gaps[k] - state.steps_to_departure
        vals, forced = self.schedule.hazard_table(k, self.cfg.hazard_mode)
        if forced[e] and (k, e) not in self._warned:
            self._warned.add((k, e))
            log.warning("travel-time support exhausted in period %d at %d steps; forcing arrival", k, e)
        return vals[e]

    # -- episode API -----------------------------------------------------------
    def reset(self, day: int = 0, seed=None, initial_soc: float | None = None) -> EnvState:
        """State at the first arrival of ``day``; the first trip length is sampled."""
        self.rng = np.random.default_rng(seed)
        steps_day = self.prices.steps_per_day
        if not 0 <= day < max(1, self.prices.n_days):
            raise ConfigError(f"day {day} outside the price series ({self.prices.n_days} days)")
        self.price_offset = day * steps_day + self._dep_step
        if self.price_offset - self.cfg.w_p < 0 and day > 0:
            raise ConfigError("insufficient price history for the first window")
        pmf = self.schedule.travel_pmf[0]
        x = int(self.rng.choice(pmf.size, p=pmf))
        soc = self.cfg.start_soc if initial_soc is None else float(initial_soc)
        self.state = EnvState(
            soc=soc,
            period_flag=CHARGING,
            steps_to_departure=self.schedule.gaps[0] - 1 - x,
            price_window=self.price_window(x),
            period_index=0,
            step_index=x,
        )
        self.done = False
        return self.state

    def initial_distribution(self, day: int = 0, initial_soc: float | None = None):
        """All possible reset states with their probabilities."""
        steps_day = self.prices.steps_per_day
        self.price_offset = day * steps_day + self._dep_step
        soc = self.cfg.start_soc if initial_soc is None else float(initial_soc)
        out = []
        pmf = self.schedule.travel_pmf[0]
        for x in np.flatnonzero(pmf > 0):
            x = int(x)
            out.append((float(pmf[x]), EnvState(soc, CHARGING, self.schedule.gaps[0] - 1 - x,
                                                self.price_window(x), 0, x)))
        return out

    def _advance(self, state: EnvState, power: float, switch: bool) -> StepOutcome:
        cfg, sched = self.cfg, self.schedule
        B = state.period_flag
        B_next = 1 - B if switch else B
        k_next = state.period_index + 1 if (B == CHARGING and B_next == OPERATING) else state.period_index
        if k_next >= sched.K:
            raise SimulatorFault("departure past the last operating period")
        tau_next = advance_tau(state, B_next, sched.reset_tau(k_next))
        soc_next = apply_battery_dynamics(state.soc, power, cfg.dt_hours)
        t_next = state.step_index + 1
        boundary = "none"
        if B == OPERATING and B_next == CHARGING:
            boundary = "charging_started"
        elif B == CHARGING and B_next == OPERATING:
            boundary = "operating_started"
        terminal = soc_next < cfg.e_min_kwh - _EPS
        done = terminal
        if terminal:
            reward = -cfg.c_end
        else:
            soc_next = min(max(soc_next, cfg.e_min_kwh), cfg.e_max_kwh)  # absorb roundoff at the bounds
            reward = -power * cfg.dt_hours * state.price * B
            if boundary == "charging_started" and state.period_index == sched.K - 1:
                done, boundary = True, "none"
        nxt = EnvState(soc_next, B_next, tau_next, self.price_window(t_next), k_next, t_next)
        return StepOutcome(nxt, reward, terminal, boundary, done, power)

    def _check_action(self, state: EnvState, power):
        if state.period_flag == CHARGING:
            if power is None:
                raise FeasibilityError("a charging power is required during a charging period")
            _, feas = feasible_actions(state.soc, self.cfg)
            if not np.any(np.abs(feas - power) <= 1e-7):
                raise FeasibilityError(f"power {power} kW infeasible at soc={state.soc:.3f} (feasible: {feas})")
        elif power is not None:
            raise FeasibilityError("no action is taken during an operating period")

    def step(self, power: float | None = None) -> StepOutcome:
        if self.done or self.state is None:
            raise EpisodeComplete("episode is complete; call reset()")
        state = self.state
        self._check_action(state, power)
        if state.period_flag == OPERATING:
            k = state.period_index
            power = sample_operating_discharge(state, self.rng, self.discharge, self.cfg, self.schedule.rush[k])
        gamma = self.termination_prob(state)
        switch = gamma >= 1.0 or (gamma > 0.0 and self.rng.random() < gamma)
        out = self._advance(state, float(power), switch)
        self.state = out.next_state
        self.done = out.done
        return out

    def outcomes(self, state: EnvState, power: float | None = None):
        """Exact one-step outcome distribution ``[(prob, StepOutcome), ...]``.

        Requires a discrete discharge profile for operating states.
        """
        self._check_action(state, power)
        gamma = self.termination_prob(state)
        if state.period_flag == CHARGING:
            powers = [(float(power), 1.0)]
        else:
            rush = self.schedule.rush[state.period_index]
            powers = [(min(0.0, max(-self.cfg.d_max_kw, v)), p) for v, p in self.discharge.support(rush)]
        out = []
        for switch, ps in ((True, gamma), (False, 1.0 - gamma)):
            if ps <= 0.0:
                continue
            for pw, pp in powers:
                if pp > 0:
                    out.append((ps * pp, self._advance(state, pw, switch)))
        return out
