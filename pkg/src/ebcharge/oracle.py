"""Exact dynamic programming on miniature instances.

Every expectation is an enumeration over the simulator's own one-step
outcome distribution (``BusChargingEnv.outcomes``), so the oracle and
the learners see identical dynamics.  Values are memoised on
``(soc, B, tau, k, t)``; prices are a fixed path indexed by ``t``.

Three solvers:

* ``dp_flat_optimal``   best per-step charging policy;
* ``dp_hier_optimal``   best policy over charging targets, each target
                        executed by its own optimal per-step policy under
                        the target-penalised low-level reward;
* ``evaluate_policy``   exact value of a given (target, power) policy.
"""
from __future__ import annotations

import configparser
import csv
import re
import sys
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .config import ConfigError, EnvConfig
from .env import CHARGING, BusChargingEnv, DischargeProfile, EnvState, ScheduleConfig, feasible_actions, \
    feasible_options
from .prices import PriceSeries

PASS, FAIL, INCONCLUSIVE = "PASS", "FAIL", "INCONCLUSIVE"
_TOL = 1e-9


class InstanceError(ValueError):
    """Malformed or non-closed tabular instance."""


def _key(s: EnvState):
    return (round(s.soc, 9), s.period_flag, s.steps_to_departure, s.period_index, s.step_index)


@dataclass(frozen=True)
class TabularInstance:
    name: str
    prices: tuple  # $/kWh per step from the first departure
    gaps: tuple  # steps per cycle
    travel: tuple  # per period: ((steps, prob), ...)
    discharge: tuple = ((-60.0, 1.0),)  # ((kW, prob), ...)
    e_max: float = 120.0
    c_max: float = 120.0
    d_max: float = 120.0
    action_levels: int = 5
    dt_minutes: int = 10
    soc_unit: float = 10.0
    option_step: float = 10.0
    c_end: float = 50.0
    kappa: float | None = None  # None: 1e3 x the largest one-step cost
    initial_soc: float = 120.0
    w_p: int = 2
    hazard_mode: str = "exact_hazard"
    start_socs: tuple | None = None  # None: every soc grid level

    def __post_init__(self):
        K = len(self.gaps)
        if not 2 <= K <= 3:
            raise InstanceError("instances have 2 or 3 operating periods")
        if len(self.travel) != K:
            raise InstanceError("one travel distribution per operating period required")
        if sum(self.gaps) > 30:
            raise InstanceError("horizon longer than 30 steps")
        if len(self.prices) < sum(self.gaps) + 1:
            raise InstanceError(f"price path needs at least {sum(self.gaps) + 1} entries")
        if self.e_max / self.soc_unit > 12 + 1e-9:
            raise InstanceError("more than 13 soc levels")
        dt = self.dt_minutes / 60.0
        unit = self.soc_unit
        energies = [p * dt for p in self.env_config().action_grid] + [p * dt for p, _ in self.discharge]
        for e in energies + [self.e_max, self.option_step, self.initial_soc]:
            if abs(e / unit - round(e / unit)) > 1e-9:
                raise InstanceError(f"energy {e} kWh is off the {unit} kWh soc grid; dynamics not closed")
        for k, (g, law) in enumerate(zip(self.gaps, self.travel)):
            for x, _ in law:
                if not 1 <= x <= g - 1:
                    raise InstanceError(f"travel support {x} of period {k} outside 1..{g - 1}")

    @property
    def soc_grid(self):
        return np.arange(0.0, self.e_max + _TOL, self.soc_unit)

    @property
    def max_step_cost(self) -> float:
        return max(self.c_max, self.d_max) * self.dt_minutes / 60.0 * max(abs(p) for p in self.prices)

    @property
    def kappa_value(self) -> float:
        return 1e3 * self.max_step_cost if self.kappa is None else self.kappa

    def env_config(self) -> EnvConfig:
        return EnvConfig(dt_minutes=self.dt_minutes, first_departure="00:00", headway_minutes=self.gaps[0] * self.dt_minutes,
                         num_operating_periods=len(self.gaps), e_min_kwh=0.0, e_max_kwh=self.e_max,
                         c_max_kw=self.c_max, d_max_kw=self.d_max, c_end=self.c_end, w_p=self.w_p,
                         initial_soc_kwh=self.initial_soc, action_levels=self.action_levels,
                         option_step_kwh=self.option_step, hazard_mode=self.hazard_mode, rush_windows=())

    def schedule(self) -> ScheduleConfig:
        pmfs = []
        for g, law in zip(self.gaps, self.travel):
            p = np.zeros(g)
            for x, q in law:
                p[x] += q
            if abs(p.sum() - 1.0) > 1e-9:
                raise InstanceError("travel probabilities must sum to 1")
            pmfs.append(p)
        deps = tuple(int(sum(self.gaps[:k])) * self.dt_minutes for k in range(len(self.gaps)))
        return ScheduleConfig(self.dt_minutes, deps, tuple(self.gaps), tuple(pmfs))

    def price_series(self) -> PriceSeries:
        steps_per_hour = 60 // self.dt_minutes
        return PriceSeries(np.asarray(self.prices, float), steps_per_hour, datetime(2023, 1, 1))

    def make_env(self) -> BusChargingEnv:
        prof = DischargeProfile.discrete([v for v, _ in self.discharge], [p for _, p in self.discharge])
        return BusChargingEnv(self.env_config(), self.price_series(), self.schedule(), prof)

    def start_states(self, env: BusChargingEnv | None = None):
        """Every first-arrival state over the start soc levels."""
        env = env or self.make_env()
        socs = self.soc_grid if self.start_socs is None else self.start_socs
        out = []
        for soc in socs:
            out += [s for _, s in env.initial_distribution(0, float(soc))]
        return out


# ---------------------------------------------------------------------------
# flat problem

@dataclass
class FlatSolution:
    values: dict  # key -> V*
    policy: dict  # key -> (grid index, power) for charging states
    env: BusChargingEnv

    def value(self, s: EnvState) -> float:
        return self.values[_key(s)]


def dp_flat_optimal(instance: TabularInstance) -> FlatSolution:
    """Optimal per-step policy by backward induction (memoised recursion over the finite horizon)."""
    env = instance.make_env()
    V, pol = {}, {}

    def value(s: EnvState) -> float:
        key = _key(s)
        if key in V:
            return V[key]
        if s.period_flag == CHARGING:
            idx, powers = feasible_actions(s.soc, env.cfg)
            best, arg = -np.inf, None
            for i, p in zip(idx, powers):
                q = _backup(env.outcomes(s, float(p)), value)
                if q > best + 1e-12:
                    best, arg = q, (int(i), float(p))
            V[key], pol[key] = best, arg
        else:
            V[key] = _backup(env.outcomes(s), value)
        return V[key]

    for s in instance.start_states(env):
        value(s)
    return FlatSolution(V, pol, env)


def _backup(outcomes, cont) -> float:
    total = 0.0
    for p, o in outcomes:
        total += p * (o.reward + (0.0 if o.done else cont(o.next_state)))
    return total


def flat_q_values(sol: FlatSolution, s: EnvState) -> dict:
    env = sol.env
    idx, powers = feasible_actions(s.soc, env.cfg)
    return {int(i): _backup(env.outcomes(s, float(p)), sol.value) for i, p in zip(idx, powers)}


# ---------------------------------------------------------------------------
# hierarchical problem

@dataclass
class HierSolution:
    high_values: dict  # key of a charging-start state -> V^H
    option_policy: dict  # key -> best target
    option_values: dict  # (key, target) -> Q^H
    low_values: dict  # (key, target) -> V^L under the target-penalised reward
    low_policy: dict  # (key, target) -> (grid index, power)
    kappa: float
    env: BusChargingEnv

    def value(self, s: EnvState) -> float:
        return self.high_values[_key(s)]


def dp_hier_optimal(instance: TabularInstance, kappa: float | None = None) -> HierSolution:
    env = instance.make_env()
    cfg = env.cfg
    kappa = instance.kappa_value if kappa is None else kappa
    VL, piL, VH, mu, QH, G, W = {}, {}, {}, {}, {}, {}, {}

    def low_value(s: EnvState, w: float) -> float:
        key = (_key(s), w)
        if key in VL:
            return VL[key]
        idx, powers = feasible_actions(s.soc, cfg)
        best, arg = -np.inf, None
        for i, p in zip(idx, powers):
            q = 0.0
            for prob, o in env.outcomes(s, float(p)):
                nxt = o.next_state
                if nxt.period_flag == CHARGING:
                    q += prob * (o.reward + low_value(nxt, w))
                else:
                    q += prob * (o.reward - kappa * (w - nxt.soc) ** 2)
            if q > best + 1e-12:
                best, arg = q, (int(i), float(p))
        VL[key], piL[key] = best, arg
        return best

    def charging_return(s: EnvState, w: float) -> float:
        # environment return from a charging state under the target's optimal low policy
        key = (_key(s), w)
        if key in G:
            return G[key]
        low_value(s, w)
        _, power = piL[key]
        total = 0.0
        for prob, o in env.outcomes(s, power):
            nxt = o.next_state
            if o.done:
                cont = 0.0
            elif nxt.period_flag == CHARGING:
                cont = charging_return(nxt, w)
            else:
                cont = operating_return(nxt)
            total += prob * (o.reward + cont)
        G[key] = total
        return total

    def operating_return(s: EnvState) -> float:
        key = _key(s)
        if key in W:
            return W[key]
        total = 0.0
        for prob, o in env.outcomes(s):
            nxt = o.next_state
            if o.done:
                cont = 0.0
            elif nxt.period_flag == CHARGING:
                cont = high_value(nxt)
            else:
                cont = operating_return(nxt)
            total += prob * (o.reward + cont)
        W[key] = total
        return total

    def high_value(s: EnvState) -> float:
        key = _key(s)
        if key in VH:
            return VH[key]
        best, arg = -np.inf, None
        for w in feasible_options(s.soc, s.steps_to_departure, cfg):
            w = float(w)
            q = charging_return(s, w)
            QH[(key, w)] = q
            if q > best + 1e-12:
                best, arg = q, w
        VH[key], mu[key] = best, arg
        return best

    for s in instance.start_states(env):
        high_value(s)
    return HierSolution(VH, mu, QH, VL, piL, kappa, env)


# ---------------------------------------------------------------------------
# equality check

@dataclass
class EquivalenceReport:
    instance: str
    verdict: str
    max_discrepancy: float
    rows: list  # (state, v_flat, v_hier)
    worst_state: EnvState | None = None
    worst_option: float | None = None
    missing_targets: list = field(default_factory=list)
    kappa: float = 0.0

    def line(self) -> str:
        msg = f"{self.verdict} {self.instance}: max |V_flat - V_hier| = {self.max_discrepancy:.3e} (kappa={self.kappa:g})"
        if self.verdict == INCONCLUSIVE:
            msg += f"; option grid misses flat-optimal end-of-period socs {sorted(self.missing_targets)}"
        elif self.verdict == FAIL and self.worst_state is not None:
            s = self.worst_state
            msg += f"; worst at soc={s.soc:g} tau={s.steps_to_departure} k={s.period_index} t={s.step_index}" \
                   f" with target {self.worst_option}"
        return msg

    def write(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# {self.line()}\n")
            w = csv.writer(fh)
            w.writerow(["soc", "tau", "k", "t", "v_flat", "v_hier", "discrepancy"])
            for s, vf, vh in self.rows:
                w.writerow([f"{s.soc:g}", s.steps_to_departure, s.period_index, s.step_index,
                            f"{vf:.12g}", f"{vh:.12g}", f"{abs(vf - vh):.3e}"])


def flat_optimal_departure_socs(instance: TabularInstance, sol: FlatSolution):
    """End-of-charging socs reached with positive probability by the optimal flat policy."""
    env = sol.env
    seen, out = set(), set()
    stack = list(instance.start_states(env))
    while stack:
        s = stack.pop()
        key = _key(s)
        if key in seen:
            continue
        seen.add(key)
        power = sol.policy[key][1] if s.period_flag == CHARGING else None
        for p, o in env.outcomes(s, power):
            if p <= 0 or o.done:
                continue
            if s.period_flag == CHARGING and o.next_state.period_flag != CHARGING:
                out.add(round(o.next_state.soc, 9))
            stack.append(o.next_state)
    return out


def check_option_equivalence(instance: TabularInstance, kappa_large: float | None = None, tol: float = _TOL) -> EquivalenceReport:
    flat = dp_flat_optimal(instance)
    hier = dp_hier_optimal(instance, kappa_large)
    rows, worst, worst_s = [], 0.0, None
    for s in instance.start_states(flat.env):
        vf, vh = flat.value(s), hier.value(s)
        rows.append((s, vf, vh))
        if abs(vf - vh) > worst:
            worst, worst_s = abs(vf - vh), s
    grid = instance.env_config().option_grid
    missing = [e for e in flat_optimal_departure_socs(instance, flat) if not np.any(np.abs(grid - e) < 1e-9)]
    if missing:
        verdict = INCONCLUSIVE
    else:
        verdict = PASS if worst <= tol else FAIL
    opt = hier.option_policy.get(_key(worst_s)) if worst_s is not None else None
    return EquivalenceReport(instance.name, verdict, worst, rows, worst_s, opt, missing, hier.kappa)


# ---------------------------------------------------------------------------
# exact evaluation of a given policy

def evaluate_policy(env: BusChargingEnv, choose_option, choose_power, start_states_with_probs) -> float:
    """Exact expected return of a hierarchical policy.

    ``choose_option(s) -> target`` is queried at each charging-period start
    and ``choose_power(s, target) -> kW`` at each charging step (for a flat
    policy ignore the target).
    """
    memo = {}

    def value(s: EnvState, w):
        key = (_key(s), w)
        if key in memo:
            return memo[key]
        power = choose_power(s, w) if s.period_flag == CHARGING else None
        total = 0.0
        for p, o in env.outcomes(s, power):
            if o.done:
                cont = 0.0
            elif o.period_boundary == "charging_started":
                nxt = o.next_state
                cont = value(nxt, choose_option(nxt))
            else:
                nxt = o.next_state
                cont = value(nxt, w if nxt.period_flag == CHARGING else None)
            total += p * (o.reward + cont)
        memo[key] = total
        return total

    return float(sum(p * value(s, choose_option(s)) for p, s in start_states_with_probs))


def optimal_start_value(instance: TabularInstance, sol: FlatSolution | None = None) -> float:
    """Expected optimal return from the configured initial soc."""
    sol = sol or dp_flat_optimal(instance)
    return float(sum(p * sol.value(s) for p, s in sol.env.initial_distribution(0, instance.initial_soc)))


# ---------------------------------------------------------------------------
# instance files

_PAIR = re.compile(r"^\s*(-?[\d.]+)\s*:\s*([\d.eE+-]+)\s*$")


def _line_of(text: str, key: str) -> int:
    for n, line in enumerate(text.splitlines(), start=1):
        if re.match(rf"^\s*{re.escape(key)}\s*[=:]", line):
            return n
    return 0


def _pairs(raw: str):
    out = []
    for part in raw.split(","):
        m = _PAIR.match(part)
        if not m:
            raise ValueError(f"expected value:probability, got {part.strip()!r}")
        out.append((float(m.group(1)), float(m.group(2))))
    return tuple(out)


def parse_instance(text: str, name: str = "instance") -> TabularInstance:
    """Parse a key/value instance description (``[instance]`` section).

    ``travel`` lists one ``steps:prob, ...`` law per period separated by
    ``;``; ``discharge`` is ``kW:prob, ...``; ``prices``/``gaps`` are comma lists.
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise InstanceError(f"{name}: {exc}") from None
    if not parser.has_section("instance"):
        raise InstanceError(f"{name}: missing [instance] section")
    sec = parser["instance"]
    known = {f for f in TabularInstance.__dataclass_fields__}
    kw = {"name": name}
    for key, raw in sec.items():
        line = _line_of(text, key)
        where = f"{name}:{line}"
        if key not in known:
            raise InstanceError(f"{where}: unknown key {key!r}")
        try:
            if key == "prices":
                kw[key] = tuple(float(x) for x in raw.split(","))
            elif key == "gaps":
                kw[key] = tuple(int(x) for x in raw.split(","))
            elif key == "travel":
                kw[key] = tuple(tuple((int(x), p) for x, p in _pairs(law)) for law in raw.split(";"))
            elif key == "discharge":
                kw[key] = _pairs(raw)
            elif key == "start_socs":
                kw[key] = tuple(float(x) for x in raw.split(","))
            elif key in ("action_levels", "dt_minutes", "w_p"):
                kw[key] = int(raw)
            elif key in ("name", "hazard_mode"):
                kw[key] = raw.strip()
            elif key == "kappa":
                kw[key] = None if raw.strip().lower() in ("auto", "none", "") else float(raw)
            else:
                kw[key] = float(raw)
        except ValueError as exc:
            raise InstanceError(f"{where}: bad value for {key}: {exc}") from None
    for req in ("prices", "gaps", "travel"):
        if req not in kw:
            raise InstanceError(f"{name}: missing required key {req!r}")
    try:
        return TabularInstance(**kw)
    except (ConfigError, InstanceError) as exc:
        raise InstanceError(f"{name}: {exc}") from None


def load_instance(path) -> TabularInstance:
    with open(path) as fh:
        text = fh.read()
    return parse_instance(text, name=str(path))


BUNDLED = ("instance_a.ini", "instance_b.ini", "instance_c.ini")
COARSE = "instance_coarse.ini"


def bundled_instances():
    from . import data_path
    return [load_instance(data_path(n)) for n in BUNDLED]


if __name__ == "__main__":  # pragma: no cover
    for inst in (load_instance(p) for p in sys.argv[1:]):
        print(check_option_equivalence(inst).line())
