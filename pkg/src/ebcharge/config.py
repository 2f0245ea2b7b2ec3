"""Typed configuration for the environment and the learners.

Config files are INI-style key/value files with an ``[env]`` and a
``[train]`` section; every key maps onto a dataclass field below.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    """Unknown key or unparsable value in a configuration file."""


@dataclass(frozen=True)
class EnvConfig:
    dt_minutes: int = 10
    first_departure: str = "06:30"
    headway_minutes: int = 90
    num_operating_periods: int = 12
    bus_offset_minutes: int = 0
    rush_windows: tuple = (("07:00", "09:00"), ("17:00", "19:00"))
    travel_mean_rush: float = 50.0
    travel_mean_offpeak: float = 40.0
    travel_std: float = 8.0
    e_min_kwh: float = 0.0
    e_max_kwh: float = 240.0
    c_max_kw: float = 120.0
    d_max_kw: float = 120.0
    c_end: float = 50.0
    w_p: int = 4
    initial_soc_kwh: float | None = None  # None: full battery
    discharge_mean_kw: float | None = None  # None: calibrated from trip_energy_fraction
    discharge_std_kw: float = 10.0
    trip_energy_fraction: float = 0.25
    rush_discharge_multiplier: float = 1.0
    action_levels: int = 5
    clip_actions: bool = True
    option_step_kwh: float = 10.0
    hazard_mode: str = "exact_hazard"
    option_window_current_step: bool = True
    feature_scheme: str = "symmetric"

    def __post_init__(self):
        if self.hazard_mode not in ("exact_hazard", "product_formula"):
            raise ConfigError(f"hazard_mode must be exact_hazard or product_formula, got {self.hazard_mode!r}")
        if self.feature_scheme not in ("symmetric", "unit"):
            raise ConfigError(f"feature_scheme must be symmetric or unit, got {self.feature_scheme!r}")
        if self.num_operating_periods < 2:
            raise ConfigError("num_operating_periods must be >= 2")
        if self.action_levels < 2:
            raise ConfigError("action_levels must be >= 2")
        if 60 % self.dt_minutes:
            raise ConfigError("dt_minutes must divide 60")

    @property
    def dt_hours(self) -> float:
        return self.dt_minutes / 60.0

    @property
    def start_soc(self) -> float:
        return self.e_max_kwh if self.initial_soc_kwh is None else float(self.initial_soc_kwh)

    @property
    def discharge_mean(self) -> float:
        """Mean operating power (kW, positive magnitude)."""
        if self.discharge_mean_kw is not None:
            return abs(float(self.discharge_mean_kw))
        hours = self.travel_mean_offpeak / 60.0
        return self.trip_energy_fraction * (self.e_max_kwh - self.e_min_kwh) / hours

    @property
    def action_grid(self) -> np.ndarray:
        grid = np.linspace(-self.d_max_kw, self.c_max_kw, self.action_levels)
        if not np.any(grid == 0.0):
            raise ConfigError("action grid must contain 0 kW; choose an odd action_levels for symmetric limits")
        return grid

    @property
    def option_grid(self) -> np.ndarray:
        step = self.option_step_kwh
        n = int(round((self.e_max_kwh - self.e_min_kwh) / step))
        return self.e_min_kwh + step * np.arange(n + 1)


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 3000
    phase_threshold: int = 750
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal_fraction: float = 0.6
    hidden: tuple = (64, 64)
    hidden_low_baseline: tuple = (64, 64)
    lr_high: float = 5e-4
    lr_low: float = 5e-4
    lr_flat: float = 5e-4
    lr_low_baseline: float = 5e-4
    batch_high: int = 128
    batch_low: int = 64
    batch_flat: int = 128
    batch_low_baseline: int = 64
    kappa: float = 0.005
    kappa_prime: float = 0.0006
    gamma: float = 1.0
    reward_scale: float = 1.0
    target_sync: int = 200
    high_updates_per_close: int = 1
    buffer_low: int = 100_000
    buffer_high: int = 10_000
    eval_every: int = 100
    eval_episodes: int = 10
    test_episodes: int = 100
    train_days: int = 31
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.phase_threshold <= self.episodes:
            raise ConfigError("phase_threshold must lie in [0, episodes]")
        if self.high_updates_per_close < 1:
            raise ConfigError("high_updates_per_close must be >= 1")
        if self.kappa <= 0 or self.kappa_prime <= 0:
            raise ConfigError("kappa and kappa_prime must be positive")
        for name in ("eps_start", "eps_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")

    def epsilon(self, episode: int) -> float:
        """Linear anneal from eps_start to eps_end over the first eps_anneal_fraction of episodes."""
        span = max(1, int(round(self.eps_anneal_fraction * self.episodes)))
        frac = min(1.0, episode / span)
        return self.eps_start + frac * (self.eps_end - self.eps_start)


def _parse_value(raw: str, current, name: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if name == "rush_windows":
            if not raw:
                return ()
            spans = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(tuple(p.strip() for p in s.split("-")) for s in spans)
        if isinstance(current, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float) or current is None:
            if current is None and raw.lower() in ("", "none"):
                return None
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {name} = {raw!r}") from None


def _build(cls, section, overrides):
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in section.items():
        if key not in names:
            raise ConfigError(f"unknown {cls.__name__} key: {key}")
        kwargs[key] = _parse_value(raw, getattr(defaults, key), key)
    for key, value in (overrides or {}).items():
        if key not in names:
            raise ConfigError(f"unknown {cls.__name__} key: {key}")
        kwargs[key] = value
    return cls(**kwargs)


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    price_file: str | None = None


def load_config(path, env_overrides=None, train_overrides=None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    with open(path) as fh:
        try:
            parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
    unknown = set(parser.sections()) - {"env", "train", "data"}
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    env = _build(EnvConfig, parser["env"] if parser.has_section("env") else {}, env_overrides)
    train = _build(TrainConfig, parser["train"] if parser.has_section("train") else {}, train_overrides)
    price_file = None
    if parser.has_section("data"):
        for key in parser["data"]:
            if key != "price_file":
                raise ConfigError(f"unknown data key: {key}")
        price_file = parser["data"].get("price_file")
    return RunConfig(env, train, price_file)


def dump_config(cfg: RunConfig) -> str:
    """Render a RunConfig back to INI text (used for run manifests)."""
    def fmt(v):
        if isinstance(v, tuple):
            if v and isinstance(v[0], tuple):
                return ", ".join("-".join(p) for p in v)
            return ", ".join(str(x) for x in v)
        return "none" if v is None else str(v)

    lines = []
    if cfg.price_file:
        lines += ["[data]", f"price_file = {cfg.price_file}", ""]
    for name, obj in (("env", cfg.env), ("train", cfg.train)):
        lines.append(f"[{name}]")
        lines += [f"{f.name} = {fmt(getattr(obj, f.name))}" for f in dataclasses.fields(obj)]
        lines.append("")
    return "\n".join(lines)
