# %% [markdown]
# # A day in the life of one electric bus
#
# The simulator alternates between trips (operating periods) and layovers at
# the depot (charging periods).  A trip ends at random, by a per-step arrival
# hazard.  During a layover the charger picks one of five power levels every
# ten minutes and pays the current electricity price.

# %%
import numpy as np

from ebcharge import data_path
from ebcharge.config import load_config
from ebcharge.env import BusChargingEnv
from ebcharge.prices import load_prices, split_train_test

cfg = load_config(data_path("default.ini"))
train, test = split_train_test(load_prices(data_path("synthetic_prices.csv")), cfg.train.train_days)
env = BusChargingEnv(cfg.env, train)
print("departures (min after midnight):", env.schedule.departures)
print("headway in steps:", env.schedule.gaps)
print("action grid (kW):", cfg.env.action_grid)

# %% [markdown]
# ## Prices
# The synthetic trace has an evening peak.  Hourly means over the training days:

# %%
steps_per_hour = 60 // cfg.env.dt_minutes
day_prices = np.array([[train.price(d * train.steps_per_day + t) for t in range(train.steps_per_day)]
                       for d in range(train.n_days)])
hourly = day_prices.reshape(train.n_days, 24, steps_per_hour).mean(axis=(0, 2))
for h in range(0, 24, 3):
    print(f"{h:02d}:00  " + "  ".join(f"{p:.4f}" for p in hourly[h:h + 3]))

# %% [markdown]
# ## Rollout with a greedy charger
# Charge at full power whenever parked.  The reward is the negative charging
# cost; trips cost nothing directly but drain the battery.

# %%
s = env.reset(day=0, seed=1)
total, log = 0.0, []
while True:
    power = float(env.feasible_actions(s)[1].max()) if s.period_flag == 1 else None
    out = env.step(power)
    total += out.reward
    if out.period_boundary != "none":
        log.append((env.clock_minutes(out.next_state.step_index), out.period_boundary, out.next_state.soc))
    if out.done:
        break
    s = out.next_state
for minutes, what, soc in log[:8]:
    print(f"{minutes // 60:02d}:{minutes % 60:02d}  {what:<18} soc={soc:6.1f} kWh")
print("...")
print(f"return {total:.3f}  terminal={out.terminal}  periods completed={s.period_index + 1}")

# %% [markdown]
# ## Random charging runs out of energy
# A uniformly random charger almost always lets the battery fall below the floor,
# which ends the day with a large penalty.

# %%
rng = np.random.default_rng(0)
terminal = 0
for seed in range(200):
    s = env.reset(int(rng.integers(train.n_days)), seed)
    while True:
        power = None
        if s.period_flag == 1:
            powers = env.feasible_actions(s)[1]
            power = float(powers[rng.integers(powers.size)])
        out = env.step(power)
        if out.done:
            terminal += out.terminal
            break
        s = out.next_state
print(f"random charger depleted the battery on {terminal}/200 days")
