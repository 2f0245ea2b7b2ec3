# %% [markdown]
# # Hindsight relabelling of a missed charging target
#
# A layover aims at a target state of charge.  When the charger misses it,
# the transitions are copied with the goal replaced by what was actually
# reached.  In the copy the target was met, so the boundary step carries no
# target penalty.

# %%
import numpy as np

from ebcharge import data_path
from ebcharge.agents import Features, low_reward, pi_q
from ebcharge.config import load_config
from ebcharge.env import BusChargingEnv
from ebcharge.prices import load_prices
from ebcharge.replay import Encoded, HindsightStager, LowTransition, ReplayBuffer, her_store

cfg = load_config(data_path("default.ini"))
env = BusChargingEnv(cfg.env, load_prices(data_path("synthetic_prices.csv")))
features = Features.for_env(env)
n_actions = len(cfg.env.action_grid)


def encode(tr):
    return Encoded(features.low(tr.state, tr.option), tr.action_index, tr.reward,
                   features.low(tr.next_state, tr.option), tr.done, np.ones(n_actions, bool))


buf = ReplayBuffer(1000, features.low(env.reset(0, 0), 0.0).size, n_actions, encode)

# %% [markdown]
# ## One layover aimed too high
# The bus parks with some charge left; the target is the full battery, which
# the remaining layover cannot reach.

# %%
s = env.reset(day=0, seed=3, initial_soc=40.0)
target = cfg.env.e_max_kwh
stager = HindsightStager()
stager.begin(episode_id=0, option_instance_id=0)
print(f"layover starts at soc {s.soc:.1f} kWh with {s.steps_to_departure + 1} charging steps; target {target}")
while True:
    a, power = pi_q(s.soc, target, cfg.env)
    out = env.step(power)
    last = out.period_boundary == "operating_started"
    cost = low_reward(power, s.price, cfg.env.dt_hours)
    penalty = low_reward(power, s.price, cfg.env.dt_hours, target, out.next_state.soc) if last else 0.0
    tr = LowTransition(s, target, a, cost + penalty, out.next_state, last, 0, 0, cost, penalty)
    buf.push(tr)
    stager.stage(tr)
    print(f"  soc {s.soc:6.1f} -> {out.next_state.soc:6.1f}  power {power:+6.1f} kW  reward {tr.reward:+9.4f}")
    s = out.next_state
    if last:
        break

# %%
achieved = s.soc
pushed = her_store(buf, stager, achieved=achieved, prescribed=target)
print(f"achieved {achieved:.1f} kWh instead of {target:.1f}; {pushed} relabelled copies stored")
for r in buf.live_records():
    tag = "hindsight" if r.hindsight else "original "
    print(f"{tag} goal {r.option:6.1f}  reward {r.reward:+9.4f}  done {r.done}")

# %% [markdown]
# Had the target been met, nothing extra would be stored.

# %%
stager.begin(0, 1)
stager.stage(buf.live_records()[-1])
print("copies when the target is met:", her_store(buf, stager, achieved=achieved, prescribed=achieved))
