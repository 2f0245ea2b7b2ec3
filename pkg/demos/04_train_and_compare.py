# %% [markdown]
# # Training the hierarchical charger and the baselines
#
# A short run per mode on the synthetic price trace.  Each mode uses a quarter
# of the default episode budget so the demo finishes within a few minutes.
# The full comparison behind the README table is
# `ebcharge compare --seeds 0,1,2`.

# %%
import dataclasses
import time

from ebcharge import data_path
from ebcharge.agents import MODES, Trainer, eval_protocol, evaluate
from ebcharge.config import load_config
from ebcharge.env import BusChargingEnv
from ebcharge.prices import load_prices, split_train_test

cfg = load_config(data_path("default.ini"))
train, test = split_train_test(load_prices(data_path("synthetic_prices.csv")), cfg.train.train_days)
episodes = cfg.train.episodes // 4
tcfg = dataclasses.replace(cfg.train, episodes=episodes, phase_threshold=cfg.train.phase_threshold // 4,
                           eval_every=episodes // 5)
env, test_env = BusChargingEnv(cfg.env, train), BusChargingEnv(cfg.env, test)
days, seeds = eval_protocol(50, range(test.n_days))

# %%
results = {}
for mode in MODES:
    t0 = time.perf_counter()
    res = Trainer(mode, env, tcfg, range(train.n_days), eval_env=test_env, eval_days=range(test.n_days),
                  seed=0).train()
    summary = evaluate(res.bundle, test_env, days, seeds)
    curve = [row["eval_mean"] for row in res.log]
    results[mode] = summary
    print(f"{mode:<14} test {summary.mean:8.3f} +- {summary.stderr:.3f}  depletions {summary.terminals:3d}"
          f"  ({time.perf_counter() - t0:.0f}s)  curve {[round(c, 1) for c in curve]}")

# %% [markdown]
# ## Ranking
# Returns are negative costs, so larger is better.

# %%
for mode, summary in sorted(results.items(), key=lambda kv: -kv[1].mean):
    print(f"{mode:<14} {summary.mean:8.3f}")
