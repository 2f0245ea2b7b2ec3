# %% [markdown]
# # Options lose nothing: exact dynamic programming on tiny instances
#
# On a tabular instance we can solve the flat charging problem exactly and
# also solve the two-level problem, where a high-level policy picks a target
# state of charge per layover and a low-level policy steers toward it.  The
# two optimal values coincide at every start state.

# %%
import time

from ebcharge import data_path
from ebcharge.oracle import BUNDLED, check_option_equivalence, dp_flat_optimal, dp_hier_optimal, load_instance

for name in BUNDLED:
    inst = load_instance(data_path(name))
    t0 = time.perf_counter()
    report = check_option_equivalence(inst)
    print(f"{inst.name:<12} {report.verdict:<5} max |V_flat - V_hier| = {report.max_discrepancy:.2e}"
          f"  ({time.perf_counter() - t0:.1f}s)")

# %% [markdown]
# ## What the high level chooses
# For instance A we list the optimal target for each layover start state, next
# to the state of charge the flat optimum reaches at departure.

# %%
inst = load_instance(data_path("instance_a.ini"))
flat = dp_flat_optimal(inst)
hier = dp_hier_optimal(inst)
shown = 0
for key, target in sorted(hier.option_policy.items(), key=lambda kv: (kv[0][4], kv[0][0])):
    soc, _, tau, k, t = key
    print(f"t={t:2d} k={k} soc={soc:5.1f} tau={tau}: target {target:5.1f}  value {hier.high_values[key]:8.4f}")
    shown += 1
    if shown == 10:
        break

# %% [markdown]
# ## A coarse option grid can hurt
# With 40 kWh spacing the targets no longer cover every useful departure
# level, and the hierarchical optimum falls below the flat one.

# %%
coarse = load_instance(data_path("instance_coarse.ini"))
rep = check_option_equivalence(coarse)
print(f"{coarse.name}: verdict {rep.verdict}, max discrepancy {rep.max_discrepancy:.4f}")
