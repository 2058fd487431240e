"""
Where to put the audit threshold
================================

The count of a message after ``t`` complaints is noisy: background traffic
fills some of its slots and some complaints miss.  The tipping point is
the expected count, which a Monte Carlo run of the same process confirms.
"""

# %%
import numpy as np

from facts.sim import mc_tipping_oracle
from facts.tipping import TippingCalculator, choose_params, tail_thresholds, tipping_tables

s, u, v, t = 2000, 100, 40, 10
for m in (0, 200, 600, 1200):
    tables = tipping_tables(s, u, v, m, t)
    mc = mc_tipping_oracle(s, u, v, m, t, runs=20_000, seed=m)
    print(f"m={m:5d}  expected filled {tables.expected_filled:7.3f}  monte carlo {mc:7.3f}  tau={tables.tau}")

# %%
# At deployment scale the recipe fixes the table geometry from n and t.
params = choose_params(100_000, 1000)
print(params)
calc = TippingCalculator.for_params(params)
ms = np.linspace(0, params.n, 6).astype(int)
print("tau as the table fills:", dict(zip(ms.tolist(), [calc.tau(int(m)) for m in ms])))

# %%
# Below fp_safe complaints an audit is very unlikely, above fn_safe it is
# very likely.
for lam in (10, 20, 40):
    th = tail_thresholds(1000, lam)
    print(f"lambda={lam:2d}: safe below {th.fp_safe_count:7.1f}, certain above {th.fn_safe_count:7.1f}")
