"""
How many complaints does an audit take?
=======================================

A reduced version of the accuracy experiment: for each amount of
background traffic, complain about one message until the count reaches
the tipping point, and record how many complaints that took.
"""

# %%
import tempfile
from pathlib import Path

from facts.sim import ExperimentConfig, emit_plots, run_accuracy

config = ExperimentConfig(n=100_000, t=(100, 316), trials=200, seed=4)
result = run_accuracy(config)
print(result.to_csv())

# %%
# The means sit close to t at every background level and the spread stays
# within a few percent.
for row in result.rows:
    print(f"t={row.t:4d} background={row.background:6d}  off by {100 * (row.mean - row.t) / row.t:+.2f}%")

# %%
# gnuplot files for the two panels (mean with error bars, relative spread).
out = Path(tempfile.mkdtemp())
(out / "accuracy.csv").write_text(result.to_csv())
for path in emit_plots(out / "accuracy.csv", out):
    print(path)
