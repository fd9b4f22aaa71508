# %% [markdown]
# A reduced Monte Carlo study: M1 on the 5 x 5 lattice, T in {5, 10}, 100
# replications (the `spatarch mc --quick` preset). Every estimator sees the
# same simulated panels.

# %%
import tempfile
from pathlib import Path

from spatarch.cli import compare_to_reference
from spatarch.config import quick_config
from spatarch.mc import emit_tables, run_experiment

cfg = quick_config()
report = run_experiment(cfg, workers=1)
print(f"{len(report.cells)} cells in {report.wall_time:.1f} s")

for est in report.estimators:
    for T in cfg.T_values:
        row = [report.get("M1", 25, T, est, p) for p in ("rho", "gamma", "delta")]
        print(f"{est:>16} T={T:<3}" + "".join(f"  bias {c.bias:+.3f} rmse {c.rmse:.3f}" for c in row))

# %%
# tables in the wide layout, and deltas against the shipped reference values
out = Path(tempfile.mkdtemp())
emit_tables(report, out)
print((out / "bias.csv").read_text().splitlines()[0])
n = compare_to_reference(report, "paper_table1.csv", out / "compare.csv")
print(n, "cells compared; worst deltas:")
rows = [line.split(",") for line in (out / "compare.csv").read_text().splitlines()[1:]]
for r in sorted(rows, key=lambda r: -float(r[-1]))[:5]:
    print("  ", r[0], r[2], r[3], "reference", r[5], "ours", r[6])
