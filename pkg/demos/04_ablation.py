"""
A small ablation sweep
======================

Every fusion variant is trained on the same data with the same seeds, and
the seed-averaged Mean-1 accuracies are compared against the expected
ordering. This is a shortened sweep (fewer epochs, two seeds) that takes a
few minutes on one core; ``momehtl ablate`` runs the full one. With two
seeds the spread is wide, so read the per-seed numbers too.
"""

import time
from dataclasses import replace

import numpy as np

from momehtl.harness import DEFAULT_DATA, DEFAULT_OPTIM, DEFAULT_SWEEP, MetricReport, run_ablation

optim = replace(DEFAULT_OPTIM, max_epochs=20)

t0 = time.perf_counter()
report = run_ablation(DEFAULT_SWEEP, seeds=[0, 1], data_spec=DEFAULT_DATA, optim=optim)
print(report.table())
print(f"\n{len(report.rows)} runs in {time.perf_counter() - t0:.0f}s")

# every number in the table can be rebuilt from the stored confusion matrices
for r in report.rows:
    again = MetricReport.from_confusion(r.test.confusion)
    assert again.mean1 == r.test.mean1 and again.top1 == r.test.top1

# the spread across seeds matters as much as the means at this scale
for v in report.variants:
    vals = report.metric(v)
    print(f"{v:<28} per-seed Mean-1 {np.round(vals, 3)}")
