"""
A small replicated comparison
=============================

Run a few replications per method, then aggregate them into the mean
(standard error) table. Bold marks the best method and any method a paired
t-test cannot separate from it. The same seed always reproduces the same
CSV files.
"""

import os
import tempfile

from mmbeddings.experiment import ExperimentConfig, markdown_table, run_sweep, write_sweep

cfg = ExperimentConfig(q_grid=[100], methods=["mmbed", "embed", "embed_l2", "ignore"], replications=3)
result = run_sweep(cfg, seed=11)
print(markdown_table(result.summary, cfg.methods))

out = tempfile.mkdtemp(prefix="mmbeddings-sweep-")
paths = write_sweep(result, cfg, out)
for name in sorted(os.listdir(out)):
    print(name, os.path.getsize(os.path.join(out, name)), "bytes")

# the command-line equivalent:
#   mmbeddings sweep --config exp.json --seed 11 --out results/
