"""
Validation curves past the best epoch
=====================================

Train plain embeddings and MMbeddings on the same data and keep going well
past the best epoch. The table of validation losses, relative to each
method's minimum, shows how quickly each one degrades.
"""

import numpy as np

from mmbeddings.baselines import make_model
from mmbeddings.experiment import model_config_for
from mmbeddings.simgen import SimConfig, simulate
from mmbeddings.trainer import TrainConfig, train

ds = simulate(SimConfig(q=300, n=3000, seed=3))
cfg = model_config_for(ds)

curves = {}
for method in ("embed", "mmbed"):
    model = make_model(method, cfg, 0)
    report = train(model, ds, TrainConfig(max_epochs=400, patience=31, seed=0))
    curves[method] = np.array(report.val_loss) / min(report.val_loss)
    print(f"{method}: best epoch {report.best_epoch}, ran {len(report.val_loss)} epochs")

# relative validation loss at a few offsets after each method's best epoch
print("offset  " + "  ".join(f"{m:>7s}" for m in curves))
for offset in (0, 5, 10, 20, 30):
    vals = []
    for c in curves.values():
        i = int(np.argmin(c)) + offset
        vals.append(f"{c[i]:7.3f}" if i < c.size else "      -")
    print(f"{offset:6d}  " + "  ".join(vals))
