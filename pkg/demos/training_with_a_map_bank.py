"""
Training on counts, watching the bank sharpen
=============================================

A small model trained from counts alone. Every epoch the bank takes an
exponential moving average of the model's own predictions, and the next
epoch samples its targets from that average.

Run it with ``python3 demos/training_with_a_map_bank.py``. It takes about a
minute on one core.
"""

import numpy as np

from densitybank.bank import save_bank
from densitybank.metrics import counting_errors
from densitybank.synthdata import SceneConfig, gen_dataset
from densitybank.train import TrainConfig, evaluate_counts, fit

###############################################################################
# 60 training scenes and 20 held out. The baseline to beat is the constant
# predictor that always answers the training-set mean.

data = gen_dataset(seed=11, n=80, cfg=SceneConfig(size=48, count_range=(5, 40)), split=(0.75, 0.0, 0.25))
mean = np.mean([s.count for s in data.train])
baseline = counting_errors([mean] * len(data.test), [s.count for s in data.test])[0]
print(f"constant-mean baseline MAE: {baseline:.2f}")

###############################################################################
# Default settings: EMA weight 0.7, temperature 0.07, weighted sampling and
# the contrastive term on. A bank snapshot is taken every 5 epochs.

cfg = TrainConfig(epochs=15, snapshot_every=5)
state = fit(data.train, cfg, val=data.test, snapshot_dir="bank_snapshots")

for rec in state.records:
    print(f"epoch {rec.epoch:2d}  map loss {rec.map_loss:9.2f}  contrastive {rec.ctr_loss:7.3f}  "
          f"held-out MAE {rec.val_mae:6.2f}")

###############################################################################
# The entries started as binary saliency masks. After training, their mass
# tracks each scene's count, because the model being averaged was trained
# to match it.

entries = state.bank.entries
counts = np.array([s.count for s in data.train])
masses = entries.reshape(len(entries), -1).sum(axis=1)
print(f"corr(bank mass, count) = {np.corrcoef(masses, counts)[0, 1]:.3f}")

mae, rmse = evaluate_counts(data.test, state)
print(f"held-out MAE {mae:.2f}, RMSE {rmse:.2f} (baseline {baseline:.2f})")
save_bank(state.bank, "final_bank")
print("inspect with: densitybank bank --bank bank_snapshots --snapshots --entries 0 --export evolution/")
