# coding: utf-8

# # Ablation grid
#
# Each row removes one more ingredient: the consensus loss, then noise-aware
# routing, then the extra branches. Two more rows vary the voter count.
#
# The full grid (six configs, three seeds) takes roughly a quarter of an hour
# on one core. Pass `--quick` for a reduced version.

# In[1]:

import sys
import tempfile

from votetok.config import ExperimentConfig
from votetok.experiment import ABLATIONS, DEFAULT_GRID, run_ablation

quick = "--quick" in sys.argv
cfg = ExperimentConfig()
seeds = (0, 1, 2)
if quick:
    cfg = cfg.with_overrides(corpus={"n_train": 1000, "n_eval": 60}, optim={"epochs": 20})
    seeds = (0,)
for name in DEFAULT_GRID:
    print(f"{name:15s} overrides {ABLATIONS[name]}")


# In[2]:

out = tempfile.mkdtemp()
res = run_ablation(cfg, out, DEFAULT_GRID, seeds)
res.write(out, cfg)


# In[3]:

means = res.means()
print(f"{'config':15s} {'UED %':>8s} {'clean FER %':>12s}")
for name in DEFAULT_GRID:
    print(f"{name:15s} {means[name]['average_ued']:8.2f} {means[name]['clean_frame_error_rate']:12.2f}")
print("tables written to", out)
