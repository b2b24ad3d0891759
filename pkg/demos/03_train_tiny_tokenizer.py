# coding: utf-8

# # Training a small voting tokenizer
#
# Twenty epochs on half the usual corpus, well under a minute. The defaults used by the ablation grid are
# larger; see `04_ablation_grid.py`.

# In[1]:

import tempfile

import numpy as np

from votetok.config import ExperimentConfig
from votetok.experiment import build_data, run_one
from votetok.metrics import ued_percent
from votetok.noise import PerturbationSpec, perturb
from votetok.training import tokenize

cfg = ExperimentConfig().with_overrides(corpus={"n_train": 1000, "n_eval": 60}, optim={"epochs": 20})
data = build_data(cfg, tempfile.mkdtemp())
print(len(data.train), "training utterances,", len(data.eval), "held out")


# In[2]:

run = run_one(cfg, data, model_seed=0, name="tiny")
for row in run.train.history:
    print(f"epoch {row['epoch']:2d}  loss {row['l_total']:.3f}  clean frame accuracy {row['clean_frame_accuracy']:.3f}")


# ## Tokens for one utterance
#
# Two feature frames pool into one token; each token is an 8-bit code.

# In[3]:

u = data.eval[0]
clean = tokenize(run.model, u.waveform)
noisy_w, applied = perturb(u.waveform, [PerturbationSpec("pink", 16.0)], np.random.default_rng(1))
noisy = tokenize(run.model, noisy_w)
print("clean:", clean.tolist())
print("noisy:", noisy.tolist())
print(f"UED {ued_percent(clean, noisy):.1f}%")


# ## Robustness report

# In[4]:

for name, row in run.report.per_perturbation().items():
    print(f"{name:9s} UED {row['mean']:6.2f}%")
print(f"average UED {run.report.average_ued:.2f}%, clean frame error {run.report.clean_frame_error_rate:.2f}%")
