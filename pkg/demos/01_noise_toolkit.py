# coding: utf-8

# # Calibrated perturbations
#
# Every corruption used for training and evaluation lives in `votetok.noise`.
# Additive kinds are scaled so the mixture lands on an exact SNR; bit crushing
# re-quantizes the samples instead.

# In[1]:

import numpy as np

from votetok.metrics import psd_slope
from votetok.noise import (PerturbationSpec, apply_spec, bit_crush, eval_specs, expected_bitcrush_snr,
                           gen_colored_noise, mix_at_snr, snr_db, synth_noise_pool)
from votetok.signal_io import CorpusSpec, synth_corpus


# A few synthetic utterances: each is a chain of harmonic tones, one per symbol.

# In[2]:

corpus = synth_corpus(CorpusSpec(n_utterances=5, seed=0))
w = corpus[0].waveform
print(len(w), "samples,", corpus[0].symbols)


# ## Mixing at a target SNR
#
# The noise is tiled or cropped to the clean length and scaled by one gain.

# In[3]:

noise = gen_colored_noise(len(w), alpha=1, seed=3)
for target in (30.0, 16.0, 0.0):
    print(f"target {target:5.1f} dB  measured {snr_db(w, mix_at_snr(w, noise, target)):.6f} dB")


# ## Spectral colour
#
# White, pink and brown noise have power falling as 1/f^alpha.

# In[4]:

for alpha in (0, 1, 2):
    slopes = [psd_slope(gen_colored_noise(2**16, alpha, s)) for s in range(5)]
    print(f"alpha {alpha}: fitted slopes {np.round(slopes, 3)}")


# ## Bit crushing
#
# Quantization noise follows the uniform model on average.

# In[5]:

for depth in (6, 8, 10, 12):
    print(f"{depth:2d} bits: SNR {snr_db(w, bit_crush(w, depth)):6.2f} dB, model {expected_bitcrush_snr(w, depth):6.2f} dB")


# ## The evaluation suite
#
# Real-noise rows draw crops from clip directories. Here the clips are
# synthesized procedurally into a temporary folder.

# In[6]:

import tempfile

pool = synth_noise_pool(tempfile.mkdtemp(), per_kind=2, seed=1)
rng = np.random.default_rng(0)
for spec in eval_specs(pool):
    out, applied = apply_spec(w, spec, rng)
    print(f"{spec.name:9s} intensity {applied.realized_intensity!s:5s} clip {applied.noise_clip_id}")
