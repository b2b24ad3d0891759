"""Token-stability and fidelity metrics, and the corpus robustness report."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import welch

from .signal_io import Waveform


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Minimum number of insertions, deletions and substitutions turning ``a`` into ``b``."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def ued_percent(clean_tokens: Sequence, noisy_tokens: Sequence) -> float:
    """Unit edit distance in percent, normalized by the clean sequence length."""
    if len(clean_tokens) == 0:
        raise ValueError("clean token sequence is empty")
    return 100.0 * levenshtein(clean_tokens, noisy_tokens) / len(clean_tokens)


def frame_error_rate(pred, gold) -> float:
    pred, gold = np.asarray(pred), np.asarray(gold)
    if pred.shape != gold.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gold.shape}")
    if pred.size == 0:
        raise ValueError("no frames")
    return 100.0 * float(np.mean(pred != gold))


def psd_slope(w: Waveform, nperseg: int = 1024, fmin_hz: float = 20.0, fmax_frac: float = 0.4) -> float:
    """Log-log slope of the Welch PSD over [fmin_hz, fmax_frac * Nyquist]."""
    x = w.samples
    if x.size < 4096:
        raise ValueError(f"need at least 4096 samples, got {x.size}")
    fs = w.sample_rate_hz
    f, pxx = welch(x, fs=fs, window="hann", nperseg=nperseg, noverlap=nperseg // 2)
    sel = (f >= fmin_hz) & (f <= fmax_frac * fs / 2)
    slope, _ = np.polyfit(np.log10(f[sel]), np.log10(pxx[sel]), 1)
    return float(slope)


# ------------------------------------------------------------------------ report

@dataclass
class ItemRecord:
    utterance_id: str
    perturbation: str
    realized_intensity: float
    ued: float
    noise_clip_id: str | None = None


@dataclass
class RobustnessReport:
    records: list[ItemRecord]
    clean_frame_error_rate: float | None = None
    order: list[str] = field(default_factory=list)

    @property
    def perturbations(self) -> list[str]:
        seen = list(self.order)
        for r in self.records:
            if r.perturbation not in seen:
                seen.append(r.perturbation)
        return seen

    def per_perturbation(self) -> dict:
        out = {}
        for name in self.perturbations:
            vals = np.array([r.ued for r in self.records if r.perturbation == name])
            out[name] = {"mean": float(vals.mean()) if vals.size else math.nan,
                         "std": float(vals.std()) if vals.size else math.nan,
                         "count": int(vals.size)}
        return out

    @property
    def average_ued(self) -> float:
        """Unweighted mean over perturbation categories of the per-category means."""
        means = [v["mean"] for v in self.per_perturbation().values()]
        return float(np.mean(means)) if means else math.nan

    def to_dict(self) -> dict:
        return {
            "per_perturbation": self.per_perturbation(),
            "average_ued": self.average_ued,
            "average_weighting": "unweighted mean of per-perturbation means",
            "clean_frame_error_rate": self.clean_frame_error_rate,
        }

    def items_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["utterance_id", "perturbation", "realized_intensity", "noise_clip_id", "ued"])
        for r in self.records:
            wr.writerow([r.utterance_id, r.perturbation, repr(float(r.realized_intensity)),
                         r.noise_clip_id or "", repr(float(r.ued))])
        return buf.getvalue()

    def write(self, out_dir, stem="report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out_dir / f"{stem}.json", out_dir / f"{stem}_items.csv"
        jpath.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        cpath.write_text(self.items_csv())
        return jpath, cpath

    @classmethod
    def from_items_csv(cls, path) -> "RobustnessReport":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        recs = [ItemRecord(r["utterance_id"], r["perturbation"], float(r["realized_intensity"]),
                           float(r["ued"]), r["noise_clip_id"] or None) for r in rows]
        return cls(recs)


# -------------------------------------------------------------- corpus evaluation

def _eval_chunk(model, utts, suite, seed):
    from .noise import apply_spec
    from .seeds import derive_seed
    from .training import tokenize

    records = []
    for utt in utts:
        clean = tokenize(model, utt.waveform)
        for spec in suite:
            rng = np.random.default_rng(derive_seed(seed, "eval", spec.label, utt.utterance_id))
            noisy_w, applied = apply_spec(utt.waveform, spec, rng)
            noisy = tokenize(model, noisy_w)
            records.append(ItemRecord(utt.utterance_id, spec.label, float(applied.realized_intensity),
                                      ued_percent(clean, noisy), applied.noise_clip_id))
    return records


def eval_robustness(model, corpus, suite=None, seed: int = 0, workers: int = 1) -> RobustnessReport:
    """Tokenize each utterance clean and under every suite perturbation; UED per pair.

    Randomness for an item depends only on (seed, perturbation, utterance id),
    so results do not depend on ``workers``. Records are ordered by utterance,
    then by suite order.
    """
    from .noise import eval_specs
    from .training import frame_accuracy

    suite = list(eval_specs() if suite is None else suite)
    corpus = list(corpus)
    if workers > 1 and len(corpus) > 1:
        from concurrent.futures import ProcessPoolExecutor

        chunks = [corpus[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_eval_chunk, [model] * workers, chunks, [suite] * workers, [seed] * workers))
        by_id = {}
        for part in parts:
            for r in part:
                by_id.setdefault(r.utterance_id, []).append(r)
        records = [r for u in corpus for r in by_id[u.utterance_id]]
    else:
        records = _eval_chunk(model, corpus, suite, seed)
    fer = 100.0 * (1.0 - frame_accuracy(model, corpus))
    return RobustnessReport(records, fer, [s.label for s in suite])
