"""Waveform I/O, the synthetic tone corpus and log filterbank features."""

from __future__ import annotations

import json
import os
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PCM_SCALE = 32768.0
LOG_FLOOR = 1e-8


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = 16000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be mono (1-D), got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class FeatureConfig:
    frame_len_samples: int = 512
    hop_samples: int = 256
    n_bands: int = 16
    window: str = "hann"
    fmin_hz: float = 0.0
    fmax_hz: float = 4000.0
    scale: str = "mel"

    def __post_init__(self):
        if self.frame_len_samples < 2:
            raise ValueError("frame_len_samples must be >= 2")
        if not 1 <= self.hop_samples <= self.frame_len_samples:
            raise ValueError("hop_samples must be in [1, frame_len_samples]")
        if self.n_bands < 1:
            raise ValueError("n_bands must be >= 1")
        if self.window not in _WINDOWS:
            raise ValueError(f"unknown window {self.window!r}; choose from {sorted(_WINDOWS)}")
        if not 0 <= self.fmin_hz < self.fmax_hz:
            raise ValueError("need 0 <= fmin_hz < fmax_hz")
        if self.scale not in ("mel", "linear"):
            raise ValueError(f"scale must be 'mel' or 'linear', got {self.scale!r}")

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_len_samples:
            return 0
        return 1 + (n_samples - self.frame_len_samples) // self.hop_samples

    def n_samples_for(self, n_frames: int) -> int:
        return self.frame_len_samples + (n_frames - 1) * self.hop_samples


@dataclass(frozen=True)
class CorpusSpec:
    n_utterances: int = 200
    alphabet_size: int = 16
    segment_frames: int = 4
    symbols_per_utterance: int = 6
    seed: int = 0
    f0_low_hz: float = 110.0  # symbol fundamentals span `f0_octaves` octaves upward from here
    f0_octaves: float = 2.0

    def __post_init__(self):
        for name in ("n_utterances", "alphabet_size", "segment_frames", "symbols_per_utterance"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.alphabet_size < 2:
            raise ValueError("alphabet_size must be >= 2")
        if self.f0_low_hz <= 0 or self.f0_octaves <= 0:
            raise ValueError("f0_low_hz and f0_octaves must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass
class Utterance:
    waveform: Waveform
    labels: np.ndarray
    utterance_id: str
    symbols: list[int] = field(default_factory=list)


_WINDOWS = {
    "hann": lambda n: np.hanning(n + 1)[:-1],
    "hamming": lambda n: np.hamming(n + 1)[:-1],
    "rect": np.ones,
}


# --------------------------------------------------------------------------- wav

def load_wav(path) -> Waveform:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such wav file: {path}")
    try:
        with wave.open(str(path), "rb") as fh:
            n_channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise ValueError(f"{path}: not a PCM RIFF/WAVE file ({exc})") from exc
    if n_channels != 1:
        raise ValueError(f"{path}: expected mono, got {n_channels} channels")
    if width != 2:
        raise ValueError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / PCM_SCALE, rate)


def save_wav(w: Waveform, path) -> None:
    pcm = np.clip(np.round(w.samples * PCM_SCALE), -32768, 32767).astype("<i2")
    with open(path, "wb") as raw, wave.open(raw, "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate_hz)
        fh.writeframes(pcm.tobytes())


# ------------------------------------------------------------------------ corpus

def symbol_f0(symbol: int, alphabet_size: int, low_hz: float = 110.0, octaves: float = 2.0) -> float:
    """Fundamental of a symbol, geometrically spaced over ``octaves`` above ``low_hz``."""
    return low_hz * 2.0 ** (octaves * symbol / alphabet_size)


def _render_tone(f0, n, sr, rng, band_limit_hz):
    t = np.arange(n) / sr
    out = np.zeros(n)
    n_harm = max(1, int(band_limit_hz // f0))
    phases = rng.uniform(0, 2 * np.pi, size=n_harm)
    for h in range(1, n_harm + 1):
        out += np.sin(2 * np.pi * h * f0 * t + phases[h - 1]) / h
    return out / np.sqrt(np.mean(out**2))


def synth_utterance(symbols, spec: CorpusSpec, cfg: FeatureConfig, rng, sample_rate_hz=16000,
                    utterance_id="utt"):
    symbols = [int(s) for s in symbols]
    if any(not 0 <= s < spec.alphabet_size for s in symbols):
        raise ValueError("symbol outside alphabet")
    sf = spec.segment_frames
    n_frames = len(symbols) * sf
    n = cfg.n_samples_for(n_frames)
    # segment edges sit halfway between the centres of the last frame of one
    # segment and the first frame of the next
    edges = [0]
    for j in range(1, len(symbols)):
        edges.append(j * sf * cfg.hop_samples + (cfg.frame_len_samples - cfg.hop_samples) // 2)
    edges.append(n)
    band_limit = min(4000.0, 0.45 * sample_rate_hz)
    ramp = min(int(0.004 * sample_rate_hz), 16)
    out = np.zeros(n)
    for j, s in enumerate(symbols):
        a, b = edges[j], edges[j + 1]
        seg = _render_tone(symbol_f0(s, spec.alphabet_size, spec.f0_low_hz, spec.f0_octaves), b - a, sample_rate_hz, rng, band_limit)
        seg *= 0.1 * rng.uniform(0.7, 1.3)
        m = min(ramp, (b - a) // 2)
        if m > 0:
            fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(m) / m)
            seg[:m] *= fade
            seg[-m:] *= fade[::-1]
        out[a:b] = seg
    labels = np.repeat(np.asarray(symbols, dtype=np.int64), sf)
    w = Waveform(np.clip(out, -1.0, 1.0), sample_rate_hz)
    return Utterance(w, labels, utterance_id, symbols)


def synth_corpus(spec: CorpusSpec, cfg: FeatureConfig | None = None, sample_rate_hz: int = 16000,
                 symbols: Sequence[int] | None = None) -> list[Utterance]:
    """Render ``spec.n_utterances`` utterances of random tone "phonemes".

    ``symbols`` forces every utterance to use the given symbol sequence.
    The output is a pure function of ``spec.seed``.
    """
    cfg = cfg or FeatureConfig()
    rng = np.random.default_rng(spec.seed)
    corpus = []
    for i in range(spec.n_utterances):
        if symbols is None:
            seq = rng.integers(0, spec.alphabet_size, size=spec.symbols_per_utterance)
        else:
            seq = symbols
        corpus.append(synth_utterance(seq, spec, cfg, rng, sample_rate_hz, f"utt{i:05d}"))
    return corpus


def write_corpus(corpus: Iterable[Utterance], out_dir) -> Path:
    """Write each utterance as a wav plus a JSONL manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for utt in corpus:
            rel = f"wav/{utt.utterance_id}.wav"
            save_wav(utt.waveform, out_dir / rel)
            rec = {"id": utt.utterance_id, "wav_path": rel, "labels": [int(x) for x in utt.labels]}
            fh.write(json.dumps(rec) + "\n")
    return manifest


def read_corpus(manifest) -> list[Utterance]:
    manifest = Path(manifest)
    corpus = []
    with open(manifest) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            wav_path = Path(rec["wav_path"])
            if not wav_path.is_absolute():
                wav_path = manifest.parent / wav_path
            labels = np.asarray(rec["labels"], dtype=np.int64)
            corpus.append(Utterance(load_wav(wav_path), labels, rec["id"]))
    return corpus


# ---------------------------------------------------------------------- features

def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def band_edges(cfg: FeatureConfig, sample_rate_hz: int) -> np.ndarray:
    """n_bands + 2 edge frequencies; band k rises over edges[k:k+2] and falls over edges[k+1:k+3]."""
    hi = min(cfg.fmax_hz, sample_rate_hz / 2)
    if cfg.scale == "linear":
        return np.linspace(cfg.fmin_hz, hi, cfg.n_bands + 2)
    return _mel_to_hz(np.linspace(_hz_to_mel(cfg.fmin_hz), _hz_to_mel(hi), cfg.n_bands + 2))


def band_centers(cfg: FeatureConfig, sample_rate_hz: int) -> np.ndarray:
    return band_edges(cfg, sample_rate_hz)[1:-1]


def filterbank(cfg: FeatureConfig, sample_rate_hz: int, n_fft: int) -> np.ndarray:
    """Triangular bands, unit peak at each centre; shape (n_bands, n_fft//2 + 1)."""
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate_hz)
    edges = band_edges(cfg, sample_rate_hz)
    fb = np.zeros((cfg.n_bands, freqs.size))
    for k in range(cfg.n_bands):
        lo, mid, top = edges[k], edges[k + 1], edges[k + 2]
        rise = (freqs - lo) / (mid - lo)
        fall = (top - freqs) / (top - mid)
        fb[k] = np.maximum(0.0, np.minimum(rise, fall))
    return fb


def _n_fft(frame_len):
    return 1 << (int(frame_len) - 1).bit_length()


def frame_signal(x: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Frames along the last axis: (..., n_samples) -> (..., n_frames, frame_len)."""
    n = x.shape[-1]
    if n < cfg.frame_len_samples:
        raise ValueError(f"waveform of {n} samples is shorter than one frame ({cfg.frame_len_samples})")
    view = np.lib.stride_tricks.sliding_window_view(x, cfg.frame_len_samples, axis=-1)
    return view[..., :: cfg.hop_samples, :]


def log_filterbank(x: np.ndarray, cfg: FeatureConfig, sample_rate_hz: int) -> np.ndarray:
    """Batched features for raw sample arrays of shape (..., n_samples)."""
    frames = frame_signal(np.asarray(x, dtype=np.float64), cfg)
    n_fft = _n_fft(cfg.frame_len_samples)
    win = _WINDOWS[cfg.window](cfg.frame_len_samples)
    mag = np.abs(np.fft.rfft(frames * win, n=n_fft, axis=-1))
    energy = mag @ filterbank(cfg, sample_rate_hz, n_fft).T
    return np.log(np.maximum(energy, LOG_FLOOR))


def extract_features(w: Waveform, cfg: FeatureConfig | None = None) -> np.ndarray:
    """Log filterbank magnitudes, shape (n_frames, n_bands)."""
    cfg = cfg or FeatureConfig()
    return log_filterbank(w.samples, cfg, w.sample_rate_hz)


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
