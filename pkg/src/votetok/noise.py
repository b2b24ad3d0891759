"""Waveform perturbations: SNR-calibrated additive noise and bit crushing.

Five perturbation kinds are supported. Gaussian, pink and brown noise are
synthesized; real noise is drawn from a directory of wav clips. Additive
noise is scaled so the mixture hits the requested SNR exactly over the whole
utterance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .signal_io import Waveform, load_wav


class Kind(str, Enum):
    GAUSSIAN = "gaussian"
    PINK = "pink"
    BROWN = "brown"
    BITCRUSH = "bitcrush"
    REAL = "real"

    @classmethod
    def parse(cls, value) -> "Kind":
        if isinstance(value, Kind):
            return value
        key = str(value).strip().lower().replace("_", "").replace("-", "").replace(" ", "")
        aliases = {"gaussiannoise": "gaussian", "white": "gaussian", "pinknoise": "pink",
                   "brownnoise": "brown", "bitcrushdistortion": "bitcrush", "realnoise": "real",
                   "realworldnoise": "real"}
        return cls(aliases.get(key, key))


NOISE_ALPHA = {Kind.GAUSSIAN: 0.0, Kind.PINK: 1.0, Kind.BROWN: 2.0}


class NoisePool:
    """Wav clips under a directory; clip ids are paths relative to the root."""

    def __init__(self, root, clips: dict[str, Waveform] | None = None):
        self.root = Path(root)
        if clips is None:
            clips = {}
            for path in sorted(self.root.rglob("*.wav")):
                clips[path.relative_to(self.root).as_posix()] = load_wav(path)
        if not clips:
            raise ValueError(f"noise pool {self.root} contains no wav clips")
        self.clips = clips
        self.ids = sorted(clips)

    def __len__(self):
        return len(self.ids)


@dataclass
class PerturbationSpec:
    kind: Kind
    intensity: float | tuple  # fixed value or inclusive (low, high)
    noise_pool: NoisePool | None = None
    name: str | None = None

    def __post_init__(self):
        self.kind = Kind.parse(self.kind)
        if isinstance(self.intensity, (list, tuple)):
            lo, hi = self.intensity
            if lo > hi:
                raise ValueError(f"intensity range low {lo} > high {hi}")
            self.intensity = (lo, hi)
        lo, hi = self.bounds
        if self.kind is Kind.BITCRUSH:
            if lo != int(lo) or hi != int(hi) or not (1 <= lo and hi <= 16):
                raise ValueError("bit depth must be an integer in [1, 16]")
        if self.kind is Kind.REAL and (self.noise_pool is None or len(self.noise_pool) == 0):
            raise ValueError("real-noise perturbation needs a non-empty noise pool")

    @property
    def bounds(self) -> tuple:
        if isinstance(self.intensity, tuple):
            return self.intensity
        return (self.intensity, self.intensity)

    @property
    def label(self) -> str:
        return self.name or self.kind.value


@dataclass
class AppliedPerturbation:
    kind: Kind
    realized_intensity: float
    noise_clip_id: str | None = None
    rng_draws: dict = field(default_factory=dict)

    def to_dict(self):
        return {"kind": self.kind.value, "realized_intensity": self.realized_intensity,
                "noise_clip_id": self.noise_clip_id, "rng_draws": self.rng_draws}


def measure_power(w) -> float:
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot measure the power of an empty signal")
    return float(np.mean(x * x))


def snr_db(clean, noisy) -> float:
    """SNR of ``noisy`` with ``noisy - clean`` taken as the noise."""
    c = clean.samples if isinstance(clean, Waveform) else np.asarray(clean, float)
    y = noisy.samples if isinstance(noisy, Waveform) else np.asarray(noisy, float)
    return 10.0 * math.log10(measure_power(c) / measure_power(y - c))


def fit_length(noise: np.ndarray, n: int, offset: int = 0) -> np.ndarray:
    """Tile a short clip or crop a long one, starting at ``offset``, to ``n`` samples."""
    if noise.size >= n:
        return noise[offset:offset + n]
    reps = -(-n // noise.size)
    return np.tile(noise, reps)[:n]


def noise_gain(p_clean: float, p_noise: float, snr: float) -> float:
    return math.sqrt(p_clean / (p_noise * 10.0 ** (snr / 10.0)))


def mix_at_snr(clean: Waveform, noise: Waveform, snr: float) -> Waveform:
    """clean + g * noise with g chosen so that the mixture has exactly ``snr`` dB."""
    if noise.sample_rate_hz != clean.sample_rate_hz:
        raise ValueError("clean and noise sample rates differ")
    n = fit_length(noise.samples, len(clean))
    p_clean, p_noise = measure_power(clean), measure_power(n)
    if p_clean == 0.0:
        raise ValueError("clean signal has zero power; SNR is undefined")
    if p_noise == 0.0:
        raise ValueError("noise has zero power; SNR is undefined")
    if math.isinf(snr) and snr > 0:
        return Waveform(clean.samples.copy(), clean.sample_rate_hz)
    g = noise_gain(p_clean, p_noise, snr)
    return Waveform(clean.samples + g * n, clean.sample_rate_hz)


def gen_colored_noise(n_samples: int, alpha: float, seed=None, sample_rate_hz: int = 16000) -> Waveform:
    """Unit-power noise with PSD proportional to f**-alpha (0 white, 1 pink, 2 brown).

    White Gaussian spectrum shaped by f**(-alpha/2), DC zeroed, inverse FFT.
    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    if alpha not in (0, 1, 2):
        raise ValueError(f"alpha must be 0, 1 or 2, got {alpha}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_bins = n_samples // 2 + 1
    spec = rng.standard_normal(n_bins) + 1j * rng.standard_normal(n_bins)
    f = np.arange(n_bins, dtype=np.float64)
    scale = np.zeros(n_bins)
    scale[1:] = f[1:] ** (-alpha / 2.0)
    x = np.fft.irfft(spec * scale, n=n_samples)
    x /= math.sqrt(np.mean(x * x))
    return Waveform(x, sample_rate_hz)


def bit_crush(w: Waveform, depth: int) -> Waveform:
    """Requantize to ``depth`` bits: y = clamp(round(x q), -q, q - 1) / q with q = 2**(depth-1)."""
    depth = int(depth)
    if not 1 <= depth <= 16:
        raise ValueError(f"bit depth must be in [1, 16], got {depth}")
    q = float(2 ** (depth - 1))
    y = np.clip(np.round(w.samples * q), -q, q - 1) / q
    return Waveform(y, w.sample_rate_hz)


def expected_bitcrush_snr(w: Waveform, depth: int) -> float:
    """SNR predicted by the uniform quantization-noise model, step 1/q, noise power step**2/12."""
    q = 2.0 ** (depth - 1)
    return 10.0 * math.log10(measure_power(w) / ((1.0 / q) ** 2 / 12.0))


def _draw_intensity(spec: PerturbationSpec, rng):
    lo, hi = spec.bounds
    if spec.kind is Kind.BITCRUSH:
        return int(rng.integers(int(lo), int(hi) + 1))
    if lo == hi:
        return float(lo)
    return float(rng.uniform(lo, hi))


def apply_spec(w: Waveform, spec: PerturbationSpec, rng) -> tuple[Waveform, AppliedPerturbation]:
    """Apply one perturbation kind with an intensity drawn from its range."""
    intensity = _draw_intensity(spec, rng)
    draws = {"intensity": intensity}
    if spec.kind is Kind.BITCRUSH:
        return bit_crush(w, intensity), AppliedPerturbation(spec.kind, intensity, None, draws)
    if spec.kind is Kind.REAL:
        pool = spec.noise_pool
        clip_id = pool.ids[int(rng.integers(len(pool)))]
        clip = pool.clips[clip_id]
        offset = 0
        if len(clip) > len(w):
            offset = int(rng.integers(0, len(clip) - len(w) + 1))
        draws.update(clip=clip_id, offset=offset)
        noise = Waveform(fit_length(clip.samples, len(w), offset), w.sample_rate_hz)
        return mix_at_snr(w, noise, intensity), AppliedPerturbation(spec.kind, intensity, clip_id, draws)
    noise_seed = int(rng.integers(2**63))
    draws["noise_seed"] = noise_seed
    noise = gen_colored_noise(len(w), NOISE_ALPHA[spec.kind], noise_seed, w.sample_rate_hz)
    return mix_at_snr(w, noise, intensity), AppliedPerturbation(spec.kind, intensity, None, draws)


def perturb(w: Waveform, spec_set: Sequence[PerturbationSpec], rng) -> tuple[Waveform, AppliedPerturbation]:
    """Pick one spec uniformly, then apply it. Length and sample rate are preserved."""
    if not spec_set:
        raise ValueError("spec_set is empty")
    idx = int(rng.integers(len(spec_set)))
    out, applied = apply_spec(w, spec_set[idx], rng)
    applied.rng_draws["spec_index"] = idx
    return out, applied


# --------------------------------------------------------------- presets & files

def training_specs(noise_pool: NoisePool | None = None) -> list[PerturbationSpec]:
    """Training-time ranges; the real-noise kind is included only when a pool is given."""
    specs = [
        PerturbationSpec(Kind.GAUSSIAN, (16.0, 30.0)),
        PerturbationSpec(Kind.PINK, (16.0, 24.0)),
        PerturbationSpec(Kind.BROWN, (12.0, 24.0)),
        PerturbationSpec(Kind.BITCRUSH, (8, 14)),
    ]
    if noise_pool is not None:
        specs.append(PerturbationSpec(Kind.REAL, (12.0, 24.0), noise_pool))
    return specs


def eval_specs(noise_pool: NoisePool | None = None, ood_pool: NoisePool | None = None) -> list[PerturbationSpec]:
    """Fixed evaluation intensities, one spec per row."""
    specs = [
        PerturbationSpec(Kind.GAUSSIAN, 25.0, name="gaussian"),
        PerturbationSpec(Kind.PINK, 22.0, name="pink"),
        PerturbationSpec(Kind.BROWN, 16.0, name="brown"),
        PerturbationSpec(Kind.BITCRUSH, 10, name="bitcrush"),
    ]
    if noise_pool is not None:
        specs.append(PerturbationSpec(Kind.REAL, 16.0, noise_pool, name="real"))
    if ood_pool is not None:
        specs.append(PerturbationSpec(Kind.REAL, 16.0, ood_pool, name="real_ood"))
    return specs


def load_spec_file(path, pools: dict[str, NoisePool] | None = None) -> list[PerturbationSpec]:
    """Read a JSON list of ``{"kind", "intensity"}`` or ``{"kind", "range": [lo, hi]}``.

    Real-noise entries name their clip directory with ``"noise_pool"``;
    relative paths resolve against the spec file's directory.
    """
    path = Path(path)
    entries = json.loads(path.read_text())
    pools = dict(pools or {})
    specs = []
    for i, e in enumerate(entries):
        if ("intensity" in e) == ("range" in e):
            raise ValueError(f"{path} entry {i}: give exactly one of 'intensity' or 'range'")
        intensity = e["intensity"] if "intensity" in e else tuple(e["range"])
        pool = None
        if "noise_pool" in e:
            key = e["noise_pool"]
            if key not in pools:
                root = Path(key)
                pools[key] = NoisePool(root if root.is_absolute() else path.parent / root)
            pool = pools[key]
        specs.append(PerturbationSpec(e["kind"], intensity, pool, e.get("name")))
    return specs


def dump_specs(specs: Sequence[PerturbationSpec]) -> list[dict]:
    out = []
    for s in specs:
        d = {"kind": s.kind.value}
        if isinstance(s.intensity, tuple):
            d["range"] = list(s.intensity)
        else:
            d["intensity"] = s.intensity
        if s.noise_pool is not None:
            d["noise_pool"] = str(s.noise_pool.root)
        if s.name:
            d["name"] = s.name
        out.append(d)
    return out


# ----------------------------------------------------------- synthetic noise pool

def _clip(kind, n, sr, rng):
    t = np.arange(n) / sr
    if kind == "hum":
        f = rng.uniform(45, 65)
        x = sum(np.sin(2 * np.pi * h * f * t + rng.uniform(0, 6.3)) / h for h in range(1, 6))
    elif kind == "babble":
        x = np.zeros(n)
        for _ in range(4):
            f0 = rng.uniform(90, 260)
            vib = 1 + 0.05 * np.sin(2 * np.pi * rng.uniform(3, 7) * t)
            phase = 2 * np.pi * np.cumsum(f0 * vib) / sr
            x += sum(np.sin(h * phase) / h for h in range(1, 8)) * (0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(1, 4) * t))
    elif kind == "rain":
        x = rng.standard_normal(n) * (rng.random(n) < 0.02) * 5 + 0.3 * rng.standard_normal(n)
    elif kind == "engine":
        f = rng.uniform(20, 40)
        x = np.sign(np.sin(2 * np.pi * f * t)) + 0.5 * gen_colored_noise(n, 2, rng).samples
    elif kind == "chirp":
        f0, f1 = rng.uniform(300, 800), rng.uniform(1500, 3500)
        phase = 2 * np.pi * (f0 * t + (f1 - f0) * t**2 / (2 * t[-1]))
        x = np.sin(phase) * (np.sin(2 * np.pi * rng.uniform(2, 6) * t) > 0)
    elif kind == "clatter":
        x = np.zeros(n)
        for pos in rng.integers(0, n, size=12):
            m = min(n - pos, int(0.03 * sr))
            x[pos:pos + m] += rng.standard_normal(m) * np.exp(-np.arange(m) / (0.005 * sr))
    elif kind == "wind":
        x = gen_colored_noise(n, 1, rng).samples * (1 + 0.8 * np.sin(2 * np.pi * rng.uniform(0.3, 1.5) * t))
    elif kind == "siren":
        f = 700 + 300 * np.sin(2 * np.pi * rng.uniform(0.5, 2) * t)
        x = np.sin(2 * np.pi * np.cumsum(f) / sr)
    else:
        raise ValueError(kind)
    # a faint broadband floor keeps every crop of every clip at non-zero power
    x = np.asarray(x, dtype=np.float64) + 0.01 * rng.standard_normal(n)
    peak = np.max(np.abs(x))
    return 0.5 * x / peak if peak > 0 else x


IN_DOMAIN_KINDS = ("hum", "babble", "rain", "engine", "chirp", "wind")
OOD_KINDS = ("clatter", "siren")


def synth_noise_pool(root, kinds=IN_DOMAIN_KINDS, per_kind=3, seconds=1.0, sample_rate_hz=16000, seed=0):
    """Write synthetic environmental-noise clips as ``<kind>/<kind>_<i>.wav``; returns a NoisePool."""
    from .signal_io import save_wav

    root = Path(root)
    rng = np.random.default_rng(seed)
    n = int(seconds * sample_rate_hz)
    for kind in kinds:
        (root / kind).mkdir(parents=True, exist_ok=True)
        for i in range(per_kind):
            save_wav(Waveform(_clip(kind, n, sample_rate_hz, rng), sample_rate_hz), root / kind / f"{kind}_{i}.wav")
    return NoisePool(root)
