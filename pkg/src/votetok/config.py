"""Experiment configuration: one validated document holding every hyperparameter.

Files may be JSON or TOML. Unknown keys are rejected, and every violation is
reported at once rather than the first one only.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .noise import NoisePool, PerturbationSpec, eval_specs, training_specs
from .signal_io import CorpusSpec, FeatureConfig
from .training import LossWeights, ModelConfig, NoiseAwareConfig, OptimConfig


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every problem found."""

    def __init__(self, errors: list[str], source: str | None = None):
        self.errors = errors
        where = f" in {source}" if source else ""
        super().__init__(f"{len(errors)} configuration error(s){where}:\n" + "\n".join(f"  - {e}" for e in errors))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CorpusSection(_Section):
    n_train: int = Field(2000, ge=1)
    n_eval: int = Field(400, ge=1)
    alphabet_size: int = Field(16, ge=2)
    segment_frames: int = Field(4, ge=1)
    symbols_per_utterance: int = Field(6, ge=1)
    f0_low_hz: float = Field(220.0, gt=0)
    f0_octaves: float = Field(1.0, gt=0)


class FeatureSection(_Section):
    frame_len_samples: int = Field(512, ge=2)
    hop_samples: int = Field(256, ge=1)
    n_bands: int = Field(16, ge=1)
    fmin_hz: float = Field(0.0, ge=0)
    fmax_hz: float = Field(4000.0, gt=0)
    scale: Literal["mel", "linear"] = "mel"
    sample_rate_hz: int = Field(16000, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.hop_samples > self.frame_len_samples:
            raise ValueError("hop_samples must not exceed frame_len_samples")
        if self.fmax_hz <= self.fmin_hz or self.fmax_hz > self.sample_rate_hz / 2:
            raise ValueError("need fmin_hz < fmax_hz <= sample_rate_hz / 2")
        return self


class ModelSection(_Section):
    encoder_hidden: tuple[int, ...] = (64,)
    hidden_dim: int = Field(32, ge=1)
    pool_factor: int = Field(2, ge=1)
    n_branches: int = Field(5, ge=1)
    code_dim: int = Field(8, ge=1, le=30)
    ste_clip: bool = False

    @field_validator("n_branches")
    @classmethod
    def _odd(cls, v):
        if v % 2 == 0:
            raise ValueError("must be odd so the per-bit vote has no ties")
        return v


class LossSection(_Section):
    consensus: float = Field(0.25, ge=0)
    commitment: float = Field(0.25, ge=0)
    codebook: float = Field(1.0, ge=0)


class SpecEntry(_Section):
    kind: Literal["gaussian", "pink", "brown", "bitcrush", "real"]
    intensity: Optional[float] = None
    range: Optional[tuple[float, float]] = None
    name: Optional[str] = None

    @model_validator(mode="after")
    def _one_of(self):
        if (self.intensity is None) == (self.range is None):
            raise ValueError("give exactly one of 'intensity' or 'range'")
        return self


class NoiseSection(_Section):
    noise_aware: bool = True
    stop_grad_consensus_mean: bool = False
    noise_pool: Optional[str] = None      # directory of wav clips; synthesized when unset
    ood_noise_pool: Optional[str] = None
    train_specs: Optional[list[SpecEntry]] = None  # defaults to the standard training ranges
    pool_clips_per_kind: int = Field(3, ge=1)


class OptimSection(_Section):
    lr: float = Field(1e-3, gt=0)
    warmup_steps: int = Field(100, ge=0)
    weight_decay: float = Field(0.01, ge=0)
    grad_clip: float = Field(1.0, gt=0)
    batch_size: int = Field(32, ge=1)
    schedule: Literal["constant", "cosine"] = "constant"
    epochs: int = Field(40, ge=0)


class EvalSection(_Section):
    workers: int = Field(1, ge=1)


class ExperimentConfig(_Section):
    seed: int = Field(0, ge=0)
    corpus: CorpusSection = CorpusSection()
    feature: FeatureSection = FeatureSection()
    model: ModelSection = ModelSection()
    loss: LossSection = LossSection()
    noise: NoiseSection = NoiseSection()
    optim: OptimSection = OptimSection()
    eval: EvalSection = EvalSection()

    # ------------------------------------------------------------ conversions

    def build_feature_config(self) -> FeatureConfig:
        f = self.feature
        return FeatureConfig(frame_len_samples=f.frame_len_samples, hop_samples=f.hop_samples, n_bands=f.n_bands,
                             fmin_hz=f.fmin_hz, fmax_hz=f.fmax_hz, scale=f.scale)

    def build_model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(feature=self.build_feature_config(), encoder_hidden=m.encoder_hidden, hidden_dim=m.hidden_dim,
                           pool_factor=m.pool_factor, n_branches=m.n_branches, code_dim=m.code_dim,
                           n_classes=self.corpus.alphabet_size, sample_rate_hz=self.feature.sample_rate_hz,
                           ste_clip=m.ste_clip)

    def corpus_spec(self, split: str, seed: int) -> CorpusSpec:
        c = self.corpus
        n = c.n_train if split == "train" else c.n_eval
        return CorpusSpec(n_utterances=n, alphabet_size=c.alphabet_size, segment_frames=c.segment_frames,
                          symbols_per_utterance=c.symbols_per_utterance, seed=seed,
                          f0_low_hz=c.f0_low_hz, f0_octaves=c.f0_octaves)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss.consensus, self.loss.commitment, self.loss.codebook)

    def build_optim_config(self) -> OptimConfig:
        o = self.optim
        return OptimConfig(lr=o.lr, warmup_steps=o.warmup_steps, weight_decay=o.weight_decay,
                           grad_clip=o.grad_clip, batch_size=o.batch_size, schedule=o.schedule)

    def train_spec_set(self, pool: NoisePool | None) -> list[PerturbationSpec]:
        if self.noise.train_specs is None:
            return training_specs(pool)
        out = []
        for e in self.noise.train_specs:
            intensity = e.intensity if e.range is None else tuple(e.range)
            if e.kind == "bitcrush":
                intensity = int(intensity) if e.range is None else tuple(int(x) for x in intensity)
            out.append(PerturbationSpec(e.kind, intensity, pool if e.kind == "real" else None, e.name))
        return out

    def noise_aware_config(self, pool: NoisePool | None) -> NoiseAwareConfig:
        return NoiseAwareConfig(self.train_spec_set(pool), self.noise.noise_aware,
                                self.noise.stop_grad_consensus_mean)

    def eval_suite(self, pool: NoisePool | None, ood_pool: NoisePool | None) -> list[PerturbationSpec]:
        return eval_specs(pool, ood_pool)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """Copy with some fields replaced, e.g. ``with_overrides(model={"n_branches": 3})``."""
        doc = self.model_dump(mode="json")
        for key, val in sections.items():
            if isinstance(val, dict):
                doc[key] = {**doc[key], **val}
            else:
                doc[key] = val
        return validate_config(doc)


def _format_errors(exc: ValidationError) -> list[str]:
    out = []
    for e in exc.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        out.append(f"{loc}: {e['msg']}")
    return out


def validate_config(doc: dict, source: str | None = None) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc), source) from None


def load_config(path) -> ExperimentConfig:
    """Read a JSON (``.json``) or TOML (anything else) experiment config."""
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text) if path.suffix.lower() == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError([f"parse error: {exc}"], str(path)) from None
    return validate_config(doc, str(path))
