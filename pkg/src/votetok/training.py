"""Encoder -> pooling -> voting quantizer -> frame classifier, and its training loop.

Noise-aware consensus training: each utterance is perturbed, both versions are
encoded, and a random minority of the quantizer branches read the perturbed
hidden states while the rest read the clean ones. The classifier reads the
bit-wise consensus score, and the objective adds consensus, commitment and
codebook-entropy terms to the frame cross entropy.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import nn
from .noise import PerturbationSpec, perturb, training_specs
from .quantizer import BranchBank, QuantizerConfig, code_to_token, quantize_frame_infer, sign
from .seeds import derive_seed
from .signal_io import FeatureConfig, Utterance, Waveform, log_filterbank

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    feature: FeatureConfig = field(default_factory=FeatureConfig)
    encoder_hidden: tuple = (64,)
    hidden_dim: int = 32
    pool_factor: int = 2
    n_branches: int = 5
    code_dim: int = 8
    n_classes: int = 16
    sample_rate_hz: int = 16000
    ste_clip: bool = False

    def __post_init__(self):
        if self.pool_factor < 1:
            raise ValueError("pool_factor must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        object.__setattr__(self, "encoder_hidden", tuple(int(h) for h in self.encoder_hidden))
        self.quantizer  # validates branch count and code size

    @property
    def quantizer(self) -> QuantizerConfig:
        return QuantizerConfig(self.n_branches, self.code_dim, self.hidden_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if isinstance(d.get("feature"), dict):
            d["feature"] = FeatureConfig(**d["feature"])
        return cls(**d)


@dataclass(frozen=True)
class LossWeights:
    consensus: float = 0.25
    commitment: float = 0.25
    codebook: float = 1.0

    def __post_init__(self):
        if min(self.consensus, self.commitment, self.codebook) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class NoiseAwareConfig:
    """Perturbation set and the minority-routing switch.

    With ``enabled`` false no perturbed stream is computed and every branch
    reads the clean input.
    """

    spec_set: Sequence[PerturbationSpec] = field(default_factory=training_specs)
    enabled: bool = True
    stop_grad_consensus_mean: bool = False


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    schedule: str = "constant"  # or "cosine": decay to zero at the last step after warmup

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")

    def lr_at(self, step: int, total_steps: int | None = None) -> float:
        """Learning rate for update ``step`` (0-based): linear warmup, then constant or cosine."""
        if step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        if self.schedule == "constant" or not total_steps:
            return self.lr
        span = max(1, total_steps - self.warmup_steps)
        frac = min(1.0, (step - self.warmup_steps) / span)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class LossBreakdown:
    l_task: float
    l_consensus: float
    l_commitment: float
    l_codebook: float
    l_total: float
    weights: LossWeights = field(default_factory=LossWeights)

    def as_row(self) -> dict:
        return {"l_task": self.l_task, "l_consensus": self.l_consensus,
                "l_commitment": self.l_commitment, "l_codebook": self.l_codebook,
                "l_total": self.l_total}


# ------------------------------------------------------------------------ model

class Model:
    def __init__(self, config: ModelConfig, params: dict, feat_mean=None, feat_std=None):
        self.config = config
        self.params = params
        F = config.feature.n_bands
        self.feat_mean = np.zeros(F) if feat_mean is None else np.asarray(feat_mean, float)
        self.feat_std = np.ones(F) if feat_std is None else np.asarray(feat_std, float)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "Model":
        rng = np.random.default_rng(derive_seed(seed, "init"))
        params = {}
        sizes = [config.feature.n_bands, *config.encoder_hidden, config.hidden_dim]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / math.sqrt(a)
            params[f"encoder.{i}.W"] = nn.parameter(rng.uniform(-bound, bound, (b, a)), f"encoder.{i}.W")
            params[f"encoder.{i}.b"] = nn.parameter(np.zeros(b), f"encoder.{i}.b")
        bank = BranchBank.init(config.quantizer, rng)
        params.update(bank.params())
        bound = 1.0 / math.sqrt(config.code_dim)
        params["head.W"] = nn.parameter(rng.uniform(-bound, bound, (config.n_classes, config.code_dim)), "head.W")
        params["head.b"] = nn.parameter(np.zeros(config.n_classes), "head.b")
        return cls(config, params)

    @property
    def bank(self) -> BranchBank:
        return BranchBank(self.params["quantizer.W"], self.params["quantizer.b"])

    @property
    def n_encoder_layers(self) -> int:
        return len(self.config.encoder_hidden) + 1

    def fit_normalizer(self, corpus: Sequence[Utterance]) -> None:
        feats = np.concatenate([self.features(u.waveform) for u in corpus])
        self.feat_mean = feats.mean(axis=0)
        self.feat_std = feats.std(axis=0) + 1e-6

    def features(self, w) -> np.ndarray:
        x = w.samples if isinstance(w, Waveform) else np.asarray(w, float)
        return log_filterbank(x, self.config.feature, self.config.sample_rate_hz)

    def encode(self, feats) -> nn.Tensor:
        """Raw features (..., T, F) -> pooled hidden states (..., T', D)."""
        x = nn.Tensor((np.asarray(feats) - self.feat_mean) / self.feat_std)
        L = self.n_encoder_layers
        for i in range(L):
            x = nn.affine(x, self.params[f"encoder.{i}.W"], self.params[f"encoder.{i}.b"])
            if i < L - 1:
                x = nn.relu(x)
        return nn.avg_pool_time(x, self.config.pool_factor)

    def head(self, score) -> nn.Tensor:
        return nn.affine(score, self.params["head.W"], self.params["head.b"])

    def tokens_from_features(self, feats) -> np.ndarray:
        h = self.encode(feats).value
        return np.asarray(quantize_frame_infer(h, self.bank), dtype=np.int64)

    def predict_labels(self, feats) -> np.ndarray:
        """Frame classes from the clean consensus score, shape (..., T')."""
        h = self.encode(feats).value
        bank = self.bank
        p = np.einsum("ndk,...k->n...d", bank.W.value, h) + bank.b.value.reshape(
            (bank.n_branches,) + (1,) * (h.ndim - 1) + (bank.code_dim,))
        s = sign(p).mean(axis=0)
        return np.argmax(self.head(s).value, axis=-1)

    def n_params(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def copy(self) -> "Model":
        params = {k: nn.parameter(v.value.copy(), k) for k, v in self.params.items()}
        return Model(self.config, params, self.feat_mean.copy(), self.feat_std.copy())

    def state_arrays(self) -> dict:
        arrays = {k: v.value for k, v in self.params.items()}
        arrays["norm.mean"] = self.feat_mean
        arrays["norm.std"] = self.feat_std
        return arrays

    def save(self, path) -> None:
        nn.save_params(self.state_arrays(), path, meta={"model_config": self.config.to_dict()})

    @classmethod
    def load(cls, path) -> "Model":
        arrays, meta = nn.load_params(path)
        config = ModelConfig.from_dict(meta["model_config"])
        mean, std = arrays.pop("norm.mean"), arrays.pop("norm.std")
        params = {k: nn.parameter(v, k) for k, v in arrays.items()}
        return cls(config, params, mean, std)


def pooled_labels(labels: np.ndarray, pool_factor: int) -> np.ndarray:
    """Label of each pooled frame is the label of its first constituent frame."""
    return np.asarray(labels)[..., ::pool_factor]


# ----------------------------------------------------------------------- losses

def consensus_loss(p, stop_grad_mean: bool = False) -> nn.Tensor:
    """Mean over frames of (1/n) sum_i ||p_i - mean_j p_j||^2; ``p`` is (n, ..., d)."""
    p = nn.as_tensor(p)
    if p.shape[0] < 2:
        raise ValueError("consensus loss needs at least two branches")
    centre = nn.mean(p, axis=0, keepdims=True)
    if stop_grad_mean:
        centre = nn.stop_gradient(centre)
    return nn.mul(nn.mean(nn.square(nn.sub(p, centre))), float(p.shape[-1]))


def commitment_loss(p) -> nn.Tensor:
    """mean((p - sg(sign(p)))^2) over branches, frames and bits."""
    p = nn.as_tensor(p)
    target = np.where(p.value >= 0, 1.0, -1.0)
    return nn.mse(p, nn.Tensor(target))


def codebook_entropy_loss(p) -> nn.Tensor:
    """Per-sample bit entropy minus batch usage entropy, with q = sigmoid(2p).

    ``p`` is (..., d); every leading index counts as one sample.
    """
    p = nn.as_tensor(p)
    if p.value.size == 0:
        raise ValueError("empty batch")
    z = nn.reshape(nn.mul(p, 2.0), (-1, p.shape[-1]))
    per_sample = nn.mean(nn.binary_entropy_logits(z))
    usage = nn.mean(nn.sigmoid(z), axis=0)
    return nn.sub(per_sample, nn.mean(nn.binary_entropy(usage)))


def route_branches(n: int, rng) -> np.ndarray:
    """Boolean mask of perturbed branches: a uniform k-subset, k uniform in [1, (n-1)//2].

    A single branch has no minority, so it is never perturbed.
    """
    mask = np.zeros(n, dtype=bool)
    kmax = (n - 1) // 2
    if kmax < 1:
        return mask
    k = int(rng.integers(1, kmax + 1))
    mask[rng.choice(n, size=k, replace=False)] = True
    return mask


# --------------------------------------------------------------------- training

@dataclass
class Batch:
    """Equal-length utterances with precomputed clean features."""

    waveforms: np.ndarray  # (B, N)
    feats: np.ndarray      # (B, T, F)
    labels: np.ndarray     # (B, T)
    sample_rate_hz: int


def make_batch(model: Model, utts: Sequence[Utterance], feats=None) -> Batch:
    lens = {len(u.waveform) for u in utts}
    if len(lens) != 1:
        raise ValueError("a batch needs equal-length utterances")
    wavs = np.stack([u.waveform.samples for u in utts])
    feats = model.features(wavs) if feats is None else np.asarray(feats)
    labels = np.stack([np.asarray(u.labels) for u in utts])
    if labels.shape != feats.shape[:2]:
        raise ValueError(f"label count {labels.shape} does not match frame count {feats.shape[:2]}")
    return Batch(wavs, feats, labels, utts[0].waveform.sample_rate_hz)


def forward_losses(model: Model, batch: Batch, pert_feats=None, mask=None,
                   weights: LossWeights = LossWeights(), surrogate=None,
                   stop_grad_mean: bool = False):
    """Composite loss on one batch; returns (total tensor, LossBreakdown).

    ``pert_feats`` and ``mask`` (n, B) select which branches read the perturbed
    stream; without them every branch reads the clean stream.
    """
    cfg = model.config
    n = cfg.n_branches
    h = model.encode(batch.feats)
    if pert_feats is not None and mask is not None and mask.any():
        h_alt = model.encode(pert_feats)
        routed = nn.route(h, h_alt, mask)
    else:
        routed = nn.tile_branches(h, n)
    bank = model.bank
    p = nn.branch_affine(routed, bank.W, bank.b)
    if surrogate is None:
        codes = nn.sign_ste(p, clip=cfg.ste_clip)
    else:
        codes = surrogate(p)
    score = nn.mean_over_branches(codes)
    logits = model.head(score)
    labels = pooled_labels(batch.labels, cfg.pool_factor)
    Tp = logits.shape[-2]
    if labels.shape[-1] < Tp:  # right padding repeats the last frame
        labels = np.concatenate([labels, np.repeat(labels[..., -1:], Tp - labels.shape[-1], -1)], -1)
    l_task = nn.softmax_xent(nn.reshape(logits, (-1, cfg.n_classes)), labels.reshape(-1))
    zero = nn.Tensor(0.0)
    l_cons = consensus_loss(p, stop_grad_mean) if n > 1 else zero
    l_commit = commitment_loss(p)
    l_code = codebook_entropy_loss(p)
    total = l_task
    for w, term in ((weights.consensus, l_cons), (weights.commitment, l_commit), (weights.codebook, l_code)):
        if w:
            total = nn.add(total, nn.mul(term, w))
    parts = LossBreakdown(float(l_task.value), float(l_cons.value), float(l_commit.value),
                          float(l_code.value), float(total.value), weights)
    return total, parts


def perturb_batch(batch: Batch, spec_set, rng):
    out = np.empty_like(batch.waveforms)
    applied = []
    for i, x in enumerate(batch.waveforms):
        w, a = perturb(Waveform(x, batch.sample_rate_hz), spec_set, rng)
        out[i] = w.samples
        applied.append(a)
    return out, applied


class TrainingDiverged(FloatingPointError):
    pass


def train_step(model: Model, batch: Batch, noise_cfg: NoiseAwareConfig, weights: LossWeights,
               opt: nn.OptimState, rng, optim: OptimConfig | None = None,
               total_steps: int | None = None) -> LossBreakdown:
    """One noise-aware consensus update on ``batch``; mutates ``model`` and ``opt``."""
    cfg = model.config
    pert_feats = mask = None
    if noise_cfg.enabled and cfg.n_branches > 1:
        pert_wavs, _ = perturb_batch(batch, noise_cfg.spec_set, rng)
        pert_feats = model.features(pert_wavs)
        mask = np.stack([route_branches(cfg.n_branches, rng) for _ in range(len(pert_wavs))], axis=1)
    for p in model.params.values():
        p.zero_grad()
    total, parts = forward_losses(model, batch, pert_feats, mask, weights,
                                  stop_grad_mean=noise_cfg.stop_grad_consensus_mean)
    if not math.isfinite(parts.l_total):
        raise TrainingDiverged(f"non-finite loss at step {opt.step + 1}: {parts.as_row()}")
    total.backward()
    grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
    lr = optim.lr_at(opt.step, total_steps) if optim is not None else None
    nn.adamw_step(model.params, grads, opt, lr=lr)
    return parts


def new_optimizer(optim: OptimConfig) -> nn.OptimState:
    return nn.OptimState(lr=optim.lr, betas=tuple(optim.betas), eps=optim.eps,
                         weight_decay=optim.weight_decay, grad_clip=optim.grad_clip)


HISTORY_FIELDS = ["epoch", "steps", "l_task", "l_consensus", "l_commitment", "l_codebook",
                  "l_total", "clean_frame_accuracy"]


@dataclass
class TrainResult:
    model: Model
    history: list[dict]

    def history_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.DictWriter(buf, HISTORY_FIELDS, lineterminator="\n")
        wr.writeheader()
        for row in self.history:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def _length_buckets(corpus):
    buckets = {}
    for i, u in enumerate(corpus):
        buckets.setdefault(len(u.waveform), []).append(i)
    return buckets


def frame_accuracy(model: Model, corpus: Sequence[Utterance]) -> float:
    correct = total = 0
    for idx in _length_buckets(corpus).values():
        batch = make_batch(model, [corpus[i] for i in idx])
        pred = model.predict_labels(batch.feats)
        gold = pooled_labels(batch.labels, model.config.pool_factor)
        Tp = min(pred.shape[-1], gold.shape[-1])
        correct += int(np.sum(pred[..., :Tp] == gold[..., :Tp]))
        total += gold[..., :Tp].size
    return correct / total


def train(model: Model, corpus: Sequence[Utterance], epochs: int, noise_cfg: NoiseAwareConfig,
          weights: LossWeights = LossWeights(), optim: OptimConfig = OptimConfig(), seed: int = 0,
          eval_corpus: Sequence[Utterance] | None = None) -> TrainResult:
    """Train ``model`` in place for ``epochs`` passes; deterministic given ``seed``."""
    if epochs <= 0:
        return TrainResult(model, [])
    shuffle_rng = np.random.default_rng(derive_seed(seed, "shuffle"))
    noise_rng = np.random.default_rng(derive_seed(seed, "noise"))
    opt = new_optimizer(optim)
    feats = {}
    buckets = _length_buckets(corpus)
    for n_samples, idx in buckets.items():
        fb = model.features(np.stack([corpus[i].waveform.samples for i in idx]))
        for j, i in enumerate(idx):
            feats[i] = fb[j]
    per_epoch = sum(-(-len(idx) // optim.batch_size) for idx in buckets.values())
    total_steps = per_epoch * epochs
    history = []
    for epoch in range(1, epochs + 1):
        sums = dict.fromkeys(HISTORY_FIELDS[2:7], 0.0)
        steps = 0
        batches = []
        for idx in buckets.values():
            order = shuffle_rng.permutation(idx)
            batches += [order[k:k + optim.batch_size] for k in range(0, len(order), optim.batch_size)]
        for bi in shuffle_rng.permutation(len(batches)):
            sel = batches[bi]
            batch = make_batch(model, [corpus[i] for i in sel], np.stack([feats[i] for i in sel]))
            try:
                parts = train_step(model, batch, noise_cfg, weights, opt, noise_rng, optim, total_steps)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}, step {opt.step + 1}: {exc}") from exc
            for k, v in parts.as_row().items():
                sums[k] += v
            steps += 1
        row = {"epoch": epoch, "steps": opt.step}
        row.update({k: v / steps for k, v in sums.items()})
        row["clean_frame_accuracy"] = frame_accuracy(model, eval_corpus or corpus)
        history.append(row)
        log.info("epoch %d: total %.4f task %.4f acc %.4f", epoch, row["l_total"], row["l_task"],
                 row["clean_frame_accuracy"])
    return TrainResult(model, history)


# --------------------------------------------------------------------- inference

def tokenize(model: Model, waveform: Waveform) -> np.ndarray:
    """Token ids, one per pooled frame: ceil(frames / pool_factor) after right padding."""
    if waveform.sample_rate_hz != model.config.sample_rate_hz:
        raise ValueError(f"model expects {model.config.sample_rate_hz} Hz audio, got {waveform.sample_rate_hz}")
    if len(waveform) < model.config.feature.frame_len_samples:
        raise ValueError("audio shorter than one analysis frame")
    return model.tokens_from_features(model.features(waveform))


def tokenize_many(model: Model, waveforms: np.ndarray) -> np.ndarray:
    """Batched :func:`tokenize` for an equal-length stack of shape (B, N)."""
    return model.tokens_from_features(model.features(waveforms))
