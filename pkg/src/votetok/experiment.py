"""Desk-scale experiments: corpora, noise pools, single runs and the ablation grid.

Every random stream derives from the root seed and a label, so a run is
reproducible from its config alone. Outputs are written as JSON and CSV with a
manifest recording the config hash, seed and library versions.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import platform
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from .config import ExperimentConfig
from .metrics import RobustnessReport, eval_robustness
from .noise import IN_DOMAIN_KINDS, OOD_KINDS, NoisePool, synth_noise_pool
from .seeds import derive_seed
from .signal_io import Utterance, synth_corpus
from .training import Model, TrainResult, train

log = logging.getLogger(__name__)

# ablation name -> overrides applied to the base config; each row removes one
# more ingredient than the one above it
ABLATIONS = {
    "full": {},
    "no_consensus": {"loss": {"consensus": 0.0}},
    "no_noise_aware": {"loss": {"consensus": 0.0}, "noise": {"noise_aware": False}},
    "single_branch": {"loss": {"consensus": 0.0}, "noise": {"noise_aware": False}, "model": {"n_branches": 1}},
    "n3": {"model": {"n_branches": 3}},
    "n7": {"model": {"n_branches": 7}},
}
DEFAULT_GRID = ("full", "no_consensus", "no_noise_aware", "single_branch", "n3", "n7")


@dataclass
class Data:
    train: list[Utterance]
    eval: list[Utterance]
    pool: NoisePool
    ood_pool: NoisePool


def manifest(cfg: ExperimentConfig, **extra) -> dict:
    return {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "config": cfg.model_dump(mode="json"),
        "versions": {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__},
        **extra,
    }


def write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def noise_pools(cfg: ExperimentConfig, work_dir) -> tuple[NoisePool, NoisePool]:
    """Configured clip directories, or synthetic in-domain and held-out pools under ``work_dir``."""
    work_dir = Path(work_dir)
    sr = cfg.feature.sample_rate_hz
    per = cfg.noise.pool_clips_per_kind
    if cfg.noise.noise_pool:
        pool = NoisePool(cfg.noise.noise_pool)
    else:
        pool = synth_noise_pool(work_dir / "noise_in", IN_DOMAIN_KINDS, per, 1.0, sr, derive_seed(cfg.seed, "pool"))
    if cfg.noise.ood_noise_pool:
        ood = NoisePool(cfg.noise.ood_noise_pool)
    else:
        ood = synth_noise_pool(work_dir / "noise_ood", OOD_KINDS, per, 1.0, sr, derive_seed(cfg.seed, "ood_pool"))
    return pool, ood


def build_data(cfg: ExperimentConfig, work_dir) -> Data:
    """Corpora and pools depend on the root seed only, never on the model seed."""
    fc = cfg.build_feature_config()
    sr = cfg.feature.sample_rate_hz
    tr = synth_corpus(cfg.corpus_spec("train", derive_seed(cfg.seed, "corpus", "train")), fc, sr)
    ev = synth_corpus(cfg.corpus_spec("eval", derive_seed(cfg.seed, "corpus", "eval")), fc, sr)
    pool, ood = noise_pools(cfg, work_dir)
    return Data(tr, ev, pool, ood)


@dataclass
class RunResult:
    name: str
    model_seed: int
    train: TrainResult
    report: RobustnessReport
    seconds: float

    @property
    def model(self) -> Model:
        return self.train.model

    def summary(self) -> dict:
        return {"config": self.name, "model_seed": self.model_seed,
                "average_ued": self.report.average_ued,
                "clean_frame_error_rate": self.report.clean_frame_error_rate,
                "final_clean_frame_accuracy": (self.train.history[-1]["clean_frame_accuracy"]
                                               if self.train.history else None)}


def train_model(cfg: ExperimentConfig, data: Data, model_seed: int) -> TrainResult:
    model = Model.init(cfg.build_model_config(), derive_seed(model_seed, "model"))
    model.fit_normalizer(data.train[:200])
    return train(model, data.train, cfg.optim.epochs, cfg.noise_aware_config(data.pool), cfg.loss_weights(),
                 cfg.build_optim_config(), seed=derive_seed(model_seed, "train"), eval_corpus=data.eval)


def run_one(cfg: ExperimentConfig, data: Data, model_seed: int, name: str = "run") -> RunResult:
    t0 = time.perf_counter()
    res = train_model(cfg, data, model_seed)
    report = eval_robustness(res.model, data.eval, cfg.eval_suite(data.pool, data.ood_pool),
                             seed=derive_seed(cfg.seed, "eval"), workers=cfg.eval.workers)
    dt = time.perf_counter() - t0
    log.info("%s seed %d: UED %.2f%% FER %.2f%% (%.0fs)", name, model_seed, report.average_ued,
             report.clean_frame_error_rate, dt)
    return RunResult(name, model_seed, res, report, dt)


SUMMARY_FIELDS = ["config", "model_seed", "average_ued", "clean_frame_error_rate", "final_clean_frame_accuracy"]


@dataclass
class AblationResult:
    runs: list[RunResult]

    def by_config(self) -> dict:
        out = {}
        for r in self.runs:
            out.setdefault(r.name, []).append(r)
        return out

    def means(self) -> dict:
        """Seed-averaged UED and clean FER per config."""
        return {name: {"average_ued": float(np.mean([r.report.average_ued for r in rs])),
                       "clean_frame_error_rate": float(np.mean([r.report.clean_frame_error_rate for r in rs])),
                       "seeds": [r.model_seed for r in rs]}
                for name, rs in self.by_config().items()}

    def summary_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.DictWriter(buf, SUMMARY_FIELDS, lineterminator="\n")
        wr.writeheader()
        for r in self.runs:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.summary().items()})
        return buf.getvalue()

    def write(self, out_dir, cfg: ExperimentConfig) -> dict:
        """Per-run item CSVs, report JSONs and training histories, plus the summary table."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        files = {}
        for r in self.runs:
            stem = f"{r.name}_seed{r.model_seed}"
            j, c = r.report.write(out_dir, stem)
            (out_dir / f"{stem}_history.csv").write_text(r.train.history_csv())
            files[stem] = [j.name, c.name, f"{stem}_history.csv"]
        (out_dir / "summary.csv").write_text(self.summary_csv())
        write_json(out_dir / "means.json", self.means())
        write_json(out_dir / "manifest.json", manifest(cfg, kind="ablation", files=files,
                                                       timings={f"{r.name}_seed{r.model_seed}": round(r.seconds, 1)
                                                                for r in self.runs}))
        return files


def run_ablation(cfg: ExperimentConfig, work_dir, configs=DEFAULT_GRID, seeds=(0, 1, 2)) -> AblationResult:
    unknown = [c for c in configs if c not in ABLATIONS]
    if unknown:
        raise ValueError(f"unknown ablation config(s) {unknown}; known: {sorted(ABLATIONS)}")
    data = build_data(cfg, work_dir)
    runs = []
    for seed in seeds:
        for name in configs:
            runs.append(run_one(cfg.with_overrides(**ABLATIONS[name]), data, seed, name))
    return AblationResult(runs)
