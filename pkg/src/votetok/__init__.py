"""Noise-robust discrete speech tokens from a multi-branch voting LFQ quantizer."""

from .config import ConfigError, ExperimentConfig, load_config, validate_config
from .experiment import ABLATIONS, run_ablation
from .metrics import RobustnessReport, eval_robustness, frame_error_rate, levenshtein, psd_slope, ued_percent
from .noise import (
    AppliedPerturbation,
    Kind,
    NoisePool,
    PerturbationSpec,
    bit_crush,
    eval_specs,
    gen_colored_noise,
    measure_power,
    mix_at_snr,
    perturb,
    training_specs,
)
from .quantizer import (
    BranchBank,
    QuantizerConfig,
    aggregate_infer,
    aggregate_train,
    binarize,
    code_to_token,
    project,
    quantize_frame_infer,
    quantize_frame_train,
    token_to_code,
)
from .signal_io import (
    CorpusSpec,
    FeatureConfig,
    Utterance,
    Waveform,
    extract_features,
    load_wav,
    save_wav,
    synth_corpus,
)
from .training import (
    LossBreakdown,
    LossWeights,
    Model,
    ModelConfig,
    NoiseAwareConfig,
    OptimConfig,
    codebook_entropy_loss,
    commitment_loss,
    consensus_loss,
    route_branches,
    tokenize,
    train,
    train_step,
)
from .vote_analysis import (
    CaseTable,
    FlipModel,
    load_case_table,
    majority_override_rate,
    monte_carlo_survival,
    replay_case,
    token_survival_prob,
    voter_param_overhead,
)

__version__ = "0.1.0"
