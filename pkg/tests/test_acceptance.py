"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 6, 7 and 9 train the desk-scale ablation grid twice (tens of minutes)
and are marked slow; deselect them with ``-m "not slow"``.
"""

import json
import math
import time

import numpy as np
import pytest

from votetok import nn
from votetok.cli import main as cli_main
from votetok.config import ExperimentConfig
from votetok.experiment import run_ablation
from votetok.metrics import levenshtein, psd_slope, ued_percent
from votetok.noise import (
    apply_spec,
    bit_crush,
    eval_specs,
    expected_bitcrush_snr,
    gen_colored_noise,
    snr_db,
    synth_noise_pool,
)
from votetok.quantizer import code_to_token, token_to_code
from votetok.signal_io import CorpusSpec, FeatureConfig, synth_corpus
from votetok.training import LossWeights, Model, ModelConfig, forward_losses, make_batch
from votetok.vote_analysis import (
    FlipModel,
    enumerate_survival_prob,
    load_case_table,
    monte_carlo_survival,
    replay_case,
    token_survival_prob,
    voter_param_overhead,
)


@pytest.fixture
def verdict(capsys):
    def report(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}")
        assert ok, detail
    return report


# ------------------------------------------------------------------ criterion 1

def test_criterion_1_case_replay(tmp_path, capsys, verdict):
    t0 = time.perf_counter()
    code = cli_main(["replay-case", "--out", str(tmp_path)])
    capsys.readouterr()
    dt = time.perf_counter() - t0
    doc = json.loads((tmp_path / "replay.json").read_text())
    results = replay_case(load_case_table())
    pos = [r.position for r in results]
    toks = [r.voted for r in results]
    ok = (code == 0 and pos == [68, 80, 105, 114] and toks == [5517, 3485, 2920, 6939]
          and [d["voted"] for d in doc] == toks
          and results[1].wrong_voters == 3 and results[1].recovered and dt < 1.0)
    verdict(1, ok, f"tokens {toks} at {pos}; position 80 has {results[1].wrong_voters}/5 wrong voters, "
                   f"recovered={results[1].recovered}; {dt:.2f}s")


# ------------------------------------------------------------------ criterion 2

def test_criterion_2_parameter_overhead(verdict):
    t0 = time.perf_counter()
    step = voter_param_overhead(5, 1280, 13) - voter_param_overhead(3, 1280, 13)
    step_hi = voter_param_overhead(7, 1280, 13) - voter_param_overhead(5, 1280, 13)
    reported = [320.261, 320.294, 320.328, 320.361]
    diffs = np.diff(reported) * 1e6
    dt = time.perf_counter() - t0
    ok = step == 33306 and step_hi == 33306 and np.all(np.abs(step - diffs) / diffs <= 0.05) and dt < 1.0
    verdict(2, ok, f"increment {step} vs reported steps {np.round(diffs).astype(int).tolist()} "
                   f"(max rel dev {np.max(np.abs(step - diffs) / diffs):.4f})")


# ------------------------------------------------------------------ criterion 3

def test_criterion_3_voting_oracles(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for n in (1, 3, 5):
        for d in (1, 2, 3):
            for p in np.linspace(0, 1, 21):
                m = FlipModel(n, d, float(p))
                worst = max(worst, abs(token_survival_prob(m) - enumerate_survival_prob(m)))
    z = {}
    for p in (0.05, 0.1, 0.2):
        m = FlipModel(5, 13, p)
        est, se = monte_carlo_survival(m, 1_000_000, seed=11)
        z[p] = abs(est - token_survival_prob(m)) / se
    ps = np.linspace(0.01, 0.49, 49)
    beats = all(token_survival_prob(FlipModel(5, 13, float(p))) > token_survival_prob(FlipModel(1, 13, float(p)))
                for p in ps)
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and all(v < 3 for v in z.values()) and beats and dt < 30
    verdict(3, ok, f"max |analytic - enumerated| {worst:.1e}; MC z-scores "
                   f"{ {p: round(v, 2) for p, v in z.items()} }; n=5 beats n=1 on {len(ps)} p values: {beats}; "
                   f"{dt:.1f}s")


# ------------------------------------------------------------------ criterion 4

def test_criterion_4_noise_calibration(tmp_path, verdict):
    t0 = time.perf_counter()
    speech = [u.waveform for u in synth_corpus(CorpusSpec(n_utterances=100, seed=5))]
    pool = synth_noise_pool(tmp_path / "pool", seed=1)
    rng = np.random.default_rng(0)
    worst = {}
    for spec in eval_specs(pool):
        if spec.name == "bitcrush":
            continue
        errs = [snr_db(w, apply_spec(w, spec, rng)[0]) - spec.intensity for w in speech]
        worst[spec.name] = float(np.max(np.abs(errs)))
    # bit crushing has no mixing gain: its target is the uniform quantization-noise model
    crush = np.array([snr_db(w, bit_crush(w, 10)) - expected_bitcrush_snr(w, 10) for w in speech])
    worst["bitcrush(mean)"] = float(abs(crush.mean()))
    slopes = {a: [psd_slope(gen_colored_noise(2**16, a, s)) for s in range(20)] for a in (1, 2)}
    slope_err = {a: float(np.max(np.abs(np.array(v) + a))) for a, v in slopes.items()}
    dt = time.perf_counter() - t0
    ok = all(v <= 0.1 for v in worst.values()) and all(v <= 0.15 for v in slope_err.values()) and dt < 120
    verdict(4, ok, f"max SNR error dB {({k: round(v, 4) for k, v in worst.items()})}; "
                   f"max slope error pink {slope_err[1]:.3f} brown {slope_err[2]:.3f}; {dt:.1f}s")


# ------------------------------------------------------------------ criterion 5

def test_criterion_5_gradient_integrity(verdict):
    t0 = time.perf_counter()
    cfg = ModelConfig(feature=FeatureConfig(n_bands=6), encoder_hidden=(5,), hidden_dim=8, n_branches=3,
                      code_dim=4, n_classes=3)
    m = Model.init(cfg, 2)
    corpus = synth_corpus(CorpusSpec(n_utterances=2, alphabet_size=3, segment_frames=2, symbols_per_utterance=2,
                                     seed=2), cfg.feature)
    m.fit_normalizer(corpus)
    batch = make_batch(m, corpus)
    pert = batch.feats + np.random.default_rng(0).normal(0, 0.3, batch.feats.shape)
    mask = np.array([[True, False], [False, True], [False, False]])

    def loss():
        total, _ = forward_losses(m, batch, pert, mask, LossWeights(), surrogate=nn.identity)
        return total

    res = nn.grad_check(loss, m.params, eps=1e-6)
    dt = time.perf_counter() - t0
    ok = res.max_rel_error < 1e-5 and dt < 60
    verdict(5, ok, f"max relative error {res.max_rel_error:.2e} at {res.worst_param}; {dt:.1f}s")


# ------------------------------------------------------------------ criterion 8

def test_criterion_8_metric_and_mapping(verdict):
    t0 = time.perf_counter()
    units = [ued_percent([1, 2, 3], [1, 2, 3]), ued_percent([1, 2, 3], [1, 9, 3]), ued_percent([1, 2, 3], [4, 5, 6])]
    units_ok = units[0] == 0.0 and math.isclose(units[1], 100 / 3, abs_tol=1e-3) and units[2] == 100.0
    rng = np.random.default_rng(8)
    axioms = 0
    for _ in range(1000):
        a, b, c = (list(rng.integers(0, 4, rng.integers(0, 9))) for _ in range(3))
        ab, ba, ac, bc = levenshtein(a, b), levenshtein(b, a), levenshtein(a, c), levenshtein(b, c)
        axioms += ab == ba and (ab == 0) == (a == b) and ac <= ab + bc and ab >= 0
    exhaustive = all(np.array_equal(code_to_token(token_to_code(np.arange(2**d), d)), np.arange(2**d))
                     and len({tuple(c) for c in token_to_code(np.arange(2**d), d)}) == 2**d
                     for d in range(1, 11))
    ks = {d: rng.integers(0, 2**d, 2000) for d in (11, 12, 13)}
    rand_ok = all(np.array_equal(code_to_token(token_to_code(k, d)), k) for d, k in ks.items())
    dt = time.perf_counter() - t0
    ok = units_ok and axioms == 1000 and exhaustive and rand_ok and dt < 30
    verdict(8, ok, f"UED units {[round(u, 3) for u in units]}; axioms hold on {axioms}/1000 triples; "
                   f"bijective d<=10 exhaustive {exhaustive}, d=11..13 random {rand_ok}; {dt:.1f}s")


# ------------------------------------------------------------ criteria 6, 7, 9

GRID = ("full", "no_consensus", "no_noise_aware", "single_branch", "n3", "n7")
CSV_GLOB = "*.csv"


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    cfg = ExperimentConfig()
    work = tmp_path_factory.mktemp("ablation")
    t0 = time.perf_counter()
    res = run_ablation(cfg, work / "data", GRID, seeds=(0, 1, 2))
    dt = time.perf_counter() - t0
    res.write(work / "out", cfg)
    return cfg, res, work, dt


@pytest.mark.slow
def test_criterion_6_ablation_ordering(ablation, verdict):
    _, res, _, dt = ablation
    m = res.means()
    ued = {k: m[k]["average_ued"] for k in m}
    fer = {k: m[k]["clean_frame_error_rate"] for k in m}
    a = ued["full"] <= 0.8 * ued["single_branch"]
    b = ued["full"] <= ued["no_consensus"] <= ued["single_branch"]
    # one-sided: a lower clean error than the baseline is never a failure
    c = fer["full"] <= 1.1 * fer["single_branch"]
    ok = a and b and c and dt < 45 * 60
    verdict(6, ok, f"mean UED { {k: round(v, 2) for k, v in ued.items()} }; "
                   f"clean FER { {k: round(v, 2) for k, v in fer.items()} }; (a) {a} (b) {b} (c) {c}; "
                   f"grid {dt / 60:.1f} min")


@pytest.mark.slow
def test_criterion_7_voter_count(ablation, verdict):
    _, res, _, _ = ablation
    ued = {k: v["average_ued"] for k, v in res.means().items()}
    ok = ued["full"] <= ued["n3"]
    verdict(7, ok, f"mean UED n=3 {ued['n3']:.2f}, n=5 {ued['full']:.2f}, n=7 {ued['n7']:.2f} (n=7 not gated)")


@pytest.mark.slow
def test_criterion_9_determinism(ablation, verdict):
    cfg, _, work, _ = ablation
    again = run_ablation(cfg, work / "data_rerun", GRID, seeds=(0, 1, 2))
    again.write(work / "rerun", cfg)
    first = sorted(p.name for p in (work / "out").glob(CSV_GLOB))
    second = sorted(p.name for p in (work / "rerun").glob(CSV_GLOB))
    differ = [n for n in first if (work / "out" / n).read_bytes() != (work / "rerun" / n).read_bytes()]
    ok = first == second and len(first) > 0 and not differ
    verdict(9, ok, f"{len(first)} metric CSVs compared, {len(differ)} differ {differ[:3]}")
