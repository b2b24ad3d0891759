import json

import numpy as np
import pytest

from votetok.cli import main
from votetok.config import ConfigError, ExperimentConfig, load_config, validate_config
from votetok.signal_io import Waveform, load_wav, save_wav

TINY = {
    "corpus": {"n_train": 6, "n_eval": 3, "alphabet_size": 4, "segment_frames": 2, "symbols_per_utterance": 2},
    "feature": {"n_bands": 8},
    "model": {"encoder_hidden": [6], "hidden_dim": 8, "n_branches": 3, "code_dim": 4},
    "noise": {"pool_clips_per_kind": 1},
    "optim": {"epochs": 1, "batch_size": 4},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def test_config_defaults_and_hash():
    cfg = ExperimentConfig()
    assert cfg.model.n_branches == 5 and cfg.model.code_dim == 8 and cfg.corpus.alphabet_size == 16
    assert cfg.loss.consensus == 0.25 and cfg.loss.codebook == 1.0
    assert cfg.config_hash() == ExperimentConfig().config_hash()
    assert cfg.with_overrides(seed=3).config_hash() != cfg.config_hash()


def test_config_lists_every_violation():
    with pytest.raises(ConfigError) as err:
        validate_config({"model": {"n_branches": 4, "bogus": 1}, "optim": {"lr": -1}, "extra": 2})
    assert len(err.value.errors) == 4
    joined = "\n".join(err.value.errors)
    for key in ("model.n_branches", "model.bogus", "optim.lr", "extra"):
        assert key in joined


def test_config_toml(tmp_path):
    (tmp_path / "c.toml").write_text('seed = 7\n[model]\nn_branches = 3\n[loss]\nconsensus = 0.5\n')
    cfg = load_config(tmp_path / "c.toml")
    assert (cfg.seed, cfg.model.n_branches, cfg.loss.consensus) == (7, 3, 0.5)
    (tmp_path / "bad.toml").write_text("seed = = 1")
    with pytest.raises(ConfigError, match="parse"):
        load_config(tmp_path / "bad.toml")


def test_config_spec_entries():
    cfg = validate_config({"noise": {"train_specs": [{"kind": "gaussian", "range": [10, 20]},
                                                     {"kind": "bitcrush", "intensity": 9}]}})
    specs = cfg.train_spec_set(None)
    assert specs[0].intensity == (10.0, 20.0) and specs[1].intensity == 9
    with pytest.raises(ConfigError):
        validate_config({"noise": {"train_specs": [{"kind": "pink"}]}})


def test_params_command(tmp_path, capsys):
    code, out, _ = run(capsys, "params", "--out", tmp_path, "--n", 7, "--D", 1280, "--d", 13)
    assert code == 0
    assert "+33,306 = 0.033M" in out
    rows = (tmp_path / "params.csv").read_text().splitlines()
    assert rows[0] == "n,voter_params,increment,total_params"
    assert rows[2].startswith("3,49959,33306")
    assert json.loads((tmp_path / "manifest.json").read_text())["command"] == "params"


def test_replay_case_command(tmp_path, capsys):
    code, out, _ = run(capsys, "replay-case", "--out", tmp_path)
    assert code == 0
    doc = json.loads((tmp_path / "replay.json").read_text())
    assert [d["voted"] for d in doc] == [5517, 3485, 2920, 6939]
    assert "position 80: voted 3485 (3/5 voters wrong, recovered)" in out


def test_vote_analyze_command(tmp_path, capsys):
    code, _, _ = run(capsys, "vote-analyze", "--out", tmp_path, "--n", 3, "--d", 3, "--p", "0.1", "--trials", 5000)
    assert code == 0
    row = json.loads((tmp_path / "vote_analysis.json").read_text())[0]
    assert row["analytic"] == pytest.approx(row["enumerated"], abs=1e-12)


def test_config_error_exit_code(tmp_path, capsys):
    (tmp_path / "bad.json").write_text('{"model": {"n_branches": 2}, "nope": 1}')
    code, _, err = run(capsys, "train", "--config", tmp_path / "bad.json", "--out", tmp_path / "o")
    assert code == 2
    doc = json.loads(err)
    assert doc["error"] == "config" and len(doc["details"]) == 2


def test_missing_input_is_structured_error(tmp_path, capsys):
    code, _, err = run(capsys, "perturb", tmp_path / "none.wav", "--kind", "pink", "--intensity", 10,
                       "--out", tmp_path / "o")
    assert code == 1
    assert json.loads(err)["error"] == "not_found"


def test_perturb_command(tmp_path, capsys):
    x = 0.1 * np.sin(np.arange(4000) / 5.0)
    save_wav(Waveform(x), tmp_path / "a.wav")
    code, _, _ = run(capsys, "perturb", tmp_path / "a.wav", "--kind", "bitcrush", "--intensity", 6,
                     "--out", tmp_path / "o")
    assert code == 0
    rec = json.loads((tmp_path / "o" / "applied.jsonl").read_text())
    assert rec["kind"] == "bitcrush" and rec["realized_intensity"] == 6
    assert len(load_wav(tmp_path / "o" / "a_perturbed.wav")) == 4000


def test_train_tokenize_eval_pipeline(tmp_path, tiny_cfg, capsys):
    assert run(capsys, "synth", "--config", tiny_cfg, "--out", tmp_path / "s")[0] == 0
    assert run(capsys, "train", "--config", tiny_cfg, "--out", tmp_path / "t")[0] == 0
    model = tmp_path / "t" / "model.json"
    assert (tmp_path / "t" / "history.csv").read_text().startswith("epoch,steps,l_task")
    code, _, _ = run(capsys, "tokenize", "--model", model, tmp_path / "s" / "eval" / "manifest.jsonl",
                     "--out", tmp_path / "k")
    assert code == 0
    lines = (tmp_path / "k" / "tokens.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["code_dim"] == 4
    assert all(0 <= t < 16 for line in lines[1:] for t in json.loads(line)["tokens"])
    # a no-op perturbation gives zero UED even for an untrained model
    (tmp_path / "noop.json").write_text('[{"kind": "gaussian", "intensity": Infinity, "name": "noop"}]')
    code, out, _ = run(capsys, "eval", "--config", tiny_cfg, "--model", model, "--suite", tmp_path / "noop.json",
                       "--out", tmp_path / "e")
    assert code == 0
    assert json.loads(out)["average_ued"] == 0.0
    assert json.loads((tmp_path / "e" / "report.json").read_text())["per_perturbation"]["noop"]["count"] == 3


def test_ablate_command_reproducible(tmp_path, tiny_cfg, capsys):
    args = ["ablate", "--config", tiny_cfg, "--configs", "full,single_branch", "--seeds", "0"]
    assert run(capsys, *args, "--out", tmp_path / "a")[0] == 0
    assert run(capsys, *args, "--out", tmp_path / "b")[0] == 0
    for name in ("summary.csv", "full_seed0_items.csv", "single_branch_seed0_items.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert set(man) >= {"config_hash", "seed", "versions", "files"}
