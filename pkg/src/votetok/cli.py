"""Command-line entry point: ``votetok <command> [flags]``.

Every command writes machine-readable outputs and a ``manifest.json`` into
``--out``. Failures print one JSON object on stderr and exit nonzero
(2 for bad configuration or arguments, 1 for anything else).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import experiment
from .config import ConfigError, ExperimentConfig, load_config
from .metrics import eval_robustness
from .noise import PerturbationSpec, apply_spec, load_spec_file, perturb
from .seeds import derive_seed
from .signal_io import load_wav, read_corpus, save_wav, write_corpus
from .training import Model, tokenize
from .vote_analysis import (
    FlipModel,
    enumerate_survival_prob,
    load_case_table,
    majority_override_rate,
    monte_carlo_survival,
    replay_case,
    token_survival_prob,
    voter_param_overhead,
)

log = logging.getLogger("votetok")


class UsageError(ValueError):
    pass


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(out: Path, cfg: ExperimentConfig | None, command: str, outputs: list[str], **extra) -> dict:
    doc = experiment.manifest(cfg or ExperimentConfig(), command=command, outputs=sorted(outputs), **extra)
    doc["created_unix"] = round(time.time(), 3)
    experiment.write_json(out / "manifest.json", doc)
    return doc


# ---------------------------------------------------------------------- commands

def cmd_synth(args):
    cfg, out = _config(args), _out(args)
    data = experiment.build_data(cfg, out)
    write_corpus(data.train, out / "train")
    write_corpus(data.eval, out / "eval")
    _finish(out, cfg, "synth", ["train/manifest.jsonl", "eval/manifest.jsonl", "noise_in", "noise_ood"],
            counts={"train": len(data.train), "eval": len(data.eval),
                    "noise_in": len(data.pool), "noise_ood": len(data.ood_pool)})
    print(json.dumps({"train": len(data.train), "eval": len(data.eval)}))


def _specs_from_args(args):
    if args.spec:
        return load_spec_file(args.spec)
    if not args.kind:
        raise UsageError("give --spec FILE or --kind with --intensity")
    if args.intensity is None:
        raise UsageError("--kind needs --intensity")
    pool = None
    if args.noise_pool:
        from .noise import NoisePool
        pool = NoisePool(args.noise_pool)
    intensity = int(args.intensity) if args.kind == "bitcrush" else args.intensity
    return [PerturbationSpec(args.kind, intensity, pool)]


def cmd_perturb(args):
    out = _out(args)
    specs = _specs_from_args(args)
    rng = np.random.default_rng(derive_seed(args.seed or 0, "perturb"))
    records = []
    for path in args.inputs:
        w = load_wav(path)
        y, applied = perturb(w, specs, rng)
        dest = out / (Path(path).stem + "_perturbed.wav")
        save_wav(y, dest)
        records.append({"input": str(path), "output": dest.name, **applied.to_dict()})
    with open(out / "applied.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    _finish(out, None, "perturb", ["applied.jsonl"] + [r["output"] for r in records], seed=args.seed or 0)


def cmd_train(args):
    cfg, out = _config(args), _out(args)
    data = experiment.build_data(cfg, out / "data")
    res = experiment.train_model(cfg, data, cfg.seed)
    res.model.save(out / "model.json")
    (out / "history.csv").write_text(res.history_csv())
    _finish(out, cfg, "train", ["model.json", "history.csv"])
    last = res.history[-1] if res.history else {}
    print(json.dumps({"epochs": len(res.history), "clean_frame_accuracy": last.get("clean_frame_accuracy")}))


def _waveform_items(inputs):
    """(id, waveform) pairs from wav files, directories of wavs, or corpus manifests."""
    for item in inputs:
        p = Path(item)
        if p.suffix == ".jsonl":
            for u in read_corpus(p):
                yield u.utterance_id, u.waveform
        elif p.is_dir():
            for w in sorted(p.rglob("*.wav")):
                yield w.relative_to(p).as_posix(), load_wav(w)
        else:
            yield p.name, load_wav(p)


def cmd_tokenize(args):
    out = _out(args)
    model = Model.load(args.model)
    dest = out / "tokens.jsonl"
    n = 0
    with open(dest, "w") as fh:
        fh.write(json.dumps({"code_dim": model.config.code_dim, "n_branches": model.config.n_branches,
                             "pool_factor": model.config.pool_factor}) + "\n")
        for uid, w in _waveform_items(args.inputs):
            fh.write(json.dumps({"id": uid, "tokens": tokenize(model, w).tolist()}) + "\n")
            n += 1
    _finish(out, None, "tokenize", ["tokens.jsonl"], model=str(args.model), n_items=n)


def cmd_eval(args):
    cfg, out = _config(args), _out(args)
    model = Model.load(args.model)
    if args.corpus:
        corpus = read_corpus(args.corpus)
        pool = ood = None
    else:
        data = experiment.build_data(cfg, out / "data")
        corpus, pool, ood = data.eval, data.pool, data.ood_pool
    suite = load_spec_file(args.suite) if args.suite else cfg.eval_suite(pool, ood)
    report = eval_robustness(model, corpus, suite, seed=derive_seed(cfg.seed, "eval"),
                             workers=args.workers or cfg.eval.workers)
    j, c = report.write(out, "report")
    _finish(out, cfg, "eval", [j.name, c.name], model=str(args.model))
    print(json.dumps({"average_ued": report.average_ued, "clean_frame_error_rate": report.clean_frame_error_rate}))


def cmd_vote_analyze(args):
    out = _out(args)
    seed = args.seed or 0
    workers = args.workers or 1
    rows = []
    for p in args.p:
        m = FlipModel(args.n, args.d, p)
        est, se = monte_carlo_survival(m, args.trials, derive_seed(seed, "mc", p), workers)
        row = {"n": args.n, "d": args.d, "p": p, "analytic": token_survival_prob(m),
               "single_path": token_survival_prob(FlipModel(1, args.d, p)),
               "mc_estimate": est, "mc_stderr": se,
               "override_rate": majority_override_rate(m, args.trials, derive_seed(seed, "override", p), workers)}
        if args.n * args.d <= 20:
            row["enumerated"] = enumerate_survival_prob(m)
        rows.append(row)
    experiment.write_json(out / "vote_analysis.json", rows)
    _finish(out, None, "vote-analyze", ["vote_analysis.json"], seed=seed, trials=args.trials)
    for r in rows:
        print(f"p={r['p']:<6} analytic={r['analytic']:.6f} mc={r['mc_estimate']:.6f}±{r['mc_stderr']:.6f} "
              f"single={r['single_path']:.6f} override={r['override_rate']:.5f}")


def cmd_replay_case(args):
    out = _out(args)
    table = load_case_table(args.fixture)
    results = replay_case(table)
    doc = [{"position": r.position, "voted": r.voted, "reference": r.reference, "recovered": r.recovered,
            "wrong_voters": r.wrong_voters, "contested_bits": {str(k): list(v) for k, v in r.bit_votes.items()}}
           for r in results]
    experiment.write_json(out / "replay.json", doc)
    _finish(out, None, "replay-case", ["replay.json"], fixture=str(args.fixture or "bundled"))
    for r in results:
        print(f"position {r.position}: voted {r.voted} ({r.wrong_voters}/{len(table.positions[0].voters)} "
              f"voters wrong, {'recovered' if r.recovered else 'NOT recovered'})")


def cmd_params(args):
    out = _out(args)
    base = args.base_params
    rows = []
    for n in range(1, args.n + 1, 2):
        extra = voter_param_overhead(n, args.D, args.d)
        rows.append({"n": n, "voter_params": extra, "total_params": base + extra if base else None})
    for prev, cur in zip(rows, rows[1:]):
        cur["increment"] = cur["voter_params"] - prev["voter_params"]
    buf = io.StringIO()
    wr = csv.DictWriter(buf, ["n", "voter_params", "increment", "total_params"], lineterminator="\n")
    wr.writeheader()
    for r in rows:
        wr.writerow(r)
    (out / "params.csv").write_text(buf.getvalue())
    _finish(out, None, "params", ["params.csv"], D=args.D, d=args.d)
    for r in rows:
        inc = f"  (+{r['increment']:,} = {r['increment'] / 1e6:.3f}M)" if "increment" in r else ""
        tot = f"  total {r['total_params'] / 1e6:.3f}M" if r["total_params"] else ""
        print(f"n={r['n']}: {r['voter_params']:,} voter parameters{inc}{tot}")


def cmd_ablate(args):
    cfg, out = _config(args), _out(args)
    if args.workers:
        cfg = cfg.with_overrides(eval={"workers": args.workers})
    res = experiment.run_ablation(cfg, out / "data", args.configs, args.seeds)
    files = res.write(out, cfg)
    for name, m in res.means().items():
        print(f"{name:16s} UED {m['average_ued']:6.2f}%  clean FER {m['clean_frame_error_rate']:6.2f}%")
    return files


# ------------------------------------------------------------------------ parser

def _csv_list(cast):
    def parse(text):
        return [cast(x) for x in text.split(",") if x.strip()]
    return parse


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="votetok", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, config=True, out=True, workers=False):
        p = sub.add_parser(name, help=help_)
        if config:
            p.add_argument("--config", help="experiment config (JSON or TOML)")
        p.add_argument("--seed", type=int, help="override the root seed")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        if workers:
            p.add_argument("--workers", type=int, default=None, help="worker processes")
        p.set_defaults(func=fn)
        return p

    add("synth", cmd_synth, "render the synthetic corpora and noise pools")

    p = add("perturb", cmd_perturb, "perturb wav files", config=False)
    p.add_argument("inputs", nargs="+", help="wav files")
    p.add_argument("--spec", help="JSON perturbation spec file")
    p.add_argument("--kind", choices=["gaussian", "pink", "brown", "bitcrush", "real"])
    p.add_argument("--intensity", type=float, help="SNR in dB, or bit depth")
    p.add_argument("--noise-pool", help="clip directory for --kind real")

    add("train", cmd_train, "train one model from a config")

    p = add("tokenize", cmd_tokenize, "tokenize wav files, directories or corpus manifests", config=False)
    p.add_argument("--model", required=True, help="checkpoint written by train")
    p.add_argument("inputs", nargs="+")

    p = add("eval", cmd_eval, "robustness report of a checkpoint", workers=True)
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", help="corpus manifest.jsonl (default: the config's eval corpus)")
    p.add_argument("--suite", help="JSON perturbation spec file (default: the standard eval suite)")

    p = add("vote-analyze", cmd_vote_analyze, "survival probability of the voted token", config=False,
            workers=True)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--d", type=int, default=13)
    p.add_argument("--p", type=_csv_list(float), default=[0.05, 0.1, 0.2], help="comma-separated flip rates")
    p.add_argument("--trials", type=int, default=1_000_000)

    p = add("replay-case", cmd_replay_case, "replay recorded branch tokens through the vote", config=False)
    p.add_argument("--fixture", help="case table JSON (default: the bundled fixture)")

    p = add("params", cmd_params, "voter parameter overhead table", config=False)
    p.add_argument("--n", type=int, default=7, help="largest branch count")
    p.add_argument("--D", type=int, default=1280)
    p.add_argument("--d", type=int, default=13)
    p.add_argument("--base-params", type=int, default=0, help="parameters of the model without voters")

    p = add("ablate", cmd_ablate, "ablation grid over seeds", workers=True)
    p.add_argument("--configs", type=_csv_list(str), default=list(experiment.DEFAULT_GRID))
    p.add_argument("--seeds", type=_csv_list(int), default=[0, 1, 2])
    return ap


def _fail(kind: str, message: str, code: int, details=None) -> int:
    doc = {"error": kind, "message": message}
    if details:
        doc["details"] = details
    print(json.dumps(doc), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if getattr(args, "workers", None) is not None and args.workers < 1:
        return _fail("usage", "--workers must be >= 1", 2)
    try:
        args.func(args)
    except ConfigError as exc:
        return _fail("config", str(exc).splitlines()[0], 2, exc.errors)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except FileNotFoundError as exc:
        return _fail("not_found", str(exc), 1)
    except (ValueError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
