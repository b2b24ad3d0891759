"""Error-correction analysis of bit-wise majority voting.

Under an idealized flip model every branch flips every bit of the reference
code independently with probability ``p``. A voted bit is wrong when at least
``ceil(n/2)`` branches flipped it, and the voted token survives when no bit is
wrong. These functions give that probability in closed form, by Monte Carlo,
and by exact replay of recorded branch outputs.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .quantizer import aggregate_infer, code_to_token, token_to_code


@dataclass(frozen=True)
class FlipModel:
    n: int
    d: int
    p: float

    def __post_init__(self):
        if self.n < 1 or self.n % 2 == 0:
            raise ValueError("n must be a positive odd number")
        if self.d < 1:
            raise ValueError("d must be positive")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")


def bit_error_prob(n: int, p: float) -> float:
    """Probability that a strict majority of ``n`` independent bits flipped."""
    need = (n + 1) // 2
    return sum(math.comb(n, j) * p**j * (1.0 - p) ** (n - j) for j in range(need, n + 1))


def token_survival_prob(model: FlipModel) -> float:
    return (1.0 - bit_error_prob(model.n, model.p)) ** model.d


def enumerate_survival_prob(model: FlipModel) -> float:
    """Brute force over every flip pattern of the n x d bit grid (small n*d only)."""
    n, d, p = model.n, model.d, model.p
    if n * d > 20:
        raise ValueError("enumeration limited to n*d <= 20")
    m = n * d
    patterns = (np.arange(2**m)[:, None] >> np.arange(m)) & 1  # 1 = flipped
    flips = patterns.sum(axis=1)
    weight = p**flips * (1.0 - p) ** (m - flips)
    votes = patterns.reshape(-1, n, d).sum(axis=1)
    survive = np.all(votes < (n + 1) // 2, axis=1)
    return float(np.sum(weight[survive]))


def _simulate(n, d, p, trials, seed, chunk=65536):
    """Counts (voted token correct, majority of branches wrong yet voted correct)."""
    rng = np.random.default_rng(seed)
    need = (n + 1) // 2
    ok = override = 0
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        flips = rng.random((m, n, d)) < p
        voted_ok = np.all(flips.sum(axis=1) < need, axis=1)
        branch_wrong = flips.any(axis=2).sum(axis=1)
        ok += int(voted_ok.sum())
        override += int(np.sum(voted_ok & (branch_wrong > n / 2)))
        done += m
    return ok, override


def _shard_seeds(seed, workers):
    return [int(s.generate_state(1, dtype=np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(workers)]


def _run(model, trials, seed, workers):
    if workers <= 1:
        return _simulate(model.n, model.d, model.p, trials, seed)
    seeds = _shard_seeds(seed, workers)
    sizes = [trials // workers + (i < trials % workers) for i in range(workers)]
    with ProcessPoolExecutor(workers) as ex:
        parts = list(ex.map(_simulate, [model.n] * workers, [model.d] * workers,
                            [model.p] * workers, sizes, seeds))
    return sum(a for a, _ in parts), sum(b for _, b in parts)


def monte_carlo_survival(model: FlipModel, trials: int, seed=0, workers: int = 1) -> tuple[float, float]:
    """(estimate, binomial standard error) of the voted-token survival probability."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    ok, _ = _run(model, trials, seed, workers)
    est = ok / trials
    return est, math.sqrt(est * (1.0 - est) / trials)


def majority_override_rate(model: FlipModel, trials: int, seed=0, workers: int = 1) -> float:
    """Fraction of trials where most branches emit a wrong token but the vote is still right."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    _, override = _run(model, trials, seed, workers)
    return override / trials


# -------------------------------------------------------------------- case study

@dataclass
class CasePosition:
    position: int
    reference: int
    voters: list[int]


@dataclass
class CaseTable:
    d: int
    positions: list[CasePosition]

    def __post_init__(self):
        hi = 2**self.d
        for pos in self.positions:
            for tok in [pos.reference, *pos.voters]:
                if not 0 <= tok < hi:
                    raise ValueError(f"position {pos.position}: token {tok} outside [0, {hi - 1}]")

    @classmethod
    def from_dict(cls, doc) -> "CaseTable":
        return cls(int(doc["d"]), [CasePosition(int(p["position"]), int(p["reference"]),
                                                [int(v) for v in p["voters"]])
                                   for p in doc["positions"]])

    def to_dict(self):
        return {"d": self.d, "positions": [
            {"position": p.position, "reference": p.reference, "voters": list(p.voters)}
            for p in self.positions]}


def load_case_table(path=None) -> CaseTable:
    """Read a case table JSON; with no path, the bundled 13-bit, five-voter fixture."""
    if path is None:
        text = resources.files("votetok").joinpath("data/case_study.json").read_text()
    else:
        text = Path(path).read_text()
    return CaseTable.from_dict(json.loads(text))


@dataclass
class ReplayResult:
    position: int
    voted: int
    reference: int
    wrong_voters: int
    bit_votes: dict  # bit index -> (votes for 1, votes for 0), contested bits only

    @property
    def recovered(self) -> bool:
        return self.voted == self.reference


def replay_case(table: CaseTable) -> list[ReplayResult]:
    out = []
    for pos in table.positions:
        codes = token_to_code(np.asarray(pos.voters), table.d)
        voted = code_to_token(aggregate_infer(codes))
        ones = (codes > 0).sum(axis=0)
        n = len(pos.voters)
        contested = {int(j): (int(ones[j]), int(n - ones[j])) for j in range(table.d) if 0 < ones[j] < n}
        wrong = sum(v != pos.reference for v in pos.voters)
        out.append(ReplayResult(pos.position, int(voted), pos.reference, wrong, contested))
    return out


# -------------------------------------------------------------------- overhead

def voter_param_overhead(n: int, D: int, d: int) -> int:
    """Parameters of ``n`` affine branches mapping D -> d."""
    if min(n, D, d) < 1:
        raise ValueError("n, D and d must be positive")
    return n * (D * d + d)
