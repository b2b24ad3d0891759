"""Voting lookup-free quantizer.

``n`` parallel affine branches project a hidden vector to ``d`` real values
each; every branch is binarized by sign. Training averages the branch codes
bit by bit into a consensus score in [-1, 1]; inference takes the sign of that
score, i.e. a per-bit strict majority vote over an odd number of branches.

Token ids use an LSB-first bit order: dimension ``j`` carries weight ``2**j``,
``+1`` maps to bit 1 and ``-1`` to bit 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import Tensor


@dataclass(frozen=True)
class QuantizerConfig:
    n_branches: int = 5
    code_dim: int = 13
    hidden_dim: int = 1280

    def __post_init__(self):
        if self.n_branches < 1 or self.n_branches % 2 == 0:
            raise ValueError(f"n_branches must be a positive odd number, got {self.n_branches}")
        if not 1 <= self.code_dim <= 30:
            raise ValueError(f"code_dim must be in [1, 30], got {self.code_dim}")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be positive")

    @property
    def codebook_size(self) -> int:
        return 2**self.code_dim


class BranchBank:
    """Stacked branch parameters: ``W`` of shape (n, d, D) and ``b`` of shape (n, d)."""

    def __init__(self, W, b):
        W = W if isinstance(W, Tensor) else nn.parameter(W, "quantizer.W")
        b = b if isinstance(b, Tensor) else nn.parameter(b, "quantizer.b")
        if W.value.ndim != 3 or b.shape != W.shape[:2]:
            raise ValueError(f"bad branch bank shapes W{W.shape} b{b.shape}")
        self.W, self.b = W, b

    @classmethod
    def init(cls, cfg: QuantizerConfig, rng: np.random.Generator) -> "BranchBank":
        # each branch draws from its own child stream so branches start decorrelated
        bound = 1.0 / np.sqrt(cfg.hidden_dim)
        streams = rng.spawn(cfg.n_branches)
        W = np.stack([s.uniform(-bound, bound, size=(cfg.code_dim, cfg.hidden_dim)) for s in streams])
        return cls(W, np.zeros((cfg.n_branches, cfg.code_dim)))

    @classmethod
    def from_branches(cls, weights, biases) -> "BranchBank":
        return cls(np.stack([np.asarray(w, float) for w in weights]),
                   np.stack([np.asarray(b, float) for b in biases]))

    @property
    def n_branches(self) -> int:
        return self.W.shape[0]

    @property
    def code_dim(self) -> int:
        return self.W.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W.shape[2]

    def params(self) -> dict:
        return {"quantizer.W": self.W, "quantizer.b": self.b}

    def n_params(self) -> int:
        return self.W.value.size + self.b.value.size


def project(h, bank: BranchBank, routed: bool = False) -> Tensor:
    """p_i = W_i h + b_i for every branch.

    ``h`` is shared by all branches, shape (..., D), unless ``routed`` is set,
    in which case it already holds one input per branch, shape (n, ..., D).
    Returns (n, ..., d).
    """
    h = nn.as_tensor(h)
    if h.shape[-1] != bank.hidden_dim:
        raise ValueError(f"hidden size {h.shape[-1]} does not match bank D={bank.hidden_dim}")
    if not routed:
        h = nn.tile_branches(h, bank.n_branches)
    elif h.shape[0] != bank.n_branches:
        raise ValueError(f"routed input has {h.shape[0]} branches, bank has {bank.n_branches}")
    return nn.branch_affine(h, bank.W, bank.b)


def route_inputs(h, h_pert, mask) -> Tensor:
    """Per-branch inputs where branch i of item j sees ``h_pert`` iff ``mask[i, j]``."""
    return nn.route(h, h_pert, mask)


def binarize(p, surrogate=None) -> Tensor:
    """B = sign(p) with sign(0) = +1 and a straight-through backward."""
    return (surrogate or nn.sign_ste)(p)


def aggregate_train(codes) -> Tensor:
    """Bit-wise mean of branch codes (stacked on axis 0 or given as a list)."""
    if isinstance(codes, (list, tuple)):
        shapes = {nn.as_tensor(c).shape for c in codes}
        if len(shapes) != 1:
            raise ValueError(f"branch codes differ in shape: {sorted(shapes)}")
        return nn.mean_over_branches([nn.as_tensor(c) for c in codes])
    return nn.mean_over_branches(nn.as_tensor(codes))


def sign(x) -> np.ndarray:
    return np.where(np.asarray(x) >= 0, 1, -1).astype(np.int64)


def aggregate_infer(codes) -> np.ndarray:
    """Per-bit majority of ±1 codes stacked on axis 0; the branch count must be odd."""
    codes = np.asarray(codes)
    if codes.shape[0] % 2 == 0:
        raise ValueError(f"voting needs an odd number of branches, got {codes.shape[0]}")
    return sign(codes.sum(axis=0))


def code_to_token(code) -> np.ndarray | int:
    """±1 code(s) over the last axis -> integer token id(s), LSB first."""
    code = np.asarray(code)
    if code.size and not np.all(np.abs(code) == 1):
        raise ValueError("code entries must be -1 or +1")
    d = code.shape[-1]
    if d > 62:
        raise ValueError("code_dim too large for int64 token ids")
    weights = np.left_shift(np.int64(1), np.arange(d, dtype=np.int64))
    tok = ((code > 0).astype(np.int64) * weights).sum(axis=-1)
    return int(tok) if tok.ndim == 0 else tok


def token_to_code(k, d: int) -> np.ndarray:
    """Integer token id(s) -> ±1 code(s) of length ``d``; inverse of :func:`code_to_token`."""
    k = np.asarray(k, dtype=np.int64)
    if np.any(k < 0) or np.any(k >= 2**d):
        raise ValueError(f"token id out of range [0, {2**d - 1}]")
    bits = np.right_shift(k[..., None], np.arange(d, dtype=np.int64)) & 1
    return np.where(bits == 1, 1, -1).astype(np.int64)


@dataclass
class TrainQuantOutput:
    score: Tensor      # consensus score s, shape (..., d)
    pre_quant: Tensor  # p, shape (n, ..., d)
    codes: Tensor      # B, shape (n, ..., d)


def quantize_frame_train(h, bank: BranchBank, surrogate=None, routed=False) -> TrainQuantOutput:
    p = project(h, bank, routed=routed)
    codes = binarize(p, surrogate)
    return TrainQuantOutput(aggregate_train(codes), p, codes)


def quantize_frame_infer(h, bank: BranchBank) -> np.ndarray | int:
    """Token id(s) for hidden vector(s) ``h`` of shape (..., D)."""
    h = np.asarray(h.value if isinstance(h, Tensor) else h, dtype=np.float64)
    p = np.einsum("ndk,...k->n...d", bank.W.value, h) + bank.b.value.reshape(
        (bank.n_branches,) + (1,) * (h.ndim - 1) + (bank.code_dim,))
    return code_to_token(aggregate_infer(sign(p)))
