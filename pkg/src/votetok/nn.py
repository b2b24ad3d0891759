"""A small tape-based reverse-mode autodiff over numpy arrays, plus AdamW.

Only the operations the tokenizer model needs are provided. Everything runs
in float64. Each op builds its output ``Tensor`` with a closure that maps the
output gradient to parent gradients; :meth:`Tensor.backward` replays those
closures in reverse topological order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "votetok-params"
CHECKPOINT_VERSION = 1

DEBUG_FINITE = False


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "name", "info")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.info = None
        if DEBUG_FINITE and not np.all(np.isfinite(self.value)):
            raise FloatingPointError(f"non-finite value produced by {name or 'op'}")

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.value)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not _tracks(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def _tracks(t):
    return t.requires_grad or t.backward_fn is not None


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and _tracks(p):
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value, name=None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _make(value, parents, backward_fn, name):
    if any(_tracks(p) for p in parents):
        return Tensor(value, parents=tuple(parents), backward_fn=backward_fn, name=name)
    return Tensor(value, name=name)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ------------------------------------------------------------------ elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
                 "mul")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.value**2, (x,), lambda g: (2.0 * x.value * g,), "square")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.value)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def binary_entropy(q, eps=1e-12) -> Tensor:
    """H(q) in nats for probabilities ``q``; clipped away from {0, 1}."""
    q = as_tensor(q)
    qc = np.clip(q.value, eps, 1.0 - eps)
    h = -(qc * np.log(qc) + (1.0 - qc) * np.log1p(-qc))
    return _make(h, (q,), lambda g: (g * (np.log1p(-qc) - np.log(qc)),), "binary_entropy")


def binary_entropy_logits(z) -> Tensor:
    """H(sigmoid(z)) computed stably from the logit; dH/dz = -z q (1 - q)."""
    z = as_tensor(z)
    q = _sigmoid(z.value)
    # H = softplus(z) - z*q, with softplus(z) = log(1 + e^z)
    h = np.logaddexp(0.0, z.value) - z.value * q
    return _make(h, (z,), lambda g: (-g * z.value * q * (1.0 - q),), "binary_entropy_logits")


# -------------------------------------------------------------------- reductions

def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    y = x.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(y, (x,), back, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def stop_gradient(x) -> Tensor:
    return Tensor(as_tensor(x).value.copy(), name="stop_gradient")


# --------------------------------------------------------------------- layers

def affine(x, W, b) -> Tensor:
    """y = x @ W.T + b over the last axis; W has shape (out, in)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ValueError(f"affine shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    y = x.value @ W.value.T + b.value

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.value.reshape(-1, x.shape[-1])
        return g @ W.value, g2.T @ x2, g2.sum(axis=0)

    return _make(y, (x, W, b), back, "affine")


def branch_affine(x, W, b) -> Tensor:
    """Per-branch affine maps: x (n, ..., D), W (n, d, D), b (n, d) -> (n, ..., d)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    n = W.shape[0]
    if x.shape[0] != n or x.shape[-1] != W.shape[2] or b.shape != W.shape[:2]:
        raise ValueError(f"branch_affine shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    xf = x.value.reshape(n, -1, x.shape[-1])
    y = np.matmul(xf, W.value.transpose(0, 2, 1)) + b.value[:, None, :]
    out_shape = x.shape[:-1] + (W.shape[1],)

    def back(g):
        gf = g.reshape(n, -1, W.shape[1])
        gx = np.matmul(gf, W.value).reshape(x.shape)
        gW = np.matmul(gf.transpose(0, 2, 1), xf)
        return gx, gW, gf.sum(axis=1)

    return _make(y.reshape(out_shape), (x, W, b), back, "branch_affine")


def tile_branches(x, n: int) -> Tensor:
    """Repeat ``x`` along a new leading branch axis of size ``n``."""
    x = as_tensor(x)
    y = np.broadcast_to(x.value[None], (n,) + x.shape).copy()
    return _make(y, (x,), lambda g: (g.sum(axis=0),), "tile_branches")


def route(h, h_alt, mask) -> Tensor:
    """Stack per-branch inputs: branch i of item j reads ``h_alt`` where mask[i, j] else ``h``.

    h, h_alt: (B, ..., D); mask: bool (n, B). Output (n, B, ..., D).
    """
    h, h_alt = as_tensor(h), as_tensor(h_alt)
    mask = np.asarray(mask, dtype=bool)
    if h.shape != h_alt.shape or mask.shape[1] != h.shape[0]:
        raise ValueError(f"route shape mismatch: h{h.shape} h_alt{h_alt.shape} mask{mask.shape}")
    m = mask.reshape(mask.shape + (1,) * (h.value.ndim - 1))
    y = np.where(m, h_alt.value[None], h.value[None])

    def back(g):
        return (np.where(m, 0.0, g).sum(axis=0), np.where(m, g, 0.0).sum(axis=0))

    return _make(y, (h, h_alt), back, "route")


def avg_pool_time(x, factor: int) -> Tensor:
    """Average non-overlapping windows along axis -2.

    A time length that is not a multiple of ``factor`` is right-padded by
    repeating the last frame; the pad count is kept in ``y.info``.
    """
    x = as_tensor(x)
    if factor < 1:
        raise ValueError("pool factor must be >= 1")
    T = x.shape[-2]
    pad = (-T) % factor
    idx = np.concatenate([np.arange(T), np.full(pad, T - 1, dtype=np.int64)])
    xp = x.value[..., idx, :]
    Tp = T + pad
    lead = x.shape[:-2]
    D = x.shape[-1]
    y = xp.reshape(lead + (Tp // factor, factor, D)).mean(axis=-2)

    def back(g):
        gp = np.repeat(g / factor, factor, axis=-2)
        if not pad:
            return (gp,)
        gx = gp[..., :T, :].copy()
        gx[..., T - 1, :] += gp[..., T:, :].sum(axis=-2)
        return (gx,)

    out = _make(y, (x,), back, "avg_pool_time")
    out.info = {"pad_frames": int(pad)}
    if pad:
        log.debug("avg_pool_time padded %d frame(s) to length %d", pad, Tp)
    return out


def mean_over_branches(xs) -> Tensor:
    """Mean over axis 0 of a stacked tensor, or over a list of equal-shape tensors."""
    if isinstance(xs, (list, tuple)):
        out = xs[0]
        for x in xs[1:]:
            out = add(out, x)
        return mul(out, 1.0 / len(xs))
    return mean(xs, axis=0)


def sign_ste(x, clip: bool = False) -> Tensor:
    """sign with sign(0) = +1 forward; straight-through gradient backward.

    ``clip=True`` zeroes the gradient where |x| > 1 (hard-tanh surrogate).
    """
    x = as_tensor(x)
    y = np.where(x.value >= 0, 1.0, -1.0)
    if clip:
        keep = np.abs(x.value) <= 1.0
        return _make(y, (x,), lambda g: (g * keep,), "sign_ste")
    return _make(y, (x,), lambda g: (g,), "sign_ste")


def identity(x) -> Tensor:
    """Surrogate for :func:`sign_ste` used by gradient checks."""
    x = as_tensor(x)
    return _make(x.value.copy(), (x,), lambda g: (g,), "identity")


# ------------------------------------------------------------------------ losses

def softmax_xent(logits, labels) -> Tensor:
    """Mean cross entropy of integer ``labels`` under ``softmax(logits)``; logits (N, V)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.value
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ValueError(f"softmax_xent shape mismatch: logits{z.shape} labels{labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= z.shape[1]:
        raise ValueError("label out of range")
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = np.mean(lse - zs[rows, labels])

    def back(g):
        p = np.exp(zs - lse[:, None])
        p[rows, labels] -= 1.0
        return (g * p / z.shape[0],)

    return _make(loss, (logits,), back, "softmax_xent")


def mse(a, b) -> Tensor:
    return mean(square(sub(a, b)))


# --------------------------------------------------------------------- optimizer

@dataclass
class OptimState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float | None = 1.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    last_grad_norm: float = 0.0


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimState,
               lr: float | None = None) -> OptimState:
    """One AdamW update in place: global-norm clip, decoupled decay, bias-corrected moments."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise FloatingPointError(f"non-finite gradients at step {state.step + 1} in: {', '.join(bad)}")
    lr = state.lr if lr is None else lr
    norm = global_norm(list(grads.values()))
    state.last_grad_norm = norm
    scale = 1.0
    if state.grad_clip is not None and norm > state.grad_clip:
        scale = state.grad_clip / norm
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = g * scale
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        if state.weight_decay:
            p.value *= 1.0 - lr * state.weight_decay
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ----------------------------------------------------------------- verification

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    analytic: float
    numeric: float

    def __str__(self):
        return (f"max rel err {self.max_rel_error:.3e} at {self.worst_param}{list(self.worst_index)} "
                f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e})")


def relative_error(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-4,
               floor: float = 1e-8) -> GradCheckResult:
    """Compare tape gradients of ``loss_fn()`` against central differences, per coordinate.

    Relative error is |a - n| / max(|a|, |n|, floor).
    """
    for p in params.values():
        p.zero_grad()
    loss_fn().backward()
    worst = GradCheckResult(0.0, "", (), 0.0, 0.0)
    for name, p in params.items():
        analytic = np.zeros_like(p.value) if p.grad is None else p.grad.copy()
        it = np.nditer(p.value, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p.value[idx]
            p.value[idx] = orig + eps
            fp = float(loss_fn().value)
            p.value[idx] = orig - eps
            fm = float(loss_fn().value)
            p.value[idx] = orig
            num = (fp - fm) / (2 * eps)
            err = float(relative_error(analytic[idx], num, floor))
            if err > worst.max_rel_error or not worst.worst_param:
                worst = GradCheckResult(err, name, idx, float(analytic[idx]), num)
    return worst


# ------------------------------------------------------------------- checkpoint

def save_params(params: Mapping[str, Tensor | np.ndarray], path, meta: dict | None = None) -> None:
    """JSON checkpoint of named arrays; floats are written with full repr precision."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {},
    }
    for name, p in params.items():
        arr = p.value if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
        doc["params"][name] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}
    Path(path).write_text(json.dumps(doc))


def load_params(path) -> tuple[dict, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    arrays = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
              for k, v in doc["params"].items()}
    return arrays, doc.get("meta", {})
