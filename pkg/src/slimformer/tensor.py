"""Dense f64 tensors with reverse-mode autodiff on a global tape.

Just enough machinery to express every encoder variant and train it at
toy scale: batched matmul, GELU, softmax / standardization normalizers,
dropout, cross-entropy, embedding lookups, and a finite-difference
gradient checker.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    """Dense n-d array of float64, optionally tracked for gradients.

    Shape is fixed at creation. ``grad`` is populated for leaves by
    ``backward`` and accumulates across calls until ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    output: Tensor
    inputs: tuple
    backward_fn: object  # grad_out -> tuple of grads aligned with inputs


@dataclass
class Tape:
    """Ordered operation record; backward walks it once, in reverse."""

    records: list = field(default_factory=list)
    produced: set = field(default_factory=set)

    def clear(self):
        self.records.clear()
        self.produced.clear()

    def __len__(self):
        return len(self.records)


_TAPE = Tape()
_GRAD_ENABLED = True

# Optional FLOP counter, incremented by the ops that the analytic model
# tracks (matmul, layernorm-style normalizers, softmax). Convention:
# multiply-add = 2 FLOPs; normalizers cost a fixed per-element constant.
_FLOPS = None

FLOPS_PER_ELEM_LAYERNORM = 5
FLOPS_PER_ELEM_SOFTMAX = 5
FLOPS_PER_ELEM_NORMALIZE = 4


class FlopCounter:
    def __init__(self):
        self.total = 0

    def add(self, n):
        self.total += int(n)


@contextmanager
def count_flops():
    """Count FLOPs of tracked ops executed inside the context."""
    global _FLOPS
    prev = _FLOPS
    _FLOPS = FlopCounter()
    try:
        yield _FLOPS
    finally:
        _FLOPS = prev


def _flops(n):
    if _FLOPS is not None:
        _FLOPS.add(n)


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def get_tape():
    return _TAPE


@contextmanager
def fresh_tape():
    """Swap in an empty tape for the duration of the context."""
    global _TAPE
    prev = _TAPE
    _TAPE = Tape()
    try:
        yield _TAPE
    finally:
        _TAPE = prev


def _tracking(*tensors):
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def _record(out, inputs, backward_fn):
    out.requires_grad = True
    _TAPE.records.append(_Record(out, inputs, backward_fn))
    _TAPE.produced.add(id(out))


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    if _tracking(a, b):
        def bw(go):
            return _unbroadcast(go, a.shape), _unbroadcast(go, b.shape)
        _record(out, (a, b), bw)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    if _tracking(a, b):
        def bw(go):
            return _unbroadcast(go, a.shape), _unbroadcast(-go, b.shape)
        _record(out, (a, b), bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    if _tracking(a, b):
        def bw(go):
            return (_unbroadcast(go * b.data, a.shape),
                    _unbroadcast(go * a.data, b.shape))
        _record(out, (a, b), bw)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    if _tracking(a):
        _record(out, (a,), lambda go: (go * c,))
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    if _tracking(a):
        _record(out, (a,), lambda go: (go.reshape(a.shape),))
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes))
    if _tracking(a):
        inv = tuple(np.argsort(axes))
        _record(out, (a,), lambda go: (np.transpose(go, inv),))
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    if _tracking(a):
        _record(out, (a,), lambda go: (np.broadcast_to(go, a.shape).copy(),))
    return out


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    out = Tensor(t)
    if _tracking(a):
        _record(out, (a,), lambda go: (go * (1.0 - t * t),))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product a[..., p, q] @ b[..., q, r]."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    _flops(2 * out.data.size * a.shape[-1])
    if _tracking(a, b):
        def bw(go):
            ga = _unbroadcast(np.matmul(go, np.swapaxes(b.data, -1, -2)), a.shape)
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), go), b.shape)
            return ga, gb
        _record(out, (a, b), bw)
    return out


# ---------------------------------------------------------------------------
# nonlinearities and normalizers


def gelu(x: Tensor) -> Tensor:
    """Exact GELU x * Phi(x) with Phi the standard normal CDF."""
    cdf = ndtr(x.data)
    out = Tensor(x.data * cdf)
    if _tracking(x):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        _record(out, (x,), lambda go: (go * (cdf + x.data * pdf),))
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Numerically stabilized softmax along the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)
    _flops(FLOPS_PER_ELEM_SOFTMAX * out.data.size)
    if _tracking(x):
        def bw(go):
            return (s * (go - (go * s).sum(axis=-1, keepdims=True)),)
        _record(out, (x,), bw)
    return out


def _standardize(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    sigma = np.sqrt((xc * xc).mean(axis=-1, keepdims=True))  # population std
    denom = sigma + eps
    return xc / denom, denom, sigma


def _standardize_bw(h, xhat, denom, sigma):
    # h = upstream grad times gain, per element; the sigma term vanishes
    # for constant rows (xhat == 0) so the guard value is arbitrary
    hm = h.mean(axis=-1, keepdims=True)
    hxm = (h * xhat).mean(axis=-1, keepdims=True)
    sig_safe = np.where(sigma > 0.0, sigma, 1.0)
    return (h - hm) / denom - xhat * hxm / sig_safe


def normalize_rows(x: Tensor, g: Tensor, b: Tensor, eps: float = 1e-6) -> Tensor:
    """Row standardization g * (x - mu) / (sigma + eps) + b, scalar g and b."""
    if eps <= 0:
        raise ParameterError("eps must be positive")
    xhat, denom, sigma = _standardize(x.data, eps)
    out = Tensor(g.data * xhat + b.data)
    _flops(FLOPS_PER_ELEM_NORMALIZE * out.data.size)
    if _tracking(x, g, b):
        def bw(go):
            gx = _standardize_bw(go * g.data, xhat, denom, sigma)
            gg = _unbroadcast(go * xhat, g.shape)
            gb = _unbroadcast(go, b.shape)
            return gx, gg, gb
        _record(out, (x, g, b), bw)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Standardize the last axis, then per-feature gain and bias."""
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ShapeError(
            f"gain/bias must have shape ({h},), got {gain.shape} and {bias.shape}")
    xhat, denom, sigma = _standardize(x.data, eps)
    out = Tensor(gain.data * xhat + bias.data)
    _flops(FLOPS_PER_ELEM_LAYERNORM * out.data.size)
    if _tracking(x, gain, bias):
        def bw(go):
            gx = _standardize_bw(go * gain.data, xhat, denom, sigma)
            red = tuple(range(go.ndim - 1))
            return gx, (go * xhat).sum(axis=red), go.sum(axis=red)
        _record(out, (x, gain, bias), bw)
    return out


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability rate, scale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        out = Tensor(x.data.copy())
        if _tracking(x):
            _record(out, (x,), lambda go: (go,))
        return out
    keep = (rng.random(x.shape, dtype=np.float32) >= rate) / (1.0 - rate)
    out = Tensor(x.data * keep)
    if _tracking(x):
        _record(out, (x,), lambda go: (go * keep,))
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding ids out of range [0, {table.shape[0]})")
    out = Tensor(table.data[ids])
    if _tracking(table):
        def bw(go):
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), go.reshape(-1, table.shape[-1]))
            return (gt,)
        _record(out, (table,), bw)
    return out


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-d tensor; backward scatter-adds."""
    idx = np.asarray(idx)
    out = Tensor(x.data[idx])
    if _tracking(x):
        def bw(go):
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, go)
            return (gx,)
        _record(out, (x,), bw)
    return out


def cross_entropy_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-softmax at the target index, over the batch."""
    targets = np.asarray(targets)
    n, v = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets must have shape ({n},), got {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target index out of range [0, {v})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsumexp
    out = Tensor(-logp[np.arange(n), targets].mean())
    if _tracking(logits):
        def bw(go):
            p = np.exp(logp)
            p[np.arange(n), targets] -= 1.0
            return (go * p / n,)
        _record(out, (logits,), bw)
    return out


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate grads of all requires_grad leaves reachable from loss.

    Grads accumulate across calls until the leaves are zeroed.
    """
    tape = tape if tape is not None else _TAPE
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if id(loss) not in tape.produced:
        raise ContractError("loss was not produced under this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        go = grads.pop(id(rec.output), None)
        if go is None:
            continue
        gins = rec.backward_fn(go)
        for t, g in zip(rec.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            if id(t) in tape.produced:
                acc = grads.get(id(t))
                grads[id(t)] = g if acc is None else acc + g
            else:
                t.grad = g.copy() if t.grad is None else t.grad + g


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_err: float
    passed: bool
    errors: np.ndarray

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{self.op_name}: max rel err {self.max_rel_err:.3e} [{status}]"


def grad_check(f, x: Tensor, h: float = 1e-5, tol: float = 1e-4,
               name: str = "f") -> GradCheckReport:
    """Compare the tape gradient of scalar f(x) against central differences."""
    x.zero_grad()
    x.requires_grad = True
    with fresh_tape() as tape:
        loss = f(x)
        backward(loss, tape)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.zero_grad()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)
    errors = np.abs(analytic - numeric) / denom
    bad = not np.all(np.isfinite(analytic)) or not np.all(np.isfinite(numeric))
    max_err = float("nan") if bad else float(errors.max()) if errors.size else 0.0
    passed = (not bad) and max_err <= tol
    return GradCheckReport(name, max_err, passed, errors)
