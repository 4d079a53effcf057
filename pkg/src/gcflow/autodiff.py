"""Dense float32 array engine with taped reverse-mode gradients and
co-executed forward-mode tangents (Jacobian-vector products).

Reverse mode uses a Wengert list: ops append nodes to the innermost active
Tape, and backward() replays that list once in reverse. Forward mode rides
along with the primal computation: whenever an input carries a tangent, the
output tangent is computed in the same call, independent of whether a tape
is recording.

Broadcasting is restricted to the leading-batch case: two shapes conform if
they are equal or one is a trailing suffix of the other (so [B,n] op [n] is
fine, [B,1] op [B,d] is not). Everything else must be an explicit op.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf

__all__ = [
    "ContractViolation",
    "NumericFault",
    "Tensor",
    "Tape",
    "backward",
    "jvp",
    "pause_recording",
    "set_debug_nan",
    "add",
    "subtract",
    "multiply",
    "matmul",
    "scalar_scale",
    "exp",
    "log",
    "square",
    "relu",
    "gelu",
    "tanh",
    "sin",
    "cos",
    "clip",
    "layer_norm",
    "reduce_sum",
    "reduce_mean",
    "concat",
    "slice_last",
]

_INV_SQRT2 = np.float32(1.0 / math.sqrt(2.0))
_INV_SQRT2PI = np.float32(1.0 / math.sqrt(2.0 * math.pi))


class ContractViolation(ValueError):
    """An operation was called outside its declared contract."""


class NumericFault(ArithmeticError):
    """A non-finite value surfaced where the pipeline requires finite ones."""


# Debug-mode per-op NaN/Inf scan. Off by default: the scan costs one pass
# over every op output, which training-loop callers do not want.
_DEBUG_NAN = False


def set_debug_nan(enabled: bool) -> None:
    global _DEBUG_NAN
    _DEBUG_NAN = bool(enabled)


def _checked(name: str, out_values: np.ndarray) -> np.ndarray:
    if _DEBUG_NAN and not np.all(np.isfinite(out_values)):
        raise NumericFault(f"non-finite output in op '{name}'")
    return out_values


class Tensor:
    """Dense float32 array with optional adjoint (grad) and tangent buffers.

    Values are fixed after construction (optimizers mutate parameter buffers
    in place between tapes, never while a tape referencing them is live).
    `grad` is written by backward(); `tangent` is attached at construction
    and propagated through ops.
    """

    __slots__ = ("values", "grad", "tangent", "requires_grad", "_tape")

    def __init__(self, values, tangent=None, requires_grad: bool = False):
        v = np.asarray(values, dtype=np.float32)
        self.values = v
        self.grad: np.ndarray | None = None
        if tangent is not None:
            tangent = np.asarray(tangent, dtype=np.float32)
            if tangent.shape != v.shape:
                raise ContractViolation(
                    f"tangent shape {tangent.shape} != value shape {v.shape}"
                )
        self.tangent: np.ndarray | None = tangent
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        """New leaf sharing this buffer, cut from tape and tangent stream."""
        return Tensor(self.values)

    def with_tangent(self, tangent) -> "Tensor":
        """New leaf sharing this buffer with a forward-mode tangent attached."""
        return Tensor(self.values, tangent=tangent)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, rg={self.requires_grad})"

    # Operator sugar over the op functions below.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        return multiply(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scalar_scale(self, -1.0)


class Tape:
    """Ordered record of ops, replayed once in reverse by backward().

    Use as a context manager; ops record onto the innermost active tape.
    A tape belongs to the code path that opened it and is not shareable.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        # node = (out, inputs, backfn); backfn(out_adjoint) yields one
        # adjoint contribution per input (None for grad-free inputs).
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must be exited in LIFO order"


_TAPE_STACK: list[Tape] = []
_RECORDING_PAUSED = 0


@contextlib.contextmanager
def pause_recording():
    """Suspend tape recording; tangent propagation is unaffected."""
    global _RECORDING_PAUSED
    _RECORDING_PAUSED += 1
    try:
        yield
    finally:
        _RECORDING_PAUSED -= 1


def _active_tape() -> Tape | None:
    if _RECORDING_PAUSED or not _TAPE_STACK:
        return None
    return _TAPE_STACK[-1]


def _finish(name: str, out: Tensor, inputs: tuple[Tensor, ...], backfn) -> Tensor:
    _checked(name, out.values)
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape = _active_tape()
        if tape is not None:
            tape.nodes.append((out, inputs, backfn))
            out._tape = tape
    return out


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into the grad buffer of every leaf that
    requires grad. root must be scalar-shaped. A root with no recorded
    provenance (a constant) writes nothing. Repeated calls accumulate.
    """
    if root.values.shape != ():
        raise ContractViolation(f"backward root must be scalar, got {root.shape}")
    tape = root._tape
    if tape is None:
        return
    adjoints: dict[int, tuple[Tensor, np.ndarray]] = {
        id(root): (root, np.ones((), dtype=np.float32))
    }
    for out, inputs, backfn in reversed(tape.nodes):
        entry = adjoints.get(id(out))
        if entry is None:
            continue
        contribs = backfn(entry[1])
        for tensor, contrib in zip(inputs, contribs):
            if contrib is None or not tensor.requires_grad:
                continue
            prev = adjoints.get(id(tensor))
            if prev is None:
                adjoints[id(tensor)] = (tensor, contrib)
            else:
                adjoints[id(tensor)] = (tensor, prev[1] + contrib)
    for tensor, adj in adjoints.values():
        if tensor._tape is None:  # leaf: not produced by any recorded op
            adj = np.asarray(adj, dtype=np.float32)
            tensor.grad = adj.copy() if tensor.grad is None else tensor.grad + adj


def jvp(f, primals, tangents) -> tuple[Tensor, Tensor]:
    """Evaluate f at primals while pushing the given tangents forward.

    Returns (f(primals), J_f . tangents), both as plain leaves, computed in
    one pass. Tangents must shape-match their primals; zero arrays are the
    way to hold an input direction fixed. The primal result is bitwise the
    same as evaluating f without tangents.
    """
    if len(primals) != len(tangents):
        raise ContractViolation("one tangent per primal input required")
    duals = []
    for p, t in zip(primals, tangents):
        if not isinstance(p, Tensor):
            p = Tensor(p)
        duals.append(p.with_tangent(t))
    out = f(*duals)
    tan = out.tangent
    if tan is None:
        tan = np.zeros_like(out.values)
    return Tensor(out.values), Tensor(np.asarray(tan, dtype=np.float32))


# ---------------------------------------------------------------------------
# shape plumbing

def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _conformable(sa: tuple, sb: tuple) -> bool:
    if sa == sb:
        return True
    if len(sa) > len(sb):
        return sa[len(sa) - len(sb):] == sb
    return sb[len(sb) - len(sa):] == sa


def _require_conformable(name: str, a: Tensor, b: Tensor) -> None:
    if not _conformable(a.shape, b.shape):
        raise ContractViolation(
            f"{name}: shapes {a.shape} and {b.shape} only broadcast over a "
            "leading batch dimension"
        )


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a full-shape adjoint down to a leading-broadcast input shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def _pair_tangent(a: Tensor, b: Tensor, fa, fb) -> np.ndarray | None:
    """Combine the tangents of a binary op, given per-input pushforwards."""
    if a.tangent is None and b.tangent is None:
        return None
    parts = []
    if a.tangent is not None:
        parts.append(fa(a.tangent))
    if b.tangent is not None:
        parts.append(fb(b.tangent))
    out = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    return np.asarray(out, dtype=np.float32)


# ---------------------------------------------------------------------------
# primitives

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _require_conformable("add", a, b)
    out_v = a.values + b.values
    tan = _pair_tangent(a, b, lambda t: np.broadcast_to(t, out_v.shape),
                        lambda t: np.broadcast_to(t, out_v.shape))
    out = Tensor(out_v, tangent=tan)

    def backfn(g, sa=a.shape, sb=b.shape):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _finish("add", out, (a, b), backfn)


def subtract(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _require_conformable("subtract", a, b)
    out_v = a.values - b.values
    tan = _pair_tangent(a, b, lambda t: np.broadcast_to(t, out_v.shape),
                        lambda t: -np.broadcast_to(t, out_v.shape))
    out = Tensor(out_v, tangent=tan)

    def backfn(g, sa=a.shape, sb=b.shape):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _finish("subtract", out, (a, b), backfn)


def multiply(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _require_conformable("multiply", a, b)
    av, bv = a.values, b.values
    out_v = av * bv
    tan = _pair_tangent(a, b, lambda t: t * bv, lambda t: av * t)
    out = Tensor(out_v, tangent=tan)

    def backfn(g, sa=a.shape, sb=b.shape):
        return _unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)

    return _finish("multiply", out, (a, b), backfn)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    out_v = av @ bv
    tan = _pair_tangent(a, b, lambda t: t @ bv, lambda t: av @ t)
    out = Tensor(out_v, tangent=tan)

    def backfn(g):
        return g @ bv.T, av.T @ g

    return _finish("matmul", out, (a, b), backfn)


def scalar_scale(a, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)
    out_v = a.values * np.float32(c)
    tan = None if a.tangent is None else a.tangent * np.float32(c)
    out = Tensor(out_v, tangent=tan)

    def backfn(g):
        return (g * np.float32(c),)

    return _finish("scalar_scale", out, (a,), backfn)


def _unary(name: str, a: Tensor, out_v: np.ndarray, local: np.ndarray) -> Tensor:
    """Elementwise op with pointwise derivative `local` at the input."""
    tan = None if a.tangent is None else local * a.tangent
    out = Tensor(out_v, tangent=tan)

    def backfn(g):
        return (g * local,)

    return _finish(name, out, (a,), backfn)


def exp(a) -> Tensor:
    a = _lift(a)
    out_v = np.exp(a.values)
    return _unary("exp", a, out_v, out_v)


def log(a) -> Tensor:
    a = _lift(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_v = np.log(a.values)
        local = np.float32(1.0) / a.values
    return _unary("log", a, out_v, local)


def square(a) -> Tensor:
    a = _lift(a)
    v = a.values
    return _unary("square", a, v * v, np.float32(2.0) * v)


def relu(a) -> Tensor:
    a = _lift(a)
    v = a.values
    mask = (v > 0).astype(np.float32)
    return _unary("relu", a, v * mask, mask)


def gelu(a) -> Tensor:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    a = _lift(a)
    v = a.values
    cdf = np.float32(0.5) * (np.float32(1.0) + erf(v * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(np.float32(-0.5) * v * v)
    return _unary("gelu", a, v * cdf, cdf + v * pdf)


def tanh(a) -> Tensor:
    a = _lift(a)
    out_v = np.tanh(a.values)
    return _unary("tanh", a, out_v, np.float32(1.0) - out_v * out_v)


def sin(a) -> Tensor:
    a = _lift(a)
    return _unary("sin", a, np.sin(a.values), np.cos(a.values))


def cos(a) -> Tensor:
    a = _lift(a)
    return _unary("cos", a, np.cos(a.values), -np.sin(a.values))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through the unclamped region."""
    a = _lift(a)
    v = a.values
    local = ((v >= lo) & (v <= hi)).astype(np.float32)
    return _unary("clip", a, np.clip(v, lo, hi), local)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean, unit variance (no affine)."""
    a = _lift(a)
    v = a.values
    if v.ndim < 1 or v.shape[-1] < 2:
        raise ContractViolation("layer_norm needs a feature axis of width >= 2")
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = np.float32(1.0) / np.sqrt(var + np.float32(eps))
    y = centered * inv_std

    def push(d):
        dc = d - d.mean(axis=-1, keepdims=True)
        return (dc - y * (y * d).mean(axis=-1, keepdims=True)) * inv_std

    tan = None if a.tangent is None else np.asarray(push(a.tangent), np.float32)
    out = Tensor(y, tangent=tan)

    def backfn(g):
        # layer_norm's Jacobian is symmetric in (centered, projected) form
        return (push(g),)

    return _finish("layer_norm", out, (a,), backfn)


def _reduce(name: str, a, axis, op_mean: bool) -> Tensor:
    a = _lift(a)
    if axis not in (None, 0, -1):
        raise ContractViolation(f"{name}: axis must be None, 0, or -1")
    if a.ndim == 0:
        raise ContractViolation(f"{name}: input must have at least one axis")
    v = a.values
    n = v.size if axis is None else v.shape[axis]
    out_v = v.mean(axis=axis) if op_mean else v.sum(axis=axis)
    scale = np.float32(1.0 / n) if op_mean else np.float32(1.0)
    tan = None
    if a.tangent is not None:
        tan = a.tangent.mean(axis=axis) if op_mean else a.tangent.sum(axis=axis)
        tan = np.asarray(tan, np.float32)
    out = Tensor(out_v, tangent=tan)
    in_shape = v.shape

    def backfn(g):
        if axis is None:
            return (np.broadcast_to(g * scale, in_shape),)
        gg = np.expand_dims(g, axis) * scale
        return (np.broadcast_to(gg, in_shape),)

    return _finish(name, out, (a,), backfn)


def reduce_sum(a, axis=None) -> Tensor:
    return _reduce("reduce_sum", a, axis, op_mean=False)


def reduce_mean(a, axis=None) -> Tensor:
    return _reduce("reduce_mean", a, axis, op_mean=True)


def concat(tensors) -> Tensor:
    """Concatenate along the feature (last) axis."""
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ContractViolation("concat of zero tensors")
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != lead or t.ndim != ts[0].ndim:
            raise ContractViolation(
                f"concat: leading dims differ: {[t.shape for t in ts]}"
            )
    out_v = np.concatenate([t.values for t in ts], axis=-1)
    tan = None
    if any(t.tangent is not None for t in ts):
        tan = np.concatenate(
            [t.tangent if t.tangent is not None else np.zeros_like(t.values)
             for t in ts],
            axis=-1,
        )
    out = Tensor(out_v, tangent=tan)
    widths = [t.shape[-1] for t in ts]

    def backfn(g):
        pieces = []
        start = 0
        for w in widths:
            pieces.append(g[..., start:start + w])
            start += w
        return tuple(pieces)

    return _finish("concat", out, tuple(ts), backfn)


def slice_last(a, start: int, stop: int) -> Tensor:
    a = _lift(a)
    width = a.shape[-1] if a.ndim else 0
    if not (0 <= start <= stop <= width):
        raise ContractViolation(f"slice_last [{start}:{stop}] out of range {width}")
    out_v = a.values[..., start:stop]
    tan = None if a.tangent is None else a.tangent[..., start:stop]
    out = Tensor(out_v, tangent=tan)
    in_shape = a.shape

    def backfn(g):
        full = np.zeros(in_shape, dtype=np.float32)
        full[..., start:stop] = g
        return (full,)

    return _finish("slice_last", out, (a,), backfn)
