"""MLP construction, Adam, Polyak-averaged target networks, checkpoints.

Parameters live in ParamSets (ordered, uniquely named float32 tensors).
`mlp_forward` runs through the tape/tangent-aware op layer; `mlp_eval` is a
pure-numpy twin for gradient-free paths (targets, rollouts) that produces
bitwise-identical values by applying the same float32 op sequence.

Checkpoints are one directory: a JSON manifest (specs, entry names, shapes,
byte offsets, arbitrary JSON metadata) next to a single little-endian
float32 blob. Blob is written before manifest, both via temp-then-rename,
so a manifest's presence implies a complete blob.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor

__all__ = [
    "MlpSpec",
    "ParamSet",
    "AdamState",
    "param_count",
    "init_mlp",
    "standardize_input",
    "mlp_forward",
    "mlp_eval",
    "adam_step",
    "ema_update",
    "save_checkpoint",
    "load_checkpoint",
]

_ACTIVATIONS = ("relu", "gelu")
_FINALS = ("none", "tanh")


@dataclass
class MlpSpec:
    input_dim: int
    hidden_dims: list[int] = field(default_factory=list)
    output_dim: int = 1
    activation: str = "gelu"
    final_activation: str = "none"

    def __post_init__(self):
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        if any((not isinstance(d, int)) or d < 1 for d in dims):
            raise ContractViolation(f"all dims must be integers >= 1, got {dims}")
        if self.activation not in _ACTIVATIONS:
            raise ContractViolation(f"activation must be one of {_ACTIVATIONS}")
        if self.final_activation not in _FINALS:
            raise ContractViolation(f"final_activation must be one of {_FINALS}")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "final_activation": self.final_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(**d)


def param_count(spec: MlpSpec) -> int:
    return sum(fi * fo + fo for fi, fo in spec.layer_dims())


class ParamSet:
    """Ordered list of (name, Tensor) with unique names."""

    __slots__ = ("items",)

    def __init__(self, items: list[tuple[str, Tensor]]):
        names = [n for n, _ in items]
        if len(set(names)) != len(names):
            raise ContractViolation(f"duplicate parameter names in {names}")
        self.items = list(items)

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def names(self) -> list[str]:
        return [n for n, _ in self.items]

    def get(self, name: str) -> Tensor:
        for n, t in self.items:
            if n == name:
                return t
        raise KeyError(name)

    def zero_grads(self) -> None:
        for _, t in self.items:
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.values for n, t in self.items}

    def clone(self) -> "ParamSet":
        return ParamSet([
            (n, Tensor(t.values.copy(), requires_grad=t.requires_grad))
            for n, t in self.items
        ])

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n, t in self.items:
            src = arrays[n]
            if src.shape != t.values.shape:
                raise ContractViolation(
                    f"param '{n}': stored shape {src.shape} != {t.values.shape}"
                )
            t.values[...] = src


def init_mlp(spec: MlpSpec, seed: int) -> ParamSet:
    """Fan-in-scaled uniform weights, U(+-sqrt(6/fan_in)); zero biases."""
    rng = np.random.default_rng(seed)
    items = []
    for idx, (fan_in, fan_out) in enumerate(spec.layer_dims()):
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
        b = np.zeros(fan_out, dtype=np.float32)
        items.append((f"w{idx}", Tensor(w, requires_grad=True)))
        items.append((f"b{idx}", Tensor(b, requires_grad=True)))
    return ParamSet(items)


def standardize_input(params: ParamSet, loc: np.ndarray,
                      scale: np.ndarray) -> None:
    """Fold the affine map x -> (x - loc) / scale into the first layer.

    The rewritten w0/b0 make the freshly initialized network compute what
    it would have computed on standardized inputs, without introducing a
    separate normalization stage: parameter layout, checkpoints, and all
    call sites stay as they are, and training proceeds from the folded
    weights like from any other initialization.
    """
    w0 = params.get("w0")
    b0 = params.get("b0")
    loc = np.asarray(loc, np.float32)
    scale = np.asarray(scale, np.float32)
    fan_in = w0.values.shape[0]
    if loc.shape != (fan_in,) or scale.shape != (fan_in,):
        raise ContractViolation(
            f"standardize_input: loc/scale shapes {loc.shape}/{scale.shape} "
            f"do not match fan-in {fan_in}")
    if np.any(scale <= 0):
        raise ContractViolation("standardize_input: scale must be positive")
    w0.values[...] = w0.values / scale[:, None]
    b0.values[...] = b0.values - loc @ w0.values


def mlp_forward(params: ParamSet, spec: MlpSpec, x: Tensor) -> Tensor:
    """Batched forward pass through the op layer (taped, tangent-aware)."""
    if x.ndim != 2 or x.shape[-1] != spec.input_dim:
        raise ContractViolation(
            f"mlp_forward: input shape {x.shape} does not end in {spec.input_dim}"
        )
    act = ad.relu if spec.activation == "relu" else ad.gelu
    n_layers = len(spec.layer_dims())
    h = x
    for idx in range(n_layers):
        h = ad.add(ad.matmul(h, params.get(f"w{idx}")), params.get(f"b{idx}"))
        if idx < n_layers - 1:
            h = act(h)
    if spec.final_activation == "tanh":
        h = ad.tanh(h)
    return h


_INV_SQRT2 = np.float32(1.0 / math.sqrt(2.0))


def _np_gelu(v: np.ndarray) -> np.ndarray:
    return v * (np.float32(0.5) * (np.float32(1.0) + erf(v * _INV_SQRT2)))


def mlp_eval(params: ParamSet, spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    """Gradient-free forward pass, bitwise equal to mlp_forward().values."""
    x = np.asarray(x, np.float32)
    if x.ndim != 2 or x.shape[-1] != spec.input_dim:
        raise ContractViolation(
            f"mlp_eval: input shape {x.shape} does not end in {spec.input_dim}"
        )
    arrays = dict(params.arrays())
    n_layers = len(spec.layer_dims())
    h = x
    for idx in range(n_layers):
        h = h @ arrays[f"w{idx}"] + arrays[f"b{idx}"]
        if idx < n_layers - 1:
            if spec.activation == "relu":
                h = h * (h > 0).astype(np.float32)
            else:
                h = _np_gelu(h)
    if spec.final_activation == "tanh":
        h = np.tanh(h)
    return h


class AdamState:
    """First/second moment buffers plus hyperparameters for one ParamSet."""

    __slots__ = ("lr", "beta1", "beta2", "eps", "step_count", "m", "v")

    def __init__(self, params: ParamSet, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {n: np.zeros_like(t.values) for n, t in params}
        self.v = {n: np.zeros_like(t.values) for n, t in params}


def adam_step(state: AdamState, params: ParamSet) -> None:
    """Bias-corrected Adam update in place; zeroes grads afterward."""
    for n, t in params:
        if t.grad is None:
            raise ContractViolation(f"adam_step: parameter '{n}' has no grad")
        if t.grad.shape != t.values.shape:
            raise ContractViolation(f"adam_step: grad shape mismatch on '{n}'")
    state.step_count += 1
    b1 = np.float32(state.beta1)
    b2 = np.float32(state.beta2)
    c1 = np.float32(1.0 - state.beta1 ** state.step_count)
    c2 = np.float32(1.0 - state.beta2 ** state.step_count)
    lr = np.float32(state.lr)
    eps = np.float32(state.eps)
    for n, t in params:
        g = t.grad
        m = state.m[n]
        v = state.v[n]
        m *= b1
        m += (np.float32(1.0) - b1) * g
        v *= b2
        v += (np.float32(1.0) - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        t.values -= lr * update
        t.grad = None


def ema_update(target: ParamSet, online: ParamSet, tau: float) -> None:
    """target <- (1-tau)*target + tau*online, elementwise in place."""
    if target.names() != online.names():
        raise ContractViolation("ema_update: parameter sets do not match")
    if not (0.0 <= tau <= 1.0):
        raise ContractViolation(f"ema_update: tau={tau} outside [0, 1]")
    if tau == 0.0:
        return
    for (_, t), (_, o) in zip(target.items, online.items):
        if t.values.shape != o.values.shape:
            raise ContractViolation("ema_update: shape mismatch")
        if tau == 1.0:
            t.values[...] = o.values
        else:
            # computed as online + (1-tau)*(target-online): the residual to
            # the online params contracts by exactly one rounded multiply
            t.values[...] = o.values + np.float32(1.0 - tau) * (t.values - o.values)


# ---------------------------------------------------------------------------
# checkpoints

_MANIFEST = "manifest.json"
_BLOB = "params.bin"
_FORMAT_VERSION = 1


def _atomic_write(path: str, data: bytes) -> None:
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(directory: str, arrays: dict[str, np.ndarray],
                    meta: dict) -> None:
    """Write arrays (float32, little-endian, one blob) plus JSON metadata.

    `meta` must be JSON-serializable; it travels in the manifest unchanged.
    Entry order follows the dict's iteration order and is preserved on load.
    """
    os.makedirs(directory, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
        a = np.asarray(arr, dtype="<f4")
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": _FORMAT_VERSION,
        "entries": entries,
        "blob_bytes": offset,
        "meta": meta,
    }
    _atomic_write(os.path.join(directory, _BLOB), b"".join(chunks))
    _atomic_write(os.path.join(directory, _MANIFEST),
                  json.dumps(manifest, indent=1, sort_keys=True).encode())


def load_checkpoint(directory: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(os.path.join(directory, _MANIFEST), "rb") as f:
        manifest = json.loads(f.read())
    if manifest.get("format_version") != _FORMAT_VERSION:
        raise ContractViolation(
            f"unsupported checkpoint format: {manifest.get('format_version')}"
        )
    with open(os.path.join(directory, _BLOB), "rb") as f:
        blob = f.read()
    if len(blob) != manifest["blob_bytes"]:
        raise ContractViolation(
            f"checkpoint blob is {len(blob)} bytes, manifest says "
            f"{manifest['blob_bytes']}"
        )
    arrays = {}
    for e in manifest["entries"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = e["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        arrays[e["name"]] = arr.reshape(shape).astype(np.float32)
    return arrays, manifest["meta"]
