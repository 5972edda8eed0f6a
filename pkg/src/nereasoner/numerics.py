"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable primitive used by the tagger lives here. Operations run
eagerly on numpy arrays; when a :class:`Tape` is recording and at least one
operand requires a gradient, the op appends a node holding its inputs, its
output and a closure that maps the output gradient to input gradients.
``backward`` replays the nodes in reverse insertion order, which is a reverse
topological order because a node can only consume tensors created before it.
"""

from __future__ import annotations

import contextlib
import contextvars
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "ContractError",
    "CheckpointError",
    "Tensor",
    "Tape",
    "OptimizerState",
    "backward",
    "sgd_step",
    "adam_step",
    "matmul",
    "add",
    "sub",
    "mul",
    "add_bias",
    "scale",
    "sigmoid",
    "tanh",
    "log",
    "concat",
    "stack",
    "softmax",
    "log_softmax",
    "max_over",
    "max_over_rows",
    "tensor_sum",
    "take_rows",
    "index",
    "reshape",
    "transpose",
    "elementwise",
    "save_params",
    "load_params",
    "finite_difference_grad",
]


class ShapeError(ValueError):
    """Operand shapes do not agree."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated."""


class CheckpointError(IOError):
    """A parameter file could not be read back."""


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "nereasoner_active_tape", default=None
)


class Tensor:
    """Numpy array plus gradient bookkeeping.

    ``data`` is always a contiguous C-order array, so its flat view is the
    row-major value buffer.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; all routes go through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications for one training step."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    @contextlib.contextmanager
    def record(self):
        token = _ACTIVE_TAPE.set(self)
        try:
            yield self
        finally:
            _ACTIVE_TAPE.reset(token)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def _record(out: Tensor, inputs: Sequence[Tensor], fn) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    if tape.consumed:
        raise ContractError("tape already replayed; start a new Tape for a new forward pass")
    out.requires_grad = True
    out._tape = tape
    tape.nodes.append(_Node(tuple(inputs), out, fn))
    return out


def _is_leaf(t: Tensor) -> bool:
    return t.requires_grad and t._tape is None


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not produced under an active tape")
    if tape.consumed:
        raise ContractError("backward already ran on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        for t in node.inputs:
            if _is_leaf(t):
                leaves[id(t)] = t
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        g_in = node.backward(g_out)
        for t, g in zip(node.inputs, g_in):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g.astype(t.data.dtype, copy=True) if t.grad is None else t.grad + g
    tape.consumed = True
    tape.clear()


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = Tensor(a.data @ b.data)

    def bw(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _record(out, (a, b), bw)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _record(Tensor(a.data + b.data), (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _record(Tensor(a.data - b.data), (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(Tensor(ad * bd), (a, b), lambda g: (g * bd, g * ad))


def add_bias(x, bias) -> Tensor:
    """``x[..., j] + bias[j]``; the one broadcasting op, for affine layers."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not fit {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return _record(Tensor(x.data + bias.data), (x, bias), lambda g: (g, g.sum(axis=axes)))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _record(Tensor(x.data * c), (x,), lambda g: (g * c,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(Tensor(y), (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _record(Tensor(y), (x,), lambda g: (g * (1.0 - y * y),))


def log(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return _record(Tensor(np.log(d)), (x,), lambda g: (g / d,))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along the last axis; all other extents must agree."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no operands")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1 :] != ts[0].shape[:ax] + ts[0].shape[ax + 1 :]:
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _record(Tensor(np.concatenate([t.data for t in ts], axis=ax)), ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    for t in ts[1:]:
        _check_same(ts[0], t, "stack")
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record(Tensor(out), ts, bw)


def softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(Tensor(y), (x,), bw)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record(Tensor(y), (x,), bw)


def max_over(x, axis: int = 0) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the lowest-index maximizer."""
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ShapeError(f"max_over: empty axis {axis} in shape {x.shape}")
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _record(Tensor(out), (x,), bw)


def max_over_rows(x) -> Tensor:
    return max_over(x, axis=0)


def tensor_sum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.full_like(x.data, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record(Tensor(out), (x,), bw)


def take_rows(table, ids) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup); output shape ``ids.shape + (dim,)``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(Tensor(out), (table,), bw)


def index(x, key) -> Tensor:
    x = as_tensor(x)
    out = np.array(x.data[key], copy=True)
    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in parts)

    def bw(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[key] = g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return _record(Tensor(out), (x,), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _record(Tensor(x.data.reshape(shape)), (x,), lambda g: (g.reshape(src),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {x.shape}")
    return _record(Tensor(x.data.T), (x,), lambda g: (g.T,))


_ELEMENTWISE = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "add": add,
    "mul": mul,
    "concat": concat,
    "softmax": softmax,
    "max-over-rows": max_over_rows,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name; ``concat`` takes a sequence of tensors."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    if op == "concat":
        return fn(args[0] if len(args) == 1 else args)
    return fn(*args)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    learning_rate: float = 0.01
    clip_norm: float | None = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 0
    last_grad_norm: float = field(default=0.0, repr=False)
    # per-parameter moment buffers (adam), keyed by id of the parameter tensor
    moments: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ContractError("learning_rate must be non-negative")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ContractError("clip_norm must be positive or None")


def _clip_factor(params: list[Tensor], state: OptimizerState) -> tuple[float, float]:
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name or p.shape} has no gradient")
    norm = float(np.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params)))
    factor = 1.0
    if state.clip_norm is not None and norm > state.clip_norm:
        factor = state.clip_norm / norm
    return norm, factor


def _finish(params: list[Tensor], state: OptimizerState, norm: float) -> float:
    for p in params:
        p.grad = None
    state.steps += 1
    state.last_grad_norm = norm
    return norm


def sgd_step(params: Iterable[Tensor], state: OptimizerState) -> float:
    """Plain SGD with global-norm clipping. Returns the pre-clip gradient norm."""
    params = list(params)
    norm, factor = _clip_factor(params, state)
    lr = state.learning_rate
    if lr != 0.0:
        step = lr * factor
        for p in params:
            p.data -= step * p.grad
    return _finish(params, state, norm)


def adam_step(params: Iterable[Tensor], state: OptimizerState) -> float:
    """Adam on globally clipped gradients. Returns the pre-clip gradient norm."""
    params = list(params)
    norm, factor = _clip_factor(params, state)
    t = state.steps + 1
    b1, b2 = state.beta1, state.beta2
    lr = state.learning_rate * np.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    for p in params:
        g = p.grad * factor
        m, v = state.moments.get(id(p), (None, None))
        if m is None:
            m, v = np.zeros_like(p.data), np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        state.moments[id(p)] = (m, v)
        if state.learning_rate != 0.0:
            p.data -= lr * m / (np.sqrt(v) + state.eps)
    return _finish(params, state, norm)


OPTIMIZERS = {"sgd": sgd_step, "adam": adam_step}


# --------------------------------------------------------------------------
# parameter files

_MAGIC = b"NERPARAM"
FORMAT_VERSION = 1


def save_params(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``MAGIC | u32 version | u64 header length | JSON header | raw buffers``.

    Buffers are little-endian in header order; the header lists each record's
    name, dtype, shape and byte count.
    """
    records = []
    blobs = []
    for name, arr in params.items():
        a = np.ascontiguousarray(arr)
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes(order="C")
        records.append({"name": name, "dtype": a.dtype.str.lstrip("<>=|"), "shape": list(a.shape), "nbytes": len(blob)})
        blobs.append(blob)
    header = json.dumps({"version": FORMAT_VERSION, "meta": meta or {}, "params": records}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a parameter file (bad magic)")
    pos = len(_MAGIC)
    if len(raw) < pos + 12:
        raise CheckpointError(f"{path}: truncated preamble")
    version, hlen = struct.unpack_from("<IQ", raw, pos)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    pos += 12
    if len(raw) < pos + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[pos : pos + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    pos += hlen
    out = {}
    for rec in header["params"]:
        n = rec["nbytes"]
        if len(raw) < pos + n:
            raise CheckpointError(f"{path}: truncated at parameter {rec['name']!r}")
        dt = np.dtype("<" + rec["dtype"])
        arr = np.frombuffer(raw, dtype=dt, count=n // dt.itemsize, offset=pos).reshape(rec["shape"])
        out[rec["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
        pos += n
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return out, header["meta"]


# --------------------------------------------------------------------------
# gradient checking


def finite_difference_grad(f: Callable[[], float], x: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to every entry of ``x``.

    ``x.data`` is perturbed in place and restored exactly afterwards.
    """
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g
