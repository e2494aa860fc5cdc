"""Minimal reverse-mode differentiation over numpy arrays.

Every primitive builds a :class:`Tensor` node that remembers its parents and a
closure that pushes the output gradient back to them.  Graphs are built by
running ordinary Python code (define-by-run); :func:`backward` walks the
recorded DAG in reverse topological order and returns a :class:`GradientTape`
keyed by parameter name.

All arithmetic is float64.
"""
from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "DiffcoreError",
    "ShapeError",
    "NonFiniteError",
    "Tensor",
    "GradientTape",
    "BatchNormState",
    "constant",
    "parameter",
    "concat",
    "matmul",
    "affine",
    "relu",
    "exp",
    "log",
    "max_reduce",
    "softmax",
    "log_softmax",
    "l2_normalize",
    "batch_norm",
    "dropout",
    "cross_entropy",
    "backward",
    "numeric_gradient",
    "check_gradients",
    "save_checkpoint",
    "load_checkpoint",
    "L2_EPS",
]

L2_EPS = 1e-12

_ids = itertools.count()


class DiffcoreError(RuntimeError):
    """Base class for errors raised while building or differentiating a graph."""


class ShapeError(DiffcoreError, ValueError):
    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class NonFiniteError(DiffcoreError, FloatingPointError):
    def __init__(self, op: str, node_id: int):
        super().__init__(f"non-finite value produced by {op} (node {node_id})")
        self.op = op
        self.node_id = node_id


def _noop(_grad):
    return None


class Tensor:
    """A node of the computation graph holding a float64 array."""

    __slots__ = ("data", "grad", "parents", "_backward", "op", "node_id", "name", "requires_grad")

    def __init__(self, data, parents: tuple["Tensor", ...] = (), op: str = "const",
                 name: str | None = None, requires_grad: bool | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self._backward: Callable[[np.ndarray], None] = _noop
        self.op = op
        self.node_id = next(_ids)
        self.name = name
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        if parents and not np.all(np.isfinite(self.data)):
            raise NonFiniteError(op, self.node_id)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor<{self.op}{label} #{self.node_id} shape={self.shape}>"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), op="detach", requires_grad=False)

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = _lift(other)
        out = Tensor(self.data + other.data, (self, other), "add")

        def _bw(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(g, other.shape))

        out._backward = _bw
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = Tensor(-self.data, (self,), "neg")
        out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other) -> "Tensor":
        return self + (-_lift(other))

    def __rsub__(self, other) -> "Tensor":
        return _lift(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _lift(other)
        out = Tensor(self.data * other.data, (self, other), "mul")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        out._backward = _bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _lift(other)
        out = Tensor(self.data / other.data, (self, other), "div")

        def _bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * self.data / other.data**2, other.shape))

        out._backward = _bw
        return out

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, _lift(other))

    # -- shape and reductions -----------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")
        shape = self.shape

        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, shape))

        out._backward = _bw
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        out = Tensor(self.data.reshape(*shape), (self,), "reshape")
        out._backward = lambda g: self._accumulate(g.reshape(old))
        return out

    def expand(self, shape: tuple[int, ...]) -> "Tensor":
        old = self.shape
        out = Tensor(np.broadcast_to(self.data, shape).copy(), (self,), "expand")
        out._backward = lambda g: self._accumulate(_unbroadcast(g, old))
        return out

    def transpose(self) -> "Tensor":
        out = Tensor(self.data.T, (self,), "transpose")
        out._backward = lambda g: self._accumulate(g.T)
        return out

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def take(self, rows) -> "Tensor":
        """Gather rows along axis 0 (repeats allowed)."""
        rows = np.asarray(rows, dtype=np.intp)
        shape = self.shape
        out = Tensor(self.data[rows], (self,), "take")

        def _bw(g):
            acc = np.zeros(shape)
            np.add.at(acc, rows, g)
            self._accumulate(acc)

        out._backward = _bw
        return out

    def relu(self) -> "Tensor":
        return relu(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, op="const", name=name, requires_grad=False)


def parameter(data, name: str) -> Tensor:
    return Tensor(data, op="param", name=name, requires_grad=True)


# -- primitives ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"cannot multiply {a.shape} by {b.shape}"
                         + (f" (operand {b.name!r})" if b.name else ""))
    out = Tensor(a.data @ b.data, (a, b), "matmul")

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    out._backward = _bw
    return out


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if bias.shape != (weight.shape[-1],):
        raise ShapeError("affine", f"bias {bias.shape} does not match weight {weight.shape}")
    return matmul(x, weight) + bias


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0), (x,), "relu")
    out._backward = lambda g: x._accumulate(g * mask)
    return out


def exp(x: Tensor) -> Tensor:
    value = np.exp(x.data)
    out = Tensor(value, (x,), "exp")
    out._backward = lambda g: x._accumulate(g * value)
    return out


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(x.data)
    out = Tensor(value, (x,), "log")
    out._backward = lambda g: x._accumulate(g / x.data)
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", str(exc)) from None
    out = Tensor(data, tuple(tensors), "concat")
    bounds = np.cumsum([0] + sizes)

    def _bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            t._accumulate(g[tuple(index)])

    out._backward = _bw
    return out


def max_reduce(x: Tensor, axis: int) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal entry."""
    arg = np.argmax(x.data, axis=axis)
    value = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis)
    out = Tensor(np.squeeze(value, axis=axis), (x,), "max")

    def _bw(g):
        acc = np.zeros_like(x.data)
        np.put_along_axis(acc, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        x._accumulate(acc)

    out._backward = _bw
    return out


def _log_softmax_array(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    prob = np.exp(_log_softmax_array(x.data, axis))
    out = Tensor(prob, (x,), "softmax")

    def _bw(g):
        x._accumulate(prob * (g - (g * prob).sum(axis=axis, keepdims=True)))

    out._backward = _bw
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    value = _log_softmax_array(x.data, axis)
    out = Tensor(value, (x,), "log_softmax")

    def _bw(g):
        x._accumulate(g - np.exp(value) * g.sum(axis=axis, keepdims=True))

    out._backward = _bw
    return out


def l2_normalize(x: Tensor, axis: int = -1, eps: float = L2_EPS) -> Tensor:
    """Divide by max(||x||, eps) along ``axis``."""
    norm = np.sqrt((x.data**2).sum(axis=axis, keepdims=True))
    clipped = norm <= eps
    denom = np.where(clipped, eps, norm)
    y = x.data / denom
    out = Tensor(y, (x,), "l2_normalize")

    def _bw(g):
        # below eps the map is linear: x / eps
        proj = g - y * (g * y).sum(axis=axis, keepdims=True)
        x._accumulate(np.where(clipped, g, proj) / denom)

    out._backward = _bw
    return out


@dataclass
class BatchNormState:
    """Running statistics of one batch-normalization layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, width: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(width), np.ones(width), momentum, eps)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool) -> Tensor:
    """Normalize the rows of a 2-D input feature-wise.

    Training mode normalizes with the (biased) batch variance and folds the
    unbiased estimate into ``state``; evaluation mode uses ``state`` only.
    """
    if x.ndim != 2 or x.shape[1] != gamma.shape[0]:
        raise ShapeError("batch_norm", f"input {x.shape} vs width {gamma.shape}")
    if not training:
        scale = 1.0 / np.sqrt(state.running_var + state.eps)
        return (x - state.running_mean) * (gamma * scale) + beta

    n = x.shape[0]
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv_std
    out = Tensor(xhat * gamma.data + beta.data, (x, gamma, beta), "batch_norm")

    m = state.momentum
    unbiased = var * n / (n - 1) if n > 1 else var
    state.running_mean = (1 - m) * state.running_mean + m * mu
    state.running_var = (1 - m) * state.running_var + m * unbiased

    def _bw(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            x._accumulate(inv_std * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0)))

    out._backward = _bw
    return out


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p == 0.0:
        return x
    if rng is None:
        raise DiffcoreError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * constant(keep)


def cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", f"logits {logits.shape} vs labels {labels.shape}")
    if labels.size == 0:
        raise ShapeError("cross_entropy", "no labelled rows")
    logp = _log_softmax_array(logits.data, 1)
    rows = np.arange(labels.size)
    w = np.ones(labels.size) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    out = Tensor(-(w * logp[rows, labels]).sum() / total, (logits,), "cross_entropy")

    def _bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        logits._accumulate(g * grad * (w / total)[:, None])

    out._backward = _bw
    return out


# -- differentiation ----------------------------------------------------------

@dataclass
class GradientTape:
    """Gradients of a scalar loss keyed by parameter name."""

    grads: dict[str, np.ndarray] = field(default_factory=dict)
    scale: float = 1.0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def __contains__(self, name: str) -> bool:
        return name in self.grads

    def items(self):
        return self.grads.items()


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node.parents:
            if parent.node_id not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None,
             frozen: Iterable[str] = ()) -> GradientTape:
    """Differentiate the scalar ``loss`` with respect to ``params``.

    ``frozen`` names get exactly-zero gradients.  Parameters that do not
    influence the loss get zero gradients as well.
    """
    if loss.data.size != 1:
        raise DiffcoreError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.parents:
        raise DiffcoreError("loss has no recorded forward computation")
    params = dict(params or {})
    for t in params.values():
        t.grad = None
    order = _topological(loss)
    for node in order:
        if node is not loss:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.grad is not None:
            node._backward(node.grad)
    frozen = set(frozen)
    tape = GradientTape()
    for name, t in params.items():
        if name in frozen or t.grad is None:
            tape.grads[name] = np.zeros_like(t.data)
        else:
            tape.grads[name] = t.grad
    return tape


def numeric_gradient(loss_fn: Callable[[dict[str, np.ndarray]], float],
                     arrays: Mapping[str, np.ndarray], step: float = 1e-5,
                     entries: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Central finite differences of ``loss_fn`` w.r.t. every array entry.

    ``entries`` optionally restricts each array to a set of flat indices;
    other positions are left at zero.
    """
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in arrays.items()}
    result = {}
    for name, value in base.items():
        grad = np.zeros_like(value)
        flat = value.reshape(-1)
        gflat = grad.reshape(-1)
        idx = range(flat.size) if entries is None else entries[name]
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn(base)
            flat[i] = orig - step
            down = loss_fn(base)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        result[name] = grad
    return result


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 0.0) -> float:
    """Norm-wise relative difference ``|a-b| / max(|a|, |b|, floor)`` (0 when all vanish).

    ``floor`` keeps structurally zero gradients (rounding noise on both
    sides) from reading as a 100% error.
    """
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(loss_fn: Callable[[dict[str, Tensor]], Tensor],
                    arrays: Mapping[str, np.ndarray], step: float = 1e-5,
                    max_entries: int | None = None,
                    rng: np.random.Generator | None = None, floor: float = 0.0) -> dict[str, float]:
    """Compare :func:`backward` against central differences.

    ``loss_fn`` receives a dict of parameter tensors and must be a pure
    function of them (fix any dropout generator inside it).  Returns the
    relative error per array.
    """
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    tensors = {k: parameter(v.copy(), k) for k, v in arrays.items()}
    tape = backward(loss_fn(tensors), tensors)

    entries = None
    if max_entries is not None:
        rng = rng or np.random.default_rng(0)
        entries = {k: (np.arange(v.size) if v.size <= max_entries
                       else rng.choice(v.size, max_entries, replace=False))
                   for k, v in arrays.items()}

    def scalar(values):
        return float(loss_fn({k: constant(v) for k, v in values.items()}).data)

    numeric = numeric_gradient(scalar, arrays, step, entries)
    errors = {}
    for name in arrays:
        a = tape[name].reshape(-1)
        n = numeric[name].reshape(-1)
        if entries is not None:
            a, n = a[entries[name]], n[entries[name]]
        errors[name] = relative_error(a, n, floor)
    return errors


# -- checkpoint container -----------------------------------------------------

_MAGIC = b"RCKP"
_VERSION = 1


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], header: Mapping | None = None) -> None:
    """Write named float64 arrays to a little-endian binary container.

    Layout: magic, u16 version, u32 header length, UTF-8 JSON header,
    u32 record count, then per record: u16 name length, name, u8 ndim,
    ndim x u64 shape, row-major float64 values.
    """
    blob = json.dumps(dict(header or {}), sort_keys=True).encode()
    parts = [_MAGIC, struct.pack("<HI", _VERSION, len(blob)), blob,
             struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        value = np.asarray(arrays[name], dtype="<f8", order="C")
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        parts.append(value.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    header = json.loads(raw[pos:pos + hlen].decode())
    pos += hlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return arrays, header
