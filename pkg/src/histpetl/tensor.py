"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient, the output remembers its parents and a backward rule, so the graph
(the tape) is rebuilt on each forward pass. :func:`backward` walks it once in
reverse topological order and accumulates into leaf ``grad`` buffers, which is
what makes parameter sharing across blocks work with no special casing.

Broadcasting is deliberately narrow: binary elementwise ops accept equal
shapes or a rank-0 operand. Anything else goes through :func:`broadcast_to`.
"""

from __future__ import annotations

import contextlib
import io
import math
import os
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import (
    ContractError,
    DimensionError,
    FormatError,
    NonFiniteError,
    TruncationError,
)

DTYPE = np.float64

_debug = os.environ.get("HISTPETL_DEBUG", "") not in ("", "0")
# op names whose backward rule is deliberately corrupted (grad-check sensitivity hook)
_faults: set[str] = set()
_fault_factor = 1.5


def set_debug(flag: bool) -> None:
    """Toggle NaN/Inf checks at every operation output."""
    global _debug
    _debug = bool(flag)


@contextlib.contextmanager
def inject_fault(*ops: str, factor: float = 1.5):
    """Scale the backward rule of the named ops by ``factor`` inside the block.

    Only meant for checking that gradient checks actually catch broken rules.
    """
    global _fault_factor
    _faults.update(ops)
    old = _fault_factor
    _fault_factor = factor
    try:
        yield
    finally:
        _faults.difference_update(ops)
        _fault_factor = old


class Tensor:
    """Row-major float64 array, optionally participating in the tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] | None = None
        self._backward: Callable | None = None
        self._op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._parents = None
        t._backward = None
        t._op = "const"
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def square(self):
        return square(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    data = np.asarray(data, dtype=DTYPE)
    if _debug and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced NaN or Inf")
    out = Tensor._wrap(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# -- elementwise -------------------------------------------------------

def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # undo the implicit rank-0 broadcast
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_fit(g, a.shape), _fit(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (_fit(g, a.shape), _fit(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def bw(g):
        ga = _fit(g * b.data, a.shape) if a.requires_grad else None
        gb = _fit(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: zero in denominator")
    out = a.data / b.data

    def bw(g):
        ga = _fit(g / b.data, a.shape) if a.requires_grad else None
        gb = _fit(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw, "div")


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _node(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,), "scale")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _node(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch by name: add, sub, mul, div, neg, exp, square, scale."""
    table = {"add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
             "exp": exp, "square": square, "scale": scale}
    try:
        fn = table[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF."""
    x = as_tensor(x)
    cdf = ndtr(x.data)

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return _node(x.data * cdf, (x,), bw, "gelu")


# -- linear algebra and shape ------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if (a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim
            or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]):
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc
    return _node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    out = np.array(x.data[idx])
    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return _node(out, (x,), bw, "getitem")


def broadcast_to(x, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-rule broadcast; the only general shape-alignment op."""
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from exc
    lead = len(shape) - x.ndim
    kept = tuple(i for i, n in enumerate(x.shape) if n == 1 and shape[lead + i] != 1)

    def bw(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if kept:
            g = g.sum(axis=kept, keepdims=True)
        return (g,)

    return _node(out, (x,), bw, "broadcast_to")


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ContractError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def tsum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is not None:
        axis = _norm_axis(axis, x.ndim)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw, "sum")


def reduce_mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is not None:
        axis = _norm_axis(axis, x.ndim)
    n = x.size if axis is None else x.shape[axis]

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _node(x.data.mean(axis=axis, keepdims=keepdims), (x,), bw, "mean")


# -- normalisation -----------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), bw, "softmax")


def _log_softmax(v: np.ndarray, axis: int) -> np.ndarray:
    # the max term contributes exactly 1 to the normaliser; log1p over the
    # remainder, subtracted from the exactly-shifted logits, keeps full
    # relative precision when one logit dominates
    idx = np.expand_dims(np.argmax(v, axis=axis), axis)
    shifted = v - np.take_along_axis(v, idx, axis)
    e = np.exp(shifted)
    np.put_along_axis(e, idx, 0.0, axis)
    return shifted - np.log1p(e.sum(axis=axis, keepdims=True))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    out = _log_softmax(x.data, axis)

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), bw, "log_softmax")


def pick(x, index) -> Tensor:
    """Select one entry per row along the last axis: out[i] = x[i, index[i]]."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise DimensionError(f"pick: index shape {index.shape} vs tensor {x.shape}")
    exp_idx = index[..., None]
    out = np.take_along_axis(x.data, exp_idx, -1)[..., 0]

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, exp_idx, g[..., None], -1)
        return (full,)

    return _node(out, (x,), bw, "pick")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the trailing axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: feature extent {d} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    red = tuple(range(x.ndim - 1))

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).sum(axis=red) if gain.requires_grad else None
        gb = g.sum(axis=red) if bias.requires_grad else None
        return gx, gg, gb

    return _node(xhat * gain.data + bias.data, (x, gain, bias), bw, "layer_norm")


# -- the tape ----------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents or ():
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every gradient-requiring leaf."""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward root is not on the tape (no input requires grad)")
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._parents is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        grads = node._backward(g)
        if node._op in _faults:
            grads = tuple(None if pg is None else pg * _fault_factor for pg in grads)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """Largest relative disagreement between tape and central-difference gradients.

    ``f`` rebuilds the graph from the current parameter values on every call.
    The per-coordinate error is ``|a - n| / max(1, |a|, |n|)``.
    """
    if h <= 0:
        raise ContractError("grad_check step h must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("grad_check: objective is not finite")
    if loss.requires_grad:
        backward(loss)
    # otherwise f does not depend on any parameter and every analytic gradient is 0
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        for idx in np.ndindex(p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = _scalar(f)
            p.data[idx] = orig - h
            fm = _scalar(f)
            p.data[idx] = orig
            num = (fp - fm) / (2.0 * h)
            a = float(analytic[idx])
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst


def _scalar(f: Callable[[], Tensor]) -> float:
    v = f().item()
    if not math.isfinite(v):
        raise NonFiniteError("grad_check: objective is not finite")
    return v


# -- serialisation -----------------------------------------------------

TENSOR_MAGIC = b"TNSR"
TENSOR_VERSION = 1
_HEADER = struct.Struct("<4sII")


def tensor_to_bytes(t: Tensor) -> bytes:
    shape = t.shape
    head = _HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, len(shape))
    return head + struct.pack(f"<{len(shape)}Q", *shape) + t.data.astype("<f8").tobytes()


def read_tensor(stream: io.BufferedIOBase) -> Tensor:
    raw = stream.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise TruncationError("tensor header truncated")
    magic, version, rank = _HEADER.unpack(raw)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    raw = stream.read(8 * rank)
    if len(raw) < 8 * rank:
        raise TruncationError("tensor extents truncated")
    shape = struct.unpack(f"<{rank}Q", raw)
    if any(n == 0 for n in shape):
        raise FormatError(f"tensor extents must be positive, got {shape}")
    count = math.prod(shape)
    raw = stream.read(8 * count)
    if len(raw) < 8 * count:
        raise TruncationError(f"tensor payload truncated: {len(raw)} of {8 * count} bytes")
    return Tensor(np.frombuffer(raw, dtype="<f8").reshape(shape))


def tensor_from_bytes(buf: bytes) -> Tensor:
    return read_tensor(io.BytesIO(buf))


def save_tensor(t: Tensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)
