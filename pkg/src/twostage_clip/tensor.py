"""Dense tensors with a dynamic reverse-mode tape.

Only the operations the two towers and the contrastive loss need are
provided. Every op records a closure mapping the output gradient to the
gradients of its inputs; `backward` walks the tape in reverse topological
order and frees it afterwards.

All arithmetic runs in float64.
"""

from __future__ import annotations

import contextlib
import itertools
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "BatchNormState",
    "ContractViolation",
    "backward",
    "no_grad",
    "matmul",
    "add",
    "mul",
    "scale",
    "exp",
    "clamp",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "batch_norm",
    "embedding",
    "concatenate",
    "l2_normalize",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "save_tensor",
    "load_tensor",
]


class ContractViolation(ValueError):
    """An operation was called outside its precondition."""


_node_ids = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A float64 array that may take part in the gradient tape.

    Leaves created by the user carry ``requires_grad``; any op output that
    depends on such a leaf records its parents and a backward closure.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- construction -----------------------------------------------------

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn: Callable) -> "Tensor":
        """Wrap an op result; ``backward_fn(g)`` returns one gradient per parent."""
        out = cls(data)
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        raise TypeError("division is only supported by Python scalars")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor.from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor.from_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor.from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return scale(self.sum(axis=axis, keepdims=keepdims), 1.0 / count)

    def exp(self) -> "Tensor":
        return exp(self)

    def clamp(self, lo=None, hi=None) -> "Tensor":
        return clamp(self, lo, hi)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise and linear ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor.from_op(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(x: Tensor, factor: float) -> Tensor:
    return Tensor.from_op(x.data * factor, (x,), lambda g: (g * factor,))


def matmul(a, b) -> Tensor:
    """Batched matrix product following ``np.matmul`` broadcasting (ndim >= 2)."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ContractViolation("matmul operands need at least two dimensions")

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor.from_op(ad @ bd, (a, b), back)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,))


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes inside the interval, zero outside."""
    d = x.data
    out = np.clip(d, lo, hi) if (lo is not None or hi is not None) else d.copy()
    inside = np.ones(d.shape, dtype=bool)
    if lo is not None:
        inside &= d >= lo
    if hi is not None:
        inside &= d <= hi
    return Tensor.from_op(out, (x,), lambda g: (np.where(inside, g, 0.0),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * d * d)
    return Tensor.from_op(d * cdf, (x,), lambda g: (g * (cdf + d * pdf),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    shifted = d - d.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (x,), back)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """``x / sqrt(sum(x**2) + eps)`` along `axis`."""
    d = x.data
    norm = np.sqrt((d * d).sum(axis=axis, keepdims=True) + eps)
    out = d / norm

    def back(g):
        dot = (g * d).sum(axis=axis, keepdims=True)
        return (g / norm - d * dot / norm**3,)

    return Tensor.from_op(out, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine gain and bias."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = d.shape[-1]

    def back(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = inv / n * (
            n * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return Tensor.from_op(out, (x, gamma, beta), back)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer (channels-last)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    update_stats: bool = True
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), momentum=momentum, eps=eps)


def batch_norm(
    x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool
) -> Tensor:
    """Batch normalization over every axis except the last (channel) one.

    In training mode the batch statistics normalize the input; the running
    statistics follow the momentum rule only when ``state.update_stats`` is
    set. Outside training the running statistics are used.
    """
    d = x.data
    channels = d.shape[-1]
    if state.running_mean.shape != (channels,) or state.running_var.shape != (channels,):
        raise ContractViolation(
            f"batch_norm: input has {channels} channels, state has {state.running_mean.shape[0]}"
        )
    red = tuple(range(d.ndim - 1))
    if training:
        count = d.size // channels
        mu = d.mean(axis=red)
        xc = d - mu
        var = (xc * xc).mean(axis=red)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = xc * inv
        if state.update_stats:
            m = state.momentum
            unbiased = var * count / max(count - 1, 1)
            state.running_mean = (1.0 - m) * state.running_mean + m * mu
            state.running_var = (1.0 - m) * state.running_var + m * unbiased
    else:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (d - state.running_mean) * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        gx_hat = g * gamma.data
        if training:
            gx = inv / count * (
                count * gx_hat - gx_hat.sum(axis=red) - xhat * (gx_hat * xhat).sum(axis=red)
            )
        else:
            gx = gx_hat * inv
        return gx, ggamma, gbeta

    return Tensor.from_op(out, (x, gamma, beta), back)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``; `ids` is an integer array."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise ContractViolation(f"embedding id out of range [0, {rows})")

    def back(g):
        gw = np.zeros(weight.shape)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return Tensor.from_op(weight.data[ids], (weight,), back)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def _getitem(x: Tensor, index) -> Tensor:
    shape = x.shape
    basic = _is_basic_index(index)

    def back(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return Tensor.from_op(x.data[index], (x,), back)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[int, Tensor]:
    """Run the reverse pass from a scalar `loss`.

    Gradients are accumulated into ``.grad`` of every requires-grad leaf that
    the loss depends on. The returned map is keyed by ``node_id``; leaves
    listed in `leaves` but not reached by the graph get a zero gradient.
    The tape is freed afterwards.
    """
    if loss.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    result: dict[int, Tensor] = {}
    for node in reversed(order):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
                result[node.node_id] = Tensor(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg
        node._parents = ()
        node._backward = None

    for leaf in leaves or ():
        if leaf.node_id not in result:
            result[leaf.node_id] = Tensor(np.zeros(leaf.shape))
    return result


# ---------------------------------------------------------------------------
# binary format: b"DTW1", u32 rank, rank x u64 dims, u8 dtype tag, payload

_MAGIC = b"DTW1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TensorFormatError(ValueError):
    pass


def tensor_to_bytes(array, dtype: str = "f64") -> bytes:
    array = np.asarray(array.data if isinstance(array, Tensor) else array)
    tag = {"f32": 0, "f64": 1}[dtype]
    header = _MAGIC + struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[tag]).tobytes()
    return header + struct.pack("<B", tag) + payload


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 9 or buf[:4] != _MAGIC:
        raise TensorFormatError("bad tensor magic")
    (rank,) = struct.unpack_from("<I", buf, 4)
    offset = 8 + 8 * rank
    if len(buf) < offset + 1:
        raise TensorFormatError("truncated tensor header")
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    tag = buf[offset]
    if tag not in _DTYPES:
        raise TensorFormatError(f"unknown dtype tag {tag}")
    dt = _DTYPES[tag]
    count = int(np.prod(dims)) if rank else 1
    payload = buf[offset + 1 :]
    if len(payload) != count * dt.itemsize:
        raise TensorFormatError(f"payload holds {len(payload)} bytes, expected {count * dt.itemsize}")
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(np.float64)


def save_tensor(path, array, dtype: str = "f64") -> None:
    Path(path).write_bytes(tensor_to_bytes(array, dtype))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
