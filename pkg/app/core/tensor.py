"""
Dense tensors with tape-based reverse-mode differentiation.

Tensors wrap contiguous numpy arrays (float32 by default). An operation is
recorded on the active Tape whenever one of its inputs tracks gradients:

    with Tape() as tape:
        loss = tensor.sum(tensor.mul(x, x))
    grads = tape.backward(loss)        # {node_id: Tensor}
    grads[x.node_id]                   # == 2x

float64_mode() switches the default storage dtype; it exists for the
finite-difference gradient checks.
"""

import itertools
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from app.core.errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = [np.float32]
_ACTIVE_TAPES: List["Tape"] = []
_NODE_IDS = itertools.count(1)

SQRT_2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def get_default_dtype():
    return _DEFAULT_DTYPE[-1]


@contextmanager
def float64_mode() -> Iterator[None]:
    """Create new tensors in 64-bit precision inside the block."""
    _DEFAULT_DTYPE.append(np.float64)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            # float arrays keep their precision; lists, scalars and ints take the default
            keep = isinstance(data, np.ndarray) and arr.dtype in (np.float32, np.float64)
            dtype = arr.dtype if keep else get_default_dtype()
        self.data: np.ndarray = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return getitem(self, key)


Operand = Union[Tensor, float, int, np.ndarray]
Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeRecord:
    """One primitive application: input node ids, output node id and its adjoint rule."""
    op: str
    inputs: Tuple[Optional[int], ...]
    output: int
    backward: Backward


@dataclass(eq=False)
class Tape:
    records: List[TapeRecord] = field(default_factory=list)
    leaves: Dict[int, Tensor] = field(default_factory=dict)
    _owned: set = field(default_factory=set)

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def watch(self, t: Tensor) -> Optional[int]:
        """Assign a node id to a gradient-tracking leaf the first time this tape sees it."""
        if not t.requires_grad:
            return None
        if t.node_id not in self._owned:
            t.node_id = next(_NODE_IDS)
            self._owned.add(t.node_id)
            self.leaves[t.node_id] = t
        return t.node_id

    def record(self, op: str, inputs: Sequence[Tensor], out: Tensor, backward: Backward) -> None:
        ids = tuple(self.watch(t) for t in inputs)
        out.requires_grad = True
        out.node_id = next(_NODE_IDS)
        self._owned.add(out.node_id)
        self.records.append(TapeRecord(op, ids, out.node_id, backward))

    def reset(self) -> None:
        self.records.clear()
        self.leaves.clear()
        self._owned.clear()

    def backward(self, loss: Tensor) -> Dict[int, Tensor]:
        """
        Propagate adjoints from a scalar loss. Returns gradients for every
        gradient-tracking leaf recorded on this tape; the tape is reset afterwards.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node_id not in self._owned:
            raise ContractError("loss was not recorded on this tape")
        adjoints: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = adjoints.pop(rec.output, None)
            if g is None:
                continue
            for node, gi in zip(rec.inputs, rec.backward(g)):
                if node is None or gi is None:
                    continue
                if node in adjoints:
                    adjoints[node] = adjoints[node] + gi
                else:
                    adjoints[node] = gi
        grads = {}
        for node, leaf in self.leaves.items():
            g = adjoints.get(node)
            grads[node] = Tensor(np.zeros_like(leaf.data) if g is None else g.astype(leaf.dtype, copy=False))
        logger.debug(f"backward: {len(self.records)} records, {len(grads)} leaves")
        self.reset()
        return grads

    def gradients(self, loss: Tensor, wrt: Sequence[Tensor]) -> List[Tensor]:
        ids = [t.node_id for t in wrt]
        grads = self.backward(loss)
        return [grads.get(i) if i is not None else Tensor(np.zeros_like(t.data)) for i, t in zip(ids, wrt)]


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def as_tensor(x: Operand, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or get_default_dtype()), dtype=dtype)


def _finish(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward: Backward) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _finish("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _finish("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _finish("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def _pair(a: Operand, b: Operand) -> Tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    return as_tensor(a, like), as_tensor(b, like)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents of {a.shape} and {b.shape} do not agree")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _finish("matmul", (a, b), ad @ bd, backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w.T + b with w laid out [out x in]."""
    y = matmul(x, transpose(w))
    return add(y, b) if b is not None else y


# ---------------------------------------------------------------------------
# Shape movement
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _finish("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inverse = tuple(np.argsort(axes))
    return _finish("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def getitem(x: Tensor, key) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return _finish("getitem", (x,), np.array(x.data[key]), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _finish("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis),
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _finish("broadcast_to", (x,), np.broadcast_to(x.data, shape).copy(),
                   lambda g: (_unbroadcast(g, src),))


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _finish("sum", (x,), np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), backward)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# Nonlinearities and normalisation
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _finish("softmax", (x,), y,
                   lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match last extent {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _finish("layer_norm", (x, gamma, beta), xhat * gd + beta.data, backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), using erf (not the tanh approximation)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / SQRT_2))
    pdf = INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return _finish("gelu", (x,), (xd * cdf).astype(xd.dtype), lambda g: (g * (cdf + xd * pdf),))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return _finish("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


# ---------------------------------------------------------------------------
# Losses (fused for stability)
# ---------------------------------------------------------------------------

PROB_CLAMP = 1e-7


def binary_cross_entropy(probs: Tensor, targets: Tensor) -> Tensor:
    """Mean over all cells of -[t log p + (1-t) log(1-p)], p clamped to [1e-7, 1-1e-7]."""
    if probs.shape != targets.shape:
        raise DimensionError(f"bce: probs {probs.shape} vs targets {targets.shape}")
    p = np.clip(probs.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = targets.data
    n = p.size
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum() / n
    inside = (probs.data > PROB_CLAMP) & (probs.data < 1.0 - PROB_CLAMP)

    def backward(g):
        gp = g * (p - t) / (p * (1.0 - p)) / n
        return np.where(inside, gp, 0.0).astype(p.dtype), None

    return _finish("bce", (probs, targets), np.asarray(loss, dtype=p.dtype), backward)


def cross_entropy(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean over rows of -sum(t * log_softmax(z)); targets may be soft (mixup)."""
    if logits.shape != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_z = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    t = targets.data
    rows = z.shape[0] if z.ndim > 1 else 1
    loss = -(t * log_z).sum() / rows
    sm = np.exp(log_z)

    def backward(g):
        return g * (sm * t.sum(axis=-1, keepdims=True) - t) / rows, None

    return _finish("cross_entropy", (logits, targets), np.asarray(loss, dtype=z.dtype), backward)
