"""Dense float tensors with reverse-mode automatic differentiation.

Each op returns a fresh :class:`Tensor`. When gradient recording is on and any
input requires gradients, the output keeps references to its parents and a
closure mapping the upstream gradient to one gradient per parent. A
:class:`ComputationTape` is the topologically ordered list of those records,
rebuilt from the loss on demand.

Arrays are rank <= 3. Multi-head attention folds heads into the leading axis
(see :func:`split_heads`) so that the rank limit holds everywhere.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

MAX_RANK = 3
LAYER_NORM_EPS = 1e-5

_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.dtype = np.dtype(np.float32)


_state = _State()


def get_default_dtype() -> np.dtype:
    return _state.dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors (float32 or float64)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    prev = _state.dtype
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or _state.dtype)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

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
        return scale(self, -1.0)

    def __truediv__(self, c):
        return scale(self, 1.0 / c)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, "mul", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF via ``erf``."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    data = (x.data * cdf).astype(x.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype, copy=False),)

    return _result(data, "gelu", (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _result(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting any leading batch axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        ga = np.matmul(g, _swap(b.data)) if a.requires_grad else None
        gb = np.matmul(_swap(a.data), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _result(data, "matmul", (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _result(np.ascontiguousarray(_swap(x.data)), "transpose", (x,), lambda g: (_swap(g),))


def softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, "softmax_rows", (x,), bw)


def layer_norm_rows(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Standardize each row (population variance), then scale and shift."""
    if eps <= 0:
        raise ContractError("layer_norm_rows: eps must be positive")
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(
            f"layer_norm_rows: gamma {gamma.shape} / beta {beta.shape} do not match {n} columns"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centered * inv_std
    data = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv_std * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        flat_g = g.reshape(-1, n)
        ggamma = (flat_g * xhat.reshape(-1, n)).sum(axis=0)
        gbeta = flat_g.sum(axis=0)
        return gx, ggamma, gbeta

    return _result(data, "layer_norm_rows", (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# structural


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack along the row axis (second to last), in argument order."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat_rows: nothing to concatenate")
    head = parts[0]
    for p in parts[1:]:
        if p.ndim != head.ndim or p.shape[:-2] != head.shape[:-2] or p.shape[-1] != head.shape[-1]:
            raise DimensionError(
                f"concat_rows: shape {p.shape} does not stack with {head.shape}"
            )
    data = np.concatenate([p.data for p in parts], axis=-2)
    bounds = np.cumsum([0] + [p.shape[-2] for p in parts])

    def bw(g):
        return tuple(g[..., bounds[i]:bounds[i + 1], :] for i in range(len(parts)))

    return _result(data, "concat_rows", parts, bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Join along the last axis (row-wise feature concatenation)."""
    parts = [as_tensor(p) for p in parts]
    head = parts[0]
    for p in parts[1:]:
        if p.shape[:-1] != head.shape[:-1]:
            raise DimensionError(f"concat_cols: shape {p.shape} does not join with {head.shape}")
    data = np.concatenate([p.data for p in parts], axis=-1)
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])

    def bw(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result(data, "concat_cols", parts, bw)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    rows = x.shape[-2]
    if not 0 <= start < stop <= rows:
        raise ContractError(f"slice_rows: [{start}:{stop}] outside {rows} rows")
    data = np.ascontiguousarray(x.data[..., start:stop, :])

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop, :] = g
        return (full,)

    return _result(data, "slice_rows", (x,), bw)


def expand_batch(x: Tensor, batch: int) -> Tensor:
    """Replicate a rank-2 tensor along a new leading batch axis."""
    if x.ndim != 2:
        raise DimensionError(f"expand_batch: expected rank 2, got {x.shape}")
    data = np.broadcast_to(x.data, (batch,) + x.shape).copy()
    return _result(data, "expand_batch", (x,), lambda g: (g.sum(axis=0),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)
    if data.ndim > MAX_RANK:
        raise DimensionError(f"reshape: rank {data.ndim} exceeds {MAX_RANK}")
    return _result(data, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``[B, t, heads*dk] -> [B*heads, t, dk]`` (or ``[t, h*dk] -> [h, t, dk]``)."""
    *lead, t, width = x.shape
    if width % heads:
        raise DimensionError(f"split_heads: {width} columns not divisible by {heads} heads")
    dk = width // heads
    b = lead[0] if lead else 1
    data = x.data.reshape(b, t, heads, dk).transpose(0, 2, 1, 3).reshape(b * heads, t, dk)

    def bw(g):
        return (g.reshape(b, heads, t, dk).transpose(0, 2, 1, 3).reshape(x.shape),)

    return _result(np.ascontiguousarray(data), "split_heads", (x,), bw)


def merge_heads(x: Tensor, heads: int, batched: bool = True) -> Tensor:
    """Inverse of :func:`split_heads`; heads are laid out column-wise."""
    bh, t, dk = x.shape
    if bh % heads:
        raise DimensionError(f"merge_heads: leading extent {bh} not divisible by {heads}")
    b = bh // heads
    out_shape = (b, t, heads * dk) if batched else (t, heads * dk)
    data = x.data.reshape(b, heads, t, dk).transpose(0, 2, 1, 3).reshape(out_shape)

    def bw(g):
        return (g.reshape(b, t, heads, dk).transpose(0, 2, 1, 3).reshape(x.shape),)

    return _result(np.ascontiguousarray(data), "merge_heads", (x,), bw)


def mean_rows(x: Tensor) -> Tensor:
    """Average over the row axis, keeping it with extent 1."""
    rows = x.shape[-2]
    data = x.data.mean(axis=-2, keepdims=True)
    inv = x.dtype.type(1.0 / rows)
    return _result(data, "mean_rows", (x,), lambda g: (np.broadcast_to(g * inv, x.shape).copy(),))


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.dtype)
    return _result(data, "sum", (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    inv = x.dtype.type(1.0 / x.size)
    data = np.asarray(x.data.mean(), dtype=x.dtype)
    return _result(data, "mean", (x,), lambda g: (np.full(x.shape, g * inv, dtype=x.dtype),))


# ---------------------------------------------------------------------------
# backward pass


class ComputationTape:
    """Recorded ops reachable from a root, in topological order (inputs first)."""

    def __init__(self, entries: list[Tensor]):
        self.entries = entries

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, t: Tensor) -> bool:
        return any(e is t for e in self.entries)

    def leaves(self) -> list[Tensor]:
        return [e for e in self.entries if e.requires_grad and e._backward is None]


def backward(loss: Tensor, tape: ComputationTape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients add onto whatever is already stored; call :func:`zero_grad`
    between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if tape is None:
        tape = ComputationTape.trace(loss)
    elif loss not in tape:
        raise ContractError("backward: loss is not on the given tape")
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.entries):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle


def gradient_errors(
    f: Callable[[Sequence[Tensor]], Tensor | float],
    params: Sequence[Tensor],
    h: float = 1e-3,
    order: int = 2,
    numeric_dtype=None,
) -> list[float]:
    """Relative error between backward() and central differences, per parameter tensor.

    The error of one tensor is ``max|analytic - numeric| / max(max|numeric|, 1e-8)``.
    ``order=2`` is the three-point stencil, ``order=4`` the five-point one.

    With ``numeric_dtype=np.float64`` the analytic gradient still comes from
    the parameters' own dtype, but the difference quotients are taken on
    upcast copies under that default dtype. Float32 differences are limited
    by forward rounding noise at roughly 1e-3 relative.
    ``f`` must be deterministic and build its inputs with the default dtype.
    """
    if not 1e-4 <= h <= 1e-2:
        raise ContractError(f"finite difference step {h} outside [1e-4, 1e-2]")
    if order not in (2, 4):
        raise ContractError("order must be 2 or 4")
    params = list(params)
    zero_grad(params)
    loss = f(params)
    backward(loss)
    analytic = [
        np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params
    ]

    def value() -> float:
        out = f(params)
        return float(out.data if isinstance(out, Tensor) else out)

    originals = [p.data for p in params]
    dtype_ctx = contextlib.nullcontext()
    if numeric_dtype is not None:
        for p in params:
            p.data = p.data.astype(numeric_dtype)
        dtype_ctx = default_dtype(numeric_dtype)
    errors = []
    try:
        with no_grad(), dtype_ctx:
            for p, grad in zip(params, analytic):
                flat = p.data.reshape(-1)
                numeric = np.empty(flat.size)
                for i in range(flat.size):
                    orig = flat[i]
                    numeric[i] = _central(flat, i, orig, h, value, order)
                    flat[i] = orig
                scale_ = max(float(np.abs(numeric).max(initial=0.0)), 1e-8)
                errors.append(float(np.abs(grad.reshape(-1) - numeric).max(initial=0.0)) / scale_)
    finally:
        for p, data in zip(params, originals):
            p.data = data
    return errors


def _central(flat, i, orig, h, value, order) -> float:
    def at(offset):
        flat[i] = orig + offset
        return float(flat[i]), value()

    if order == 2:
        (x1, f1), (x0, f0) = at(h), at(-h)
        # the realised step differs from 2h once rounded to the array dtype
        return (f1 - f0) / (x1 - x0)
    (_, fp2), (_, fp1), (_, fm1), (_, fm2) = at(2 * h), at(h), at(-h), at(-2 * h)
    return (-fp2 + 8 * fp1 - 8 * fm1 + fm2) / (12 * h)


def finite_diff_check(f, params, h: float = 1e-3, order: int = 2, numeric_dtype=None) -> float:
    """Largest per-tensor relative gradient error; see :func:`gradient_errors`."""
    return max(gradient_errors(f, params, h, order, numeric_dtype), default=0.0)
