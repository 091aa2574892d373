"""Parameter registry, affine maps, multi-head attention and pre-norm encoder layers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

INIT_STD = 0.02


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


def normal_parameter(rng: np.random.Generator, shape, std: float = INIT_STD) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape))


class Module:
    """Base class that discovers parameters and submodules from attributes.

    Attribute order is registration order, so parameter names and iteration
    order are stable across runs.
    """

    training = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def _walk(self, prefix):
        for key, value in vars(self).items():
            yield from _walk_value(f"{prefix}{key}", value)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            for child in _child_modules(value):
                yield from child.modules()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        extra = state.keys() - own.keys()
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: stored shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


def _walk_value(name, value):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value._walk(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk_value(f"{name}.{i}", item)
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk_value(f"{name}.{key}", item)


def _child_modules(value):
    if isinstance(value, Module):
        yield value
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _child_modules(item)
    elif isinstance(value, dict):
        for item in value.values():
            yield from _child_modules(item)


class Linear(Module):
    """``x @ weight + bias`` with ``weight`` stored as ``[in, out]``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float = INIT_STD):
        self.d_in = d_in
        self.d_out = d_out
        self.weight = normal_parameter(rng, (d_in, d_out), std)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(
                f"linear: input has {x.shape[-1]} columns, layer expects {self.d_in}"
            )
        out = T.matmul(x, self.weight)
        return out if self.bias is None else T.add(out, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = T.LAYER_NORM_EPS):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm_rows(x, self.gamma, self.beta, self.eps)


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 8
    d_k: int = 16
    model_dim: int = 128

    def __post_init__(self):
        if min(self.heads, self.d_k, self.model_dim) < 1:
            raise ValueError("attention sizes must be positive")
        if self.heads * self.d_k != self.model_dim:
            raise ValueError(
                f"heads*d_k = {self.heads}*{self.d_k} must equal model_dim {self.model_dim}"
            )


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> tuple[Tensor, Tensor]:
    """Per-head ``softmax(q k^T / sqrt(d_k)) v`` on already projected inputs.

    Inputs are ``[B, t, heads*d_k]`` (or unbatched ``[t, heads*d_k]``). Returns
    the column-wise concatenation of head outputs and the weights as
    ``[B*heads, t_q, t_k]``.
    """
    batched = q.ndim == 3
    qh, kh, vh = (T.split_heads(x, heads) for x in (q, k, v))
    d_k = qh.shape[-1]
    scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(d_k))
    weights = T.softmax_rows(scores)
    out = T.merge_heads(T.matmul(weights, vh), heads, batched=batched)
    return out, weights


class MultiHeadAttention(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, std: float = INIT_STD):
        self.cfg = cfg
        width = cfg.heads * cfg.d_k
        self.q_proj = Linear(cfg.model_dim, width, rng, std=std)
        # a key bias shifts every score in a row equally, so softmax ignores it
        self.k_proj = Linear(cfg.model_dim, width, rng, bias=False, std=std)
        self.v_proj = Linear(cfg.model_dim, width, rng, std=std)
        self.out_proj = Linear(width, cfg.model_dim, rng, std=std)

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor) -> tuple[Tensor, Tensor]:
        d = self.cfg.model_dim
        for label, x in (("query", q_in), ("key", k_in), ("value", v_in)):
            if x.shape[-1] != d:
                raise DimensionError(f"attention {label} has {x.shape[-1]} columns, expected {d}")
        heads_out, weights = scaled_attention(
            self.q_proj(q_in), self.k_proj(k_in), self.v_proj(v_in), self.cfg.heads
        )
        return self.out_proj(heads_out), weights


class EncoderLayer(Module):
    """ViT-style pre-norm block: ``x + MHA(LN(x))`` then ``+ FFN(LN(.))``.

    :meth:`cross` reads keys and values from a second sequence, normalised with
    the same first layer norm; the residual stream follows the queries.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, ffn_ratio: int = 4,
                 dropout: float = 0.0, std: float = INIT_STD):
        d = cfg.model_dim
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(cfg, rng, std)
        self.norm2 = LayerNorm(d)
        self.ff1 = Linear(d, ffn_ratio * d, rng, std=std)
        self.ff2 = Linear(ffn_ratio * d, d, rng, std=std)
        self.dropout = dropout
        self._rng = np.random.default_rng(rng.integers(2**32))

    def _drop(self, x):
        if self.training and self.dropout > 0:
            return T.dropout(x, self.dropout, self._rng)
        return x

    def cross(self, q_seq: Tensor, kv_seq: Tensor) -> tuple[Tensor, Tensor]:
        q_norm = self.norm1(q_seq)
        kv_norm = q_norm if kv_seq is q_seq else self.norm1(kv_seq)
        attended, weights = self.attn(q_norm, kv_norm, kv_norm)
        x = T.add(q_seq, self._drop(attended))
        hidden = T.gelu(self.ff1(self.norm2(x)))
        x = T.add(x, self._drop(self.ff2(hidden)))
        return x, weights

    def __call__(self, x: Tensor) -> Tensor:
        return self.cross(x, x)[0]

    def zero_output_projections(self):
        """Zero both sublayer output maps, turning the block into the identity."""
        for lin in (self.attn.out_proj, self.ff2):
            lin.weight.data[...] = 0.0
            lin.bias.data[...] = 0.0
