"""Parameter containers and the neural building blocks used by the model."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from ..errors import ShapeMismatchError
from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A named leaf tensor owned by a module; ``trainable=False`` keeps it out of the optimizer."""

    __slots__ = ("trainable",)

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(np.asarray(data, dtype=T.default_dtype()), requires_grad=trainable, name=name)
        self.trainable = trainable

    def freeze(self) -> None:
        self.trainable = False
        self.requires_grad = False
        self.grad = None


class Module:
    """Minimal parameter registry: attributes that are Parameters or Modules are collected by name."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ShapeMismatchError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, value in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.shape != tuple(value.shape):
                raise ShapeMismatchError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data = np.array(value, dtype=p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def init_weight(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Parameter:
    # Glorot-uniform
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(rng.uniform(-limit, limit, size=(fan_in, fan_out)), name)


# ------------------------------------------------------------ functional forms
def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeMismatchError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = T.matmul(x, weight)
    return out if bias is None else out + bias


def glu(x: Tensor, w_a: Tensor, b_a: Tensor, w_b: Tensor, b_b: Tensor) -> Tensor:
    """Gated linear unit: (x W_a + b_a) * sigmoid(x W_b + b_b)."""
    return linear(x, w_a, b_a) * T.sigmoid(linear(x, w_b, b_b))


def ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two linear layers with a ReLU in between."""
    return linear(T.relu(linear(x, w1, b1)), w2, b2)


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor):
    """One LSTM step. Gate blocks along the output axis of the weights are ordered i, f, g, o.

    Returns ``(h, c)``.
    """
    d = h_prev.shape[-1]
    if w_x.shape != (x.shape[-1], 4 * d) or w_h.shape != (d, 4 * d) or c_prev.shape != h_prev.shape:
        raise ShapeMismatchError(
            f"lstm_cell: x {x.shape}, h {h_prev.shape}, c {c_prev.shape}, w_x {w_x.shape}, w_h {w_h.shape}"
        )
    z = T.matmul(x, w_x) + T.matmul(h_prev, w_h) + b
    i = T.sigmoid(z[..., 0:d])
    f = T.sigmoid(z[..., d : 2 * d])
    g = T.tanh(z[..., 2 * d : 3 * d])
    o = T.sigmoid(z[..., 3 * d : 4 * d])
    c = f * c_prev + i * g
    h = o * T.tanh(c)
    return h, c


# ----------------------------------------------------------------- modules
class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True, zero: bool = False):
        self.weight = Parameter(np.zeros((d_in, d_out)), "weight") if zero else init_weight(rng, d_in, d_out, "weight")
        self.bias = Parameter(np.zeros(d_out), "bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Parameter(np.ones(d), "gain")
        self.bias = Parameter(np.zeros(d), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class GLU(Module):
    def __init__(self, rng, d: int):
        self.value = Linear(rng, d, d)
        self.gate = Linear(rng, d, d)

    def __call__(self, x: Tensor) -> Tensor:
        return glu(x, self.value.weight, self.value.bias, self.gate.weight, self.gate.bias)


class FFN(Module):
    def __init__(self, rng, d: int, d_hidden: int):
        self.fc1 = Linear(rng, d, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d)

    def __call__(self, x: Tensor) -> Tensor:
        return ffn(x, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)


class LSTMCell(Module):
    def __init__(self, rng, d_in: int, d: int):
        self.w_x = init_weight(rng, d_in, 4 * d, "w_x")
        self.w_h = init_weight(rng, d, 4 * d, "w_h")
        bias = np.zeros(4 * d)
        bias[d : 2 * d] = 1.0  # forget-gate bias
        self.b = Parameter(bias, "b")

    def __call__(self, x, h_prev, c_prev):
        return lstm_cell(x, h_prev, c_prev, self.w_x, self.w_h, self.b)


class Embedding(Module):
    def __init__(self, rng, n: int, d: int):
        self.table = Parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(n, d)), "table")

    def __call__(self, ids) -> Tensor:
        return T.embedding_lookup(self.table, ids)


class MultiHeadSelfAttention(Module):
    def __init__(self, rng, d: int, heads: int):
        if d % heads:
            raise ShapeMismatchError(f"dim {d} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(rng, d, 3 * d)
        self.out = Linear(rng, d, d)

    def __call__(self, x: Tensor) -> Tensor:
        B, S, D = x.shape
        h, dh = self.heads, D // self.heads
        qkv = self.qkv(x).reshape(B, S, 3, h, dh).transpose(2, 0, 3, 1, 4)  # (3,B,h,S,dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = T.softmax(T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)), axis=-1)
        ctx = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, S, D)
        return self.out(ctx)


class TransformerBlock(Module):
    """Pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, rng, d: int, heads: int, d_hidden: int | None = None):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadSelfAttention(rng, d, heads)
        self.ln2 = LayerNorm(d)
        self.mlp = FFN(rng, d, d_hidden or 2 * d)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))
