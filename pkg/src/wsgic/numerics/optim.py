"""Adam with bias correction, plus global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatchError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = BETA1,
    beta2: float = BETA2,
    eps: float = EPS,
) -> None:
    """Update ``params`` in place. Entries whose gradient is None are left untouched."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeMismatchError(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ShapeMismatchError(f"{name}: state {m.shape} vs param {p.shape}")
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


def clip_grad_norm(grads: dict[str, np.ndarray | None], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; return the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values() if g is not None)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            if g is not None:
                g *= scale
    return total


class Adam:
    """Optimizer over a module's trainable parameters."""

    def __init__(self, named_params, beta1: float = BETA1, beta2: float = BETA2, eps: float = EPS):
        self.params = {n: p for n, p in named_params if p.trainable}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState()

    def grads(self) -> dict[str, np.ndarray | None]:
        return {n: p.grad for n, p in self.params.items()}

    def step(self, lr: float, grads: dict[str, np.ndarray | None] | None = None) -> None:
        grads = self.grads() if grads is None else grads
        adam_step({n: p.data for n, p in self.params.items()}, grads, self.state, lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
