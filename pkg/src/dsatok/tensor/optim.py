"""AdamW with decoupled weight decay, plus a warmup/cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import DTYPE, ShapeError, Tensor


@dataclass
class AdamWState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def init(cls, params, **hyper) -> AdamWState:
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **hyper)


def adamw_step(params: list[Tensor], grads: list[np.ndarray], state: AdamWState,
               lr: float | None = None) -> AdamWState:
    """One in-place AdamW update. ``lr`` overrides ``state.lr`` for this step.

    Decay is applied to the parameter first, then the bias-corrected adaptive step.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adamw_step: params, grads and state disagree in length")
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ShapeError(f"adamw_step: grad {g.shape} vs param {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p.data *= p.data.dtype.type(1.0 - lr * state.weight_decay)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
    return state


class AdamW:
    """Owns the parameter list and its ``AdamWState``."""

    def __init__(self, params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, clip_norm: float | None = None):
        self.params = list(params)
        self.state = AdamWState.init(self.params, lr=lr, beta1=betas[0], beta2=betas[1],
                                     eps=eps, weight_decay=weight_decay)
        self.clip_norm = clip_norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float(np.dot(p.grad.ravel(), p.grad.ravel()))
        return math.sqrt(total)

    def step(self, lr: float | None = None) -> float:
        """Apply one update from the accumulated ``.grad`` buffers; returns the pre-clip grad norm."""
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = self.grad_norm()
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
            grads = [g * scale for g in grads]
        adamw_step(self.params, grads, self.state, lr=lr)
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"opt.step": np.array([self.state.step], dtype=DTYPE)}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"opt.m.{i}"] = m
            out[f"opt.v.{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.state.step = int(arrays["opt.step"][0])
        for i in range(len(self.params)):
            m, v = arrays[f"opt.m.{i}"], arrays[f"opt.v.{i}"]
            if m.shape != self.state.m[i].shape:
                raise ShapeError(f"optimizer state {i}: {m.shape} vs {self.state.m[i].shape}")
            self.state.m[i] = m.astype(self.params[i].data.dtype).copy()
            self.state.v[i] = v.astype(self.params[i].data.dtype).copy()


@dataclass
class WarmupCosine:
    """Linear warmup to ``peak`` then cosine decay to ``peak * floor`` at ``total`` steps."""

    peak: float = 3e-4
    warmup: int = 500
    total: int = 10000
    floor: float = 0.1

    def __call__(self, step: int) -> float:
        if step < self.warmup:
            return self.peak * (step + 1) / self.warmup
        if self.total <= self.warmup:
            return self.peak
        frac = min(1.0, (step - self.warmup) / (self.total - self.warmup))
        return self.peak * (self.floor + (1 - self.floor) * 0.5 * (1 + math.cos(math.pi * frac)))
