"""Central finite-difference oracle for reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import NonFiniteError, Tensor, backward, no_grad, precision


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3,
                            dtype=np.float64, max_elems: int | None = None, seed: int = 0,
                            return_detail: bool = False):
    """Max relative error between autodiff and central differences.

    ``f`` closes over ``params`` and returns a scalar Tensor. Per parameter the
    error is ``max|g_ad - g_fd| / (max|g_fd| + 1e-8)``; the result is the max
    over parameters. The graph is re-evaluated in ``dtype`` (float64 by
    default) so the oracle's own rounding stays well under the tolerance.
    ``max_elems`` caps the number of probed entries per parameter.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = np.random.default_rng(seed)
    saved = [p.data for p in params]
    saved_grad = [p.grad for p in params]
    detail: dict[str, float] = {}
    try:
        with precision(dtype):
            for p in params:
                p.data = p.data.astype(dtype)
                p.grad = None
            loss = f()
            backward(loss, params)
            ad = [p.grad.copy() for p in params]
            worst = 0.0
            for i, p in enumerate(params):
                flat = p.data.reshape(-1)
                n = flat.size
                idx = np.arange(n) if max_elems is None or n <= max_elems else \
                    rng.choice(n, size=max_elems, replace=False)
                fd = np.zeros(len(idx))
                for j, k in enumerate(idx):
                    orig = flat[k]
                    with no_grad():
                        flat[k] = orig + eps
                        fp = float(f().data)
                        flat[k] = orig - eps
                        fm = float(f().data)
                    flat[k] = orig
                    if not (np.isfinite(fp) and np.isfinite(fm)):
                        raise NonFiniteError("f is not finite at a perturbed point")
                    fd[j] = (fp - fm) / (2 * eps)
                g = ad[i].reshape(-1)[idx]
                err = float(np.max(np.abs(g - fd)) / (np.max(np.abs(fd)) + 1e-8))
                detail[p.name or f"param{i}"] = err
                worst = max(worst, err)
    finally:
        for p, d, g in zip(params, saved, saved_grad):
            p.data = d
            p.grad = g
    return (worst, detail) if return_detail else worst
