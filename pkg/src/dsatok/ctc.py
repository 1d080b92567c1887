"""Connectionist temporal classification: loss with analytic gradient, greedy decoding."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor

NEG_INF = -np.inf


class CtcInfeasible(ValueError):
    pass


def _logsumexp(*xs: np.ndarray) -> np.ndarray:
    m = np.maximum.reduce(xs)
    safe = np.where(np.isfinite(m), m, 0.0)
    s = np.zeros_like(safe)
    for x in xs:
        s = s + np.exp(x - safe)
    with np.errstate(divide="ignore"):
        return np.where(np.isfinite(m), safe + np.log(s), NEG_INF)


def min_frames(target: Sequence[int]) -> int:
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _check(target, T: int, blank: int, V: int):
    target = [int(t) for t in target]
    if len(target) == 0:
        raise ValueError("CTC target must contain at least one symbol")
    if any(t < 0 or t >= V or t == blank for t in target):
        raise ValueError(f"target symbol out of range or equal to blank: {target}")
    if T < min_frames(target):
        raise CtcInfeasible(f"{T} frames cannot emit target of length {len(target)} "
                            f"(needs {min_frames(target)})")
    return target


def ctc_forward_backward(lp: np.ndarray, target: Sequence[int], blank: int):
    """Log-space alpha/beta recursions on one (T, V) sequence.

    Returns (nll, grad) where grad is d nll / d lp (same shape as lp).
    """
    lp = np.asarray(lp, dtype=np.float64)
    T, V = lp.shape
    target = _check(target, T, blank, V)
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    S = len(ext)
    # s-2 skip allowed when ext[s] is a label different from ext[s-2]
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    e = lp[:, ext]  # (T, S) emission log-probs
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = e[0, 0]
    alpha[0, 1] = e[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        a1 = np.concatenate([[NEG_INF], prev[:-1]])
        a2 = np.where(skip, np.concatenate([[NEG_INF, NEG_INF], prev[:-2]]), NEG_INF)
        alpha[t] = _logsumexp(prev, a1, a2) + e[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = e[T - 1, S - 1]
    beta[T - 1, S - 2] = e[T - 1, S - 2]
    skip_fwd = np.concatenate([skip[2:], [False, False]])  # may move s -> s+2
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        b1 = np.concatenate([nxt[1:], [NEG_INF]])
        b2 = np.where(skip_fwd, np.concatenate([nxt[2:], [NEG_INF, NEG_INF]]), NEG_INF)
        beta[t] = _logsumexp(nxt, b1, b2) + e[t]

    log_p = _logsumexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    if not np.isfinite(log_p):
        raise CtcInfeasible("no alignment has non-zero probability")
    # occupancy: alpha and beta both include the emission at t
    occ = np.exp(alpha + beta - e - log_p)  # (T, S)
    grad = np.zeros((T, V))
    for s in range(S):
        grad[:, ext[s]] -= occ[:, s]
    return float(-log_p), grad


def ctc_loss(log_probs: Tensor, targets, lengths=None, blank: int | None = None,
             reduction: str = "mean") -> Tensor:
    """CTC negative log-likelihood.

    ``log_probs`` is (T, V) with a single target sequence, or (B, T, V) with a
    list of targets and optional valid frame counts. ``blank`` defaults to the
    last vocabulary entry. ``reduction`` is "mean" or "sum" over the batch.
    """
    lp = log_probs.data
    single = lp.ndim == 2
    if single:
        lp = lp[None]
        targets = [targets]
    B, T, V = lp.shape
    blank = V - 1 if blank is None else blank
    if len(targets) != B:
        raise ValueError("one target per batch row required")
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    total, grad = 0.0, np.zeros(lp.shape, dtype=np.float64)
    for b in range(B):
        n = int(lengths[b])
        nll, g = ctc_forward_backward(lp[b, :n], targets[b], blank)
        total += nll
        grad[b, :n] = g
    if reduction == "mean":
        total /= B
        grad /= B
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    if single:
        grad = grad[0]
    dtype = log_probs.data.dtype
    return Tensor.from_op(np.array(total, dtype=dtype), (log_probs,),
                          lambda up: ((up * grad).astype(dtype),), "ctc")


def greedy_decode(log_probs: np.ndarray, blank: int | None = None, length: int | None = None) -> list[int]:
    """Best-path decode of one (T, V) sequence: argmax, merge repeats, drop blanks."""
    lp = np.asarray(log_probs)
    if length is not None:
        lp = lp[:length]
    blank = lp.shape[-1] - 1 if blank is None else blank
    best = lp.argmax(axis=-1)
    out, prev = [], None
    for k in best:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return out
