"""Task losses and the combined finetuning objective.

Every loss returns ``(value, gradient)`` where the gradient is taken with
respect to the log-probabilities it was given.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from acom.errors import ConfigError, ContractError

NEG_INF = -np.inf


@dataclass
class LossWeights:
    lam: float = 0.3
    beta: float = 0.25
    epsilon: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigError(f"label smoothing must lie in [0, 1), got {self.epsilon}")


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax_backward(grad_logp, logp):
    """Map a gradient w.r.t. log-probabilities back to the logits."""
    return grad_logp - np.exp(logp) * grad_logp.sum(axis=-1, keepdims=True)


def _check_normalized(logp, tol=1e-6):
    total = np.logaddexp.reduce(logp, axis=-1)
    worst = np.max(np.abs(total)) if total.size else 0.0
    if not worst <= tol:
        raise ContractError(f"log-probability rows are not normalized (max |log sum| = {worst:.3g})")


def ctc_min_frames(target) -> int:
    """Fewest frames that can emit ``target``: its length plus one blank per repeat."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss(log_probs, target, blank: int = 0, validate: bool = True):
    """Negative log-likelihood of ``target`` under CTC, with its gradient.

    ``log_probs`` is a (T, A+1) matrix of per-frame log-probabilities
    including the blank. The forward and backward recursions run in log
    space; the returned gradient is w.r.t. ``log_probs`` treating each entry
    as independent.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise ContractError(f"expected (T, A+1) log-probabilities, got shape {lp.shape}")
    T, n_sym = lp.shape
    target = [int(t) for t in target]
    for t in target:
        if t == blank or not 0 <= t < n_sym:
            raise ContractError(f"invalid target label {t}")
    if validate:
        _check_normalized(lp)
    if T < ctc_min_frames(target):
        raise ContractError(f"target of length {len(target)} infeasible in {T} frames")

    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    S = ext.size
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    emit = lp[:, ext]  # (T, S)

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    # beta excludes the emission at its own frame
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc

    log_p = np.logaddexp.reduce(alpha[T - 1, -2:]) if S > 1 else alpha[T - 1, 0]
    grad = np.zeros_like(lp)
    if np.isfinite(log_p):
        occ = np.exp(alpha + beta - log_p)
        for s in range(S):
            grad[:, ext[s]] -= occ[:, s]
    return float(-log_p), grad


def kl_label_smooth_loss(log_probs, target: int, epsilon: float):
    """KL(q || p) with q the epsilon-smoothed one-hot target.

    ``log_probs`` may be (A,) or (T, A) with ``target`` a matching array of
    class indices; frames are summed.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ContractError(f"label smoothing must lie in [0, 1), got {epsilon}")
    lp = np.asarray(log_probs, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.int64)
    n_cls = lp.shape[-1]
    if np.any(tgt < 0) or np.any(tgt >= n_cls):
        raise ContractError("target class out of range")
    if epsilon > 0 and n_cls < 2:
        raise ContractError("label smoothing needs at least two classes")
    off = epsilon / (n_cls - 1) if n_cls > 1 else 0.0
    q = np.full(lp.shape, off)
    np.put_along_axis(q, tgt[..., None], 1.0 - epsilon, axis=-1)
    with np.errstate(divide="ignore"):
        q_log_q = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)
    value = float(q_log_q.sum() - (q * lp).sum())
    return value, -q


def cross_entropy(log_probs, target):
    lp = np.asarray(log_probs, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.int64)
    if np.any(tgt < 0) or np.any(tgt >= lp.shape[-1]):
        raise ContractError("target class out of range")
    picked = np.take_along_axis(lp, tgt[..., None], axis=-1)
    grad = np.zeros_like(lp)
    np.put_along_axis(grad, tgt[..., None], -1.0, axis=-1)
    return float(-picked.sum()), grad


def combined_loss(task_losses, vq_losses, weights: LossWeights) -> float:
    """lambda * CTC + (1 - lambda) * KL + beta * (code + commit).

    ``task_losses`` is ``(ctc, kl)``; a single-element sequence (or a bare
    number) is a classification cross-entropy, in which case lambda does
    not apply.
    """
    code, commit = vq_losses
    if np.ndim(task_losses) == 0:
        task = float(task_losses)
    elif len(task_losses) == 1:
        task = float(task_losses[0])
    else:
        ctc, kl = task_losses
        task = weights.lam * ctc + (1.0 - weights.lam) * kl
    return task + weights.beta * (code + commit)
