"""Subspace L2 distillation loss, soft-label term, and their combination."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    LengthMismatch,
    MaskLengthMismatch,
    NotNormalized,
    ShapeMismatch,
    ValidationError,
)
from .projection import METHOD_NAMES, Projector, resolve_projector

PROB_FLOOR = 1e-12


def parse_mask(mask) -> tuple[bool, ...]:
    """Accept ``"001111"``, a sequence of bools, or a sequence of 0/1."""
    if isinstance(mask, str):
        if not mask or set(mask) - {"0", "1"}:
            raise ValidationError(f"mask must be a non-empty string of 0/1, got {mask!r}")
        return tuple(ch == "1" for ch in mask)
    return tuple(bool(m) for m in mask)


def mask_to_str(mask) -> str:
    return "".join("1" if m else "0" for m in mask)


def reduced_dim(c: int, r: float) -> int:
    """Subspace dimension ``d = max(1, round(c / r))``, ties rounded up."""
    return max(1, int(math.floor(c / r + 0.5)))


@dataclass(frozen=True)
class DistillSpec:
    """Distillation hyperparameters.

    ``method`` uses the public names (``random``, ``pca``, ``pca-last``,
    ``autoencoder``, ``none``, ``gaussian``, ``rand-each``).
    """

    method: str = "random"
    r: float = 4.0
    alpha: float = 1.0
    beta: float = 0.0
    mask: tuple = (True,)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mask", parse_mask(self.mask))
        if self.method not in METHOD_NAMES:
            raise ValidationError(f"unknown method {self.method!r}; valid: {', '.join(METHOD_NAMES)}")
        if not (self.r >= 1):
            raise ValidationError(f"reduction rate r must be >= 1, got {self.r}")
        if not (self.alpha >= 0):
            raise ValidationError(f"alpha must be >= 0, got {self.alpha}")
        if not (self.beta >= 0):
            raise ValidationError(f"beta must be >= 0, got {self.beta}")
        if len(self.mask) == 0:
            raise ValidationError("mask must cover at least one tap position")

    def d_for(self, c: int) -> int:
        return reduced_dim(c, self.r)

    @property
    def inert(self) -> bool:
        """True when no distillation term can contribute."""
        return (self.alpha == 0 or not any(self.mask)) and self.beta == 0


@dataclass(frozen=True)
class LossBreakdown:
    task: float
    kd_per_position: tuple
    kl: float
    total: float


def _check_pair(f_t, f_s, k):
    f_t = np.asarray(f_t, dtype=np.float64)
    f_s = np.asarray(f_s, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if f_t.ndim != 2 or f_t.shape != f_s.shape:
        raise ShapeMismatch(f"teacher {f_t.shape} and student {f_s.shape} features differ")
    if k.ndim != 2 or k.shape[0] != f_t.shape[1]:
        raise ShapeMismatch(f"projector {k.shape} does not match feature width {f_t.shape[1]}")
    return f_t, f_s, k


def rdimkd_loss(f_t, f_s, k, alpha: float) -> float:
    """``alpha / (N d) * ||F_t K - F_s K||_F^2``."""
    f_t, f_s, k = _check_pair(f_t, f_s, k)
    n, d = f_t.shape[0], k.shape[1]
    diff = (f_t - f_s) @ k
    return alpha * float(np.sum(diff * diff)) / (n * d)


def rdimkd_loss_grad(f_t, f_s, k, alpha: float) -> np.ndarray:
    """Gradient of :func:`rdimkd_loss` with respect to the student features.

    Closed form ``2 alpha / (N d) * (F_s - F_t) K K^T``; the teacher side is
    a constant and gets nothing.
    """
    f_t, f_s, k = _check_pair(f_t, f_s, k)
    n, d = f_t.shape[0], k.shape[1]
    return (2.0 * alpha / (n * d)) * (((f_s - f_t) @ k) @ k.T)


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def _check_probs(q, p):
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if q.shape != p.shape:
        raise LengthMismatch(f"q has shape {q.shape}, p has shape {p.shape}")
    if q.shape[-1] < 2:
        raise LengthMismatch("need at least 2 classes")
    if np.any(np.abs(np.sum(q, axis=-1) - 1.0) > 1e-8) or np.any(q < 0):
        raise NotNormalized("teacher distribution q must be nonnegative and sum to 1")
    if np.any(p < 0) or np.any(p > 1.0 + 1e-12):
        raise NotNormalized("student probabilities must lie in [0, 1]")
    return q, p


def kl_soft_loss(q, p, beta: float) -> float:
    """``-beta * sum_i q_i log p_i`` (natural log, p floored at 1e-12).

    For 2-D input (one distribution per row) the per-row values are averaged.
    """
    q, p = _check_probs(q, p)
    per_row = -np.sum(q * np.log(np.maximum(p, PROB_FLOOR)), axis=-1)
    return beta * float(np.mean(per_row))


def kl_soft_loss_grad(q, p, beta: float) -> np.ndarray:
    """Gradient of :func:`kl_soft_loss` w.r.t. the student logits, ``p = softmax(z)``.

    ``beta * (p - q)``; rows are scaled by ``1 / B`` for 2-D input to match
    the batch mean in :func:`kl_soft_loss`.
    """
    q, p = _check_probs(q, p)
    g = beta * (p - q)
    if g.ndim == 2:
        g = g / g.shape[0]
    return g


def _kd_terms(taps, spec: DistillSpec, iteration: int, with_grad: bool):
    if len(taps) != len(spec.mask):
        raise MaskLengthMismatch(f"{len(taps)} tap pairs but mask has {len(spec.mask)} entries")
    values, grads = [], []
    for (f_t, f_s, proj), on in zip(taps, spec.mask):
        if not on:
            values.append(0.0)
            grads.append(None)
            continue
        k = resolve_projector(proj, iteration) if isinstance(proj, Projector) else np.asarray(proj)
        values.append(rdimkd_loss(f_t, f_s, k, spec.alpha))
        if with_grad:
            grads.append(rdimkd_loss_grad(f_t, f_s, k, spec.alpha))
    return values, grads


def total_objective(task_loss: float, taps, spec: DistillSpec, iteration: int, kl_loss: float = 0.0) -> LossBreakdown:
    """Task loss plus the masked per-position distillation terms plus ``kl_loss``.

    ``taps`` is a list of ``(f_t, f_s, projector)``; masked-off positions
    contribute exactly 0.  Terms are summed in ascending position order.
    """
    values, _ = _kd_terms(taps, spec, iteration, with_grad=False)
    return _breakdown(task_loss, values, kl_loss)


def total_objective_with_grads(task_loss: float, taps, spec: DistillSpec, iteration: int, kl_loss: float = 0.0):
    """Like :func:`total_objective`, also returning per-tap student gradients (None when masked)."""
    values, grads = _kd_terms(taps, spec, iteration, with_grad=True)
    return _breakdown(task_loss, values, kl_loss), grads


def _breakdown(task_loss, values, kl_loss):
    total = float(task_loss)
    for v in values:
        total += v
    total += float(kl_loss)
    return LossBreakdown(float(task_loss), tuple(values), float(kl_loss), total)


def cross_entropy(logits, labels) -> float:
    """Mean softmax cross-entropy for integer labels."""
    logp = log_softmax(logits)
    return -float(np.mean(logp[np.arange(len(labels)), labels]))


def cross_entropy_grad(logits, labels) -> np.ndarray:
    p = softmax(logits)
    p[np.arange(len(labels)), labels] -= 1.0
    return p / len(labels)
