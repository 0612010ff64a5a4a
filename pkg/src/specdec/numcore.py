"""Deterministic scalar/matrix math shared by every module.

Matrices are plain 2-D float64 numpy arrays in row-major order; float64 is
the engine-wide precision. Softmax carries its per-row log-sum-exp because
attention merging needs it.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand dimensions are inconsistent."""


def as_matrix(x):
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim != 2:
        raise ShapeError(f"expected 2-D matrix, got shape {a.shape}")
    return a


@dataclass
class SoftmaxResult:
    probs: np.ndarray  # rows sum to 1
    lse: np.ndarray  # per-row log-sum-exp


def matmul(a, b):
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def softmax_lse(logits, temperature=1.0):
    """Row-wise softmax of logits/temperature with per-row log-sum-exp.

    temperature 0 selects the exact argmax per row (one-hot, lowest index on
    ties) and reports the max logit as lse; there is no division by zero.
    """
    logits = as_matrix(logits)
    if np.isnan(logits).any():
        raise ValueError("softmax_lse: NaN in logits")
    if temperature < 0:
        raise ValueError("softmax_lse: negative temperature")
    if temperature == 0:
        probs = np.zeros_like(logits)
        idx = np.argmax(logits, axis=1)
        probs[np.arange(logits.shape[0]), idx] = 1.0
        return SoftmaxResult(probs, logits[np.arange(logits.shape[0]), idx].copy())
    scaled = logits / temperature
    m = np.max(scaled, axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(scaled - m), axis=1))
    return SoftmaxResult(np.exp(scaled - lse[:, None]), lse)


def rmsnorm(x, weight, eps=1e-6):
    """Per row: x / sqrt(mean(x^2) + eps) * weight."""
    x = as_matrix(x)
    weight = np.asarray(weight, dtype=DTYPE)
    if weight.shape != (x.shape[1],):
        raise ShapeError(f"rmsnorm: weight {weight.shape} vs cols {x.shape[1]}")
    return kernels.rmsnorm_rows(x, weight, eps)


def rope_apply(x, positions, head_dim, theta=10000.0):
    """Rotary embedding: rotate each head's (2i, 2i+1) pairs by pos-dependent angles."""
    x = as_matrix(x)
    if x.shape[1] % head_dim != 0 or head_dim % 2 != 0:
        raise ShapeError(f"rope_apply: cols {x.shape[1]} vs head_dim {head_dim}")
    positions = np.asarray(positions, dtype=DTYPE)
    if positions.shape != (x.shape[0],):
        raise ShapeError("rope_apply: positions length must equal row count")
    return kernels.rope_rotate(x, positions, head_dim, theta)


def smooth_l1(a, b, beta=1.0):
    """Mean elementwise Huber loss between a and b."""
    a, b = as_matrix(a), as_matrix(b)
    if a.shape != b.shape:
        raise ShapeError(f"smooth_l1: {a.shape} vs {b.shape}")
    if beta <= 0:
        raise ValueError("smooth_l1: beta must be positive")
    d = np.abs(a - b)
    return float(np.mean(np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)))


def soft_cross_entropy(teacher_logits, student_logits):
    """Mean over rows of -sum softmax(teacher) * log_softmax(student)."""
    t, s = as_matrix(teacher_logits), as_matrix(student_logits)
    if t.shape != s.shape:
        raise ShapeError(f"soft_cross_entropy: {t.shape} vs {s.shape}")
    p = softmax_lse(t).probs
    sr = softmax_lse(s)
    log_q = s - sr.lse[:, None]
    return float(np.mean(-np.sum(p * log_q, axis=1)))
