"""Hot numeric kernels with numba and pure-numpy implementations.

The backend is chosen once at import time from the ``SPECDEC_BACKEND``
environment variable (``numba`` or ``numpy``). Numba is the default when
importable; the numpy path is the fallback and is also what the kernel
parity tests and the backend benchmark compare against. ``set_backend``
switches at runtime (used by ``bench --backends``).

All kernels operate on float64 arrays and are deterministic for a fixed
backend: fastmath stays off and summation order is fixed per element.
"""

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


NEG_INF = float("-inf")


# ---------------------------------------------------------------------------
# attention core: masked softmax(q k^T) v with per-row log-sum-exp
# ---------------------------------------------------------------------------

def _attend_numpy(q, k, v, mask, scale):
    """q,k,v: (heads, m|n, head_dim); mask: (m, n) bool or None."""
    scores = np.matmul(q, np.swapaxes(k, 1, 2)) * scale
    if mask is not None:
        scores = np.where(mask[None, :, :], scores, NEG_INF)
    smax = np.max(scores, axis=-1)
    alive = np.isfinite(smax)
    safe_max = np.where(alive, smax, 0.0)
    w = np.exp(np.where(np.isfinite(scores), scores - safe_max[..., None], NEG_INF))
    denom = np.sum(w, axis=-1)
    safe_denom = np.where(denom > 0.0, denom, 1.0)
    out = np.matmul(w, v) / safe_denom[..., None]
    out = np.where(alive[..., None], out, 0.0)
    lse = np.where(alive, safe_max + np.log(safe_denom), NEG_INF)
    return out, lse


@njit(cache=True)
def _attend_numba(q, k, v, mask, use_mask, scale):  # pragma: no cover - jitted
    heads, m, dh = q.shape
    n = k.shape[1]
    out = np.zeros((heads, m, dh))
    lse = np.empty((heads, m))
    scores = np.empty(n)
    for h in range(heads):
        for i in range(m):
            smax = NEG_INF
            for j in range(n):
                if use_mask and not mask[i, j]:
                    scores[j] = NEG_INF
                    continue
                s = 0.0
                for d in range(dh):
                    s += q[h, i, d] * k[h, j, d]
                s *= scale
                scores[j] = s
                if s > smax:
                    smax = s
            if smax == NEG_INF:
                lse[h, i] = NEG_INF
                continue
            denom = 0.0
            for j in range(n):
                if scores[j] == NEG_INF:
                    continue
                w = np.exp(scores[j] - smax)
                denom += w
                for d in range(dh):
                    out[h, i, d] += w * v[h, j, d]
            for d in range(dh):
                out[h, i, d] /= denom
            lse[h, i] = smax + np.log(denom)
    return out, lse


def _attend_numba_entry(q, k, v, mask, scale):
    if mask is None:
        dummy = np.empty((0, 0), dtype=np.bool_)
        return _attend_numba(q, k, v, dummy, False, scale)
    return _attend_numba(q, k, v, np.ascontiguousarray(mask), True, scale)


# ---------------------------------------------------------------------------
# rotary embedding: rotate consecutive (2i, 2i+1) pairs within each head
# ---------------------------------------------------------------------------

def _rope_numpy(x, positions, head_dim, theta):
    rows, cols = x.shape
    half = head_dim // 2
    pair_idx = np.arange(cols // 2) % half
    freqs = theta ** (-2.0 * pair_idx / head_dim)
    angles = positions[:, None] * freqs[None, :]
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = x[:, 0::2], x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out


@njit(cache=True)
def _rope_numba(x, positions, head_dim, theta):  # pragma: no cover - jitted
    rows, cols = x.shape
    half = head_dim // 2
    out = np.empty_like(x)
    for r in range(rows):
        for p in range(cols // 2):
            freq = theta ** (-2.0 * (p % half) / head_dim)
            a = positions[r] * freq
            c, s = np.cos(a), np.sin(a)
            e, o = x[r, 2 * p], x[r, 2 * p + 1]
            out[r, 2 * p] = e * c - o * s
            out[r, 2 * p + 1] = e * s + o * c
    return out


# ---------------------------------------------------------------------------
# RMS normalization over rows
# ---------------------------------------------------------------------------

def _rmsnorm_numpy(x, weight, eps):
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + eps) * weight


@njit(cache=True)
def _rmsnorm_numba(x, weight, eps):  # pragma: no cover - jitted
    rows, cols = x.shape
    out = np.empty_like(x)
    for r in range(rows):
        ms = 0.0
        for c in range(cols):
            ms += x[r, c] * x[r, c]
        inv = 1.0 / np.sqrt(ms / cols + eps)
        for c in range(cols):
            out[r, c] = x[r, c] * inv * weight[c]
    return out


_IMPLS = {
    "numpy": {
        "attend": _attend_numpy,
        "rope": _rope_numpy,
        "rmsnorm": _rmsnorm_numpy,
    },
    "numba": {
        "attend": _attend_numba_entry,
        "rope": _rope_numba,
        "rmsnorm": _rmsnorm_numba,
    },
}

_backend = os.environ.get("SPECDEC_BACKEND", "numba" if HAS_NUMBA else "numpy")
if _backend not in _IMPLS:
    raise ValueError(f"SPECDEC_BACKEND must be 'numba' or 'numpy', got {_backend!r}")
if _backend == "numba" and not HAS_NUMBA:
    _backend = "numpy"


def get_backend():
    return _backend


def set_backend(name):
    """Switch kernel backend at runtime; returns the previous backend name."""
    global _backend
    if name not in _IMPLS:
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    prev = _backend
    _backend = name
    return prev


def attend_heads(q, k, v, mask, scale):
    """Masked attention per head.

    q: (heads, m, head_dim), k/v: (heads, n, head_dim), mask: (m, n) bool
    visibility matrix or None for all-visible. Returns (out, lse) with
    out (heads, m, head_dim) and lse (heads, m); fully masked rows get
    zero output and lse of -inf.
    """
    return _IMPLS[_backend]["attend"](q, k, v, mask, scale)


def rope_rotate(x, positions, head_dim, theta):
    """Rotate each (2i, 2i+1) pair of every head slice by position * freq_i."""
    return _IMPLS[_backend]["rope"](x, np.asarray(positions, dtype=np.float64), head_dim, theta)


def rmsnorm_rows(x, weight, eps):
    return _IMPLS[_backend]["rmsnorm"](x, weight, eps)
