"""Dense float64 kernels with a fixed accumulation order.

Every reduction runs sequentially (row-major outer loops, inner dimension
in ascending order) inside numba-compiled loops without ``fastmath``, so
results are bit-identical across runs, thread counts and BLAS builds.

Masks use a boolean array where ``True`` marks a blocked (``-inf``) entry;
no float infinities are ever stored.
"""

import math

import numpy as np
from numba import njit

from .errors import DegenerateRowError, ShapeError

DEFAULT_EPS = 1e-5


@njit(cache=True, nogil=True)
def _matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


@njit(cache=True, nogil=True)
def _matmul_t(a, b):
    # a @ b.T without materializing the transpose
    n, k = a.shape
    m = b.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[j, p]
            out[i, j] = acc
    return out


@njit(cache=True, nogil=True)
def _softmax(logits, mask, use_mask):
    n, m = logits.shape
    out = np.zeros((n, m))
    for i in range(n):
        mx = -np.inf
        any_open = False
        for j in range(m):
            if use_mask and mask[i, j]:
                continue
            any_open = True
            if logits[i, j] > mx:
                mx = logits[i, j]
        if not any_open:
            return out, i
        total = 0.0
        for j in range(m):
            if use_mask and mask[i, j]:
                continue
            e = math.exp(logits[i, j] - mx)
            out[i, j] = e
            total += e
        for j in range(m):
            out[i, j] = out[i, j] / total
    return out, -1


@njit(cache=True, nogil=True)
def _layernorm(x, gamma, beta, eps):
    n, d = x.shape
    out = np.empty((n, d))
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu = mu / d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var = var / d
        inv = 1.0 / math.sqrt(var + eps)
        for j in range(d):
            out[i, j] = gamma[j] * (x[i, j] - mu) * inv + beta[j]
    return out


@njit(cache=True, nogil=True)
def _sq_dist(a, b):
    acc = 0.0
    n, m = a.shape
    for i in range(n):
        for j in range(m):
            c = a[i, j] - b[i, j]
            acc += c * c
    return acc


def as_mat(x):
    """Return ``x`` as a C-contiguous 2-D float64 array."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={arr.ndim}")
    return arr


def matmul(a, b):
    """Matrix product ``a @ b`` with sequential inner-dimension accumulation."""
    a, b = as_mat(a), as_mat(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return _matmul(a, b)


def matmul_t(a, b):
    """``a @ b.T`` with the same accumulation order as :func:`matmul`."""
    a, b = as_mat(a), as_mat(b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_t: {a.shape} x {b.shape}^T")
    return _matmul_t(a, b)


def softmax_rows(logits, mask=None):
    """Row-wise softmax with optional boolean mask (``True`` = blocked).

    Blocked entries come out as exact zeros. Raises
    :class:`DegenerateRowError` if a row has no open entry.
    """
    logits = as_mat(logits)
    if mask is None:
        out, bad = _softmax(logits, np.zeros((1, 1), dtype=np.bool_), False)
    else:
        mask = np.ascontiguousarray(mask, dtype=np.bool_)
        if mask.shape != logits.shape:
            raise ShapeError(f"mask {mask.shape} vs logits {logits.shape}")
        out, bad = _softmax(logits, mask, True)
    if bad >= 0:
        raise DegenerateRowError(f"softmax row {bad} is fully masked")
    return out


def layernorm(x, gamma, beta, eps=DEFAULT_EPS):
    """Per-row standardization followed by the affine map ``gamma * z + beta``."""
    x = as_mat(x)
    gamma = np.ascontiguousarray(gamma, dtype=np.float64)
    beta = np.ascontiguousarray(beta, dtype=np.float64)
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(
            f"layernorm: gamma {gamma.shape}, beta {beta.shape}, x {x.shape}"
        )
    if not eps > 0:
        raise ValueError("eps must be positive")
    return _layernorm(x, gamma, beta, float(eps))


def frob_dist(a, b):
    """Frobenius norm of ``a - b``."""
    a, b = as_mat(a), as_mat(b)
    if a.shape != b.shape:
        raise ShapeError(f"frob_dist: {a.shape} vs {b.shape}")
    return math.sqrt(_sq_dist(a, b))


def frob_norm(a):
    a = as_mat(a)
    return math.sqrt(_sq_dist(a, np.zeros_like(a)))
