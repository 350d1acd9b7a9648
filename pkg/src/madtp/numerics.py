"""Dense numerical kernels used by the model, the pruning rule and the tests.

All arithmetic is float64. Matrices are plain 2-D ``numpy`` arrays in
row-major order; distributions are 1-D arrays (or rows of a 2-D array) that
are non-negative and sum to one.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DegenerateInput, InvalidArgument


def _vector(v, name="v") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidArgument(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise InvalidArgument(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} has non-finite entries")
    return arr


def _matrix(m, name="m") -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidArgument(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[1] == 0:
        raise InvalidArgument(f"{name} has no columns")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} has non-finite entries")
    return arr


def softmax_rows(m) -> np.ndarray:
    m = _matrix(m)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax(v) -> np.ndarray:
    """Max-shifted softmax of a 1-D vector."""
    return softmax_rows(_vector(v)[None, :])[0]


def sparsemax_rows(m) -> np.ndarray:
    """Row-wise Euclidean projection onto the probability simplex.

    Sort-threshold algorithm: with the row sorted descending as ``z_(1..n)``,
    coordinate ``k`` (1-based) is in the support iff ``1 + k*z_(k) > sum_{j<=k} z_(j)``;
    the support is a prefix of the sorted order, and ``tau`` is chosen so the
    clipped output sums to one.
    """
    m = _matrix(m)
    n = m.shape[1]
    z = m - m.max(axis=1, keepdims=True)
    z_sorted = -np.sort(-z, axis=1)
    cumsum = np.cumsum(z_sorted, axis=1)
    k = np.arange(1, n + 1, dtype=np.float64)
    support = 1.0 + k * z_sorted > cumsum
    k_z = support.sum(axis=1)
    tau = (cumsum[np.arange(m.shape[0]), k_z - 1] - 1.0) / k_z
    return np.maximum(z - tau[:, None], 0.0)


def sparsemax(v) -> np.ndarray:
    return sparsemax_rows(_vector(v)[None, :])[0]


def sparsemax_vjp(v, upstream) -> np.ndarray:
    """Vector-Jacobian product of :func:`sparsemax` at ``v``.

    On the support ``S`` the Jacobian is ``I - 11^T/|S|``; rows and columns off
    the support are zero.
    """
    v = _vector(v)
    g = _vector(upstream, "upstream")
    if g.shape != v.shape:
        raise InvalidArgument(f"length mismatch: v has {v.size}, upstream has {g.size}")
    support = sparsemax(v) > 0
    out = np.zeros_like(v)
    out[support] = g[support] - g[support].mean()
    return out


def sparsemax_rows_vjp(m, upstream) -> np.ndarray:
    m = _matrix(m)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != m.shape:
        raise InvalidArgument(f"shape mismatch: {m.shape} vs {g.shape}")
    support = sparsemax_rows(m) > 0
    gs = np.where(support, g, 0.0)
    mean = gs.sum(axis=1, keepdims=True) / support.sum(axis=1, keepdims=True)
    return np.where(support, g - mean, 0.0)


def cosine_similarity(a, b) -> float:
    a = _vector(a, "a")
    b = _vector(b, "b")
    if a.shape != b.shape:
        raise InvalidArgument(f"length mismatch: {a.size} vs {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInput("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def scaled_dot_attention(queries, keys, values, scale: float):
    """Return ``(softmax(Q K^T / scale) V, attn)``."""
    q = _matrix(queries, "queries")
    k = _matrix(keys, "keys")
    v = _matrix(values, "values")
    if not scale > 0:
        raise InvalidArgument(f"scale must be positive, got {scale}")
    if q.shape[1] != k.shape[1]:
        raise InvalidArgument(f"query width {q.shape[1]} != key width {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise InvalidArgument(f"{k.shape[0]} keys but {v.shape[0]} values")
    attn = softmax_rows(q @ k.T / scale)
    return attn @ v, attn


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad
