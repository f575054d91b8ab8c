"""Dense float kernels shared by every stage of the pipeline.

Reductions over probability rows (entropies, divergences) accumulate in
float64 regardless of the caller's storage dtype; summing thousands of
terms in float32 loses more precision than the downstream thresholds
tolerate.
"""

from __future__ import annotations

import numpy as np

# Floor applied to probability entries before taking logs.
KL_EPS = 1e-8


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, stabilised by max subtraction.

    Returns float64. Raises ValueError on non-finite input; never emits
    NaN/Inf itself because the shifted exponent is bounded above by 0.
    """
    arr = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("softmax input must be finite")
    shifted = arr - arr.max(axis=-1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=-1, keepdims=True)
    return shifted


def sym_kl(p: np.ndarray, q: np.ndarray, eps: float = KL_EPS) -> float:
    """Symmetric KL divergence between two probability rows.

    Both operands are clamped to at least ``eps`` before the logs. Computed
    as sum((p - q) * (log p - log q)), which equals KL(p||q) + KL(q||p) and
    is bit-exactly symmetric in its arguments: every term is a product of
    two factors that simply swap sign when p and q swap, so the rounded
    term values are identical. Each term is also non-negative (the factors
    always share a sign), hence so is the sum.
    """
    pa = np.asarray(p, dtype=np.float64)
    qa = np.asarray(q, dtype=np.float64)
    if pa.shape != qa.shape:
        raise ValueError(f"length mismatch: {pa.shape} vs {qa.shape}")
    pc = np.maximum(pa, eps)
    qc = np.maximum(qa, eps)
    return float(np.sum((pc - qc) * (np.log(pc) - np.log(qc))))


def pairwise_sym_kl(x: np.ndarray, y: np.ndarray, eps: float = KL_EPS) -> np.ndarray:
    """All-pairs symmetric KL between the rows of two matrices.

    Expands the per-pair sum into sum(p log p) + sum(q log q) - p.log q -
    q.log p so the cross terms become two matrix products. The expansion
    reorders the accumulation, so entries can differ from :func:`sym_kl`
    in the last few ulps; tiny negative results are clamped to zero.
    """
    xc = np.maximum(np.asarray(x, dtype=np.float64), eps)
    yc = np.maximum(np.asarray(y, dtype=np.float64), eps)
    if xc.ndim != 2 or yc.ndim != 2 or xc.shape[1] != yc.shape[1]:
        raise ValueError("expected two 2-D arrays with matching row length")
    lx = np.log(xc)
    ly = np.log(yc)
    sx = np.einsum("ij,ij->i", xc, lx)
    sy = np.einsum("ij,ij->i", yc, ly)
    dist = sx[:, None] + sy[None, :] - xc @ ly.T - lx @ yc.T
    np.maximum(dist, 0.0, out=dist)
    return dist


def row_entropy(rows: np.ndarray) -> np.ndarray:
    """Shannon entropy of each row in nats, with 0*log(0) taken as 0."""
    arr = np.asarray(rows, dtype=np.float64)
    safe = np.where(arr > 0.0, arr, 1.0)
    return -np.sum(arr * np.log(safe), axis=-1)


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """1 - cosine similarity. Raises ValueError on zero-norm input."""
    ua = np.asarray(u, dtype=np.float64)
    va = np.asarray(v, dtype=np.float64)
    if ua.shape != va.shape:
        raise ValueError(f"length mismatch: {ua.shape} vs {va.shape}")
    nu = np.linalg.norm(ua)
    nv = np.linalg.norm(va)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine distance undefined for zero-norm vector")
    return float(1.0 - np.dot(ua, va) / (nu * nv))


def row_normalize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scale every row to unit L2 norm; returns (unit rows, original norms)."""
    arr = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(arr, axis=-1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm feature row")
    return arr / norms[..., None], norms
