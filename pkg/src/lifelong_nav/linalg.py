"""Small dense linear algebra on float64 numpy arrays.

Matrices are 2-D arrays, vectors 1-D arrays. Everything here is pure.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, PreconditionError

EIGEN_FLOOR = 1e-10


def as_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frob_norm(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


def trace_prod(a, b) -> float:
    """tr(a^T b), computed entrywise."""
    a, b = as_matrix(a), as_matrix(b)
    if a.shape != b.shape:
        raise DimensionError(f"trace_prod shape mismatch {a.shape} vs {b.shape}")
    return float(np.sum(a * b))


def cosine_sim(u, v) -> float:
    u, v = as_vector(u), as_vector(v)
    if u.shape != v.shape:
        raise DimensionError(f"cosine_sim dim mismatch {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        # no information counts as no match
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def cosine_rows(queries, stored) -> np.ndarray:
    """Pairwise cosine between rows of ``queries`` (n, d) and ``stored`` (m, d)."""
    q = as_matrix(queries)
    s = as_matrix(stored)
    if q.shape[1] != s.shape[1]:
        raise DimensionError(f"cosine_rows dim mismatch {q.shape} vs {s.shape}")
    qn = np.linalg.norm(q, axis=1)
    sn = np.linalg.norm(s, axis=1)
    qn = np.where(qn == 0.0, 1.0, qn)
    sn = np.where(sn == 0.0, 1.0, sn)
    return np.clip((q @ s.T) / np.outer(qn, sn), -1.0, 1.0)


def sym_eigh(sym):
    """Eigenpairs of a symmetric matrix, sorted by descending eigenvalue."""
    a = as_matrix(sym)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"sym_eigh needs a square matrix, got {a.shape}")
    evals, evecs = np.linalg.eigh(a)
    order = np.argsort(-evals, kind="stable")
    return evals[order], evecs[:, order]


def fix_sign(vec: np.ndarray) -> np.ndarray:
    """Flip ``vec`` so its largest-magnitude entry (first on ties) is positive."""
    if vec.size == 0:
        return vec
    i = int(np.argmax(np.abs(vec)))
    return -vec if vec[i] < 0 else vec


def pca_top_r(vectors, r: int):
    """Mean and top principal directions of a small set of vectors.

    Works on the n x n Gram matrix of the centered vectors, so the cost does not
    depend on the (possibly large) vector dimension. Returns
    ``(mean, components, kept)`` where ``components`` is a list of unit vectors
    ordered by descending covariance eigenvalue.
    """
    if len(vectors) == 0:
        raise PreconditionError("pca_top_r needs at least one vector")
    x = np.stack([as_vector(v) for v in vectors])
    n, d = x.shape
    mean = x.mean(axis=0)
    centered = x - mean
    limit = min(r, n - 1, d)
    if limit <= 0:
        return mean, [], 0
    gram = centered @ centered.T / n
    evals, evecs = sym_eigh(gram)
    components = []
    for k in range(limit):
        lam = evals[k]
        if lam < EIGEN_FLOOR:
            break
        u = centered.T @ evecs[:, k]
        u = u / np.linalg.norm(u)
        components.append(fix_sign(u))
    return mean, components, len(components)
