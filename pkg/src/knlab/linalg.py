"""Top singular value by power iteration on the Gram matrix."""

from __future__ import annotations

import numpy as np

from .exceptions import DataError, NumericError

RESTART_SEED = 12345


def _power_iterate(gram: np.ndarray, v: np.ndarray, tol: float, max_iter: int) -> float:
    lam = float(v @ gram @ v)
    for _ in range(max_iter):
        w = gram @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new = float(v @ gram @ v)
        if abs(new - lam) < tol * max(1.0, abs(new)):
            return new
        lam = new
    return lam


def top_singular_value(matrix, tol: float = 1e-12, max_iter: int = 10_000) -> float:
    """Largest singular value of a rank-2 array.

    Iterates on ``M.T @ M`` from the normalised all-ones vector and from a
    fixed-seed random vector, keeping the larger Rayleigh quotient.  The
    all-ones vector alone can be an exact eigenvector of a smaller
    eigenvalue (two unit columns with negative cosine, for one).
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise DataError(f"expected a non-empty rank-2 array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix has non-finite entries")
    gram = m.T @ m
    if float(np.abs(gram).max()) == 0.0:
        return 0.0
    n = gram.shape[0]
    ones = np.full(n, 1.0 / np.sqrt(n))
    rand = np.random.default_rng(RESTART_SEED).standard_normal(n)
    rand /= np.linalg.norm(rand)
    lam = max(_power_iterate(gram, ones, tol, max_iter), _power_iterate(gram, rand, tol, max_iter))
    return float(np.sqrt(max(lam, 0.0)))
