"""Symmetric-matrix primitives: negative-definite solves and extreme eigenvalues."""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

__all__ = [
    "SpectralBoundError",
    "ConvergenceError",
    "symmetrize",
    "is_symmetric",
    "neg_definite_cholesky",
    "solve_neg_definite",
    "max_eigenvalue",
]


class SpectralBoundError(ValueError):
    """-V is not positive-definite, i.e. lambda is at or below the top eigenvalue of W."""


class ConvergenceError(RuntimeError):
    """Iteration budget exhausted; carries the last estimate."""

    def __init__(self, message: str, estimate: float):
        super().__init__(message)
        self.estimate = estimate


def symmetrize(w: np.ndarray) -> np.ndarray:
    """Exactly symmetric projection (w + w.T) / 2."""
    w = np.asarray(w, dtype=np.float64)
    return (w + w.T) / 2.0


def is_symmetric(w: np.ndarray) -> bool:
    w = np.asarray(w)
    return w.ndim == 2 and w.shape[0] == w.shape[1] and np.array_equal(w, w.T)


def neg_definite_cholesky(v: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor L with L L^T = -V, for negative-definite V.

    Raises SpectralBoundError when -V is not positive-definite, which for
    V = W - lambda*I signals lambda at or below the spectral bound of W.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] != v.shape[1]:
        raise ValueError(f"expected square matrix, got shape {v.shape}")
    try:
        return np.linalg.cholesky(-v)
    except np.linalg.LinAlgError as exc:
        raise SpectralBoundError(
            "lambda below spectral bound: W - lambda*I is not negative-definite"
        ) from exc


def solve_with_cholesky(chol: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve (L L^T) y = rhs given the lower factor L; rhs may be (d,) or (d, k)."""
    y = solve_triangular(chol, rhs, lower=True)
    return solve_triangular(chol.T, y, lower=False)


def solve_neg_definite(v: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve V y = rhs for negative-definite symmetric V.

    Factorises -V (positive-definite) and negates, so the attempted Cholesky
    doubles as the definiteness check.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if rhs.shape[0] != v.shape[0]:
        raise ValueError(
            f"dimension mismatch: matrix {v.shape} vs rhs {rhs.shape}"
        )
    chol = neg_definite_cholesky(v)
    return -solve_with_cholesky(chol, rhs)


def max_eigenvalue(w: np.ndarray, tol: float = 1e-10, max_iters: int = 100_000) -> float:
    """Largest eigenvalue of symmetric `w` by shifted power iteration.

    Iterates on W + c*I with c = ||W||_F, which makes the sought eigenvalue
    the dominant one in magnitude.  The start vector is the normalised
    all-ones vector, so results are deterministic.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"expected square matrix, got shape {w.shape}")
    d = w.shape[0]
    shift = float(np.linalg.norm(w))
    if shift == 0.0:
        return 0.0
    if d == 1:
        return float(w[0, 0])

    vec = np.full(d, 1.0 / np.sqrt(d))
    estimate = float(vec @ (w @ vec))
    for _ in range(max_iters):
        nxt = w @ vec + shift * vec
        norm = np.linalg.norm(nxt)
        if norm == 0.0:
            # All-ones start lies in the kernel of the shifted matrix; the
            # dominant eigenvalue is then -shift on that subspace, which
            # cannot happen for c = Frobenius norm unless W is zero.
            return 0.0
        vec = nxt / norm
        new_estimate = float(vec @ (w @ vec))
        if abs(new_estimate - estimate) < tol:
            return new_estimate
        estimate = new_estimate
    raise ConvergenceError(
        f"power iteration did not converge within {max_iters} iterations "
        f"(last estimate {estimate})",
        estimate,
    )
