"""The quadratic harmony function, its closed-form maximiser, triplet scoring,
analytic parameter gradients, relaxation dynamics, and the weight constraint.

Harmony of a hidden state h given a composed triplet embedding x is

    H(h, x) = 1/2 [ h'Wh + b'h - lam * ||h - x||^2 ]

with W symmetric.  When the Frobenius norm of W stays below lam, the matrix
V = W - lam*I is negative-definite and H has the unique maximiser

    mu(x) = -V^{-1} (b/2 + lam*x),

whose harmony serves as the triplet score.  The infinite-faithfulness mode
(lam is None) pins h = x and scores with the core term alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import neg_definite_cholesky, solve_with_cholesky, symmetrize

__all__ = [
    "HarmonyParams",
    "ScoredTriplet",
    "DynamicsError",
    "harmony",
    "harmony_type",
    "mu",
    "score",
    "score_detail",
    "score_gradients",
    "integrate_dynamics",
    "log_partition",
    "constrain_params",
]

# Norm-bound slack as a fraction of lam when not given explicitly.
DEFAULT_EPS_FRACTION = 0.01

_DIVERGENCE_LIMIT = 1e12


class DynamicsError(RuntimeError):
    """Relaxation failed; carries the last hidden state and step count."""

    def __init__(self, message: str, state: np.ndarray, steps: int):
        super().__init__(message)
        self.state = state
        self.steps = steps


@dataclass
class HarmonyParams:
    """Symmetric weight matrix W, bias b, faithfulness strength lam.

    ``lam=None`` selects the infinite-faithfulness mode, kept as a distinct
    flag rather than a large float.  For finite lam the invariant
    ||W||_F <= lam - eps keeps W - lam*I negative-definite; it is enforced by
    `constrain_params`, not by construction, so that a violating W can be
    handed to the projection.
    """

    W: np.ndarray
    b: np.ndarray
    lam: float | None
    eps: float | None = None
    _chol: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.shape != (self.b.size, self.b.size):
            raise ValueError(f"W shape {self.W.shape} incompatible with b size {self.b.size}")
        if self.lam is not None:
            self.lam = float(self.lam)
            if not np.isfinite(self.lam) or self.lam <= 0.0:
                raise ValueError("finite lam must be a positive real; use lam=None for the infinite mode")
            if self.eps is None:
                self.eps = DEFAULT_EPS_FRACTION * self.lam

    @property
    def dim(self) -> int:
        return self.b.size

    @property
    def infinite(self) -> bool:
        return self.lam is None

    def neg_v_cholesky(self) -> np.ndarray:
        """Lower Cholesky factor of -V = lam*I - W, computed lazily and cached.

        The cache is per-instance; optimiser steps produce fresh instances, so
        a stale factor can never be observed.  Concurrent readers may race to
        fill the cache, which is harmless (idempotent assignment).
        """
        if self.lam is None:
            raise ValueError("no Cholesky factor in the infinite-faithfulness mode")
        if self._chol is None:
            # The quadratic form only sees the symmetric part of W, so factor
            # that; a plain Cholesky would silently read one triangle.
            self._chol = neg_definite_cholesky(symmetrize(self.W) - self.lam * np.eye(self.dim))
        return self._chol

    def bound_satisfied(self) -> bool:
        """Whether ||W||_F <= lam - eps (vacuously true for the infinite mode)."""
        if self.lam is None:
            return True
        return float(np.linalg.norm(self.W)) <= self.lam - self.eps + 1e-12


@dataclass
class ScoredTriplet:
    """A composed embedding, its optimal hidden state, and the resulting score."""

    x: np.ndarray
    mu: np.ndarray | None  # None in the infinite-faithfulness mode
    score: float


def _check_dim(v: np.ndarray, p: HarmonyParams, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != p.dim:
        raise ValueError(f"{name} dim {v.shape[-1]} does not match parameter dim {p.dim}")
    return v


def harmony(h: np.ndarray, x: np.ndarray, p: HarmonyParams) -> float | np.ndarray:
    """H(h, x) for finite lam; vectorised over leading axes of h and x."""
    if p.lam is None:
        raise ValueError("harmony(h, x) requires finite lam; use harmony_type for the infinite mode")
    h = _check_dim(h, p, "h")
    x = _check_dim(x, p, "x")
    core = np.einsum("...i,ij,...j->...", h, p.W, h) + h @ p.b
    dev = h - x
    out = 0.5 * (core - p.lam * np.einsum("...i,...i->...", dev, dev))
    return float(out) if np.ndim(out) == 0 else out


def harmony_type(x: np.ndarray, p: HarmonyParams) -> float | np.ndarray:
    """Core harmony of the compositional embedding itself: (x'Wx + b'x) / 2."""
    x = _check_dim(x, p, "x")
    out = 0.5 * (np.einsum("...i,ij,...j->...", x, p.W, x) + x @ p.b)
    return float(out) if np.ndim(out) == 0 else out


def mu(x: np.ndarray, p: HarmonyParams) -> np.ndarray:
    """Closed-form harmony maximiser mu(x) = -V^{-1}(b/2 + lam*x).

    Accepts (d,) vectors or (..., d) batches.  Raises SpectralBoundError when
    lam does not dominate the spectrum of W.
    """
    if p.lam is None:
        raise ValueError("mu(x) requires finite lam")
    x = _check_dim(x, p, "x")
    rhs = 0.5 * p.b + p.lam * x
    chol = p.neg_v_cholesky()
    flat = rhs.reshape(-1, p.dim)
    sol = solve_with_cholesky(chol, flat.T).T
    return sol.reshape(x.shape)


def score(x: np.ndarray, p: HarmonyParams) -> float | np.ndarray:
    """Triplet score H(mu(x), x), via the one-solve closed form.

    Completing the square leaves score(x) = -lam*||x||^2 / 2 + m(x)'mu(x) / 4
    with m(x) = b + 2*lam*x, so a single negative-definite solve (shared with
    `mu`) suffices.  In the infinite mode this is just `harmony_type`.
    """
    if p.lam is None:
        return harmony_type(x, p)
    x = _check_dim(x, p, "x")
    m = p.b + 2.0 * p.lam * x
    opt = mu(x, p)
    out = -0.5 * p.lam * np.einsum("...i,...i->...", x, x) + 0.25 * np.einsum(
        "...i,...i->...", m, opt
    )
    return float(out) if np.ndim(out) == 0 else out


def score_detail(x: np.ndarray, p: HarmonyParams) -> ScoredTriplet:
    """Score a single embedding, returning the optimal hidden state alongside."""
    x = _check_dim(np.atleast_1d(x), p, "x")
    if p.lam is None:
        return ScoredTriplet(x=x, mu=None, score=float(harmony_type(x, p)))
    opt = mu(x, p)
    return ScoredTriplet(x=x, mu=opt, score=float(score(x, p)))


def score_gradients(
    x: np.ndarray, p: HarmonyParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic (d score/dx, d score/dW, d score/db) for one embedding.

    With finite lam the envelope property of the maximiser gives
    grad_x = lam*(mu(x) - x), grad_W = mu mu'/2, grad_b = mu/2; the infinite
    mode differentiates the core term directly.
    """
    x = _check_dim(x, p, "x")
    if p.lam is None:
        return p.W @ x + 0.5 * p.b, 0.5 * np.outer(x, x), 0.5 * x
    opt = mu(x, p)
    return p.lam * (opt - x), 0.5 * np.outer(opt, opt), 0.5 * opt


def integrate_dynamics(
    x: np.ndarray,
    p: HarmonyParams,
    h0: np.ndarray,
    step: float,
    tol: float = 1e-10,
    max_steps: int = 100_000,
) -> tuple[np.ndarray, int]:
    """Explicit-Euler relaxation of the harmony-gradient flow.

    Iterates h <- h + step * (W h + b/2 + lam*(x - h)) until the update's
    max-norm drops below `tol`.  The step must lie in (0, 2/(lam + ||W||_F))
    so the affine update map contracts.  Verification tool; inference uses
    the closed form `mu`.
    """
    if p.lam is None:
        raise ValueError("dynamics require finite lam")
    x = _check_dim(x, p, "x")
    h = _check_dim(np.array(h0, dtype=np.float64, copy=True), p, "h0")
    limit = 2.0 / (p.lam + float(np.linalg.norm(p.W)))
    if not (0.0 < step < limit):
        raise ValueError(f"step must lie in (0, {limit:.6g}) for contraction, got {step}")
    drive = 0.5 * p.b + p.lam * x
    for steps_taken in range(max_steps):
        delta = step * (p.W @ h - p.lam * h + drive)
        if np.max(np.abs(delta)) < tol:
            return h, steps_taken
        h = h + delta
        if np.max(np.abs(h)) > _DIVERGENCE_LIMIT:
            raise DynamicsError("step too large: state diverged", h, steps_taken + 1)
    if np.max(np.abs(step * (p.W @ h - p.lam * h + drive))) < tol:
        return h, max_steps
    raise DynamicsError(f"no convergence within {max_steps} steps", h, max_steps)


def log_partition(x: np.ndarray, p: HarmonyParams) -> float | np.ndarray:
    """log Z(x) of the Gaussian exp(H(h, x)) over h.

    Equals log det(2 pi (-V)^{-1}) / 2 + score(x); the log-determinant comes
    from the cached Cholesky factor.  (-V rather than V keeps the Gaussian
    normaliser well-defined for the negative-definite V.)
    """
    if p.lam is None:
        raise ValueError("log_partition requires finite lam")
    chol = p.neg_v_cholesky()
    logdet_neg_v = 2.0 * float(np.sum(np.log(np.diag(chol))))
    const = 0.5 * (p.dim * np.log(2.0 * np.pi) - logdet_neg_v)
    out = const + score(x, p)
    return float(out) if np.ndim(out) == 0 else out


def constrain_params(p: HarmonyParams) -> HarmonyParams:
    """Project parameters back onto the feasible set.

    Symmetrises W, then (finite lam only) rescales it to Frobenius norm
    lam - eps whenever it exceeds that bound, which keeps W - lam*I
    negative-definite.
    """
    w = symmetrize(p.W)
    if p.lam is not None:
        bound = p.lam - p.eps
        norm = float(np.linalg.norm(w))
        if norm > bound:
            w = w * (bound / norm)
    return HarmonyParams(W=w, b=p.b.copy(), lam=p.lam, eps=p.eps)
