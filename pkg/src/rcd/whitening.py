"""Covariance estimation and inverse matrix square roots.

The whitening matrix used throughout is the inverse square root of the
trace-normalized covariance of a stacked set of noise maps. The fast path is
the one-matrix Newton iteration

    Y_0 = I,   Y_k = (3 Y_{k-1} - Y_{k-1}^3 S) / 2

which converges to S^{-1/2} whenever ||I - S||_2 < 1; dividing S by its
trace guarantees that condition for any nonzero PSD matrix. The exact
eigendecomposition path is kept as the slow reference oracle.

All functions are pure and operate on float64 numpy arrays.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, DivergenceError, PreconditionError, SingularMatrixError

Array = np.ndarray

TRACE_TOL = 1e-10          # trace-normalization acceptance window
SYMMETRY_RTOL = 1e-12      # covariance symmetry check
EIGEN_FLOOR_REL = 1e-10    # smallest usable eigenvalue, relative to trace


def covariance(stack: Array) -> Array:
    """Sample covariance of the rows of an (L, M) stack, rows mean-centered.

    Denominator is M-1, matching the standard-deviation convention used for
    noise levels.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 2:
        raise DegenerateInputError(f"expected a 2-D stack, got shape {stack.shape}")
    L, M = stack.shape
    if M < 2:
        raise DegenerateInputError(f"need at least 2 columns for covariance, got {M}")
    centered = stack - stack.mean(axis=1, keepdims=True)
    sigma = centered @ centered.T / (M - 1)
    return 0.5 * (sigma + sigma.T)


def trace_normalize(sigma: Array) -> Array:
    """Scale a PSD matrix to unit trace, putting its eigenvalues in (0, 1]."""
    sigma = np.asarray(sigma, dtype=np.float64)
    tr = float(np.trace(sigma))
    if tr <= 0.0:
        raise DegenerateInputError(f"trace must be positive, got {tr} (all-zero noise stack?)")
    return sigma / tr


def is_trace_normalized(sigma: Array, tol: float = TRACE_TOL) -> bool:
    return abs(float(np.trace(sigma)) - 1.0) <= tol


def newton_schulz_inv_sqrt(sigma: Array, iterations: int = 4) -> Array:
    """T-step Newton iterate approximating sigma^{-1/2}.

    ``sigma`` must be trace-normalized (checked); each iterate is
    re-symmetrized to suppress float drift, which leaves the exact iterate
    unchanged.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if iterations < 1:
        raise PreconditionError(f"iteration count must be >= 1, got {iterations}")
    if not is_trace_normalized(sigma):
        # trace normalization is the cheap sufficient condition; accept any
        # input that satisfies the actual convergence condition
        # ||I - sigma||_2 < 1 (e.g. the identity, a fixed point)
        ev = np.linalg.eigvalsh(0.5 * (sigma + sigma.T))
        if ev[0] <= 0.0 or ev[-1] >= 2.0:
            raise PreconditionError(
                f"input must be trace-normalized (trace={np.trace(sigma):.6g}) or have "
                "eigenvalues in (0, 2); apply trace_normalize first")
    y = np.eye(sigma.shape[0])
    for k in range(iterations):
        y = 0.5 * (3.0 * y - y @ y @ y @ sigma)
        y = 0.5 * (y + y.T)
        if not np.isfinite(y).all():
            raise DivergenceError(f"Newton iteration produced non-finite values at step {k + 1}")
    return y


def eigen_inv_sqrt(sigma: Array, clamp: float | None = None) -> Array:
    """Exact inverse square root via symmetric eigendecomposition.

    Reference oracle for tests and diagnostics, and the fallback path when
    the Newton iteration cannot be trusted. With ``clamp`` set, eigenvalues
    below the floor are raised to it instead of raising; callers that clamp
    should surface their own diagnostic.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    w, v = np.linalg.eigh(0.5 * (sigma + sigma.T))
    floor = EIGEN_FLOOR_REL * max(float(np.trace(sigma)), np.finfo(np.float64).tiny)
    if w[0] <= floor:
        if clamp is None:
            raise SingularMatrixError(
                f"matrix is near-singular: smallest eigenvalue {w[0]:.3e} "
                f"<= floor {floor:.3e}", float(w[0]))
        w = np.maximum(w, clamp)
    return (v * w ** -0.5) @ v.T


def whitening_residual(y: Array, sigma: Array) -> float:
    """Relative Frobenius distance of y @ sigma @ y from the identity."""
    L = sigma.shape[0]
    r = y @ sigma @ y - np.eye(L)
    return float(np.linalg.norm(r) / np.sqrt(L))


def offdiag_frobenius(sigma: Array) -> float:
    """Frobenius norm of the off-diagonal part of a square matrix."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return float(np.linalg.norm(sigma - np.diag(np.diag(sigma))))
