"""Dense linear algebra helpers: jittered Cholesky, power-iteration spectral
norms and ridge projectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .errors import NotPositiveDefinite, NotSymmetric, ShapeMismatch, SingularGram

EPS_DIV = 1e-12


@dataclass(frozen=True)
class JitterSchedule:
    initial: float = 1e-6
    growth_factor: float = 10.0
    max_jitter: float = 1e-2

    def __post_init__(self):
        if not (self.initial > 0 and self.max_jitter > 0):
            raise ValueError("jitter values must be positive")
        if self.growth_factor <= 1:
            raise ValueError("growth_factor must exceed 1")
        if self.initial > self.max_jitter:
            raise ValueError("initial jitter exceeds max_jitter")

    def values(self):
        """Jitter levels tried in order, starting with no jitter at all."""
        out = [0.0]
        j = self.initial
        # tolerate float drift on the last geometric step
        while j <= self.max_jitter * (1 + 1e-9):
            out.append(j)
            j *= self.growth_factor
        return out


@dataclass(frozen=True)
class PowerIterState:
    left_vec: np.ndarray
    right_vec: np.ndarray

    @classmethod
    def random(cls, rows: int, cols: int, rng: np.random.Generator) -> "PowerIterState":
        u = rng.standard_normal(rows)
        v = rng.standard_normal(cols)
        return cls(_unit(u), _unit(v))


def _unit(x):
    n = np.linalg.norm(x)
    if n == 0:
        out = np.zeros_like(x, dtype=float)
        if out.size:
            out[0] = 1.0
        return out
    return x / n


def _check_symmetric(A, rtol=1e-10):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeMismatch(f"expected a square matrix, got shape {A.shape}")
    scale = max(np.max(np.abs(A)), 1e-300) if A.size else 1.0
    if A.size and np.max(np.abs(A - A.T)) > rtol * scale:
        raise NotSymmetric("matrix is not symmetric within 1e-10 relative")
    return A


def cholesky_jittered(A, sched: JitterSchedule | None = None):
    """Lower Cholesky factor of ``A + jitter*I`` for the smallest jitter in the
    schedule that factorizes.

    Returns ``(L, jitter_used)``.  Raises NotPositiveDefinite once the
    schedule is exhausted.
    """
    sched = sched or JitterSchedule()
    A = _check_symmetric(A)
    eye = np.eye(A.shape[0])
    for jitter in sched.values():
        try:
            L = np.linalg.cholesky(A + jitter * eye)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return L, jitter
    raise NotPositiveDefinite(
        f"Cholesky failed up to jitter {sched.max_jitter:g} for a {A.shape[0]}x{A.shape[0]} matrix"
    )


def cho_solve_lower(L, B):
    """Solve ``(L L^T) X = B`` given the lower factor."""
    return sla.cho_solve((L, True), B)


def spectral_norm_power(W, iters: int, state: PowerIterState):
    """Estimate sigma_max(W) with ``iters`` rounds of power iteration.

    Returns ``(sigma, new_state)``; the input state is not modified.
    """
    W = np.asarray(W, dtype=float)
    u, v = state.left_vec, state.right_vec
    if u.shape != (W.shape[0],) or v.shape != (W.shape[1],):
        raise ShapeMismatch(
            f"power state shapes {u.shape}/{v.shape} do not fit matrix {W.shape}"
        )
    if W.size == 0 or not np.any(W):
        return 0.0, state
    for _ in range(iters):
        v = _unit(W.T @ u)
        u = _unit(W @ v)
    sigma = float(u @ W @ v)
    return abs(sigma), PowerIterState(u, v)


def spectral_normalize(W, state: PowerIterState, iters: int = 1):
    """Return ``W / max(sigma, EPS_DIV)`` and the refreshed power state."""
    sigma, state = spectral_norm_power(W, iters, state)
    return np.asarray(W, dtype=float) / max(sigma, EPS_DIV), state


def ridge_projector(U, lambda_proj: float):
    """``P = U^T (U U^T + lambda I)^{-1} U``.

    With ``lambda_proj == 0`` the inverse becomes a pseudoinverse computed from
    the eigendecomposition of the Gram matrix (eigenvalues below
    ``1e-10 * max`` are discarded).
    """
    U = np.asarray(U, dtype=float)
    if U.ndim != 2:
        raise ShapeMismatch(f"U must be a matrix, got shape {U.shape}")
    if lambda_proj < 0:
        raise ValueError("lambda_proj must be nonnegative")
    gram = U @ U.T
    if lambda_proj > 0:
        L, _ = cholesky_jittered(gram + lambda_proj * np.eye(gram.shape[0]))
        P = U.T @ cho_solve_lower(L, U)
    else:
        evals, evecs = np.linalg.eigh(gram)
        top = evals.max() if evals.size else 0.0
        keep = evals > 1e-10 * top if top > 0 else np.zeros_like(evals, dtype=bool)
        if not np.any(keep):
            raise SingularGram("U U^T has rank 0 after the pseudoinverse cutoff")
        B = evecs[:, keep].T @ U / np.sqrt(evals[keep])[:, None]
        P = B.T @ B
    return 0.5 * (P + P.T)


def orthogonal_init(rows: int, cols: int, rng: np.random.Generator):
    """Semi-orthogonal matrix from the QR factorization of a Gaussian draw."""
    big, small = max(rows, cols), min(rows, cols)
    q, r = np.linalg.qr(rng.standard_normal((big, small)))
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T
