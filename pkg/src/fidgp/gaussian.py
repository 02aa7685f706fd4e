"""Gaussian building blocks: partitioned conditionals, Kronecker-factored
conditional means, Matheron-style pathwise sampling and the two closed-form
KL terms used by the training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidScale, ShapeMismatch
from .linalg import JitterSchedule, cho_solve_lower, cholesky_jittered


@dataclass
class JointGaussian:
    mean: np.ndarray
    cov: np.ndarray
    split_index: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ShapeMismatch(f"mean of length {d} vs covariance {self.cov.shape}")
        if not 0 < self.split_index < d:
            raise ValueError(f"split_index must lie in (0, {d}), got {self.split_index}")


def conditional_gaussian(j: JointGaussian, y_obs, sched: JitterSchedule | None = None):
    """Moments of x | y for a partitioned Gaussian over (x, y).

    The conditional covariance is the Schur complement
    ``S_xx - S_xy S_yy^{-1} S_yx``; ``S_yy`` is factorized with a jittered
    Cholesky so nearly singular observation blocks still work.
    """
    n = j.split_index
    mu_x, mu_y = j.mean[:n], j.mean[n:]
    sxx, sxy = j.cov[:n, :n], j.cov[:n, n:]
    syy = j.cov[n:, n:]
    y_obs = np.asarray(y_obs, dtype=float).reshape(-1)
    if y_obs.shape != mu_y.shape:
        raise ShapeMismatch(f"observation has shape {y_obs.shape}, expected {mu_y.shape}")
    L, _ = cholesky_jittered(syy, sched)
    gain = cho_solve_lower(L, sxy.T).T
    mu = mu_x + gain @ (y_obs - mu_y)
    cov = sxx - gain @ sxy.T
    return mu, 0.5 * (cov + cov.T)


def rbf_gram(m: int, lengthscale: float):
    """Squared-exponential Gram matrix over the index grid 0..m-1."""
    idx = np.arange(m, dtype=float)
    d = idx[:, None] - idx[None, :]
    return np.exp(-0.5 * (d / lengthscale) ** 2)


@dataclass
class KroneckerTransforms:
    """Row/column transforms of the matrix-normal conditional and the
    Cholesky factors of the inducing prior's row/column covariances."""

    t_row: object  # d_out x M_out, Tensor or array
    t_col: object  # d_in x M_in
    l_row: np.ndarray  # M_out x M_out lower triangular
    l_col: np.ndarray  # M_in x M_in lower triangular

    @classmethod
    def from_grams(cls, t_row, t_col, gram_row, gram_col, sched=None):
        l_row, _ = cholesky_jittered(gram_row, sched)
        l_col, _ = cholesky_jittered(gram_col, sched)
        return cls(t_row, t_col, l_row, l_col)

    @property
    def m_out(self):
        return self.l_row.shape[0]

    @property
    def m_in(self):
        return self.l_col.shape[0]


@dataclass
class DiagGaussianVariational:
    """q(v) = N(mean, diag(std^2)) in whitened inducing coordinates."""

    mean: Tensor
    log_std: Tensor
    max_std: float = 0.1

    @property
    def std(self):
        return ad.exp(ad.minimum_const(self.log_std, np.log(self.max_std)))

    def project(self):
        """Clip stored log-stds to the std cap (used after optimizer steps)."""
        self.log_std.data = np.minimum(self.log_std.data, np.log(self.max_std))


def _lam_value(lam):
    val = float(np.asarray(lam.data if isinstance(lam, Tensor) else lam))
    if not val > 0:
        raise InvalidScale(f"lambda must be positive, got {val}")
    return val


def matrix_normal_cond_mean(kt: KroneckerTransforms, U):
    """E[W | U] = T_row U T_col^T."""
    U = ad.as_tensor(U)
    t_row, t_col = ad.as_tensor(kt.t_row), ad.as_tensor(kt.t_col)
    if U.shape != (t_row.shape[1], t_col.shape[1]):
        raise ShapeMismatch(
            f"U has shape {U.shape}; transforms expect {(t_row.shape[1], t_col.shape[1])}"
        )
    return t_row @ U @ t_col.T


def _whiten(kt, v):
    return ad.as_tensor(kt.l_row) @ v @ ad.as_tensor(kt.l_col).T


def _prior_draws(kt, rng):
    t_row, t_col = np.shape(_data(kt.t_row)), np.shape(_data(kt.t_col))
    v_prior = rng.standard_normal((kt.m_out, kt.m_in))
    G = rng.standard_normal((t_row[0], t_col[0]))
    return v_prior, G


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def matheron_sample(kt, U, sigma_p, lam, rng, return_prior=False):
    """Pathwise draw of W | U.

    A joint prior draw ``(W_prior, U_prior)`` is corrected by the conditional
    mean map: ``W = W_prior + T_row (U - U_prior) T_col^T``.  The prior's
    inducing block is ``L_row V L_col^T`` with ``V`` standard normal, and
    ``W_prior = T_row U_prior T_col^T + lam * sigma_p * G``.
    """
    _lam_value(lam)
    if sigma_p <= 0:
        raise InvalidScale(f"sigma_p must be positive, got {sigma_p}")
    v_prior, G = _prior_draws(kt, rng)
    u_prior = _whiten(kt, Tensor(v_prior))
    w_prior = matrix_normal_cond_mean(kt, u_prior) + lam * sigma_p * G
    W = w_prior + matrix_normal_cond_mean(kt, ad.as_tensor(U) - u_prior)
    return (W, w_prior) if return_prior else W


def whitened_matheron_sample(kt, v, sigma_p, lam, rng, return_prior=False):
    """As :func:`matheron_sample` with the inducing matrix given in whitened
    coordinates: ``W = W_prior + T_row L (v - v_prior) L^T T_col^T``."""
    _lam_value(lam)
    if sigma_p <= 0:
        raise InvalidScale(f"sigma_p must be positive, got {sigma_p}")
    v_prior, G = _prior_draws(kt, rng)
    u_prior = _whiten(kt, Tensor(v_prior))
    w_prior = matrix_normal_cond_mean(kt, u_prior) + lam * sigma_p * G
    W = w_prior + matrix_normal_cond_mean(kt, _whiten(kt, ad.as_tensor(v) - v_prior))
    return (W, w_prior) if return_prior else W


def reparam_sample(kt, U, sigma_p, lam, rng):
    """Direct draw ``W = T_row U T_col^T + lam * sigma_p * G``."""
    _lam_value(lam)
    if sigma_p <= 0:
        raise InvalidScale(f"sigma_p must be positive, got {sigma_p}")
    G = rng.standard_normal((np.shape(_data(kt.t_row))[0], np.shape(_data(kt.t_col))[0]))
    return matrix_normal_cond_mean(kt, U) + lam * sigma_p * G


def conditional_weight_kl(D, lam):
    """KL between N(mu, (lam sigma_p)^2 I_D) and N(mu, sigma_p^2 I_D):
    ``D/2 (lam^2 - 1 - 2 log lam)``."""
    _lam_value(lam)
    lam_t = ad.as_tensor(lam)
    out = (0.5 * D) * (ad.square(lam_t) - 1.0 - 2.0 * ad.log(lam_t))
    return out if isinstance(lam, Tensor) else float(out.data)


def diag_gaussian_kl(q: DiagGaussianVariational):
    """KL[N(m, diag s^2) || N(0, I)]."""
    s = q.std
    m = ad.as_tensor(q.mean)
    terms = ad.square(m) + ad.square(s) - 1.0 - 2.0 * ad.log(s)
    return 0.5 * ad.sum(terms)
