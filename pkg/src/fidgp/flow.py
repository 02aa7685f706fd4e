"""Normalizing-flow prior over flattened inducing matrices.

The flow is a stack of affine coupling layers.  Every linear map inside the
scale and shift conditioners is spectrally constrained: it is divided by
``max(1, sigma_hat)`` where ``sigma_hat`` is a persistent power-iteration
estimate of its largest singular value.  Coupling log-scales are squashed to
``[-s_cap, s_cap]`` with tanh, and the output layers start at zero so a fresh
flow is the identity map.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionMismatch
from .gaussian import DiagGaussianVariational
from .linalg import PowerIterState, orthogonal_init, spectral_norm_power

LOG_2PI = math.log(2.0 * math.pi)


def std_normal_logpdf(x: Tensor):
    """Row-wise log N(x; 0, I) for a (batch, dim) Tensor."""
    dim = x.shape[-1]
    return -0.5 * ad.sum(ad.square(x), axis=-1) - 0.5 * dim * LOG_2PI


class SpectralLinear:
    """Affine map ``x -> x W~^T + b`` with ``W~ = W / max(1, sigma_hat(W))``."""

    def __init__(self, n_in, n_out, rng, zero=False):
        if zero:
            w = np.zeros((n_out, n_in))
        else:
            w = rng.standard_normal((n_out, n_in)) / math.sqrt(max(n_in, 1))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)
        self.power = PowerIterState.random(n_out, n_in, rng)
        self.refresh()

    def normalized_weight(self):
        u, v = self.power.left_vec, self.power.right_vec
        sigma = ad.bilinear(u, self.weight, v)
        if float(sigma.data) > 1.0:
            return self.weight / sigma
        return self.weight

    def __call__(self, x):
        return x @ self.normalized_weight().T + self.bias

    def refresh(self, iters=1, tol=1e-10, max_extra=500):
        """``iters`` power rounds, then more until the estimate settles.

        A single round from the previous vectors lags behind a large step;
        the extra rounds stop once sigma moves by less than ``tol``
        (relative), which is slow only when the top singular values nearly
        coincide, and then any vector in that subspace is already close.
        """
        W = self.weight.data
        sigma, self.power = spectral_norm_power(W, iters, self.power)
        if sigma == 0.0:
            return
        u, v = self.power.left_vec, self.power.right_vec
        for _ in range(max_extra):
            v = W.T @ u
            v /= np.linalg.norm(v)
            Wv = W @ v
            new = float(np.linalg.norm(Wv))
            u = Wv / new
            done = abs(new - sigma) <= tol * new
            sigma = new
            if done:
                break
        self.power = PowerIterState(u, v)


class CouplingLayer:
    """Affine coupling: the ``cond`` half passes through unchanged and
    parameterizes an elementwise affine map of the ``trans`` half."""

    def __init__(self, dim, hidden, parity, rng, s_cap=2.0):
        half = dim // 2
        if parity % 2 == 0:
            self.cond, self.trans = np.arange(0, half), np.arange(half, dim)
        else:
            self.cond, self.trans = np.arange(half, dim), np.arange(0, half)
        self.dim, self.hidden, self.s_cap = dim, hidden, s_cap
        self._cond_first = parity % 2 == 0
        n_c, n_t = len(self.cond), len(self.trans)
        self.scale_in = SpectralLinear(n_c, hidden, rng)
        self.scale_out = SpectralLinear(hidden, n_t, rng, zero=True)
        self.shift_in = SpectralLinear(n_c, hidden, rng)
        self.shift_out = SpectralLinear(hidden, n_t, rng, zero=True)
        # halves are contiguous, so plain slices keep the tape cheap
        self._cond_sl = slice(int(self.cond[0]), int(self.cond[-1]) + 1) if n_c else slice(0, 0)
        self._trans_sl = slice(int(self.trans[0]), int(self.trans[-1]) + 1) if n_t else slice(0, 0)

    @property
    def mask(self):
        m = np.zeros(self.dim)
        m[self.cond] = 1.0
        return m

    def sublayers(self):
        return {
            "scale_in": self.scale_in,
            "scale_out": self.scale_out,
            "shift_in": self.shift_in,
            "shift_out": self.shift_out,
        }

    def _conditioner(self, x_c):
        s_raw = self.scale_out(ad.tanh(self.scale_in(x_c)))
        s = self.s_cap * ad.tanh(s_raw)
        t = self.shift_out(ad.tanh(self.shift_in(x_c)))
        return s, t

    def _assemble(self, x_c, y_t):
        parts = (x_c, y_t) if self._cond_first else (y_t, x_c)
        return ad.concat(parts, axis=-1)

    def forward(self, x):
        x_c, x_t = x[:, self._cond_sl], x[:, self._trans_sl]
        if len(self.trans) == 0:
            return x, Tensor(np.zeros(x.shape[0]))
        s, t = self._conditioner(x_c)
        y_t = x_t * ad.exp(s) + t
        return self._assemble(x_c, y_t), ad.sum(s, axis=-1)

    def inverse(self, y):
        y_c, y_t = y[:, self._cond_sl], y[:, self._trans_sl]
        if len(self.trans) == 0:
            return y, Tensor(np.zeros(y.shape[0]))
        s, t = self._conditioner(y_c)
        x_t = (y_t - t) * ad.exp(-s)
        return self._assemble(y_c, x_t), -ad.sum(s, axis=-1)


def _as_batch(u, dim):
    u = ad.as_tensor(u)
    if u.shape[-1] != dim or u.ndim not in (1, 2):
        raise DimensionMismatch(f"flow expects vectors of length {dim}, got shape {u.shape}")
    if u.ndim == 1:
        return ad.reshape(u, (1, dim)), True
    return u, False


class FlowPrior:
    """Composition of ``depth`` coupling layers with alternating halves."""

    def __init__(self, dim, depth=4, hidden=32, s_cap=2.0, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim, self.depth, self.hidden, self.s_cap = dim, depth, hidden, s_cap
        self.layers = [CouplingLayer(dim, hidden, k, rng, s_cap) for k in range(depth)]

    def forward(self, u0):
        x, single = _as_batch(u0, self.dim)
        logdet = Tensor(np.zeros(x.shape[0]))
        for layer in self.layers:
            x, ld = layer.forward(x)
            logdet = logdet + ld
        if single:
            return ad.reshape(x, (self.dim,)), ad.reshape(logdet, ())
        return x, logdet

    def inverse(self, u):
        """Returns ``(u0, log|det d u0/d u|)``."""
        x, single = _as_batch(u, self.dim)
        logdet = Tensor(np.zeros(x.shape[0]))
        for layer in reversed(self.layers):
            x, ld = layer.inverse(x)
            logdet = logdet + ld
        if single:
            return ad.reshape(x, (self.dim,)), ad.reshape(logdet, ())
        return x, logdet

    def log_prob(self, u):
        u0, ld = self.inverse(u)
        if u0.ndim == 1:
            return ad.reshape(std_normal_logpdf(ad.reshape(u0, (1, self.dim))), ()) + ld
        return std_normal_logpdf(u0) + ld

    def sublayers(self):
        for k, layer in enumerate(self.layers):
            for name, lin in layer.sublayers().items():
                yield f"{k}.{name}", lin

    def named_parameters(self):
        out = {}
        for name, lin in self.sublayers():
            out[f"{name}.weight"] = lin.weight
            out[f"{name}.bias"] = lin.bias
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def refresh_power(self, iters=1):
        for _, lin in self.sublayers():
            lin.refresh(iters)

    def normalized_sigmas(self):
        """Exact largest singular value of every constrained linear map."""
        out = {}
        for name, lin in self.sublayers():
            w = lin.normalized_weight().data
            out[name] = float(np.linalg.norm(w, 2)) if w.size else 0.0
        return out

    def randomize(self, rng, scale=0.3):
        """Perturb the zero-initialized output layers (tests and demos)."""
        for _, lin in self.sublayers():
            if not np.any(lin.weight.data):
                lin.weight.data = scale * rng.standard_normal(lin.weight.shape)
            lin.bias.data = scale * rng.standard_normal(lin.bias.shape)
        self.refresh_power(50)
        return self


def flow_forward(f: FlowPrior, u0):
    return f.forward(u0)


def flow_inverse(f: FlowPrior, u):
    return f.inverse(u)[0]


def log_prior_density(f: FlowPrior, u):
    return f.log_prob(u)


def flow_kl_terms(f: FlowPrior, q: DiagGaussianVariational, eps, prior=None):
    """Per-sample ``log q0(u0) - log|det J_g(u0)| - log p(g(u0))`` for the
    reparameterized draws ``u0 = m + s * eps``.

    Returns ``(kl_samples, u, u0)``.  ``prior=None`` means the standard-normal
    base density; otherwise it is a FlowPrior evaluated by change of variables.
    """
    eps = np.atleast_2d(eps)
    std = q.std
    u0 = q.mean + std * eps
    log_q0 = -0.5 * np.sum(eps * eps, axis=-1) - ad.sum(ad.log(std)) - 0.5 * f.dim * LOG_2PI
    u, logdet = f.forward(u0)
    log_p = std_normal_logpdf(u) if prior is None else prior.log_prob(u)
    return log_q0 - logdet - log_p, u, u0


def flow_kl_mc(f: FlowPrior, q: DiagGaussianVariational, prior=None, n_samples=1, rng=None):
    """Monte-Carlo estimate of KL[g# q0 || p] averaged over ``n_samples``."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = rng if rng is not None else np.random.default_rng()
    eps = rng.standard_normal((n_samples, f.dim))
    kl, _, _ = flow_kl_terms(f, q, eps, prior)
    return ad.mean(kl)


class SpectralTanhMap:
    """``h -> tanh(W~ h + b)`` repeated ``depth`` times with square,
    spectrally constrained ``W~``.

    Each layer's Jacobian is ``diag(tanh') W~``, so the map is 1-Lipschitz and
    ``log|det J| = sum_l log|det W~_l| + sum log tanh'`` is bounded above by the
    activation term alone.
    """

    def __init__(self, dim, depth, rng, bias=False):
        self.dim = dim
        self.weights = []
        self.biases = []
        for _ in range(depth):
            w = orthogonal_init(dim, dim, rng) * rng.uniform(0.7, 1.0, size=dim)[None, :]
            w = w / max(1.0, np.linalg.norm(w, 2))
            self.weights.append(w)
            self.biases.append(0.1 * rng.standard_normal(dim) if bias else np.zeros(dim))

    def __call__(self, h):
        h = np.asarray(h, dtype=float)
        for w, b in zip(self.weights, self.biases):
            h = np.tanh(h @ w.T + b)
        return h

    def lipschitz_bound(self):
        return float(np.prod([np.linalg.norm(w, 2) for w in self.weights]))

    def log_abs_det_jacobian(self, h):
        """Exact log|det J| at a single point, with the activation-only bound."""
        h = np.asarray(h, dtype=float)
        total, act = 0.0, 0.0
        for w, b in zip(self.weights, self.biases):
            a = w @ h + b
            h = np.tanh(a)
            d = np.log1p(-h * h)
            total += np.linalg.slogdet(w)[1] + d.sum()
            act += d.sum()
        return total, act
