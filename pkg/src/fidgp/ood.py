"""Projection-residual out-of-distribution scoring and the margin diagnostics
that certify separation of in- and out-of-distribution residuals."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import Tape
from .errors import DimensionMismatch, EmptyInput, EmptyKeyLayers
from .flow import SpectralTanhMap
from .linalg import orthogonal_init, ridge_projector
from .model import FidgpNet, InducingLayer, layer_forward


def feature_grad_vector(h, g):
    """``z = vec(h) * vec(grad_h loss)``."""
    h, g = np.asarray(h, dtype=float), np.asarray(g, dtype=float)
    if h.size != g.size:
        raise DimensionMismatch(f"activation has {h.size} entries but gradient has {g.size}")
    return h.reshape(-1) * g.reshape(-1)


@dataclass
class KeyLayerProjector:
    """Ridge projector onto the row space of ``U`` (``M x N``).

    Residuals use ``z - U^T (U U^T + lambda I)^{-1} U z`` so the ``N x N``
    matrix is never formed; :meth:`matrix` builds it for inspection.
    """

    layer_id: int
    U_snapshot: np.ndarray
    lambda_proj: float
    _gram_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        U = self.U_snapshot
        gram = U @ U.T
        if self.lambda_proj > 0:
            self._gram_inv = np.linalg.inv(gram + self.lambda_proj * np.eye(len(U)))
        else:
            # same cutoff as the dense pseudoinverse path
            self._gram_inv = np.linalg.pinv(gram, rcond=1e-10, hermitian=True)

    @property
    def dim(self):
        return self.U_snapshot.shape[1]

    def matrix(self):
        return ridge_projector(self.U_snapshot, self.lambda_proj)

    def project(self, z):
        z = np.asarray(z, dtype=float)
        U = self.U_snapshot
        return (z @ U.T) @ self._gram_inv @ U

    def residual(self, z):
        """``(I - P) z`` for a vector or a batch of row vectors."""
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.dim:
            raise DimensionMismatch(f"projector acts on length {self.dim}, got {z.shape[-1]}")
        return z - self.project(z)


def weight_row_basis(layer, max_rows=256):
    """Rows of ``U`` in the layer's flattened weight space.

    An inducing layer contributes ``u_bar[i, j] * vec(t_row[:, i] t_col[:, j]^T)``
    for every inducing entry, keeping the ``max_rows`` largest by norm.  A
    dense layer contributes its rank-one SVD terms ``s_k vec(a_k b_k^T)``.
    """
    if isinstance(layer, InducingLayer):
        ubar = layer.posterior_mean_inducing()
        tr, tc = layer.t_row.data, layer.t_col.data
        norms = np.abs(ubar) * np.outer(np.linalg.norm(tr, axis=0), np.linalg.norm(tc, axis=0))
        flat = np.argsort(-norms, axis=None, kind="stable")[:max_rows]
        ii, jj = np.unravel_index(flat, ubar.shape)
        rows = ubar[ii, jj][:, None, None] * tr.T[ii][:, :, None] * tc.T[jj][:, None, :]
    else:
        a, sv, bt = np.linalg.svd(np.asarray(layer.mean_weight()), full_matrices=False)
        k = min(len(sv), max_rows)
        rows = sv[:k, None, None] * a.T[:k, :, None] * bt[:k, None, :]
    return rows.reshape(len(rows), -1)


def output_basis(layer):
    """Rows spanning the range of the layer's posterior-mean weight, in the
    layer's output space: the columns of ``T_row u_bar`` for an inducing
    layer, the weight columns for a dense one."""
    if isinstance(layer, InducingLayer):
        return (layer.t_row.data @ layer.posterior_mean_inducing()).T
    return np.asarray(layer.mean_weight()).T


def build_projector(layer, lambda_proj=1e-3, layer_id=0, max_rows=256):
    return KeyLayerProjector(layer_id, weight_row_basis(layer, max_rows), lambda_proj)


def build_output_projector(layer, lambda_proj=1e-3, layer_id=0):
    return KeyLayerProjector(layer_id, output_basis(layer), lambda_proj)


def build_projectors(model: FidgpNet, key_layers, lambda_proj=1e-3, max_rows=256):
    if not key_layers:
        raise EmptyKeyLayers("no key layers selected")
    out = []
    for k in key_layers:
        if not 1 <= k < len(model.layers):
            raise ValueError(f"key layer {k} is not a hidden layer (1..{len(model.layers) - 1})")
        out.append(build_projector(model.layers[k - 1], lambda_proj, k, max_rows))
    return out


def _output_grad(out: np.ndarray, task, loss_mode):
    """Gradient of the label-free test loss with respect to the outputs."""
    if task == "regression":
        # 0.5 ||y_hat - sg(y_hat) - 1||^2: unit gradient through the mean
        return -np.ones_like(out)
    z = out - out.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    if loss_mode == "uniform":
        return p - 1.0 / out.shape[1]
    onehot = np.eye(out.shape[1])[out.argmax(axis=1)]
    return p - onehot


def feature_grad_batch(model: FidgpNet, X, key_layers, loss_mode="pseudo_label", rng=None, mode="mean"):
    """Per-sample weight-shaped feature-gradient vectors for each key layer.

    For layer ``k`` with input activation ``x`` and output gradient ``g``
    (taken at the pre-activation), ``z = vec(H) * vec(G)`` with
    ``H[i, j] = x[j]`` and ``G[i, j] = g[i]``.  The loss behind ``g`` is
    cross-entropy against the predicted class (``"pseudo_label"``) or the
    uniform distribution (``"uniform"``), or, for ``"activation"``, the sum
    of the key layer's own activations, which stays informative when the
    layers above saturate.  One forward and one backward
    pass serve the whole batch: samples do not interact, so each row of the
    batch gradient is that sample's own gradient.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    X = np.asarray(X, dtype=float)
    if len(X) == 0:
        raise EmptyInput("empty batch")
    with Tape() as tape:
        res = model.forward(X, rng, mode)
        hs = res.hidden
        if loss_mode == "activation":
            grads = [np.ones(h.shape) for h in hs]
        else:
            seed = _output_grad(res.out.data, model.task, loss_mode)
            grads = tape.gradient(ad.sum(res.out * seed), hs)
    inputs = [model.x_scale.apply(X)] + [h.data for h in hs]
    out = {}
    for k in key_layers:
        h_out = hs[k - 1].data
        g = grads[k - 1] * (1.0 - h_out * h_out)  # through tanh to the pre-activation
        x = inputs[k - 1]
        n, d_out, d_in = len(X), g.shape[1], x.shape[1]
        H = np.broadcast_to(x[:, None, :], (n, d_out, d_in)).reshape(n, -1)
        G = np.broadcast_to(g[:, :, None], (n, d_out, d_in)).reshape(n, -1)
        out[k] = H * G
    return out


def score_batch(model: FidgpNet, projectors, X, loss_mode="pseudo_label", rng=None, mode="mean"):
    """Average projection residual norm over the key layers, per sample."""
    if not projectors:
        raise EmptyKeyLayers("no key-layer projectors given")
    keys = [p.layer_id for p in projectors]
    zs = feature_grad_batch(model, X, keys, loss_mode, rng, mode)
    return score_from_features([zs[p.layer_id] for p in projectors], projectors)


def score_from_features(zs, projectors):
    if not projectors:
        raise EmptyKeyLayers("no key-layer projectors given")
    norms = [np.linalg.norm(p.residual(z), axis=-1) for z, p in zip(zs, projectors)]
    return np.mean(norms, axis=0)


def auroc(scores_id, scores_ood):
    """Rank-based AUROC with OoD as the positive class; ties count one half."""
    a, b = np.asarray(scores_id, dtype=float).ravel(), np.asarray(scores_ood, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise EmptyInput("auroc needs at least one score in each group")
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[a.size:].sum() - b.size * (b.size + 1) / 2.0
    return float(u / (a.size * b.size))


# ---------------------------------------------------------------- margins


@dataclass
class MarginReport:
    S_estimate: float
    E_norm_estimate: float
    separation_holds: bool
    n_probe: int
    n_E_samples: int
    layer_id: int = 0

    def as_dict(self):
        return {
            "layer_id": self.layer_id,
            "S_estimate": self.S_estimate,
            "E_norm_estimate": self.E_norm_estimate,
            "separation_holds": self.separation_holds,
            "n_probe": self.n_probe,
            "n_E_samples": self.n_E_samples,
        }


def _unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def margin_objective(W, b, P, X):
    """``||(I - P) tanh(W x + b)||`` for each unit row ``x`` of ``X``."""
    h = np.tanh(X @ W.T + b)
    return np.linalg.norm(h - h @ P, axis=1)


def estimate_margin(objective, dim, n_probe, rng, steps=50, step_size=1e-2, fd_h=1e-6):
    """Minimum of ``objective`` over the unit sphere in ``dim`` dimensions.

    Random probes are refined by projected gradient descent with central
    finite-difference gradients, renormalizing after every step.
    """
    X = _unit_rows(rng.standard_normal((n_probe, dim)))
    eye = np.eye(dim)
    for _ in range(steps):
        grad = np.empty_like(X)
        for j in range(dim):
            grad[:, j] = (objective(X + fd_h * eye[j]) - objective(X - fd_h * eye[j])) / (2 * fd_h)
        X = _unit_rows(X - step_size * grad)
    vals = objective(X)
    return float(vals.min()), X[int(vals.argmin())]


def sampled_weight_residual_norm(layer: InducingLayer, n_E, rng, mode="reparam"):
    """Largest spectral norm of ``W - T_row u T_col^T`` over ``n_E`` draws,
    with ``u`` the inducing sample behind the same ``W``; what remains is the
    isotropic residual alone."""
    x = np.zeros((1, layer.d_in))
    worst = 0.0
    for _ in range(n_E):
        _, s = layer_forward(layer, x, rng, mode)
        low_rank = layer.t_row.data @ s.u.data @ layer.t_col.data.T
        worst = max(worst, float(np.linalg.norm(s.W.data - low_rank, 2)))
    return worst


def margin_report(layer: InducingLayer, projector: KeyLayerProjector, n_probe=1024, n_E=32, rng=None,
                  steps=50, step_size=1e-2):
    """S: worst-case clean residual of ``tanh(W_bar x + b)`` over unit ``x``,
    with ``projector`` acting on the layer's output space; ||E||: largest
    spectral norm of the residual part of a sampled weight."""
    if n_probe < 64:
        raise ValueError("margin_report needs at least 64 probes")
    if projector.dim != layer.d_out:
        raise DimensionMismatch(f"margin projector acts on length {projector.dim}, layer outputs {layer.d_out}")
    rng = rng if rng is not None else np.random.default_rng(0)
    W = layer.mean_weight()
    b = layer.bias.data
    P = projector.matrix()
    S, _ = estimate_margin(lambda X: margin_objective(W, b, P, X), layer.d_in, n_probe, rng, steps, step_size)
    e_norm = sampled_weight_residual_norm(layer, n_E, rng)
    return MarginReport(S, e_norm, bool(S > 2 * e_norm), n_probe, n_E, projector.layer_id)


# ---------------------------------------------------------------- constructive check


@dataclass
class LemmaDemoResult:
    sup_id: float
    inf_ood: float
    certified: bool
    S_measured: float
    E_norm: float
    d_id: np.ndarray = field(repr=False)
    d_ood: np.ndarray = field(repr=False)
    clean_ood: np.ndarray = field(repr=False)

    @property
    def step2_holds(self):
        return bool(np.all(self.d_id <= self.E_norm + 1e-8))

    @property
    def step3_holds(self):
        return bool(np.all(self.d_ood >= self.S_measured - self.E_norm - 1e-8))


class BlockTanhMap:
    """``g = R (F_V + F_perp) R^T``: independent 1-Lipschitz tanh maps on a
    subspace ``V`` and its complement, so ``g`` maps ``V`` into itself."""

    def __init__(self, basis_v, basis_perp, depth, rng):
        self.R = np.hstack([basis_v, basis_perp])
        self.m = basis_v.shape[1]
        self.f_v = SpectralTanhMap(self.m, depth, rng)
        self.f_perp = SpectralTanhMap(self.R.shape[0] - self.m, depth, rng)

    def __call__(self, y):
        c = y @ self.R
        out = np.hstack([self.f_v(c[:, :self.m]), self.f_perp(c[:, self.m:])])
        return out @ self.R.T


def lemma_separation_demo(dim_N, dim_M, epsilon, rng, n_samples=1000, g=None, depth=2, ood_perp=(0.3, 1.0)):
    """Synthetic instance with known ``U``, ``E`` (``||E|| = epsilon``) and a
    1-Lipschitz ``g``; measures residuals ``d(x) = ||(I-P) g((A+E) x)||`` for
    unit inputs whose clean image lies in the row space of ``U`` (ID) or has
    a component of relative size in ``ood_perp`` outside it (OoD).
    """
    if not 0 < dim_M < dim_N:
        raise ValueError("need 0 < dim_M < dim_N")
    U_sq = orthogonal_init(dim_N, dim_N, rng) * rng.uniform(0.5, 2.0, dim_N) @ orthogonal_init(dim_N, dim_N, rng)
    U = U_sq[:dim_M]
    P = ridge_projector(U, 0.0)
    q, _ = np.linalg.qr(U.T)
    full, _ = np.linalg.qr(np.hstack([q, rng.standard_normal((dim_N, dim_N - dim_M))]))
    basis_v, basis_perp = full[:, :dim_M], full[:, dim_M:]
    if g is None:
        g = BlockTanhMap(basis_v, basis_perp, depth, rng)

    t_row, t_col = orthogonal_init(dim_N, dim_N, rng), orthogonal_init(dim_N, dim_N, rng)
    A = t_row @ U_sq @ t_col.T
    G = rng.standard_normal((dim_N, dim_N))
    E = epsilon * G / np.linalg.norm(G, 2)
    A_inv = np.linalg.inv(A)

    v_id = rng.standard_normal((n_samples, dim_M)) @ basis_v.T
    x_id = _unit_rows(v_id @ A_inv.T)
    v = rng.standard_normal((n_samples, dim_M)) @ basis_v.T
    w = _unit_rows(rng.standard_normal((n_samples, dim_N - dim_M)) @ basis_perp.T)
    frac = rng.uniform(*ood_perp, size=(n_samples, 1))
    y_ood = _unit_rows(v) * np.sqrt(1 - frac**2) + w * frac
    x_ood = _unit_rows(y_ood @ A_inv.T)

    def resid(X, M):
        h = g(X @ M.T)
        return np.linalg.norm(h - h @ P, axis=1)

    clean_ood = resid(x_ood, A)
    d_id = resid(x_id, A + E)
    d_ood = resid(x_ood, A + E)
    sup_id, inf_ood = float(d_id.max()), float(d_ood.min())
    return LemmaDemoResult(
        sup_id, inf_ood, bool(sup_id < inf_ood), float(clean_ood.min()), float(np.linalg.norm(E, 2)),
        d_id, d_ood, clean_ood,
    )
