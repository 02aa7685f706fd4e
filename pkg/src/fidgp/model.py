"""Inducing-weight layers, the fully connected network built from them, the
flow ELBO and the training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import EmptyInput, InvalidScale, NonFiniteActivation, NonFiniteLoss, ShapeMismatch
from .flow import FlowPrior, flow_kl_terms
from .gaussian import (
    DiagGaussianVariational,
    KroneckerTransforms,
    conditional_weight_kl,
    matheron_sample,
    rbf_gram,
    whitened_matheron_sample,
)
from .linalg import cholesky_jittered, orthogonal_init

MODES = ("reparam", "matheron", "mean")


def _logit(p):
    return math.log(p / (1.0 - p))


class InducingLayer:
    """Bayesian dense layer whose weight is induced by a small matrix ``u``.

    ``u = L_row v L_col^T`` (whitened) with ``v = g(u0)`` the flow image of a
    diagonal-Gaussian draw ``u0 ~ q``.  The weight is then drawn around
    ``T_row u T_col^T`` with isotropic residual std ``lam * sigma_eff``.
    """

    def __init__(
        self,
        d_in,
        d_out,
        m_out,
        m_in,
        rng,
        *,
        lambda_init=1e-3,
        lambda_max=0.03,
        sigma_p=1.0,
        max_std=0.1,
        init_std=0.05,
        whitened_u=True,
        flow_depth=4,
        flow_hidden=32,
        s_cap=2.0,
        lengthscale=1.0,
        sqrt_width_scaling=True,
        zero_init=False,
        cache_cholesky=True,
    ):
        if not 0 < lambda_init <= lambda_max < 1:
            raise InvalidScale(f"need 0 < lambda_init <= lambda_max < 1, got {lambda_init}, {lambda_max}")
        if sigma_p <= 0:
            raise InvalidScale(f"sigma_p must be positive, got {sigma_p}")
        self.d_in, self.d_out, self.m_out, self.m_in = d_in, d_out, m_out, m_in
        self.lambda_max, self.sigma_p = lambda_max, sigma_p
        self.whitened_u, self.lengthscale = whitened_u, lengthscale
        self.sqrt_width_scaling, self.cache_cholesky = sqrt_width_scaling, cache_cholesky

        self.t_row = Tensor(orthogonal_init(d_out, m_out, rng), requires_grad=True)
        self.t_col = Tensor(orthogonal_init(d_in, m_in, rng), requires_grad=True)
        self._chol = None
        self.flow = FlowPrior(m_out * m_in, flow_depth, flow_hidden, s_cap, rng)

        mean = np.zeros(m_out * m_in)
        if not zero_init:
            # u starts at prior scale; the transforms absorb the weight scale
            mean = rng.standard_normal(m_out * m_in)
            w = self._mean_weight_np(mean.reshape(m_out, m_in))
            c = math.sqrt((1.0 / math.sqrt(d_in)) / max(float(np.std(w)), 1e-12))
            self.t_row.data = self.t_row.data * c
            self.t_col.data = self.t_col.data * c
        self.q = DiagGaussianVariational(
            Tensor(mean, requires_grad=True),
            Tensor(np.full(m_out * m_in, math.log(min(init_std, max_std))), requires_grad=True),
            max_std,
        )
        self.lambda_raw = Tensor(np.array(_logit(lambda_init / lambda_max)), requires_grad=True)
        bias = np.zeros(d_out) if zero_init else rng.uniform(-1, 1, d_out) / math.sqrt(d_in)
        self.bias = Tensor(bias, requires_grad=True)

    # -- structure

    def cholesky_factors(self):
        if self._chol is not None:
            return self._chol
        l_row, _ = cholesky_jittered(rbf_gram(self.m_out, self.lengthscale))
        l_col, _ = cholesky_jittered(rbf_gram(self.m_in, self.lengthscale))
        if self.cache_cholesky:
            self._chol = (l_row, l_col)
        return l_row, l_col

    def transforms(self):
        l_row, l_col = self.cholesky_factors()
        return KroneckerTransforms(self.t_row, self.t_col, l_row, l_col)

    @property
    def sigma_eff(self):
        return self.sigma_p / math.sqrt(self.d_in) if self.sqrt_width_scaling else self.sigma_p

    @property
    def n_weights(self):
        return self.d_in * self.d_out

    def lam(self):
        return self.lambda_max * ad.sigmoid(self.lambda_raw)

    def lam_value(self):
        return float(self.lam().data)

    def _inducing(self, v):
        """Map a flow output ``v`` (M_out x M_in) to inducing coordinates."""
        if not self.whitened_u:
            return v
        l_row, l_col = self.cholesky_factors()
        return Tensor(l_row) @ v @ Tensor(l_col.T)

    def _mean_weight_np(self, v):
        u = self._inducing(Tensor(v)).data
        return self.t_row.data @ u @ self.t_col.data.T

    def posterior_mean_inducing(self):
        """``u`` at the variational mean, as a plain array."""
        v = self.flow.forward(self.q.mean.data)[0].data.reshape(self.m_out, self.m_in)
        return self._inducing(Tensor(v)).data

    def mean_weight(self):
        u = self.posterior_mean_inducing()
        return self.t_row.data @ u @ self.t_col.data.T

    # -- parameters

    def named_parameters(self):
        out = {
            "t_row": self.t_row,
            "t_col": self.t_col,
            "q_mean": self.q.mean,
            "q_log_std": self.q.log_std,
            "lambda_raw": self.lambda_raw,
            "bias": self.bias,
        }
        for k, v in self.flow.named_parameters().items():
            out[f"flow.{k}"] = v
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def after_step(self, power_iters=1):
        self.q.project()
        self.flow.refresh_power(power_iters)


@dataclass
class LayerSample:
    W: Tensor
    u: Tensor
    u0: Tensor
    kl_flow: Tensor


def layer_forward(layer: InducingLayer, x, rng, mode="reparam", kl_prior="normal"):
    """One stochastic pass ``y = x W^T + b``.

    The rng is consumed in a fixed order: the flow base noise, then the
    sampler's own draws.  ``mode="mean"`` uses no randomness at all.
    ``kl_prior`` selects the density the flow KL compares against: the
    standard normal (``"normal"``) or the layer's own flow prior (``"flow"``).
    """
    if mode not in MODES:
        raise ValueError(f"unknown sampling mode {mode!r}; expected one of {MODES}")
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != layer.d_in:
        raise ShapeMismatch(f"layer expects inputs of shape (batch, {layer.d_in}), got {x.shape}")
    dim = layer.m_out * layer.m_in
    eps = np.zeros((1, dim)) if mode == "mean" else rng.standard_normal((1, dim))
    prior = layer.flow if kl_prior == "flow" else None
    kl, v, u0 = flow_kl_terms(layer.flow, layer.q, eps, prior)
    v = ad.reshape(v, (layer.m_out, layer.m_in))
    kt = layer.transforms()
    lam = layer.lam()
    if mode == "matheron":
        if layer.whitened_u:
            W = whitened_matheron_sample(kt, v, layer.sigma_eff, lam, rng)
        else:
            W = matheron_sample(kt, v, layer.sigma_eff, lam, rng)
        u = layer._inducing(v)
    else:
        u = layer._inducing(v)
        W = layer.t_row @ u @ layer.t_col.T
        if mode == "reparam":
            G = rng.standard_normal((layer.d_out, layer.d_in))
            W = W + (lam * layer.sigma_eff) * G
    y = x @ W.T + layer.bias
    if not np.all(np.isfinite(y.data)):
        raise NonFiniteActivation(
            f"non-finite output in a {layer.d_in}->{layer.d_out} layer (lambda={layer.lam_value():.3g})"
        )
    return y, LayerSample(W, u, u0, ad.reshape(kl, ()))


class DenseLayer:
    """Deterministic dense layer for parts of the network left unconverted."""

    def __init__(self, d_in, d_out, rng):
        self.d_in, self.d_out = d_in, d_out
        self.weight = Tensor(rng.standard_normal((d_out, d_in)) / math.sqrt(d_in), requires_grad=True)
        self.bias = Tensor(rng.uniform(-1, 1, d_out) / math.sqrt(d_in), requires_grad=True)

    def named_parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def parameters(self):
        return list(self.named_parameters().values())

    def mean_weight(self):
        return self.weight.data

    def after_step(self, power_iters=1):
        pass


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, a):
        a = np.asarray(a, dtype=float)
        std = a.std(axis=0)
        return cls(a.mean(axis=0), np.where(std > 0, std, 1.0))

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    def apply(self, a):
        return (np.asarray(a, dtype=float) - self.mean) / self.std


@dataclass
class ForwardResult:
    out: Tensor
    hidden: list
    samples: list


class FidgpNet:
    """Fully connected tanh network whose layers are InducingLayers unless
    listed otherwise.  Inputs are standardized with training statistics; for
    regression the targets are too and outputs are mapped back."""

    def __init__(self, widths, rng, *, bayesian_layers=None, task="regression", layer_kwargs=None,
                 inducing=(64, 64), clamp_inducing=True):
        if len(widths) < 2:
            raise ValueError("need at least an input and an output width")
        self.widths = list(widths)
        self.task = task
        n = len(widths) - 1
        bayes = set(range(1, n + 1)) if bayesian_layers is None else set(bayesian_layers)
        self.layers = []
        for k in range(n):
            d_in, d_out = widths[k], widths[k + 1]
            if k + 1 in bayes:
                m_out, m_in = inducing
                if clamp_inducing:
                    m_out, m_in = min(m_out, d_out), min(m_in, d_in)
                self.layers.append(InducingLayer(d_in, d_out, m_out, m_in, rng, **(layer_kwargs or {})))
            else:
                self.layers.append(DenseLayer(d_in, d_out, rng))
        self.x_scale = Standardizer.identity(widths[0])
        self.y_scale = Standardizer.identity(widths[-1])

    @property
    def inducing_layers(self):
        return [l for l in self.layers if isinstance(l, InducingLayer)]

    def named_parameters(self):
        out = {}
        for k, layer in enumerate(self.layers, start=1):
            for name, p in layer.named_parameters().items():
                out[f"layer{k}.{name}"] = p
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def fit_scalers(self, X, Y=None):
        self.x_scale = Standardizer.fit(X)
        if self.task == "regression" and Y is not None:
            self.y_scale = Standardizer.fit(np.asarray(Y, dtype=float).reshape(len(Y), -1))

    def forward(self, X, rng, mode="reparam", kl_prior="normal", standardized=False):
        """Forward pass on raw inputs; returns outputs in model (standardized)
        units, the post-activation hidden Tensors and per-layer samples."""
        x = X if standardized else Tensor(self.x_scale.apply(X))
        hidden, samples = [], []
        n = len(self.layers)
        for k, layer in enumerate(self.layers):
            if isinstance(layer, InducingLayer):
                x, s = layer_forward(layer, x, rng, mode, kl_prior)
                samples.append(s)
            else:
                x = x @ layer.weight.T + layer.bias
            if k < n - 1:
                x = ad.tanh(x)
                hidden.append(x)
        return ForwardResult(x, hidden, samples)

    def after_step(self, power_iters=1):
        for layer in self.layers:
            layer.after_step(power_iters)


# ---------------------------------------------------------------- likelihoods


@dataclass(frozen=True)
class GaussianLikelihood:
    noise_std: float = 0.1

    def log_prob(self, out: Tensor, y, model: FidgpNet):
        # compare in original target units
        y = np.asarray(y, dtype=float).reshape(out.shape)
        pred = out * model.y_scale.std + model.y_scale.mean
        r = (pred - y) / self.noise_std
        return -0.5 * ad.square(r) - math.log(self.noise_std) - 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class CategoricalLikelihood:
    label_smoothing: float = 0.0

    def log_prob(self, out: Tensor, y, model: FidgpNet):
        n_class = out.shape[-1]
        onehot = np.eye(n_class)[np.asarray(y, dtype=int)]
        target = (1 - self.label_smoothing) * onehot + self.label_smoothing / n_class
        return ad.sum(ad.log_softmax(out, axis=-1) * target, axis=-1)


@dataclass
class EloTerms:
    loglik: Tensor
    kl_flow: Tensor
    kl_cond: Tensor

    @property
    def elbo(self):
        return self.loglik - self.kl_flow - self.kl_cond

    def values(self):
        return float(self.loglik.data), float(self.kl_flow.data), float(self.kl_cond.data)


def elbo(model: FidgpNet, X, Y, likelihood, n_total, kl_scale, rng, mode="reparam", kl_prior="normal"):
    """Minibatch flow ELBO.  Both KL terms already carry ``kl_scale``."""
    if len(X) == 0:
        raise EmptyInput("empty minibatch")
    if not 0.0 <= kl_scale <= 1.0:
        raise ValueError(f"kl_scale must lie in [0, 1], got {kl_scale}")
    res = model.forward(X, rng, mode, kl_prior)
    loglik = ad.sum(likelihood.log_prob(res.out, Y, model)) * (n_total / len(X))
    kl_flow = Tensor(0.0)
    kl_cond = Tensor(0.0)
    for layer, s in zip(model.inducing_layers, res.samples):
        kl_flow = kl_flow + s.kl_flow
        kl_cond = kl_cond + conditional_weight_kl(layer.n_weights, layer.lam())
    return EloTerms(loglik, kl_flow * kl_scale, kl_cond * kl_scale)


# ---------------------------------------------------------------- training


@dataclass
class TrainOptions:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    warmup_frac: float = 0.1
    train_samples: int = 1
    sampling_mode: str = "reparam"
    power_iters: int = 1
    kl_prior: str = "normal"


@dataclass
class TraceRow:
    epoch: int
    loglik: float
    kl_flow: float
    kl_cond: float
    lambda_mean: float


def kl_scale_at(epoch, epochs, warmup_frac):
    warm = warmup_frac * epochs
    if warm <= 0:
        return 1.0
    return min(1.0, (epoch + 1) / warm)


def train(model: FidgpNet, X, Y, likelihood, opts: TrainOptions, rng, fit_scalers=True, on_epoch=None):
    """Minibatch optimization of the negative flow ELBO.

    Returns a list of :class:`TraceRow` (one per epoch, averaged over
    minibatches).  The model is updated in place.  ``on_epoch(row, model)``
    is called after every epoch and must not touch ``rng``.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y)
    if opts.epochs <= 0:
        return []
    if len(X) == 0:
        raise EmptyInput("empty training set")
    if fit_scalers:
        model.fit_scalers(X, Y)
    params = model.parameters()
    opt = ad.Optimizer(params, opts.optimizer, lr=opts.lr, momentum=opts.momentum)
    n = len(X)
    trace = []
    for epoch in range(opts.epochs):
        kl_scale = kl_scale_at(epoch, opts.epochs, opts.warmup_frac)
        order = rng.permutation(n)
        sums = np.zeros(3)
        n_batches = 0
        for b, start in enumerate(range(0, n, opts.batch_size)):
            idx = order[start:start + opts.batch_size]
            with Tape() as tape:
                total = None
                for _ in range(opts.train_samples):
                    terms = elbo(model, X[idx], Y[idx], likelihood, n, kl_scale, rng,
                                 opts.sampling_mode, opts.kl_prior)
                    loss = -terms.elbo
                    total = loss if total is None else total + loss
                    sums += terms.values()
                loss = total / opts.train_samples
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NonFiniteLoss(epoch, b, value)
                grads = tape.gradient(loss, params)
            opt.step(grads)
            model.after_step(opts.power_iters)
            n_batches += 1
        sums /= n_batches * opts.train_samples
        lam = [l.lam_value() for l in model.inducing_layers]
        trace.append(TraceRow(epoch, *sums, float(np.mean(lam)) if lam else 0.0))
        if on_epoch is not None:
            on_epoch(trace[-1], model)
    return trace


# ---------------------------------------------------------------- prediction


@dataclass
class Prediction:
    mean: np.ndarray
    std: np.ndarray
    samples: np.ndarray = field(repr=False)


def predict(model: FidgpNet, X, n_samples, rng, mode="reparam"):
    """Monte-Carlo predictive summary over ``n_samples`` forward passes.

    Regression returns the mean and epistemic std of the output in target
    units; classification returns averaged class probabilities (``std`` is the
    per-class std across samples).
    """
    X = np.asarray(X, dtype=float)
    if mode == "mean":
        n_samples = 1
    outs = []
    for _ in range(n_samples):
        out = model.forward(X, rng, mode).out.data
        if model.task == "regression":
            out = out * model.y_scale.std + model.y_scale.mean
        else:
            z = out - out.max(axis=-1, keepdims=True)
            e = np.exp(z)
            out = e / e.sum(axis=-1, keepdims=True)
        outs.append(out)
    s = np.stack(outs)
    return Prediction(s.mean(axis=0), s.std(axis=0), s)
