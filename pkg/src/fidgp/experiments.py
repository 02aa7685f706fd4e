"""End-to-end runs: model construction from a config, the 1-D regression
experiment, the toy OoD experiment and CSV writers for their outputs."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import data as ds
from . import metrics
from .config import RunConfig
from .model import (
    CategoricalLikelihood,
    FidgpNet,
    GaussianLikelihood,
    Prediction,
    TrainOptions,
    predict,
    train,
)


def build_model(cfg: RunConfig, d_in, d_out, rng) -> FidgpNet:
    m, f = cfg.model, cfg.flow
    widths = [d_in, *m.hidden, d_out]
    bayes = None if m.bayesian_layers == "all" else list(m.bayesian_layers)
    layer_kwargs = dict(
        lambda_init=m.lambda_init,
        lambda_max=m.lambda_max,
        sigma_p=m.prior_sd,
        max_std=m.max_std_u,
        init_std=m.init_std_u,
        whitened_u=m.whitened_u,
        flow_depth=f.depth,
        flow_hidden=f.hidden,
        s_cap=f.s_cap,
        lengthscale=m.lengthscale,
        sqrt_width_scaling=m.sqrt_width_scaling,
        zero_init=m.zero_init,
        cache_cholesky=m.cache_cholesky,
    )
    task = "regression" if cfg.task == "regression1d" else "classification"
    return FidgpNet(widths, rng, bayesian_layers=bayes, task=task, layer_kwargs=layer_kwargs,
                    inducing=tuple(m.inducing), clamp_inducing=m.clamp_inducing)


def train_options(cfg: RunConfig) -> TrainOptions:
    t = cfg.train
    return TrainOptions(
        epochs=t.epochs,
        batch_size=t.batch_size,
        lr=t.lr,
        optimizer=t.optimizer,
        momentum=t.momentum,
        warmup_frac=t.kl_warmup_frac,
        train_samples=t.train_samples,
        sampling_mode=t.sampling_mode,
        power_iters=cfg.flow.power_iters,
        kl_prior=cfg.flow.kl_prior,
    )


def likelihood_for(cfg: RunConfig):
    if cfg.task == "regression1d":
        return GaussianLikelihood(cfg.model.noise_std)
    return CategoricalLikelihood(cfg.model.label_smoothing)


def load_data(cfg: RunConfig):
    """Arrays for the configured task: ``(X_train, Y_train, extras)``."""
    d = cfg.data
    if cfg.task == "regression1d":
        tr, te = ds.gen_regression1d(d.n_per_cluster, cfg.seed, d.n_grid)
        return tr.x[:, None], tr.y[:, None], {"test": te}
    tr, te, ood = ds.gen_toy_ood(cfg.seed, d.n_train, d.n_test, d.n_ood)
    return tr.x, tr.y, {"test": te, "ood": ood}


@dataclass
class RunResult:
    model: FidgpNet
    trace: list
    data: dict
    metrics: dict = field(default_factory=dict)
    prediction: Prediction | None = None


def fit(cfg: RunConfig) -> RunResult:
    """Build and train a model for ``cfg``; everything is driven by ``cfg.seed``."""
    cfg.validate()
    X, Y, extras = load_data(cfg)
    rng = np.random.default_rng(cfg.seed)
    n_out = 1 if cfg.task == "regression1d" else int(np.max(Y)) + 1
    net = build_model(cfg, X.shape[1], n_out, rng)
    trace = train(net, X, Y, likelihood_for(cfg), train_options(cfg), rng)
    return RunResult(net, trace, extras)


def regression_metrics(net: FidgpNet, test, n_samples, seed):
    pred = predict(net, test.x[:, None], n_samples, np.random.default_rng(seed))
    mean, std = pred.mean[:, 0], pred.std[:, 0]
    inside = ds.in_clusters(test.x)
    gap = ds.gap_region(test.x)
    m = {
        "rmse_in_cluster": metrics.rmse(mean[inside], test.y[inside]),
        "std_in_cluster": float(std[inside].mean()),
        "std_gap": float(std[gap].mean()),
    }
    m["std_ratio"] = m["std_gap"] / max(m["std_in_cluster"], 1e-300)
    return pred, m


def classification_metrics(net: FidgpNet, test, n_samples, seed):
    pred = predict(net, test.x, n_samples, np.random.default_rng(seed))
    return pred, {
        "accuracy": metrics.accuracy(pred.mean, test.y),
        "nll": metrics.nll(pred.mean, test.y),
        "ece": metrics.ece(pred.mean, test.y),
    }


def run(cfg: RunConfig) -> RunResult:
    res = fit(cfg)
    test = res.data["test"]
    if cfg.task == "regression1d":
        res.prediction, res.metrics = regression_metrics(res.model, test, cfg.train.test_samples, cfg.seed + 1)
    else:
        res.prediction, res.metrics = classification_metrics(res.model, test, cfg.train.test_samples, cfg.seed + 1)
    return res


# ---------------------------------------------------------------- CSV output


def write_trace(path, trace):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loglik", "kl_flow", "kl_cond", "lambda_mean"])
        for r in trace:
            w.writerow([r.epoch, repr(r.loglik), repr(r.kl_flow), repr(r.kl_cond), repr(r.lambda_mean)])


def write_predictions(path, x, mean, std, true_f=None):
    x, mean, std = (np.asarray(a, dtype=float).reshape(len(a), -1)[:, 0] for a in (x, mean, std))
    tf = np.full(len(x), np.nan) if true_f is None else np.asarray(true_f, dtype=float).ravel()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "mean", "std", "true_f"])
        for row in zip(x, mean, std, tf):
            w.writerow([repr(float(v)) for v in row])


def write_scores(path, scores, origin):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "score", "origin_label"])
        for i, (s, o) in enumerate(zip(scores, origin)):
            w.writerow([i, repr(float(s)), o])
