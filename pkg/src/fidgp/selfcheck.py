"""Quick numerical oracle checks runnable from the command line.

Each check compares a library routine against an independent route (closed
form, finite differences, Monte Carlo or dense linear algebra) on a small
seeded instance and returns ``(name, passed, detail)``.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tape, Tensor
from .counting import compressed_param_count, resnet18_manifest
from .flow import FlowPrior, flow_kl_mc
from .gaussian import DiagGaussianVariational, KroneckerTransforms, conditional_weight_kl, rbf_gram
from .linalg import PowerIterState, cholesky_jittered, spectral_norm_power
from .model import FidgpNet, GaussianLikelihood, elbo


def check_cholesky(rng):
    a = rng.standard_normal((6, 6))
    k = a @ a.T + 1e-3 * np.eye(6)
    L, _ = cholesky_jittered(k)
    err = float(np.abs(L @ L.T - k).max())
    return "cholesky reconstruction", err < 1e-10, f"max err {err:.2e}"


def check_spectral_norm(rng):
    w = rng.standard_normal((8, 5))
    sigma, _ = spectral_norm_power(w, 200, PowerIterState.random(8, 5, rng))
    ref = float(np.linalg.svd(w, compute_uv=False)[0])
    err = abs(sigma - ref) / ref
    return "power iteration vs SVD", err < 1e-6, f"rel err {err:.2e}"


def check_conditional_kl(rng):
    lam = 0.3
    x = rng.standard_normal(200_000) * lam
    mc = float(np.mean(-math.log(lam) - 0.5 * (x / lam) ** 2 + 0.5 * x * x))
    closed = conditional_weight_kl(1, lam)
    return "conditional KL vs Monte Carlo", abs(mc - closed) < 0.02, f"closed {closed:.4f} mc {mc:.4f}"


def check_flow(rng):
    f = FlowPrior(6, depth=4, hidden=8, rng=rng).randomize(rng, 0.3)
    x = rng.standard_normal((20, 6))
    y, ld = f.forward(x)
    back, ld_inv = f.inverse(y)
    err = float(np.abs(back.data - x).max())
    ld_err = float(np.abs(ld.data + ld_inv.data).max())
    ok = err < 1e-10 and ld_err < 1e-10
    return "flow inverse roundtrip", ok, f"roundtrip {err:.2e} logdet {ld_err:.2e}"


def check_flow_kl(rng):
    f = FlowPrior(1, depth=2, hidden=4, rng=rng)
    q = DiagGaussianVariational(Tensor(np.array([1.0])), Tensor(np.array([0.0])), max_std=10.0)
    est = float(flow_kl_mc(f, q, n_samples=200_000, rng=rng).data)
    return "flow KL vs closed form", abs(est - 0.5) < 0.01, f"estimate {est:.4f} (exact 0.5)"


def check_kronecker(rng):
    t_row, t_col = rng.standard_normal((5, 3)), rng.standard_normal((4, 2))
    kt = KroneckerTransforms.from_grams(t_row, t_col, rbf_gram(3, 1.0), rbf_gram(2, 1.0))
    u = rng.standard_normal((3, 2))
    lhs = (t_row @ u @ t_col.T).reshape(-1)
    rhs = np.kron(t_row, t_col) @ u.reshape(-1)
    err = float(np.abs(lhs - rhs).max())
    return "Kronecker vec identity", err < 1e-12 and kt is not None, f"max err {err:.2e}"


def check_gradient(rng):
    net = FidgpNet([1, 6, 1], rng, inducing=(3, 1), layer_kwargs=dict(flow_hidden=4, flow_depth=2))
    X = rng.uniform(-1, 1, (8, 1))
    Y = np.sin(X)
    lik = GaussianLikelihood(0.3)
    params = net.named_parameters()
    seed = 123

    def loss_value():
        return -float(elbo(net, X, Y, lik, 8, 1.0, np.random.default_rng(seed)).elbo.data)

    with Tape() as tape:
        loss = -elbo(net, X, Y, lik, 8, 1.0, np.random.default_rng(seed)).elbo
        grads = tape.gradient(loss, list(params.values()))
    worst = 0.0
    h = 1e-6
    for p, g in zip(params.values(), grads):
        flat = p.data.reshape(-1)
        for i in range(min(flat.size, 3)):
            old = flat[i]
            flat[i] = old + h
            up = loss_value()
            flat[i] = old - h
            down = loss_value()
            flat[i] = old
            fd = (up - down) / (2 * h)
            an = float(np.asarray(g).reshape(-1)[i])
            worst = max(worst, abs(fd - an) / max(1.0, abs(fd)))
    return "ELBO gradient vs finite differences", worst < 1e-4, f"worst rel err {worst:.2e}"


def check_counting(rng):
    rep = compressed_param_count(resnet18_manifest(), 128, 128)
    ok = abs(rep.total - 5.51e6) / 5.51e6 < 0.05
    return "ResNet-18 count at M=128", ok, f"{rep.total:,} parameters"


CHECKS = (
    check_cholesky,
    check_spectral_norm,
    check_conditional_kl,
    check_flow,
    check_flow_kl,
    check_kronecker,
    check_gradient,
    check_counting,
)


def run_all(seed=0):
    results = []
    for k, fn in enumerate(CHECKS):
        results.append(fn(np.random.default_rng([seed, k])))
    return results
