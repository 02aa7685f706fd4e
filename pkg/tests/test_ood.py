import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fidgp import autodiff as ad
from fidgp.autodiff import Tape, Tensor
from fidgp.errors import DimensionMismatch, EmptyInput, EmptyKeyLayers
from fidgp.model import FidgpNet, InducingLayer
from fidgp.ood import (
    KeyLayerProjector,
    MarginReport,
    auroc,
    build_output_projector,
    build_projector,
    build_projectors,
    estimate_margin,
    feature_grad_batch,
    feature_grad_vector,
    lemma_separation_demo,
    margin_objective,
    margin_report,
    sampled_weight_residual_norm,
    score_batch,
    score_from_features,
)
from oracles import roc_auc_pairs

SMALL = dict(flow_depth=2, flow_hidden=4)


class TestFeatureGrad:
    def test_zero_gradient(self):
        np.testing.assert_array_equal(feature_grad_vector([1.0, 2.0], [0.0, 0.0]), [0.0, 0.0])

    def test_small_example(self):
        np.testing.assert_array_equal(feature_grad_vector([1, 2], [3, -1]), [3, -2])

    def test_index_loop_reference(self):
        rng = np.random.default_rng(0)
        h, g = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
        ref = np.empty(24)
        k = 0
        for i in range(4):
            for j in range(6):
                ref[k] = h[i, j] * g[i, j]
                k += 1
        np.testing.assert_array_equal(feature_grad_vector(h, g), ref)

    def test_size_mismatch(self):
        with pytest.raises(DimensionMismatch):
            feature_grad_vector(np.ones(3), np.ones(4))

    def test_batch_equals_weight_gradient(self):
        # H * G in weight shape is the per-sample gradient of the test loss
        # with respect to the layer's (mean) weight
        rng = np.random.default_rng(1)
        net = FidgpNet([2, 5, 4, 3], rng, task="classification", inducing=(3, 2), layer_kwargs=SMALL)
        x = rng.standard_normal((1, 2))
        zs = feature_grad_batch(net, x, [2], "pseudo_label")
        layer = net.layers[1]
        W_bar = layer.mean_weight()
        h1 = np.tanh(x @ net.layers[0].mean_weight().T + net.layers[0].bias.data)
        W = Tensor(W_bar, requires_grad=True)
        with Tape() as tape:
            h2 = ad.tanh(Tensor(h1) @ W.T + layer.bias.data)
            l3 = net.layers[2]
            out = h2 @ Tensor(l3.mean_weight().T) + l3.bias.data
            label = int(np.argmax(out.data))
            loss = -ad.sum(ad.log_softmax(out, axis=-1)[:, label])
            (gw,) = tape.gradient(loss, [W])
        np.testing.assert_allclose(zs[2][0], gw.reshape(-1), atol=1e-12)

    def test_activation_mode_is_gradient_of_layer_sum(self):
        rng = np.random.default_rng(2)
        net = FidgpNet([2, 5, 4, 3], rng, task="classification", inducing=(3, 2), layer_kwargs=SMALL)
        x = rng.standard_normal((1, 2))
        zs = feature_grad_batch(net, x, [2], "activation")
        layer = net.layers[1]
        h1 = np.tanh(x @ net.layers[0].mean_weight().T + net.layers[0].bias.data)
        W = Tensor(layer.mean_weight(), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum(ad.tanh(Tensor(h1) @ W.T + layer.bias.data))
            (gw,) = tape.gradient(loss, [W])
        np.testing.assert_allclose(zs[2][0], gw.reshape(-1), atol=1e-12)


def _net(seed=0, widths=(2, 6, 6, 3), task="classification"):
    return FidgpNet(list(widths), np.random.default_rng(seed), task=task, inducing=(3, 3), layer_kwargs=SMALL)


class TestProjector:
    def test_identity_layer_gives_identity_projector(self):
        layer = InducingLayer(3, 3, 3, 3, np.random.default_rng(0), whitened_u=False, zero_init=True, **SMALL)
        layer.t_row.data, layer.t_col.data = np.eye(3), np.eye(3)
        layer.q.mean.data = np.eye(3).ravel()
        proj = build_output_projector(layer, 0.0)
        np.testing.assert_allclose(proj.matrix(), np.eye(3), atol=1e-12)
        z = np.random.default_rng(1).standard_normal((5, 3))
        np.testing.assert_allclose(proj.residual(z), 0.0, atol=1e-12)

    def test_trace_bounded_by_rows(self):
        net = _net(1)
        proj = build_projector(net.layers[1], 1e-3, max_rows=5)
        assert proj.U_snapshot.shape == (5, 36)
        assert np.trace(proj.matrix()) <= 5 + 1e-9

    def test_rebuild_is_bit_identical(self):
        a = build_projectors(_net(2), [1, 2])
        b = build_projectors(_net(2), [1, 2])
        for p, q in zip(a, b):
            np.testing.assert_array_equal(p.U_snapshot, q.U_snapshot)
            np.testing.assert_array_equal(p.matrix(), q.matrix())

    def test_residual_matches_dense_matrix(self):
        U = np.random.default_rng(3).standard_normal((4, 9))
        for lam in (0.0, 1e-3, 0.5):
            p = KeyLayerProjector(0, U, lam)
            z = np.random.default_rng(4).standard_normal((7, 9))
            np.testing.assert_allclose(p.residual(z), z - z @ p.matrix(), atol=1e-10)

    @given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
    def test_contraction(self, seed, lam):
        rng = np.random.default_rng(seed)
        p = KeyLayerProjector(0, rng.standard_normal((3, 8)), lam)
        z = rng.standard_normal((10, 8))
        assert np.all(np.linalg.norm(p.residual(z), axis=1) <= np.linalg.norm(z, axis=1) * (1 + 1e-12))

    def test_residual_dimension_checked(self):
        with pytest.raises(DimensionMismatch):
            KeyLayerProjector(0, np.eye(3), 0.0).residual(np.ones(4))

    def test_key_layers_validated(self):
        net = _net(0)
        with pytest.raises(EmptyKeyLayers):
            build_projectors(net, [])
        with pytest.raises(ValueError):
            build_projectors(net, [3])


class TestScores:
    def test_row_space_vector_scores_zero(self):
        U = np.random.default_rng(0).standard_normal((2, 5))
        p = KeyLayerProjector(1, U, 0.0)
        z = np.array([0.3, -1.2]) @ U
        assert score_from_features([z[None]], [p])[0] == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_vector_scores_its_norm(self):
        p = KeyLayerProjector(1, np.array([[1.0, 0.0, 0.0]]), 0.0)
        z = np.array([[0.0, 3.0, 4.0]])
        assert score_from_features([z], [p])[0] == pytest.approx(5.0)

    def test_average_over_layers(self):
        p1 = KeyLayerProjector(1, np.array([[1.0, 0.0]]), 0.0)
        p2 = KeyLayerProjector(2, np.array([[1.0, 0.0]]), 0.0)
        s = score_from_features([np.array([[5.0, 0.2]]), np.array([[1.0, 0.4]])], [p1, p2])
        assert s[0] == pytest.approx(0.3)

    def test_order_invariance(self):
        net = _net(5)
        X = np.random.default_rng(6).standard_normal((8, 2))
        a = score_batch(net, build_projectors(net, [1, 2]), X)
        b = score_batch(net, build_projectors(net, [2, 1]), X)
        np.testing.assert_allclose(a, b, rtol=1e-14)

    def test_regression_model_scores(self):
        net = _net(7, widths=(1, 5, 5, 1), task="regression")
        s = score_batch(net, build_projectors(net, [1, 2]), np.linspace(-1, 1, 6)[:, None])
        assert s.shape == (6,) and np.all(np.isfinite(s)) and np.all(s >= 0)

    def test_mean_mode_deterministic(self):
        net = _net(8)
        X = np.ones((3, 2))
        projs = build_projectors(net, [1])
        a = score_batch(net, projs, X, rng=np.random.default_rng(0))
        b = score_batch(net, projs, X, rng=np.random.default_rng(1))
        np.testing.assert_array_equal(a, b)

    def test_empty(self):
        with pytest.raises(EmptyKeyLayers):
            score_batch(_net(0), [], np.ones((1, 2)))
        with pytest.raises(EmptyInput):
            score_batch(_net(0), build_projectors(_net(0), [1]), np.zeros((0, 2)))


class TestAuroc:
    def test_perfect(self):
        assert auroc([0.1, 0.2], [0.5, 0.9]) == 1.0

    def test_all_ties(self):
        assert auroc([0.3] * 4, [0.3] * 5) == 0.5

    def test_four_pairs(self):
        assert auroc([0.1, 0.4], [0.3, 0.9]) == 0.75

    def test_empty(self):
        with pytest.raises(EmptyInput):
            auroc([], [1.0])

    @given(st.lists(st.integers(0, 20), min_size=1, max_size=30),
           st.lists(st.integers(0, 20), min_size=1, max_size=30))
    def test_matches_pair_enumeration(self, a, b):
        assert auroc(a, b) == pytest.approx(roc_auc_pairs(a, b), abs=1e-12)

    @given(st.integers(0, 2**31 - 1))
    def test_monotone_invariance(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal(20), rng.standard_normal(25) + 0.5
        assert auroc(a, b) == auroc(np.exp(3 * a) + 1, np.exp(3 * b) + 1)


class TestMargins:
    def test_separation_flag_at_reported_operating_point(self):
        # S ~ 0.15 against ||E|| ~ 0.03
        r = MarginReport(0.15, 0.03, 0.15 > 2 * 0.03, 1024, 32)
        assert r.separation_holds
        assert r.as_dict()["S_estimate"] == 0.15

    def test_estimate_margin_finds_sphere_minimum(self):
        # min over the unit sphere of |x - c| is |c| - 1 for |c| > 1
        c = np.array([2.0, 0.0, 0.0])
        S, x = estimate_margin(lambda X: np.linalg.norm(X - c, axis=1), 3, 64, np.random.default_rng(0),
                               steps=200, step_size=0.1)
        assert S == pytest.approx(1.0, abs=1e-3)
        np.testing.assert_allclose(x, [1.0, 0.0, 0.0], atol=0.05)

    def test_margin_objective_full_rank_is_zero(self):
        W = np.random.default_rng(1).standard_normal((3, 3))
        X = np.random.default_rng(2).standard_normal((5, 3))
        np.testing.assert_allclose(margin_objective(W, np.zeros(3), np.eye(3), X), 0.0, atol=1e-12)

    def _frozen_layer(self, d_in, d_out, lam, sqrt_scaling, seed=0, log_std=-60.0):
        layer = InducingLayer(d_in, d_out, 4, 4, np.random.default_rng(seed), lambda_max=0.5, lambda_init=0.1,
                              sqrt_width_scaling=sqrt_scaling, **SMALL)
        layer.q.log_std.data[:] = log_std
        layer.lambda_raw.data = np.array(math.log(lam / (0.5 - lam)))
        return layer

    def test_vanishing_lambda_gives_vanishing_e(self):
        layer = self._frozen_layer(6, 6, 1e-12, True)
        assert sampled_weight_residual_norm(layer, 8, np.random.default_rng(0)) <= 1e-10

    @pytest.mark.parametrize("log_std", [-60.0, 0.0])
    @pytest.mark.parametrize("sqrt_scaling", [False, True])
    def test_e_norm_concentration(self, sqrt_scaling, log_std):
        # inducing spread must not leak into the residual norm
        d_in, d_out, lam = 40, 30, 0.05
        layer = self._frozen_layer(d_in, d_out, lam, sqrt_scaling, log_std=log_std)
        layer.q.max_std = 10.0
        e = sampled_weight_residual_norm(layer, 32, np.random.default_rng(1))
        ref = lam * layer.sigma_eff * (math.sqrt(d_out) + math.sqrt(d_in))
        assert 0.5 * ref <= e <= 2 * ref

    def test_report_fields(self):
        net = _net(3, widths=(2, 6, 6, 3))
        layer = net.layers[0]
        proj = build_output_projector(layer, 1e-3, layer_id=1)
        r = margin_report(layer, proj, n_probe=64, n_E=4, rng=np.random.default_rng(0), steps=5)
        assert r.S_estimate >= 0 and r.E_norm_estimate > 0
        assert r.separation_holds == (r.S_estimate > 2 * r.E_norm_estimate)
        assert r.layer_id == 1 and r.n_probe == 64 and r.n_E_samples == 4

    def test_report_checks(self):
        layer = _net(3).layers[0]
        with pytest.raises(ValueError):
            margin_report(layer, build_output_projector(layer), n_probe=10)
        with pytest.raises(DimensionMismatch):
            margin_report(layer, build_projector(layer), n_probe=64)


class TestLemmaDemo:
    def test_identity_map_no_noise(self):
        r = lemma_separation_demo(8, 3, 0.0, np.random.default_rng(0), n_samples=200, g=lambda y: y)
        assert r.sup_id == pytest.approx(0.0, abs=1e-10)
        assert r.inf_ood > 0 and r.certified

    @pytest.mark.parametrize("eps", [0.005, 0.01, 0.05])
    def test_bound_chain(self, eps):
        rng = np.random.default_rng(int(eps * 1000))
        r = lemma_separation_demo(12, 4, eps, rng, n_samples=300)
        assert r.E_norm == pytest.approx(eps)
        assert r.step2_holds and r.step3_holds
        assert r.sup_id <= eps + 1e-8
        if r.S_measured > 2 * eps:
            assert r.certified

    def test_bounds_hold_without_margin(self):
        # S < 2 eps: certification may fail but the bounds still hold
        r = lemma_separation_demo(10, 4, 0.5, np.random.default_rng(1), n_samples=300, ood_perp=(0.01, 0.05))
        assert r.S_measured < 2 * r.E_norm
        assert r.step2_holds and r.step3_holds

    def test_dimension_validation(self):
        with pytest.raises(ValueError):
            lemma_separation_demo(4, 4, 0.01, np.random.default_rng(0))
