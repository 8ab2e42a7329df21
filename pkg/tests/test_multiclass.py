import math

import numpy as np
import pytest

from attnsim.data import DataConfig, generate_dataset, make_signals
from attnsim.model import make_head
from attnsim.multiclass import (MulticlassConfig, MulticlassDataset,
                                MulticlassState, generate_multiclass_dataset,
                                grad_wv, head_gradient_estimate,
                                make_class_signals, multiclass_loss_and_grads)
from attnsim.rng import stream
from attnsim.theory import rel_err
from attnsim.train import empirical_loss


def kcfg(**kw):
    base = dict(n=8, T=4, d=12, K=3, mu_norm=3.0, sigma_eps=1.0, eta=0.2,
                rho=0.3, n_weak=2)
    base.update(kw)
    return MulticlassConfig(**base)


def random_kstate(cfg, seed=0, sigma=0.4):
    rng = stream(seed, "kstate")
    return MulticlassState(
        W=rng.normal(0.0, sigma, size=(cfg.d, cfg.d)),
        p=rng.normal(0.0, sigma, size=cfg.d),
        W_V=rng.normal(0.0, sigma, size=(cfg.d, cfg.K)),
    )


class TestClassSignals:
    def test_axis_aligned(self):
        mus = make_class_signals(5, 3, 2.0, "axis_aligned")
        assert mus.shape == (3, 5)
        np.testing.assert_allclose(mus @ mus.T, 4.0 * np.eye(3), atol=1e-12)

    def test_random_orthogonal(self):
        mus = make_class_signals(64, 4, 7.0, rng=stream(1, "k"))
        np.testing.assert_allclose(mus @ mus.T, 49.0 * np.eye(4), atol=1e-9)

    def test_needs_room(self):
        with pytest.raises(ValueError):
            make_class_signals(2, 3, 1.0, "axis_aligned")


class TestKDataset:
    def test_structure(self):
        cfg = kcfg(n=200)
        mus = make_class_signals(cfg.d, cfg.K, cfg.mu_norm, rng=stream(0, "k"))
        ds = generate_multiclass_dataset(cfg, mus, stream(0, "kd"))
        assert ds.X.shape == (200, 4, 12)
        assert set(np.unique(ds.y_true)) <= {0, 1, 2}
        flips = ds.y_train != ds.y_true
        assert 0.1 < flips.mean() < 0.3
        # flipped labels always land on a different class
        assert np.all(ds.y_train[flips] != ds.y_true[flips])


class TestMulticlassLoss:
    def test_zero_head_log_k(self):
        cfg = kcfg()
        mus = make_class_signals(cfg.d, cfg.K, cfg.mu_norm, rng=stream(2, "k"))
        ds = generate_multiclass_dataset(cfg, mus, stream(2, "kd"))
        state = random_kstate(cfg, seed=3)
        state.W_V = np.zeros((cfg.d, cfg.K))
        loss, gw, gp = multiclass_loss_and_grads(ds, state)
        assert loss == pytest.approx(math.log(3.0), rel=1e-12)
        assert not gw.any() and not gp.any()

    def test_rejects_single_class(self):
        cfg = kcfg()
        mus = make_class_signals(cfg.d, cfg.K, cfg.mu_norm, rng=stream(2, "k"))
        ds = generate_multiclass_dataset(cfg, mus, stream(2, "kd"))
        state = random_kstate(cfg)
        state.W_V = state.W_V[:, :1]
        with pytest.raises(ValueError):
            multiclass_loss_and_grads(ds, state)

    def test_finite_difference_oracle(self):
        cfg = kcfg(n=4, T=3, d=8, K=3, n_weak=1)
        mus = make_class_signals(cfg.d, cfg.K, cfg.mu_norm, rng=stream(4, "k"))
        ds = generate_multiclass_dataset(cfg, mus, stream(4, "kd"))
        state = random_kstate(cfg, seed=5)
        _, gw, gp = multiclass_loss_and_grads(ds, state)
        h = 1e-5
        fd_w = np.zeros_like(gw)
        for a in range(cfg.d):
            for b in range(cfg.d):
                for sgn, acc in ((1, 1.0), (-1, -1.0)):
                    pert = state.W.copy()
                    pert[a, b] += sgn * h
                    probe = MulticlassState(W=pert, p=state.p, W_V=state.W_V)
                    fd_w[a, b] += acc * multiclass_loss_and_grads(ds, probe)[0]
        fd_w /= 2 * h
        fd_p = np.zeros_like(gp)
        for a in range(cfg.d):
            for sgn, acc in ((1, 1.0), (-1, -1.0)):
                pert = state.p.copy()
                pert[a] += sgn * h
                probe = MulticlassState(W=state.W, p=pert, W_V=state.W_V)
                fd_p[a] += acc * multiclass_loss_and_grads(ds, probe)[0]
        fd_p /= 2 * h
        assert np.max(rel_err(gw, fd_w, floor=3e-5)) <= 1e-6
        assert np.max(rel_err(gp, fd_p, floor=3e-5)) <= 1e-6

    def test_binary_reduction(self):
        # K = 2 with nu_0 = -nu_1 = nu/2 reproduces the logistic path exactly
        cfg = DataConfig(n=10, T=5, d=16, mu_norm=4.0, sigma_eps=1.0, eta=0.3,
                         rho=0.2)
        sig = make_signals(16, 4.0, "random_orthogonal", stream(6, "s"))
        ds = generate_dataset(cfg, sig, stream(6, "d"))
        rng = stream(7, "w")
        W = rng.normal(0.0, 0.3, size=(16, 16))
        p = rng.normal(0.0, 0.3, size=16)
        nu = make_head(sig)

        from attnsim.model import ModelState
        from attnsim.train import grad_p, grad_w
        bstate = ModelState(W=W, p=p, nu=nu)
        bloss = empirical_loss(ds, bstate)
        bgw, bgp = grad_w(ds, bstate), grad_p(ds, bstate)

        kds = MulticlassDataset(
            X=ds.X, y_train=((1 - ds.y_train) // 2).astype(int),
            y_true=((1 - ds.y_true) // 2).astype(int),
            weak_classes=np.zeros((10, 0), dtype=int), K=2)
        kstate = MulticlassState(W=W, p=p,
                                 W_V=np.stack([nu / 2, -nu / 2], axis=1))
        kloss, kgw, kgp = multiclass_loss_and_grads(kds, kstate)
        assert kloss == pytest.approx(bloss, rel=1e-12)
        np.testing.assert_allclose(kgw, bgw, rtol=1e-10, atol=1e-16)
        np.testing.assert_allclose(kgp, bgp, rtol=1e-10, atol=1e-16)


class TestHeadGradientGeometry:
    def test_k2_target_algebra(self):
        # with two classes the centered signals are +-(mu_0 - mu_1)/2
        mus = make_class_signals(6, 2, 2.0, "axis_aligned")
        centered = mus - mus.mean(axis=0)
        np.testing.assert_allclose(centered[0], (mus[0] - mus[1]) / 2.0,
                                   rtol=1e-12)
        np.testing.assert_allclose(centered[1], -(mus[0] - mus[1]) / 2.0,
                                   rtol=1e-12)

    def test_noise_free_directions(self):
        # sigma=0, eta=0, rho=0: gradient directions are exact up to class
        # sampling fluctuations
        cfg = kcfg(T=4, d=24, K=3, sigma_eps=0.0, eta=0.0, rho=0.0, n_weak=2)
        mus = make_class_signals(cfg.d, cfg.K, cfg.mu_norm, rng=stream(8, "k"))
        est = head_gradient_estimate(cfg, mus, 100_000, stream(8, "mc"))
        target = mus - mus.mean(axis=0)
        for k in range(3):
            cos = est[:, k] @ target[k] / (
                np.linalg.norm(est[:, k]) * np.linalg.norm(target[k]))
            assert cos >= 0.999

    def test_label_noise_rescales_not_rotates(self):
        cfg = kcfg(T=4, d=24, K=2, sigma_eps=0.0, eta=0.4, rho=0.0, n_weak=2)
        mus = make_class_signals(cfg.d, cfg.K, cfg.mu_norm, rng=stream(9, "k"))
        est = head_gradient_estimate(cfg, mus, 100_000, stream(9, "mc"))
        target = mus - mus.mean(axis=0)
        for k in range(2):
            cos = est[:, k] @ target[k] / (
                np.linalg.norm(est[:, k]) * np.linalg.norm(target[k]))
            assert cos >= 0.99

    def test_grad_wv_at_zero_matches_closed_form(self):
        cfg = kcfg(n=64)
        mus = make_class_signals(cfg.d, cfg.K, cfg.mu_norm, rng=stream(10, "k"))
        ds = generate_multiclass_dataset(cfg, mus, stream(10, "kd"))
        state = MulticlassState(W=np.zeros((cfg.d, cfg.d)), p=np.zeros(cfg.d),
                                W_V=np.zeros((cfg.d, cfg.K)))
        got = grad_wv(ds, state)
        token_means = ds.X.mean(axis=1)                      # uniform attention
        coeff = np.full((ds.n, cfg.K), 1.0 / cfg.K)
        coeff[np.arange(ds.n), ds.y_train] -= 1.0
        expected = token_means.T @ coeff / ds.n
        np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-15)
