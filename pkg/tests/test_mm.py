from __future__ import annotations

import json

import numpy as np
import pytest

from robustmm.asymptotics import EllipticalModel, asymptotic_covariance, compute_constants
from robustmm.estimators import Dataset, MMConfig, SConfig, SFit, fit_initial_s, mm_fit, objective_Rn
from robustmm.estimators.scores import reweight_step
from robustmm.loss import Biweight, tune_c0
from robustmm.matrix import logdet, mahalanobis_batch
from robustmm.structures import build_lme, build_unstructured, normalize_direction

C0 = tune_c0(2)
LOSS0, LOSS1 = Biweight(C0), Biweight(3.724)
UNSTR = build_unstructured(2)
LIGHT = MMConfig(s_config=SConfig(n_sub=100, n_best=3))


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(5)
    return Dataset.location(rng.standard_normal((200, 2)) @ np.array([[1.0, 0.0], [0.4, 0.8]]) + [1.0, -2.0])


@pytest.fixture(scope="module")
def fit(data):
    return mm_fit(data, UNSTR, LOSS0, LOSS1, LIGHT)


def test_fit_invariants(data, fit):
    assert fit.converged
    assert abs(logdet(UNSTR.evaluate(fit.gamma))) < 1e-8
    np.testing.assert_allclose(UNSTR.evaluate(fit.theta), fit.sigma**2 * UNSTR.evaluate(fit.gamma), rtol=1e-9)
    np.testing.assert_allclose(fit.covariance, UNSTR.evaluate(fit.theta), rtol=1e-12)
    assert fit.rn_check
    assert fit.objective <= fit.objective_initial + 1e-12
    assert fit.score_norm < 1e-6
    assert 0.0 <= fit.objective <= LOSS1.sup_rho


def test_symmetric_points():
    a, mu = 1.7, np.array([0.5, -3.0])
    y = mu + np.array([[a, 0], [-a, 0], [0, a], [0, -a]])
    data = Dataset.location(y)
    init = SFit(mu + 0.1, np.array([1.2, 0.1, 0.9]), 1.0, np.array([1.2, 0.1, 0.9]), 0, True, 0.0)
    fit = mm_fit(data, UNSTR, LOSS1, LOSS1, initial=init, b0=0.5)
    np.testing.assert_allclose(fit.beta, mu, atol=1e-7)
    np.testing.assert_allclose(UNSTR.evaluate(fit.gamma), np.eye(2), atol=1e-7)


def test_lme_recovery():
    rng = np.random.default_rng(8)
    k, n = 4, 500
    t = np.arange(k, dtype=float)
    Xi = np.stack([np.ones(k), t], axis=1)
    X = np.broadcast_to(Xi, (n, k, 2))
    z = np.ones((k, 1))
    struct = build_lme([z])
    theta = np.array([1.0, 0.5])
    Sigma = struct.evaluate(theta)
    beta = np.array([2.0, 1.0])
    y = np.einsum("nkq,q->nk", X, beta) + rng.standard_normal((n, k)) @ np.linalg.cholesky(Sigma).T
    l0 = Biweight(tune_c0(k))
    l1 = Biweight(5.0)
    fit = mm_fit(Dataset(y, X), struct, l0, l1, LIGHT)
    const = compute_constants(l0, l1, k)
    model = EllipticalModel(struct, beta, theta, Xi.T @ np.linalg.inv(Sigma) @ Xi)
    se_b = np.sqrt(np.diag(asymptotic_covariance(model, const, "beta")) / n)
    se_g = np.sqrt(np.diag(asymptotic_covariance(model, const, "gamma")) / n)
    assert np.all(np.abs(fit.beta - beta) < 5 * se_b)
    gamma_true = theta / np.exp(logdet(Sigma) / k)
    assert np.all(np.abs(fit.gamma - gamma_true) < 5 * se_g)


def test_regression_equivariance(data, fit):
    b = np.array([3.0, -1.5])
    shifted = mm_fit(data.with_y(data.y + b), UNSTR, LOSS0, LOSS1, LIGHT)
    np.testing.assert_allclose(shifted.beta, fit.beta + b, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(shifted.gamma, fit.gamma, rtol=1e-6, atol=1e-7)
    assert shifted.sigma == pytest.approx(fit.sigma, rel=1e-6)


def test_scale_equivariance():
    rng = np.random.default_rng(6)
    data = Dataset.location(rng.standard_normal((150, 2)))
    a = mm_fit(data, UNSTR, LOSS0, LOSS1, LIGHT)
    b = mm_fit(data.with_y(2.5 * data.y), UNSTR, LOSS0, LOSS1, LIGHT)
    assert b.sigma == pytest.approx(2.5 * a.sigma, rel=1e-6)
    np.testing.assert_allclose(b.gamma, a.gamma, rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(b.theta, 6.25 * a.theta, rtol=1e-6, atol=1e-7)


def test_objective_monotone(data, fit):
    values = []
    for it in range(1, 8):
        cfg = MMConfig(max_iter=it, tol=0.0, step_tol=0.0)
        r = mm_fit(data, UNSTR, LOSS0, LOSS1, cfg, initial=fit.initial)
        values.append(r.objective)
    assert all(b <= a + 1e-14 for a, b in zip(values, values[1:]))
    assert values[0] <= fit.objective_initial


def test_location_step_is_classical(data):
    gamma, _ = normalize_direction(UNSTR, [1.3, 0.2, 0.9])
    beta, sigma = np.array([0.9, -1.8]), 1.1
    w = np.full(data.n, 1 / data.n)
    b_new, g_raw = reweight_step(data, UNSTR, beta, gamma, sigma, LOSS1, w)
    # direct weighted mean followed by the normalized weighted scatter
    V = UNSTR.evaluate(gamma)
    u = LOSS1.u(mahalanobis_batch(data.y - beta, V) / sigma)
    mean = (u[:, None] * data.y).sum(0) / u.sum()
    e = data.y - mean
    scatter = (u[:, None, None] * np.einsum("ni,nj->nij", e, e)).sum(0)
    np.testing.assert_allclose(b_new, mean, rtol=1e-12)
    target = scatter / np.exp(logdet(scatter) / 2)
    g, _ = normalize_direction(UNSTR, g_raw)
    np.testing.assert_allclose(UNSTR.evaluate(g), target, rtol=1e-10)


def test_s_solution_is_fixed_point(data):
    s = fit_initial_s(data, UNSTR, LOSS0, LIGHT.s_config)
    out = mm_fit(data, UNSTR, LOSS0, LOSS0, initial=s)
    assert out.score_norm < 1e-8
    assert out.n_iter == 0
    assert out.sigma == pytest.approx(s.sigma, rel=1e-10)


def test_warm_start(data, fit):
    out = mm_fit(data, UNSTR, LOSS0, LOSS1, initial=fit.initial, start=(fit.beta, fit.gamma))
    assert out.n_iter <= 1
    np.testing.assert_allclose(out.beta, fit.beta, atol=1e-7)


def test_nesting_required(data):
    with pytest.raises(ValueError):
        mm_fit(data, UNSTR, Biweight(3.0), Biweight(2.0), LIGHT)


def test_json_fields(fit):
    d = json.loads(fit.to_json())
    for key in ("beta", "gamma", "sigma", "theta", "objective", "score_norm", "converged", "n_iter", "seed"):
        assert key in d
    assert d["seed"] == LIGHT.s_config.seed


def test_weights_match_replication(data):
    w = np.ones(data.n)
    w[:10] = 2.0
    rep = Dataset.location(np.vstack([data.y, data.y[:10]]))
    a = mm_fit(data, UNSTR, LOSS0, LOSS1, LIGHT, weights=w)
    init = fit_initial_s(rep, UNSTR, LOSS0, start=(a.initial.beta, a.initial.theta))
    b = mm_fit(rep, UNSTR, LOSS0, LOSS1, initial=init)
    np.testing.assert_allclose(a.beta, b.beta, atol=1e-6)
    assert objective_Rn(rep, b.beta, b.covariance / b.sigma**2, b.sigma, LOSS1) == pytest.approx(b.objective)
