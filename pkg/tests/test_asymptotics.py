from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from robustmm.asymptotics import (
    EllipticalModel,
    InfluenceInput,
    asymptotic_covariance,
    breakdown_bound,
    compute_constants,
    efficiency_sweep,
    influence_function,
    kappa_exact,
    kappa_general_position,
    max_bdp_r0,
    ml_student_constants,
    solve_c_sigma,
    student_efficiency_sweep,
    student_relative_efficiency,
)
from robustmm.errors import NonPositiveGamma1, PreconditionViolated, TooLarge
from robustmm.loss import Biweight, RadialLaw, consistency_b0, tune_c0
from robustmm.matrix import commutation_matrix, vec
from robustmm.structures import build_lme, build_unstructured

from .conftest import random_pds

K2_C0 = tune_c0(2)


def _consts(k, c1=None, cs=1.0):
    c0 = tune_c0(k)
    return compute_constants(Biweight(c0), Biweight(c1 or c0), k, cs)


@pytest.mark.parametrize(
    "k,c1,expected",
    [
        (2, None, {"lam": 1.725, "sigma1": 2.656}),
        (2, 3.724, {"G2": 1.344, "G1": 1.947, "lam": 1.197, "sigma1": 1.383}),
        (10, 7.580, {"G1": 3.426, "lam": 1.042, "sigma1": 1.053}),
    ],
)
def test_tabulated_constants(k, c1, expected):
    c = _consts(k, c1)
    for name, value in expected.items():
        assert getattr(c, name) == pytest.approx(value, abs=1e-3), name


def test_sigma2_definition():
    c = _consts(2, 3.724, 1.3)
    assert c.sigma2 == -2 * c.sigma1 / (2 * 1.3**2) + c.sigma3


@pytest.mark.parametrize("k", [2, 5, 10])
def test_constants_monte_carlo(k):
    c0 = tune_c0(k)
    l0, l1 = Biweight(c0), Biweight(1.4 * c0)
    c = compute_constants(l0, l1, k)
    rng = np.random.default_rng(100 + k)
    r = np.linalg.norm(rng.standard_normal((1_000_000, k)), axis=1)
    samples = {
        "alpha1": (1 - 1 / k) * l1.u(r) + l1.dpsi(r) / k,
        "gamma1": (l1.dpsi(r) * r**2 + (k + 1) * l1.v(r)) / (k + 2),
        "e_drho0": l0.v(r),
        "lam_num": l1.psi(r) ** 2,
        "sigma1_num": l1.v(r) ** 2,
        "sigma3_num": (l0.rho(r) - c.b0) ** 2,
    }
    exact = {
        "alpha1": c.alpha1,
        "gamma1": c.gamma1,
        "e_drho0": c.e_drho0,
        "lam_num": c.lam * k * c.alpha1**2,
        "sigma1_num": c.sigma1 * (k + 2) * c.gamma1**2 / k,
        "sigma3_num": c.sigma3 * c.e_drho0**2 / 4,
    }
    for name, x in samples.items():
        se = x.std() / math.sqrt(x.size)
        assert abs(x.mean() - exact[name]) < 4 * se, name


def test_large_cutoff_tends_to_least_squares():
    c = _consts(3, 50.0)
    assert c.lam == pytest.approx(1.0, abs=1e-3)
    assert c.sigma1 == pytest.approx(1.0, abs=1e-3)


def test_sweep_k5_minima():
    c0 = tune_c0(5)
    tab = efficiency_sweep(Biweight(c0), 5, np.arange(c0, 8.0, 0.05), refine=True)
    cols = tab.columns
    arg, row = tab.minima["G1"]
    assert arg == pytest.approx(5.675, abs=0.05)
    got = dict(zip(cols, row))
    assert got["G1"] == pytest.approx(2.595, abs=1e-3)
    assert got["G2"] == pytest.approx(1.270, abs=1e-3)
    assert got["lambda"] == pytest.approx(1.073, abs=1e-3)
    assert got["sigma1"] == pytest.approx(1.107, abs=1e-3)
    # the G2 minimum is slightly interior rather than at c0; its value still
    # matches the tabulated 1.204 and G2(c0) is within 0.004 of it
    _, row = tab.minima["G2"]
    assert dict(zip(cols, row))["G2"] == pytest.approx(1.204, abs=1e-3)
    assert _consts(5).G2 == pytest.approx(1.204, abs=4e-3)


def test_sweep_rejects_small_cutoffs():
    with pytest.raises(ValueError):
        efficiency_sweep(Biweight(K2_C0), 2, [2.0, 3.0])


def test_ml_student_closed_form():
    # multivariate t MLE: both efficiencies equal (nu + k + 2)/(nu + k)
    for nu, k in [(1, 2), (4, 3), (15, 10)]:
        lam, s1 = ml_student_constants(nu, k)
        assert lam == pytest.approx((nu + k + 2) / (nu + k), rel=1e-9)
        assert s1 == pytest.approx((nu + k + 2) / (nu + k), rel=1e-9)
    assert ml_student_constants(1, 2, "printed") != ml_student_constants(1, 2)


def test_c_sigma_at_student():
    l0 = Biweight(K2_C0)
    law = RadialLaw.student(5, 2)
    cs = solve_c_sigma(l0, law)
    c = compute_constants(l0, l0, 2, cs, law=law)
    assert c.c_sigma == cs
    from robustmm.loss import radial_expectation

    e = radial_expectation(law, lambda r: float(l0.rho(cs * r)), breakpoints=(l0.c / cs,))
    assert e == pytest.approx(consistency_b0(l0, 2), abs=1e-10)
    assert solve_c_sigma(l0, RadialLaw.normal(2)) == pytest.approx(1.0, abs=1e-10)


def test_student_relative_efficiencies():
    l0 = Biweight(K2_C0)
    lam, _ = student_relative_efficiency(l0, Biweight(7.246), 15, 2)
    assert lam == pytest.approx(1.001, abs=1e-3)
    _, s1 = student_relative_efficiency(Biweight(tune_c0(10)), Biweight(11.893), 1, 10)
    assert s1 == pytest.approx(1.671, abs=1e-3)
    tab = student_efficiency_sweep(l0, 1, 2, np.arange(K2_C0, 5.0, 0.1), refine=True)
    _, row = tab.minima["lambda_rel"]
    assert dict(zip(tab.columns, row))["lambda_rel"] == pytest.approx(1.124, abs=1e-3)


# influence functions


@pytest.fixture(scope="module")
def lme_model():
    k = 4
    Xi = np.stack([np.ones(k), np.arange(k, dtype=float)], axis=1)
    struct = build_lme([np.ones((k, 1))])
    theta = np.array([1.0, 0.5])
    Sigma = struct.evaluate(theta)
    return EllipticalModel(struct, np.array([2.0, 1.0]), theta, Xi.T @ np.linalg.inv(Sigma) @ Xi), Xi


def test_if_at_centre(lme_model):
    model, Xi = lme_model
    c = _consts(4, 5.0)
    inp = InfluenceInput(np.zeros(4), Xi, model, c)
    np.testing.assert_array_equal(influence_function(inp, "beta"), 0.0)
    # a point at the centre shrinks the covariance
    expected = -2 * c.b0 / c.e_drho0 * model.theta
    np.testing.assert_allclose(influence_function(inp, "theta"), expected, rtol=1e-12)


def test_if_saturated_plateau(lme_model, rng):
    model, Xi = lme_model
    c = _consts(4, 5.0)
    expected = 2 * (c.loss0.sup_rho - c.b0) / c.e_drho0 * model.theta
    for r in (6.0, 10.0, 1e3):
        z = rng.standard_normal(4)
        z *= r / np.linalg.norm(z)
        inp = InfluenceInput(z, Xi, model, c)
        np.testing.assert_allclose(influence_function(inp, "theta"), expected, rtol=1e-10)
        np.testing.assert_array_equal(influence_function(inp, "beta"), 0.0)


def test_covariance_if_bounded(lme_model):
    model, Xi = lme_model
    c = _consts(4, 5.0)
    norms = []
    for r in np.geomspace(1e-2, 1e3, 60):
        z = np.full(4, r / 2.0)
        norms.append(np.linalg.norm(influence_function(InfluenceInput(z, Xi, model, c), "covariance")))
    assert max(norms) < 50
    assert norms[-1] == pytest.approx(norms[-10], rel=1e-12)


def test_shape_if_traceless(rng):
    struct = build_unstructured(3)
    Sigma = random_pds(rng, 3)
    from robustmm.matrix import vech

    model = EllipticalModel(struct, np.zeros(3), vech(Sigma))
    c = _consts(3, 4.0)
    si = np.linalg.inv(Sigma)
    for _ in range(10):
        m = influence_function(InfluenceInput(rng.standard_normal(3) * 2, None, model, c), "shape")
        assert abs(np.trace(si @ m)) < 1e-10
        np.testing.assert_allclose(m, m.T, atol=1e-12)


def test_scale_invariant_targets_ignore_scale_terms(lme_model, rng):
    model, Xi = lme_model
    c = _consts(4, 5.0)
    other = dataclasses.replace(c, sigma3=123.0, b0=0.01, e_drho0=7.0)
    z = rng.standard_normal(4)
    for t in ("gamma", "shape"):
        a = influence_function(InfluenceInput(z, Xi, model, c), t)
        b = influence_function(InfluenceInput(z, Xi, model, other), t)
        assert np.array_equal(a, b)
        assert np.array_equal(asymptotic_covariance(model, c, t), asymptotic_covariance(model, other, t))


def test_s_reduction_is_exact():
    l0 = Biweight(K2_C0)
    a = compute_constants(l0, l0, 2)
    b = compute_constants(Biweight(K2_C0), Biweight(K2_C0), 2)
    for name in ("alpha1", "gamma1", "sigma1", "sigma2"):
        assert getattr(a, name) == getattr(b, name)
    assert a.alpha_C(1.3) == b.alpha_C(1.3) and a.beta_C(1.3) == b.beta_C(1.3)


def test_if_bounded_at_consistency(rng):
    struct = build_unstructured(2)
    model = EllipticalModel(struct, np.zeros(2), np.array([1.0, 0.3, 2.0]), np.linalg.inv(struct.evaluate([1.0, 0.3, 2.0])))
    c = _consts(2, 3.724)
    vals = []
    for r in np.geomspace(1e-3, 1e3, 40):
        z = rng.standard_normal(2)
        z *= r / np.linalg.norm(z)
        v = influence_function(InfluenceInput(z, np.eye(2), model, c), "theta")
        assert np.all(np.isfinite(v))
        vals.append(np.abs(v).max())
    assert max(vals) < 100


def _if_moments(model, c, X0, target, n, rng):
    k = model.k
    z = rng.standard_normal((n, k))
    vals = np.array([np.ravel(influence_function(InfluenceInput(zi, X0, model, c), target)) for zi in z])
    return vals.mean(0), np.cov(vals.T, bias=True), vals


@pytest.mark.parametrize("target", ["beta", "gamma", "theta", "covariance", "shape"])
def test_if_second_moment_is_asymptotic_variance(lme_model, target):
    # E[IF] = 0 and E[IF IF'] = asymptotic variance, at c_sigma = 1
    model, Xi = lme_model
    c = _consts(4, 5.0)
    rng = np.random.default_rng(42)
    mean, cov, vals = _if_moments(model, c, Xi, target, 20000, rng)
    av = asymptotic_covariance(model, c, target)
    scale = np.sqrt(np.outer(np.diag(av), np.diag(av))) + 1e-12
    se = vals.std(0) / np.sqrt(len(vals))
    assert np.all(np.abs(mean) < 4.5 * se + 1e-12)
    assert np.max(np.abs(cov - av) / scale) < 0.05


def test_location_beta_variance(rng):
    struct = build_unstructured(2)
    Sigma = random_pds(rng, 2)
    from robustmm.matrix import vech

    model = EllipticalModel(struct, np.zeros(2), vech(Sigma), np.linalg.inv(Sigma))
    c = _consts(2, 3.0)
    np.testing.assert_allclose(asymptotic_covariance(model, c, "beta"), c.lam * Sigma, rtol=1e-12)


def test_unstructured_covariance_variance(rng):
    from robustmm.matrix import vech

    struct = build_unstructured(2)
    Sigma = random_pds(rng, 2)
    model = EllipticalModel(struct, np.zeros(2), vech(Sigma))
    c = _consts(2, 3.724)
    K = commutation_matrix(2)
    vs = vec(Sigma)
    expected = c.sigma1 * (np.eye(4) + K) @ np.kron(Sigma, Sigma) + c.sigma2 * np.outer(vs, vs)
    np.testing.assert_allclose(asymptotic_covariance(model, c, "covariance"), expected, atol=1e-9)


def test_shape_variance_null_direction(lme_model):
    model, _ = lme_model
    c = _consts(4, 5.0)
    av = asymptotic_covariance(model, c, "shape")
    assert np.max(np.abs(av @ vec(np.linalg.inv(model.Sigma)))) < 1e-9


@pytest.mark.parametrize("target", ["beta", "gamma", "theta", "covariance", "shape"])
@pytest.mark.parametrize("cs", [1.0, 0.9])
def test_variances_symmetric_psd(lme_model, target, cs):
    model, _ = lme_model
    av = asymptotic_covariance(model, _consts(4, 5.0, cs), target)
    assert np.max(np.abs(av - av.T)) < 1e-12
    assert np.linalg.eigvalsh(av).min() > -1e-9


def test_gamma1_guard(lme_model):
    model, Xi = lme_model
    bad = dataclasses.replace(_consts(4, 5.0), gamma1=-1.0)
    with pytest.raises(NonPositiveGamma1):
        influence_function(InfluenceInput(np.ones(4), Xi, model, bad), "theta")
    with pytest.raises(NonPositiveGamma1):
        asymptotic_covariance(model, bad, "gamma")


# breakdown


def test_breakdown_bound_examples():
    n, k = 20, 2
    r0 = max_bdp_r0(n, kappa_general_position(k))
    assert r0 == pytest.approx(0.45)
    assert breakdown_bound(n, r0, k) == pytest.approx(9 / 20)
    assert breakdown_bound(n, r0, k) == pytest.approx(((n - k + 1) // 2) / n)
    assert breakdown_bound(100, 0.2, 5) == pytest.approx(0.2)
    assert breakdown_bound(100, 0.45, 5, eps_initial=0.3) == pytest.approx(0.3)
    with pytest.raises(PreconditionViolated):
        breakdown_bound(10, 0.5, 9)


@pytest.mark.parametrize("n", range(8, 60, 3))
@pytest.mark.parametrize("kappa", [1, 2, 3, 5])
def test_breakdown_bound_at_max_tuning(n, kappa):
    b = breakdown_bound(n, max_bdp_r0(n, kappa), kappa)
    assert b == pytest.approx(((n - kappa + 1) // 2) / n)


def test_kappa_exact():
    assert kappa_exact([[0, 0], [1, 1], [2, 2], [3, 3]]) == 4
    pts = np.array([[0, 0], [1, 0], [0, 1], [2, 3], [5, 1]], dtype=float)
    assert kappa_exact(pts) == 2
    rng = np.random.default_rng(1)
    assert kappa_exact(rng.standard_normal((8, 3))) == 3
    with pytest.raises(TooLarge):
        kappa_exact(rng.standard_normal((13, 2)))
