import time

import numpy as np
import pytest

from vbill.natgrad import (
    ConditioningError,
    fisher_blocks,
    fisher_matrix,
    natural_gradient,
    sigma_inverse_apply,
)
from vbill.variational import PriorSpec, VariationalParams, density_eval, grad_A, make_draws, draw_thetas

DIMS = [1, 2, 5, 20]


def grid_lambda(rng, d):
    """``c`` in [0.1, 10] and ``||B||`` in [0.1, 10], log-uniform."""
    c = np.exp(rng.uniform(np.log(0.1), np.log(10))) * rng.choice([-1, 1])
    B = rng.normal(size=d)
    B *= np.exp(rng.uniform(np.log(0.1), np.log(10))) / np.linalg.norm(B)
    return VariationalParams(rng.normal(size=d), B, c)


def test_worked_example_blocks():
    lam = VariationalParams([0.0, 0.0], [1.0, 0.0], 1.0)
    fb = fisher_blocks(lam)
    assert fb.kappa == pytest.approx(1.0) and fb.schur == pytest.approx(2.0)
    assert fb.omega == pytest.approx(2.5) and fb.alpha == pytest.approx(0.5)
    F = fisher_matrix(lam)
    np.testing.assert_allclose(F[2:4, 2:4], 0.5 * np.eye(2), atol=1e-15)
    np.testing.assert_allclose(F[2:4, 4], [0.5, 0.0], atol=1e-15)
    Finv = np.linalg.inv(F)
    np.testing.assert_allclose(Finv[:2, :2], [[2, 0], [0, 1]], atol=1e-12)
    np.testing.assert_allclose(Finv[2:4, 2:4], [[2.5, 0], [0, 2]], atol=1e-12)
    np.testing.assert_allclose(Finv[2:4, 4], [-0.5, 0], atol=1e-12)
    assert Finv[4, 4] == pytest.approx(0.5)
    for k in range(5):
        e = np.zeros(5)
        e[k] = 1.0
        np.testing.assert_allclose(natural_gradient(lam, e), Finv[:, k], atol=1e-13)


def test_zero_gradient_maps_to_zero():
    lam = VariationalParams([0.0, 1.0, 2.0], [1.0, 2.0, 0.5], 0.7)
    np.testing.assert_array_equal(natural_gradient(lam, np.zeros(7)), np.zeros(7))


@pytest.mark.parametrize("d", DIMS)
def test_round_trip_through_dense_fisher(d):
    rng = np.random.default_rng(100 + d)
    worst = 0.0
    for _ in range(100):
        lam = grid_lambda(rng, d)
        v = rng.normal(size=2 * d + 1)
        back = natural_gradient(lam, fisher_matrix(lam) @ v)
        worst = max(worst, np.linalg.norm(back - v) / np.linalg.norm(v))
    assert worst <= 1e-8, f"worst relative error {worst:.3e}"


@pytest.mark.parametrize("d", DIMS)
def test_fisher_matrix_symmetric_positive_definite(d):
    rng = np.random.default_rng(200 + d)
    for _ in range(100):
        F = fisher_matrix(grid_lambda(rng, d))
        np.testing.assert_array_equal(F, F.T)
        assert np.linalg.eigvalsh(F).min() > 0


@pytest.mark.parametrize("d", [2, 5, 20])
def test_schur_complement_positive_on_grid(d):
    rng = np.random.default_rng(300 + d)
    for _ in range(100):
        lam = grid_lambda(rng, d)
        fb = fisher_blocks(lam)
        assert fb.schur > 0
        assert 0 < fb.alpha <= 1 / lam.c**2


def test_closed_form_matches_dense_solve():
    rng = np.random.default_rng(4)
    for d in (2, 3, 8):
        lam = grid_lambda(rng, d)
        g = rng.normal(size=2 * d + 1)
        np.testing.assert_allclose(natural_gradient(lam, g), np.linalg.solve(fisher_matrix(lam), g), rtol=1e-8, atol=1e-10)


def _score(lam, th):
    r = th - lam.mu
    sr = sigma_inverse_apply(lam, r)
    sb = sigma_inverse_apply(lam, lam.B)
    rb = sr @ lam.B
    g_mu = sr
    g_B = rb[:, None] * sr - sb
    Si = np.linalg.inv(lam.covariance())
    g_c = lam.c * (np.sum(sr * sr, axis=1) - np.trace(Si))
    return np.column_stack([g_mu, g_B, g_c])


def test_fisher_matrix_matches_score_covariance():
    rng = np.random.default_rng(6)
    for d in (1, 3):
        lam = grid_lambda(rng, d)
        lam = VariationalParams(lam.mu, lam.B / np.linalg.norm(lam.B), 0.8)
        S = 10**6
        sc = _score(lam, draw_thetas(lam, make_draws(d, S, seed=d)))
        assert np.all(np.abs(sc.mean(axis=0)) <= 4 * sc.std(axis=0) / np.sqrt(S))
        prods = sc[:, :, None] * sc[:, None, :]
        emp = prods.mean(axis=0)
        se = prods.std(axis=0) / np.sqrt(S)
        assert np.all(np.abs(emp - fisher_matrix(lam)) <= 4 * se + 1e-12)


def test_score_formula_matches_log_density_gradient():
    lam = VariationalParams([0.2, -0.1, 0.4], [0.5, 1.0, -0.3], 0.6)
    th = np.array([[0.3, 0.1, -0.2]])
    sc = _score(lam, th)[0]
    x = lam.flat()
    fd = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = 1e-6
        fd[k] = (density_eval(VariationalParams.from_flat(x + e), th[0]) - density_eval(VariationalParams.from_flat(x - e), th[0])) / 2e-6
    np.testing.assert_allclose(sc, fd, rtol=1e-6, atol=1e-8)


def test_sigma_inverse_apply():
    rng = np.random.default_rng(7)
    lam = grid_lambda(rng, 6)
    v = rng.normal(size=(4, 6))
    np.testing.assert_allclose(sigma_inverse_apply(lam, v), np.linalg.solve(lam.covariance(), v.T).T, rtol=1e-10, atol=1e-12)
    fb = fisher_blocks(lam)
    np.testing.assert_allclose(sigma_inverse_apply(lam, lam.B), fb.alpha * lam.B, rtol=1e-12)
    zero = VariationalParams(np.zeros(3), np.zeros(3), 2.0)
    np.testing.assert_allclose(sigma_inverse_apply(zero, np.ones(3)), np.ones(3) / 4)


def test_small_factor_routes_to_dense_fallback():
    lam = VariationalParams([0.0, 0.0, 0.0], [1e-6, 0.0, 0.0], 1.0)
    rng = np.random.default_rng(8)
    v = rng.normal(size=7)
    F = fisher_matrix(lam)
    out = natural_gradient(lam, F @ v)
    np.testing.assert_allclose(F @ out, F @ v, rtol=1e-6, atol=1e-9)
    # exactly zero factor: finite output, minimum-norm solution
    lam0 = VariationalParams([0.0, 0.0], [0.0, 0.0], 1.0)
    assert np.all(np.isfinite(natural_gradient(lam0, rng.normal(size=5))))


def test_ill_conditioned_step_raises_with_snapshot():
    # the Schur complement scales like 1/c^2, so a very wide q trips the guard
    lam = VariationalParams([0.0, 0.0], [1e6, 0.0], 1e7)
    with pytest.raises(ConditioningError) as err:
        natural_gradient(lam, np.ones(5))
    assert err.value.lam is lam


def test_rejects_bad_input():
    lam = VariationalParams([0.0, 0.0], [1.0, 0.0], 1.0)
    with pytest.raises(ValueError):
        natural_gradient(lam, np.zeros(4))
    with pytest.raises(ValueError):
        natural_gradient(VariationalParams([0.0, 0.0], [1.0, 0.0], 0.0), np.zeros(5))


def test_natural_step_on_prior_term_shrinks_factor():
    # with q's covariance already at the prior variance only the factor must move; a unit
    # natural step halves B (the (B, B) block is B'B Sigma^-1 / (c^2 + B'B) near B = 0)
    prior = PriorSpec(1.0)
    lam = VariationalParams(np.zeros(3), np.array([1e-2, 0, 0]), 1.0)
    step = natural_gradient(lam, grad_A(lam, prior))
    np.testing.assert_allclose(step[:3], 0.0, atol=1e-15)
    assert abs(step[-1]) < 1e-12
    assert step[3] == pytest.approx(-0.5 * lam.B[0], rel=1e-3)


def test_linear_time_in_dimension():
    rng = np.random.default_rng(9)

    def timed(d, reps):
        lam = grid_lambda(rng, d)
        g = rng.normal(size=2 * d + 1)
        natural_gradient(lam, g)
        best = np.inf
        for _ in range(5):
            t = time.perf_counter()
            for _ in range(reps):
                natural_gradient(lam, g)
            best = min(best, time.perf_counter() - t)
        return best

    # at d = 1e3 fixed per-call overhead dominates, so only rule out superlinear growth there
    assert timed(10**4, 200) / timed(10**3, 200) < 12
    # large enough that fixed per-call overhead does not hide the scaling
    small = timed(10**5, 20)
    large = timed(10**6, 20)
    ratio = large / small
    assert 3 < ratio < 30, f"time ratio {ratio:.1f}"
