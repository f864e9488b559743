import numpy as np
import pytest
from scipy import integrate, stats

from vbill.fisher_identity import (
    LAPLACE,
    PRIOR,
    ISConfig,
    ISSource,
    LatentProposal,
    SimulatedLikelihood,
    WeightUnderflow,
    build_panel_control_variates,
    build_proposal,
    build_proposals,
    grad_contrib_is,
    importance_weights,
    is_estimates,
    loglik_contrib_is,
    loglik_estimate,
    standard_points,
    subsampled_panel_gradient,
)
from vbill.models import LogisticRegressionModel, NormalNormalPanelModel, PanelLogisticModel
from vbill.simulate import simulate_panel
from vbill.subsample import draw_plan


def oracle(n=20, T=4, seed=0):
    rng = np.random.default_rng(seed)
    return NormalNormalPanelModel(rng.normal(size=(n, 1)) + rng.normal(size=(n, T)))


def panel(n=10, seed=1):
    d = simulate_panel(n, T=5, seed=seed)
    return PanelLogisticModel(d.X, d.y), d


def test_config_validation():
    assert ISConfig().N == 256 and ISConfig().proposal == LAPLACE and ISConfig().points == "RQMC"
    assert ISConfig(8, "prior", "mc").proposal == PRIOR
    with pytest.raises(ValueError):
        ISConfig(1)
    with pytest.raises(ValueError):
        ISConfig(100)
    ISConfig(100, points="MC")
    with pytest.raises(ValueError):
        ISConfig(8, proposal="tempered")
    with pytest.raises(ValueError):
        ISConfig(8, points="halton")
    with pytest.raises(ValueError):
        LatentProposal(0.0, 0.0)
    with pytest.raises(ValueError):
        LatentProposal(np.nan, 1.0)


def test_laplace_proposal_is_exact_posterior_for_oracle():
    model = oracle()
    for gamma in (-1.0, 0.0, 1.0):
        for i in range(5):
            prop = build_proposal(model, i, np.array([gamma]), LAPLACE)
            mean, var = model.latent_posterior(i, np.array([gamma]))
            assert prop.location == pytest.approx(mean, abs=1e-10)
            assert prop.scale == pytest.approx(np.sqrt(var), rel=1e-10)
            prior = build_proposal(model, i, np.array([gamma]), PRIOR)
            assert prior.location == 0.0 and prior.scale == pytest.approx(np.exp(gamma / 2))


def test_laplace_proposal_matches_numeric_mode_for_panel():
    model, d = panel()
    theta = d.theta
    prop = build_proposals(model, np.arange(model.n), np.tile(theta, (model.n, 1)))
    for i in range(model.n):
        f = lambda a: -float(model.joint_logdensity_and_grad(i, theta, a)[0])
        from scipy.optimize import minimize_scalar

        res = minimize_scalar(f, bounds=(-10, 10), method="bounded", options={"xatol": 1e-10})
        assert prop.location[i] == pytest.approx(res.x, abs=1e-6)


@pytest.mark.parametrize("gamma", [-1.0, 0.0, 1.0])
def test_is_gradient_centred_on_analytic_gradient(gamma):
    model = oracle(seed=2)
    theta = np.array([gamma])
    rng = np.random.default_rng(3)
    cfg = ISConfig(256, PRIOR, "MC")
    for i in range(4):
        vals = np.array([grad_contrib_is(model, i, theta, cfg, rng=rng)[0] for _ in range(400)])
        se = vals.std(ddof=1) / np.sqrt(vals.size)
        assert abs(vals.mean() - model.grad_contrib(i, theta)[0]) < 4 * se


def test_weights_are_normalized():
    model, d = panel(20)
    units = np.arange(20)
    th = np.tile(d.theta, (20, 1))
    for kind in (PRIOR, LAPLACE):
        prop = build_proposals(model, units, th, kind)
        Z = standard_points(20, 256, "RQMC", np.random.default_rng(0))
        w, ll, alpha, _ = importance_weights(model, units, th, prop, Z)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        assert np.all(w >= 0) and np.all(np.isfinite(ll))
        assert alpha.shape == (20, 256)


def test_laplace_likelihood_estimate_is_exact_for_oracle():
    # Gaussian joint in alpha: the Laplace proposal is the exact posterior, so every weight equals p(y_i)
    model = oracle()
    theta = np.array([0.3])
    rng = np.random.default_rng(0)
    for i in range(5):
        est = loglik_contrib_is(model, i, theta, ISConfig(8, LAPLACE, "MC"), rng=rng)
        assert est == pytest.approx(model.loglik_contrib(i, theta), abs=1e-10)


def test_likelihood_estimate_unbiased_on_natural_scale():
    model = oracle(seed=4)
    theta = np.array([0.5])
    rng = np.random.default_rng(1)
    cfg = ISConfig(16, PRIOR, "MC")
    for i in range(3):
        ratios = np.exp([loglik_contrib_is(model, i, theta, cfg, rng=rng) - model.loglik_contrib(i, theta) for _ in range(4000)])
        se = ratios.std(ddof=1) / np.sqrt(ratios.size)
        assert abs(ratios.mean() - 1.0) < 4 * se


def test_panel_likelihood_against_quadrature():
    model, d = panel(6, seed=5)
    theta = d.theta + 0.1
    tau = np.exp(0.5 * theta[-1])
    for i in range(6):
        def integrand(a):
            return np.exp(float(model.joint_logdensity_and_grad(i, theta, a)[0]))

        val, _ = integrate.quad(integrand, -12 * tau, 12 * tau, epsabs=0, epsrel=1e-12, limit=200)
        # prior proposal: weights are bounded by one, so RQMC converges fast
        est = loglik_contrib_is(model, i, theta, ISConfig(4096, PRIOR), rng=np.random.default_rng(i))
        assert est == pytest.approx(np.log(val), abs=1e-4)
        # the Laplace proposal can have lighter tails than the posterior (all-zero panels),
        # which slows convergence; it is still accurate at the level of IS noise
        est = loglik_contrib_is(model, i, theta, ISConfig(4096), rng=np.random.default_rng(i))
        assert est == pytest.approx(np.log(val), abs=1e-3)


def test_panel_score_against_quadrature():
    model, d = panel(4, seed=6)
    theta = d.theta
    tau = np.exp(0.5 * theta[-1])

    def marg(i, th):
        f = lambda a: np.exp(float(model.joint_logdensity_and_grad(i, th, a)[0]))
        return np.log(integrate.quad(f, -12 * tau, 12 * tau, epsabs=0, epsrel=1e-12, limit=200)[0])

    i = 2
    fd = np.empty(model.dim)
    for j in range(model.dim):
        e = np.zeros(model.dim)
        e[j] = 1e-5
        fd[j] = (marg(i, theta + e) - marg(i, theta - e)) / 2e-5
    g = grad_contrib_is(model, i, theta, ISConfig(4096, PRIOR), rng=np.random.default_rng(0))
    np.testing.assert_allclose(g, fd, atol=2e-4)
    g = grad_contrib_is(model, i, theta, ISConfig(4096), rng=np.random.default_rng(0))
    np.testing.assert_allclose(g, fd, atol=3e-3)


def test_rqmc_reduces_variance_on_oracle():
    model = oracle(seed=7)
    theta = np.array([0.0])
    for kind in (PRIOR,):
        est = {}
        for pts in ("MC", "RQMC"):
            cfg = ISConfig(256, kind, pts)
            rng = np.random.default_rng(8)
            est[pts] = np.array(
                [[grad_contrib_is(model, i, theta, cfg, rng=rng)[0] for i in range(5)] for _ in range(50)]
            )
        assert np.all(est["RQMC"].var(axis=0) <= est["MC"].var(axis=0))


def test_proposals_agree_in_mean():
    model, d = panel(5, seed=9)
    theta = d.theta
    rng = np.random.default_rng(10)
    out = {}
    for kind in (PRIOR, LAPLACE):
        cfg = ISConfig(64, kind, "MC")
        out[kind] = np.array([grad_contrib_is(model, 1, theta, cfg, rng=rng) for _ in range(800)])
    diff = out[PRIOR].mean(axis=0) - out[LAPLACE].mean(axis=0)
    joint_se = np.sqrt(out[PRIOR].var(axis=0, ddof=1) / 800 + out[LAPLACE].var(axis=0, ddof=1) / 800)
    # self-normalization bias is O(1/N); allow it on top of the sampling error
    assert np.all(np.abs(diff) < 4 * joint_se + 1e-3)


def test_batched_estimates_match_single_unit_calls():
    model, d = panel(8)
    units = np.array([3, 0, 3, 7])
    th = np.tile(d.theta, (4, 1)) + np.linspace(0, 0.1, 4)[:, None]
    Z = standard_points(4, 32, "MC", np.random.default_rng(0))
    ll, g = is_estimates(model, units, th, ISConfig(32, points="MC"), Z=Z)
    for k in range(4):
        l1 = loglik_contrib_is(model, int(units[k]), th[k], ISConfig(32, points="MC"), points=Z[k])
        g1 = grad_contrib_is(model, int(units[k]), th[k], ISConfig(32, points="MC"), points=Z[k])
        assert ll[k] == pytest.approx(l1, rel=1e-13)
        np.testing.assert_allclose(g[k], g1, rtol=1e-12, atol=1e-14)


def test_blocking_does_not_change_results(monkeypatch):
    import vbill.fisher_identity as fi

    model, d = panel(30)
    units = np.arange(30)
    th = np.tile(d.theta, (30, 1))
    Z = standard_points(30, 64, "MC", np.random.default_rng(0))
    ref = is_estimates(model, units, th, ISConfig(64, points="MC"), Z=Z)
    monkeypatch.setattr(fi, "BLOCK_ELEMENTS", 64 * 5 * 7)
    got = is_estimates(model, units, th, ISConfig(64, points="MC"), Z=Z)
    np.testing.assert_array_equal(ref[0], got[0])
    np.testing.assert_array_equal(ref[1], got[1])


def test_loglik_estimate_sums_units():
    model = oracle(seed=11)
    theta = np.array([0.2])
    est = loglik_estimate(model, theta, ISConfig(4, LAPLACE, "MC"), np.random.default_rng(0))
    assert est == pytest.approx(model.loglik(theta), rel=1e-12)


def test_simulated_likelihood_is_smooth_and_consistent():
    model, d = panel(15, seed=12)
    sim = SimulatedLikelihood(model, d.theta, ISConfig(64), seed=3)
    theta = d.theta + 0.05
    g = sim.grad(theta)
    fd = np.empty(model.dim)
    for j in range(model.dim):
        e = np.zeros(model.dim)
        e[j] = 1e-6
        fd[j] = (sim.loglik(theta + e) - sim.loglik(theta - e)) / 2e-6
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-6)
    H = sim.hess(theta)
    np.testing.assert_array_equal(H, H.T)
    assert np.linalg.eigvalsh(H).max() < 0
    again = SimulatedLikelihood(model, d.theta, ISConfig(64), seed=3)
    assert again.loglik(theta) == sim.loglik(theta)


def test_panel_control_variates_on_oracle():
    model = oracle(n=30, seed=13)
    tb = np.array([0.4])
    cache = build_panel_control_variates(model, tb, seed=1)
    assert cache.l_bar == pytest.approx(model.loglik(tb), rel=1e-12)
    assert cache.A_bar[0] == pytest.approx(model.grad(tb)[0], abs=0.05)
    assert cache.B_bar[0, 0] == pytest.approx(model.hess(tb)[0, 0], rel=0.05)
    assert cache.unit_grad.shape == (30, 1) and cache.unit_hess.shape == (30, 1, 1)


def test_subsampled_panel_gradient_unbiased_on_oracle():
    model = oracle(n=40, seed=14)
    tb = np.array([0.0])
    cache = build_panel_control_variates(model, tb, seed=2)
    theta = np.array([0.3])
    rng = np.random.default_rng(3)
    # the Laplace proposal is the exact latent posterior here, so the IS score is unbiased
    cfg = ISConfig(64, LAPLACE, "MC")
    vals = np.array([subsampled_panel_gradient(model, theta, cache, draw_plan(40, 5, rng), cfg, rng).value[0] for _ in range(1500)])
    se = vals.std(ddof=1) / np.sqrt(vals.size)
    # the cache Hessian is a finite difference of IS scores; its error enters the control total
    cache_err = abs(cache.B_bar[0, 0] - model.hess(tb)[0, 0]) * 0.3
    assert abs(vals.mean() - model.grad(theta)[0]) < 4 * se + cache_err


def test_full_subsample_matches_analytic_gradient():
    model = oracle(n=25, seed=15)
    tb = np.array([0.1])
    cache = build_panel_control_variates(model, tb, seed=4)
    theta = np.array([-0.4])
    rng = np.random.default_rng(5)
    from vbill.subsample import SubsamplePlan

    est = subsampled_panel_gradient(model, theta, cache, SubsamplePlan(np.arange(25), 25), ISConfig(1024), rng)
    # with m = n the control variate cancels exactly; what remains is the IS error
    assert est.value[0] == pytest.approx(model.grad(theta)[0], abs=0.05)


class _AlphaFree(NormalNormalPanelModel):
    """Joint density whose data term does not involve the latent effect."""

    def joint_terms(self, units, theta, alpha):
        lp, g = super().joint_terms(units, theta, alpha)
        lead = (slice(None),) + (None,) * (alpha.ndim - 1)
        S = self._sum[units][lead]
        # drop the alpha-dependent data part: y_t ~ N(0, 1) independent of alpha
        lp = lp - alpha * S + 0.5 * self.T * alpha * alpha
        return lp, g

    def joint_loglik_saving(self, units, theta, alpha):
        return self.joint_terms(units, theta, alpha)[0], None


def test_alpha_free_model_gives_exact_estimates():
    model = _AlphaFree(np.random.default_rng(0).normal(size=(3, 4)))
    theta = np.array([0.2])
    cfg = ISConfig(8, PRIOR, "MC")
    for i in range(3):
        exact = -0.5 * 4 * np.log(2 * np.pi) - 0.5 * model._sumsq[i]
        assert loglik_contrib_is(model, i, theta, cfg, rng=np.random.default_rng(i)) == pytest.approx(exact, rel=1e-13)
        # weights are constant, so the estimate is the plain mean of the latent prior score;
        # z = +-2 gives alpha^2 / tau^2 = 4 and a score of 1.5 for every draw
        g = grad_contrib_is(model, i, theta, cfg, points=np.array([-2.0, 2.0] * 4))
        assert g[0] == pytest.approx(1.5, rel=1e-12)


def test_empty_panel_proposal_is_prior():
    X = np.ones((2, 0, 3))
    model = PanelLogisticModel(X, np.zeros((2, 0)))
    theta = np.array([0.0, 0.0, 0.0, 0.6])
    prop = build_proposal(model, 0, theta, LAPLACE)
    assert prop.location == 0.0 and prop.scale == pytest.approx(np.exp(0.3))


def test_all_zero_panel_mode_is_negative():
    X = np.ones((1, 5, 2))
    model = PanelLogisticModel(X, np.zeros((1, 5)))
    assert build_proposal(model, 0, np.zeros(3), LAPLACE).location < 0


def test_log_estimate_variance_decreases_with_samples():
    model, d = panel(3, seed=16)
    rng = np.random.default_rng(0)
    var = []
    for N in (16, 64, 256):
        cfg = ISConfig(N, PRIOR, "MC")
        var.append(np.var([loglik_contrib_is(model, 0, d.theta, cfg, rng=rng) for _ in range(300)]))
    assert var[0] > var[1] > var[2]


def test_is_source_shapes():
    model, d = panel(10)
    src = ISSource(model, ISConfig(16), np.random.default_rng(0))
    idx = np.array([[0, 1, 2], [3, 3, 9]])
    ll, g = src.loglik_grad_rows(idx, np.tile(d.theta, (2, 1)))
    assert ll.shape == (2, 3) and g.shape == (2, 3, model.dim)
    assert ll[1, 0] != ll[1, 1]


@pytest.mark.filterwarnings("ignore:overflow")
def test_errors():
    lr = LogisticRegressionModel(np.ones((3, 1)), np.array([0.0, 1.0, 0.0]))
    with pytest.raises(TypeError):
        build_proposals(lr, np.arange(3), np.zeros((3, 1)))
    model, d = panel(3)
    with pytest.raises(ValueError):
        build_proposals(model, np.arange(3), np.tile(d.theta, (3, 1)), "bogus")
    prop = LatentProposal(np.array([1e6]), np.array([1e-300]))
    with pytest.raises(WeightUnderflow, match="unit 0"):
        importance_weights(model, np.array([0]), d.theta[None, :], prop, np.zeros((1, 4)) + 1e300)
