import math

import numpy as np
import pytest
from scipy import integrate, stats

from treedgp.kernel import CorrParams, Family, build_corr_matrix
from treedgp.leaf_gp import (
    NUGGET_FLOOR,
    HyperState,
    Hyperparameters,
    LeafState,
    beta0_conditional,
    beta_conditional,
    corr_log_accept,
    draw_beta0,
    draw_sigma2_marginal,
    draw_tau2,
    draw_W,
    log_marginal,
    log_marginal_K,
    log_prior_corr,
    log_prior_range,
    mh_update_corr,
    posterior_terms,
    prior_draw_corr,
    sigma2_conditional,
)


def make_leaf(rng, n=4, m_X=1, d=0.3, g=0.05, tau2=1.3, sigma2=0.8):
    X = rng.uniform(size=(n, m_X))
    Z = rng.normal(size=n)
    corr = CorrParams(Family.ISOTROPIC, [d], g)
    beta = rng.normal(size=m_X + 1)
    return LeafState(X, Z, np.arange(n), corr, beta, sigma2, tau2).refactor()


def make_hyper(rng, m, **kw):
    fixed = Hyperparameters.default(m, **kw)
    A = rng.normal(size=(m, m))
    return HyperState(fixed, rng.normal(size=m), A @ A.T + np.eye(m))


def mvt_logpdf(leaf, hyper):
    """Marginal of Z as a multivariate t: beta and sigma2 integrated analytically."""
    fx = hyper.fixed
    F = leaf.F
    S = leaf.cm.K + leaf.tau2 * F @ hyper.W @ F.T
    shape = fx.q_sigma / fx.alpha_sigma * S
    return stats.multivariate_t.logpdf(leaf.Z, loc=F @ hyper.beta0, shape=shape,
                                       df=fx.alpha_sigma)


class TestBetaConditional:
    def test_direct_formula(self, rng):
        leaf = make_leaf(rng, n=4, m_X=1)
        hyper = make_hyper(rng, 2)
        mean, cov = beta_conditional(leaf, hyper)
        Kinv = np.linalg.inv(leaf.cm.K)
        Winv = np.linalg.inv(hyper.W)
        F, Z = leaf.F, leaf.Z
        V = np.linalg.inv(F.T @ Kinv @ F + Winv / leaf.tau2)
        bt = V @ (F.T @ Kinv @ Z + Winv @ hyper.beta0 / leaf.tau2)
        np.testing.assert_allclose(cov, V, rtol=1e-10)
        np.testing.assert_allclose(mean, bt, rtol=1e-10)

    def test_flat_prior_is_least_squares(self, rng):
        n = 6
        X = rng.uniform(size=(n, 1))
        Z = rng.normal(size=n)
        F = np.column_stack([np.ones(n), X])

        class Identity:
            inv_z = Z
            inv_F = F

        t = posterior_terms(F, Z, Identity, np.zeros(2), np.eye(2), 1e9)
        ls = np.linalg.lstsq(F, Z, rcond=None)[0]
        np.testing.assert_allclose(t.beta_tilde, ls, rtol=1e-4)

    def test_prior_only(self, rng):
        W = np.array([[2.0, 0.3], [0.3, 1.0]])
        b0 = np.array([0.4, -1.0])
        t = posterior_terms(np.zeros((0, 2)), np.zeros(0), None, b0, np.linalg.inv(W), 0.7)
        np.testing.assert_allclose(t.beta_tilde, b0, rtol=1e-12)
        np.testing.assert_allclose(t.V_beta, 0.7 * W, rtol=1e-12)
        assert t.psi == pytest.approx(0.0, abs=1e-12)


class TestInverseGammaDraws:
    def test_tau2_zero_quadratic_form(self, rng):
        leaf = make_leaf(rng)
        hyper = make_hyper(rng, 2)
        leaf.beta = hyper.beta0.copy()
        a1 = draw_tau2(leaf, hyper, np.random.default_rng(5))
        fx = hyper.fixed
        expect = 0.5 * fx.q_tau / np.random.default_rng(5).gamma(0.5 * (fx.alpha_tau + 2))
        assert a1 == expect

    def test_tau2_reproducible(self, rng):
        leaf = make_leaf(rng)
        hyper = make_hyper(rng, 2)
        a = draw_tau2(leaf, hyper, np.random.default_rng(11))
        b = draw_tau2(leaf, hyper, np.random.default_rng(11))
        assert a == b

    def test_tau2_distribution(self, rng):
        leaf = make_leaf(rng)
        hyper = make_hyper(rng, 2)
        fx = hyper.fixed
        diff = leaf.beta - hyper.beta0
        bq = diff @ np.linalg.inv(hyper.W) @ diff / leaf.sigma2
        shape, scale = 0.5 * (fx.alpha_tau + 2), 0.5 * (fx.q_tau + bq)
        r = np.random.default_rng(0)
        draws = np.array([draw_tau2(leaf, hyper, r) for _ in range(100_000)])
        mean = scale / (shape - 1)
        sd = math.sqrt(scale**2 / ((shape - 1) ** 2 * (shape - 2)))
        assert abs(draws.mean() - mean) < 3 * sd / math.sqrt(draws.size)

    def test_sigma2_distribution(self, rng):
        leaf = make_leaf(rng, n=5)
        hyper = make_hyper(rng, 2)
        shape, scale = sigma2_conditional(leaf, hyper)
        assert shape == pytest.approx(0.5 * (5 + 5))
        r = np.random.default_rng(1)
        draws = np.array([draw_sigma2_marginal(leaf, hyper, r) for _ in range(100_000)])
        mean = scale / (shape - 1)
        var = scale**2 / ((shape - 1) ** 2 * (shape - 2))
        se_mean = math.sqrt(var / draws.size)
        assert abs(draws.mean() - mean) < 3 * se_mean
        # second moment against a bootstrap-free CLT standard error
        m2 = scale**2 / ((shape - 1) * (shape - 2))
        se_m2 = (draws**2).std() / math.sqrt(draws.size)
        assert abs((draws**2).mean() - m2) < 3 * se_m2

    def test_sigma2_prior_without_data(self, rng):
        hyper = make_hyper(rng, 2)
        leaf = LeafState(np.zeros((0, 1)), np.zeros(0), np.zeros(0, int),
                         CorrParams(Family.ISOTROPIC, [0.5], 0.1), np.zeros(2))
        shape, scale = sigma2_conditional(leaf, hyper)
        assert (shape, scale) == (2.5, 2.5)


class TestHierarchicalDraws:
    def test_W_zero_spread(self, rng):
        hyper = make_hyper(rng, 2)
        leaf = make_leaf(rng)
        leaf.beta = hyper.beta0.copy()
        r1, r2 = np.random.default_rng(3), np.random.default_rng(3)
        W = draw_W([leaf], hyper, r1)
        fx = hyper.fixed
        ref = stats.wishart.rvs(df=fx.rho + 1, scale=np.linalg.inv(fx.rhoV), random_state=r2)
        np.testing.assert_allclose(np.linalg.inv(W), ref, rtol=1e-10)

    def test_W_distribution(self, rng):
        hyper = make_hyper(rng, 2, rho=4.0)
        leaf = make_leaf(rng)
        fx = hyper.fixed
        diff = leaf.beta - hyper.beta0
        S = fx.rhoV + np.outer(diff, diff) / (leaf.sigma2 * leaf.tau2)
        scale = np.linalg.inv(S)
        df = fx.rho + 1
        r = np.random.default_rng(2)
        n = 100_000
        draws = np.array([np.linalg.inv(draw_W([leaf], hyper, r)) for _ in range(n)])
        mean = df * scale
        var = df * (scale**2 + np.outer(np.diag(scale), np.diag(scale)))
        z = (draws.mean(axis=0) - mean) / np.sqrt(var / n)
        assert np.all(np.abs(z) < 3)
        assert all(np.all(np.linalg.eigvalsh(np.linalg.inv(w)) > 0) for w in draws[:100])

    def test_W_reproducible(self, rng):
        hyper = make_hyper(rng, 2)
        leaf = make_leaf(rng)
        a = draw_W([leaf], hyper, np.random.default_rng(9))
        b = draw_W([leaf], hyper, np.random.default_rng(9))
        assert np.array_equal(a, b)

    def test_beta0_formula(self, rng):
        hyper = make_hyper(rng, 2, B=np.array([[2.0, 0.5], [0.5, 1.0]]), mu=[0.3, -0.2])
        leaves = [make_leaf(rng, sigma2=s, tau2=t) for s, t in ((0.5, 2.0), (1.5, 0.7), (1, 1))]
        mean, cov = beta0_conditional(leaves, hyper)
        Binv = np.linalg.inv(hyper.fixed.B)
        Winv = np.linalg.inv(hyper.W)
        c = [1 / (lf.sigma2 * lf.tau2) for lf in leaves]
        prec = Binv + sum(c) * Winv
        rhs = Binv @ hyper.fixed.mu + Winv @ sum(ci * lf.beta for ci, lf in zip(c, leaves))
        np.testing.assert_allclose(cov, np.linalg.inv(prec), rtol=1e-10)
        np.testing.assert_allclose(mean, np.linalg.solve(prec, rhs), rtol=1e-10)

    def test_beta0_flat_hyperprior(self, rng):
        hyper = make_hyper(rng, 2, B=1e12 * np.eye(2))
        leaf = make_leaf(rng)
        mean, _ = beta0_conditional([leaf], hyper)
        np.testing.assert_allclose(mean, leaf.beta, rtol=1e-6, atol=1e-9)

    def test_beta0_no_leaves_is_prior(self, rng):
        hyper = make_hyper(rng, 2, mu=[1.0, 2.0], B=np.diag([0.5, 3.0]))
        mean, cov = beta0_conditional([], hyper)
        np.testing.assert_allclose(mean, [1.0, 2.0])
        np.testing.assert_allclose(cov, np.diag([0.5, 3.0]))
        a = draw_beta0([], hyper, np.random.default_rng(4))
        r = np.random.default_rng(4)
        np.testing.assert_allclose(a, mean + np.linalg.cholesky(cov) @ r.standard_normal(2))


class TestLogMarginal:
    def test_scalar_case(self, rng):
        # n = 1: K = 1 + g, the marginal of z is a Student t
        X = np.array([[0.37]])
        Z = np.array([0.81])
        g = 0.2
        leaf = LeafState(X, Z, np.arange(1), CorrParams(Family.ISOTROPIC, [0.4], g),
                         np.zeros(2), 1.0, 0.6).refactor()
        hyper = make_hyper(rng, 2)
        fx = hyper.fixed
        f = np.array([1.0, 0.37])
        s2 = (1 + g + 0.6 * f @ hyper.W @ f) * fx.q_sigma / fx.alpha_sigma
        ref = stats.t.logpdf(0.81, df=fx.alpha_sigma, loc=f @ hyper.beta0, scale=math.sqrt(s2))
        got = log_marginal_K(leaf, hyper) - log_prior_corr(leaf.corr, fx)
        assert got == pytest.approx(ref, rel=1e-12)

    @pytest.mark.parametrize("n,m_X", [(3, 1), (7, 2), (10, 3)])
    def test_multivariate_t(self, rng, n, m_X):
        leaf = make_leaf(rng, n=n, m_X=m_X)
        hyper = make_hyper(rng, m_X + 1, alpha_sigma=3.0, q_sigma=2.0)
        got = log_marginal_K(leaf, hyper) - log_prior_corr(leaf.corr, hyper.fixed)
        assert got == pytest.approx(mvt_logpdf(leaf, hyper), rel=1e-10)

    def test_response_scaling(self, rng):
        leaf = make_leaf(rng, n=6)
        hyper = make_hyper(rng, 2)
        for c in (0.1, 3.0, -7.0):
            scaled = LeafState(leaf.X, c * leaf.Z, leaf.idx, leaf.corr, leaf.beta,
                               leaf.sigma2, leaf.tau2).refactor()
            got = log_marginal_K(scaled, hyper) - log_prior_corr(leaf.corr, hyper.fixed)
            assert got == pytest.approx(mvt_logpdf(scaled, hyper), rel=1e-10)

    def test_row_permutation(self, rng):
        leaf = make_leaf(rng, n=8, m_X=2)
        hyper = make_hyper(rng, 3)
        p = rng.permutation(8)
        perm = LeafState(leaf.X[p], leaf.Z[p], leaf.idx[p], leaf.corr, leaf.beta,
                         leaf.sigma2, leaf.tau2).refactor()
        assert log_marginal_K(perm, hyper) == pytest.approx(log_marginal_K(leaf, hyper), rel=1e-12)

    def test_brute_force_integration(self):
        # n = 2, m = 1 (intercept only): integrate beta and sigma2 numerically
        X = np.array([[0.2], [0.7]])
        Z = np.array([0.5, -0.3])
        F = np.ones((2, 1))
        beta0, W, tau2, a, q, g = np.array([0.1]), np.array([[1.5]]), 0.8, 5.0, 5.0, 0.1

        # tensor grid over (beta, log sigma2), trapezoid rule
        beta = np.linspace(-12.0, 12.0, 1601)
        ls2 = np.linspace(math.log(1e-4), math.log(200.0), 1601)
        B, L2 = np.meshgrid(beta, ls2, indexing="ij")
        S2 = np.exp(L2)

        def mass(d):
            K = build_corr_matrix(X, CorrParams(Family.ISOTROPIC, [d], g)).K
            Ki = np.linalg.inv(K)
            r0, r1 = Z[0] - B, Z[1] - B
            quad = Ki[0, 0] * r0**2 + 2 * Ki[0, 1] * r0 * r1 + Ki[1, 1] * r1**2
            log_lik = -np.log(2 * np.pi * S2) - 0.5 * np.log(np.linalg.det(K)) - quad / (2 * S2)
            vb = S2 * tau2 * W[0, 0]
            log_pb = -0.5 * np.log(2 * np.pi * vb) - (B - beta0[0]) ** 2 / (2 * vb)
            log_ps = stats.invgamma.logpdf(S2, a / 2, scale=q / 2)
            f = np.exp(log_lik + log_pb + log_ps) * S2  # Jacobian of log sigma2
            return integrate.trapezoid(integrate.trapezoid(f, ls2, axis=1), beta)

        def lm(d):
            cm = build_corr_matrix(X, CorrParams(Family.ISOTROPIC, [d], g), Z, F)
            return log_marginal(F, Z, cm, beta0, np.linalg.inv(W), math.log(W[0, 0]), tau2, a, q)

        d1, d2 = 0.05, 0.9
        ratio_num = mass(d1) / mass(d2)
        ratio = math.exp(lm(d1) - lm(d2))
        assert ratio_num == pytest.approx(ratio, rel=0.02)
        prior_ratio = math.exp(log_prior_range(d1) - log_prior_range(d2))
        assert ratio_num * prior_ratio == pytest.approx(ratio * prior_ratio, rel=0.02)

    def test_sigma2_conditional_consistency(self, rng):
        # joint density with beta integrated, normalized by the marginal, is IG
        leaf = make_leaf(rng, n=3)
        hyper = make_hyper(rng, 2)
        fx = hyper.fixed
        F = leaf.F
        S = leaf.cm.K + leaf.tau2 * F @ hyper.W @ F.T
        lm = log_marginal_K(leaf, hyper) - log_prior_corr(leaf.corr, fx)
        shape, scale = sigma2_conditional(leaf, hyper)
        for s2 in np.geomspace(0.05, 20, 25):
            joint = stats.multivariate_normal.logpdf(leaf.Z, F @ hyper.beta0, s2 * S)
            joint += stats.invgamma.logpdf(s2, fx.alpha_sigma / 2, scale=fx.q_sigma / 2)
            cond = math.exp(joint - lm)
            ref = stats.invgamma.pdf(s2, shape, scale=scale)
            assert cond == pytest.approx(ref, rel=1e-8)


class TestPriors:
    def test_range_prior_density(self):
        for d in (0.01, 0.3, 1.7):
            ref = 0.5 * stats.gamma.pdf(d, 1, scale=1 / 20) + 0.5 * stats.gamma.pdf(d, 10,
                                                                                   scale=0.1)
            assert math.exp(log_prior_range(d)) == pytest.approx(ref, rel=1e-12)

    def test_range_prior_draws(self):
        fixed = Hyperparameters.default(2)
        r = np.random.default_rng(6)
        draws = [prior_draw_corr(fixed, 1, Family.ISOTROPIC, r) for _ in range(100_000)]
        d = np.array([c.d[0] for c in draws])
        g = np.array([c.g for c in draws])
        var = 0.5 * (2 / 20**2 + 10 / 10**2) + 0.5 * (0.05 - 0.525) ** 2 + 0.5 * (1 - 0.525) ** 2
        assert abs(d.mean() - 0.525) < 3 * math.sqrt(var / d.size)
        p = 0.5 * stats.gamma.cdf(0.2, 1, scale=1 / 20) + 0.5 * stats.gamma.cdf(0.2, 10, scale=0.1)
        assert abs(np.mean(d < 0.2) - p) < 3 * math.sqrt(p * (1 - p) / d.size)
        assert abs(g.mean() - 0.1) < 3 * 0.1 / math.sqrt(g.size)
        assert g.min() >= NUGGET_FLOOR

    def test_separable_draw_shape(self):
        c = prior_draw_corr(Hyperparameters.default(4), 3, Family.SEPARABLE,
                            np.random.default_rng(0))
        assert c.d.shape == (3,)


class RecordingRng:
    """Wraps a generator and records every windowed uniform it hands out."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.windows = []

    def uniform(self, lo=0.0, hi=1.0, size=None):
        u = self.rng.uniform(lo, hi, size)
        if (lo, hi) != (0.0, 1.0):
            self.windows.append(u)
        return u


class TestMetropolis:
    def test_window_support(self):
        g = 0.12
        leaf = make_leaf(np.random.default_rng(0), g=g)
        hyper = make_hyper(np.random.default_rng(1), 2)
        r = RecordingRng(2)
        for _ in range(2000):
            mh_update_corr(leaf.copy(), hyper, r, update_d=False)
        props = g * np.array(r.windows)
        assert props.min() >= 0.09 and props.max() <= 0.16
        assert props.min() < 0.0905 and props.max() > 0.159

    def test_degenerate_window_always_accepts(self, rng):
        leaf = make_leaf(rng)
        hyper = make_hyper(rng, 2)
        for _ in range(20):
            _, acc = mh_update_corr(leaf, hyper, rng, window=(1.0, 1.0))
            assert acc

    def test_nugget_floor_rejects(self, rng):
        leaf = make_leaf(rng, g=1.1e-8)
        hyper = make_hyper(rng, 2)
        _, acc = mh_update_corr(leaf, hyper, rng, update_d=False, window=(0.75, 0.8))
        assert not acc
        assert leaf.corr.g == 1.1e-8

    def test_detailed_balance_on_grid(self, rng):
        # flows between points of a 20-point geometric grid of g balance under pi
        leaf = make_leaf(rng, n=5)
        hyper = make_hyper(rng, 2)
        grid = 0.05 * (1.02 ** np.arange(20))
        width = 4 / 3 - 3 / 4

        def at(g):
            return LeafState(leaf.X, leaf.Z, leaf.idx, leaf.corr.replace(g=g), leaf.beta,
                             leaf.sigma2, leaf.tau2).refactor()

        log_pi = np.array([log_marginal_K(at(g), hyper) for g in grid])
        checked = 0
        for i, gi in enumerate(grid):
            for j, gj in enumerate(grid):
                if i == j or not 0.75 * gi < gj < 4 / 3 * gi:
                    continue
                la_ij, _ = corr_log_accept(at(gi), hyper, at(gj).corr)
                la_ji, _ = corr_log_accept(at(gj), hyper, at(gi).corr)
                f_ij = log_pi[i] - math.log(gi * width) + min(0.0, la_ij)
                f_ji = log_pi[j] - math.log(gj * width) + min(0.0, la_ji)
                assert f_ij == pytest.approx(f_ji, abs=1e-10)
                checked += 1
        assert checked > 100

    def test_grid_posterior(self):
        # long MH run on d (g frozen) against a fine-grid discretization of the target
        r = np.random.default_rng(42)
        X = np.array([[0.1], [0.45], [0.9]])
        Z = np.array([0.3, -0.8, 0.5])
        leaf = LeafState(X, Z, np.arange(3), CorrParams(Family.ISOTROPIC, [0.5], 0.1),
                         np.zeros(2), 1.0, 1.0).refactor()
        hyper = HyperState(Hyperparameters.default(2))
        n_steps = 120_000
        ds = np.empty(n_steps)
        for t in range(n_steps):
            mh_update_corr(leaf, hyper, r, update_g=False)
            ds[t] = leaf.corr.d[0]
        ds = ds[2000:]
        edges = np.concatenate([[0.0], np.geomspace(0.005, 5.0, 30), [np.inf]])
        fine = np.geomspace(1e-5, 40.0, 20_000)
        mids = 0.5 * (fine[1:] + fine[:-1])
        w = np.diff(fine)
        lp = np.array([_lm_at(leaf, hyper, d) for d in mids])
        dens = np.exp(lp - lp.max()) * w
        target = np.histogram(mids, edges, weights=dens)[0]
        target /= target.sum()
        emp = np.histogram(ds, edges)[0] / ds.size
        tv = 0.5 * np.abs(emp - target).sum()
        print(f"TV = {tv:.4f}")
        assert tv < 0.05


def _lm_at(leaf, hyper, d):
    corr = leaf.corr.replace(d=[d])
    cm = build_corr_matrix(leaf.X, corr, leaf.Z, leaf.F)
    return log_marginal_K(leaf, hyper, corr=corr, cm=cm)
