import numpy as np
import pytest
from numpy.polynomial.hermite_e import hermegauss
from scipy import integrate, optimize, stats

from market_irl import irl_engine as ie
from market_irl.checkpoint import load_state, save_state, state_lines
from market_irl.entropy_rl import (GaussianPolicy, LinearizationPoint, QuadraticG,
                                   aux_quantities, f_from_g, stationary_solve)
from market_irl.irl_engine import (DomainError, EmConfig, MarketObjective, OmegaSpec,
                                   ThetaSpec, TransitionBatch, VariationalParams, Window,
                                   action_mean, complete_data_loglik, complex_step_gradient,
                                   e_step, energy0, energy1, entropy_block, expansion_coeffs,
                                   fd_gradient, ih_if_run, investor_objective, joint_precision,
                                   log_px, log_pz, m_step, marginal_action_cov, marginal_ybar,
                                   residual, simulate_market, single_investor_run,
                                   variational_free_energy)
from market_irl.model_core import ModelParams, exact_transition
from conftest import market_instance, quad_log_evidence, random_spd


def random_omega(rng, n_y, n_a, scale=1e-3):
    return VariationalParams(
        mu_a=rng.uniform(0.0, 0.05, n_a), Lambda_a=rng.normal(0, 0.01, (n_a, n_y)),
        Sigma_a=random_spd(rng, n_a, scale),
        mu_phi=rng.normal(0, 0.05, n_y), Lambda_phi=np.eye(n_y) + rng.normal(0, 0.05, (n_y, n_y)),
        Sigma_phi=random_spd(rng, n_y, scale),
        mu_varphi=rng.normal(0, 0.05, n_y),
        Lambda_varphi_1=np.eye(n_y) + rng.normal(0, 0.05, (n_y, n_y)),
        Lambda_varphi_2=rng.normal(0, 0.1, (n_y, n_y)),
        Sigma_varphi=random_spd(rng, n_y, scale),
        Sigma_delta=random_spd(rng, n_a, scale * 1e-3))


def one_transition(rng, k=1, beta=2.0):
    """Structural parameters, prior and one simulated transition with its
    stationary solution at a consistent linearization point."""
    theta, prior = market_instance(rng, k=k, beta=beta)
    y, _ = simulate_market(theta, prior, np.r_[1.0, np.zeros(k)], 1, int(rng.integers(1 << 30)))
    pt = LinearizationPoint(prior.mean(y[0]), y[0], y[1])
    st = stationary_solve(theta, prior, theta.beta, pt, tol=1e-13, max_iter=5000)
    return theta, prior, y[0], y[1], pt, st


def quadratic_design(X):
    """Monomials of degree <= 2 in the columns of X."""
    cols = [np.ones(len(X))] + [X[:, i] for i in range(X.shape[1])]
    cols += [X[:, i] * X[:, j] for i in range(X.shape[1]) for j in range(i, X.shape[1])]
    return np.column_stack(cols)


def synthetic_market(seed, steps=60, k=1):
    rng = np.random.default_rng(seed)
    theta, prior = market_instance(rng, k=k)
    y0 = np.r_[1.0, np.zeros(k)]
    st = stationary_solve(theta, prior, theta.beta, LinearizationPoint(prior.mean(y0), y0, y0),
                          tol=1e-13, max_iter=5000)
    y, acts = simulate_market(theta, st.policy, y0, steps, seed)
    return theta, prior, y, acts


class TestMarginals:
    def test_action_cov(self, rng):
        I = np.eye(2)
        om = VariationalParams.initial(2, 2)
        np.testing.assert_array_equal(marginal_action_cov(ie.replace(om, Sigma_a=I, Sigma_delta=0 * I)), I)
        np.testing.assert_array_equal(
            marginal_action_cov(ie.replace(om, Sigma_a=0.5 * I, Sigma_delta=0.5 * I)), I)
        for _ in range(10):
            om = random_omega(rng, 2, 4)
            assert np.linalg.eigvalsh(marginal_action_cov(om)).min() > 0

    def test_decoupled_encoder(self, rng):
        om = ie.replace(random_omega(rng, 3, 2), Lambda_phi=np.zeros((3, 3)),
                        Lambda_varphi_2=np.zeros((3, 3)))
        yt, yn = rng.normal(size=3), rng.normal(size=3)
        mu_h, S_h = marginal_ybar(om, yt, yn)
        np.testing.assert_allclose(mu_h, om.Lambda_varphi_1 @ yt + om.mu_varphi)
        np.testing.assert_array_equal(S_h, om.Sigma_varphi)

    def test_two_stage_sampling(self):
        rng = np.random.default_rng(3)
        om = random_omega(rng, 2, 2, scale=1.0)
        yt, yn = rng.normal(size=2), rng.normal(size=2)
        mu_h, S_h = marginal_ybar(om, yt, yn)
        n = 10**5
        yp = rng.multivariate_normal(om.mu_phi + om.Lambda_phi @ yn, om.Sigma_phi, n)
        mean = om.mu_varphi + om.Lambda_varphi_1 @ yt + yp @ om.Lambda_varphi_2.T
        yb = mean + rng.multivariate_normal(np.zeros(2), om.Sigma_varphi, n)
        se = yb.std(axis=0) / np.sqrt(n)
        assert np.all(np.abs(yb.mean(axis=0) - mu_h) < 3 * se)
        C = np.cov(yb.T)
        se_c = np.sqrt((C**2 + np.outer(np.diag(C), np.diag(C))) / n)
        assert np.all(np.abs(C - S_h) < 3 * se_c)

    def test_joint_precision_marginal(self, rng):
        om = random_omega(rng, 3, 2, scale=0.5)
        _, S_h = marginal_ybar(om, np.zeros(3), np.zeros(3))
        cov = np.linalg.inv(joint_precision(om))
        np.testing.assert_allclose(cov[3:, 3:], S_h, atol=1e-10)


class TestExpansionCoeffs:
    def test_perfect_transition(self):
        th = ModelParams.scalar(2, 1, r_f=0.01, sigma_r=1e-4)
        a = np.array([0.1, 0.0, 0.0, 0.2])
        y = np.array([1.0, 2.0, 0.3, -0.1])
        yn = np.r_[1.01 * (y[:2] + a[:2] - a[2:]), 0.0, 0.0]
        np.testing.assert_allclose(expansion_coeffs(th, a, y, yn).d0, 0.0, atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        th, _ = market_instance(rng)
        th = th.with_(W=np.array([[0.05]]))
        a = rng.uniform(0, 0.1, 2)
        y, yn = np.r_[1.0, 0.02], np.r_[1.03, 0.01]
        ec = expansion_coeffs(th, a, y, yn)
        h = 1e-5
        for j in range(2):
            e = np.eye(2)[j]
            d1 = (residual(th, a + h * e, y, yn) - residual(th, a - h * e, y, yn)) / (2 * h)
            np.testing.assert_allclose(ec.d1[:, j], d1, rtol=1e-6)
            for l in range(2):
                f = np.eye(2)[l]
                hess = (residual(th, a + h * e + h * f, y, yn) - residual(th, a + h * e - h * f, y, yn)
                        - residual(th, a - h * e + h * f, y, yn)
                        + residual(th, a - h * e - h * f, y, yn)) / (4 * h * h)
                np.testing.assert_allclose(ec.d2[:, j, l], hess / 2, rtol=1e-4)

    def test_domain_error_names_asset(self):
        th = ModelParams.scalar(2, 1)
        with pytest.raises(DomainError, match="asset 1"):
            expansion_coeffs(th, np.array([0.0, 0.0, 0.0, 3.0]), np.array([1.0, 2.0, 0, 0]),
                             np.ones(4))


class TestEntropy:
    def test_standard(self):
        om = VariationalParams.initial(1, 1, sigma_a=1.0, sigma_y=1.0)
        assert entropy_block(om) == pytest.approx(1.5 * np.log(2 * np.pi * np.e), abs=1e-14)

    def test_scaling(self, rng):
        om = random_omega(rng, 2, 3)
        h2 = entropy_block(ie.replace(om, Sigma_a=5.0 * om.Sigma_a))
        assert h2 - entropy_block(om) == pytest.approx(1.5 * np.log(5.0), abs=1e-12)

    def test_sample_entropy(self):
        rng = np.random.default_rng(11)
        om = random_omega(rng, 2, 2, scale=1.0)
        yt, yn = rng.normal(size=2), rng.normal(size=2)
        n = 10**6
        qa = stats.multivariate_normal(action_mean(om, yt), om.Sigma_a)
        qp = stats.multivariate_normal(om.mu_phi + om.Lambda_phi @ yn, om.Sigma_phi)
        a, yp = qa.rvs(n, random_state=rng), qp.rvs(n, random_state=rng)
        m = om.mu_varphi + om.Lambda_varphi_1 @ yt + yp @ om.Lambda_varphi_2.T
        yb = m + rng.multivariate_normal(np.zeros(2), om.Sigma_varphi, n)
        logq = (qa.logpdf(a) + qp.logpdf(yp)
                + stats.multivariate_normal(np.zeros(2), om.Sigma_varphi).logpdf(yb - m))
        est = -logq.mean()
        assert est == pytest.approx(entropy_block(om), rel=0.01)


class TestEnergy0:
    def test_collapse(self, rng):
        th = ModelParams.scalar(1, 1, r_f=0.01, sigma_r=2e-4, sigma_z=1e-3, phi=0.1)
        prior = GaussianPolicy([0.02, 0.01], rng.normal(0, 0.01, (2, 2)), random_spd(rng, 2, 1e-3))
        yt = np.array([1.0, 0.05])
        om = ie.replace(VariationalParams.initial(2, 2), mu_a=prior.A0, Lambda_a=prior.A1,
                        Sigma_delta=np.zeros((2, 2)))
        u = np.array([1.0, -1.0]) @ prior.mean(yt)
        yn = np.array([1.01 * (yt[0] + u), 0.9 * yt[1] + 0.01])
        P = np.linalg.inv(prior.Sigma_p)
        expect = (log_pz(th, yt, yn) - 0.5 * np.linalg.slogdet(prior.Sigma_p)[1]
                  - 0.5 * np.log(2e-4) - 0.5 * np.log(2 * np.pi) - 0.5 * np.sum(om.Sigma_a * P))
        assert energy0(om, th, prior, yt, yn) == pytest.approx(expect, abs=1e-12)

    def test_log_pz_longhand(self, rng):
        th = ModelParams.scalar(2, 1, sigma_z=1e-2, phi=0.3)
        yt, yn = rng.normal(size=4), rng.normal(size=4)
        lh = stats.multivariate_normal(0.7 * yt[2:], th.Sigma_z).logpdf(yn[2:])
        assert log_pz(th, yt, yn) == pytest.approx(lh, abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_quadrature(self, seed):
        rng = np.random.default_rng(seed)
        th, prior, yt, yn, _, _ = one_transition(rng)
        prior = GaussianPolicy([0.01, 0.005], [[0.0, 0.1], [0.0, -0.1]], random_spd(rng, 2, 1e-3))
        om = ie.replace(random_omega(rng, 2, 2, 1e-4), Sigma_delta=np.diag([2e-6, 1e-6]))
        mu_a = action_mean(om, yt)
        # prior term: Gauss-Hermite over the marginal action law, exact for the
        # quadratic log-density
        x, w = hermegauss(6)
        Xi = np.array(np.meshgrid(x, x)).reshape(2, -1).T
        A = mu_a + Xi @ np.linalg.cholesky(marginal_action_cov(om)).T
        wt = np.outer(w, w).ravel() / (2 * np.pi)
        e_prior = wt @ np.array([prior.logpdf(a, yt) for a in A]) + np.log(2 * np.pi)
        # residual term: adaptive quadrature of the exact log p_x over the jitter
        v = np.array([1.0, -1.0])
        m_u, s2 = v @ mu_a, v @ om.Sigma_delta @ v
        sd = np.sqrt(s2)
        e_px = integrate.quad(
            lambda u: stats.norm.pdf(u, m_u, sd) * log_px(th, np.array([u, 0.0]), yt, yn),
            m_u - 12 * sd, m_u + 12 * sd, epsabs=0, epsrel=1e-12)[0]
        oracle = e_prior + e_px + log_pz(th, yt, yn)
        assert energy0(om, th, prior, yt, yn) == pytest.approx(oracle, rel=1e-5)


class TestEnergy1:
    def test_zero_g_vanishes(self, rng):
        prior = GaussianPolicy([0.01, 0.0], rng.normal(0, 0.01, (2, 2)), random_spd(rng, 2, 1e-3))
        g = QuadraticG.zeros(2, 2)
        om = random_omega(rng, 2, 2)
        yt, yn = np.array([1.0, 0.1]), np.array([1.01, 0.05])
        aux = aux_quantities(g, prior, 2.0, LinearizationPoint(prior.A0, yt, yn))
        np.testing.assert_array_equal(aux.Gamma_beta, 0.0)
        assert aux.L_beta == 0.0
        assert energy1(om, g, prior, 2.0, yt, yn, aux) == pytest.approx(0.0, abs=1e-15)

    def test_small_beta(self, rng):
        th, prior, yt, yn, pt, st = one_transition(rng, beta=1e-10)
        om = random_omega(rng, 2, 2)
        assert abs(energy1(om, st.G, prior, 1e-10, yt, yn, st.aux)) < 1e-6

    def test_monte_carlo(self):
        rng = np.random.default_rng(5)
        th, prior, yt, yn, pt, st = one_transition(rng)
        prior = GaussianPolicy(prior.A0, rng.normal(0, 0.1, (2, 2)), prior.Sigma_p)
        st = stationary_solve(th, prior, th.beta, pt, tol=1e-13, max_iter=5000)
        beta, g = th.beta, st.G
        om = random_omega(rng, 2, 2, 1e-3)
        # F at the observed y_t as a function of the hidden (ā, ȳ), lifted from
        # pointwise f_from_g evaluations by exact quadratic interpolation
        H = rng.normal(0, 0.1, (40, 4)) + np.r_[pt.a_bar, pt.y_bar]
        vals = [f_from_g(g, prior, beta, LinearizationPoint(h[:2], h[2:], yn))[0].at(yt)
                for h in H]
        coef = np.linalg.lstsq(quadratic_design(H), vals, rcond=None)[0]
        n = 10**6
        a_bar = rng.multivariate_normal(action_mean(om, yt), om.Sigma_a, n)
        yp = rng.multivariate_normal(om.mu_phi + om.Lambda_phi @ yn, om.Sigma_phi, n)
        yb = (om.mu_varphi + om.Lambda_varphi_1 @ yt + yp @ om.Lambda_varphi_2.T
              + rng.multivariate_normal(np.zeros(2), om.Sigma_varphi, n))
        d = rng.multivariate_normal(np.zeros(2), om.Sigma_delta, n)
        dy = yt - yb
        G = (np.einsum("ij,jk,ik->i", d, g.G_aa, d) + np.einsum("ij,jk,ik->i", dy, g.G_yy, dy)
             + np.einsum("ij,jk,ik->i", d, g.G_ay, dy) + d @ g.G_a + dy @ g.G_y + g.g0)
        F = quadratic_design(np.hstack([a_bar, yb])) @ coef
        sample = beta * (G - F)
        se = sample.std() / np.sqrt(n)
        closed = energy1(om, g, prior, beta, yt, yn, st.aux)
        assert abs(sample.mean() - closed) < 3 * se


class TestFreeEnergy:
    def test_additivity(self, monkeypatch):
        monkeypatch.setattr(ie, "entropy_block", lambda om: 1.0)
        monkeypatch.setattr(ie, "energy0", lambda *a: np.array(2.0))
        monkeypatch.setattr(ie, "energy1", lambda *a: np.array(3.0))
        assert ie.variational_free_energy(None, None, None, None, 1.0, None, None, None) == 6.0

    def test_batch_of_identical_transitions(self, rng):
        th, prior, yt, yn, pt, st = one_transition(rng)
        om = random_omega(rng, 2, 2)
        one = variational_free_energy(om, th, st.G, prior, th.beta, yt, yn, st.aux)
        five = variational_free_energy(om, th, st.G, prior, th.beta, np.tile(yt, (5, 1)),
                                       np.tile(yn, (5, 1)), st.aux)
        assert five == pytest.approx(5 * one, rel=1e-13)

    @pytest.mark.parametrize("seed", range(5))
    def test_jensen_bound_concentrated_encoders(self, seed):
        rng = np.random.default_rng(seed)
        th, prior, yt, yn, pt, st = one_transition(rng)
        ev = quad_log_evidence(th, st.policy, yt, yn)
        om = VariationalParams.initial(2, 2, sigma_a=1e-3, sigma_y=1e-4,
                                       mu_a=st.policy.mean(yt))
        F = variational_free_energy(om, th, st.G, prior, th.beta, yt, yn, st.aux)
        assert F <= ev + 1e-8

    def test_wide_encoders_break_the_bound(self, rng):
        """The ȳ entropy is not paid for by any likelihood term."""
        th, prior, yt, yn, pt, st = one_transition(rng)
        ev = quad_log_evidence(th, st.policy, yt, yn)
        vals = []
        for s in (1e-4, 1e-2, 1.0):
            om = VariationalParams.initial(2, 2, sigma_a=1e-3, sigma_y=s, mu_a=st.policy.mean(yt))
            vals.append(variational_free_energy(om, th, st.G, prior, th.beta, yt, yn, st.aux))
        assert vals[0] < vals[1] < vals[2]
        assert vals[2] > ev

    @pytest.mark.xfail(strict=True, reason="the action entropy term makes the gap grow as "
                                           "the action covariance shrinks")
    def test_saddle_point_gap_shrinks(self, rng):
        th, prior, yt, yn, pt, st = one_transition(rng)
        ev = quad_log_evidence(th, st.policy, yt, yn)
        gaps = []
        for s in (1e-3, 1e-4, 1e-5):
            om = VariationalParams.initial(2, 2, sigma_a=s, sigma_y=1e-4, mu_a=st.policy.mean(yt))
            F = variational_free_energy(om, th, st.G, prior, th.beta, yt, yn, st.aux)
            gaps.append(ev - F)
        assert gaps[0] > gaps[1] > gaps[2]


class TestCompleteData:
    def test_normalizers_only(self, rng):
        th = ModelParams.scalar(1, 1, mu=0.05, sigma_r=1e-4, sigma_z=1e-3, phi=0.1, w=0.03)
        pol = GaussianPolicy([0.02, 0.01], [[0.0, 0.1], [0.0, 0.0]], random_spd(rng, 2, 1e-3))
        y0 = np.array([1.0, 0.1])
        a = pol.mean(y0)
        y1 = exact_transition(th, y0, a)
        val = complete_data_loglik(th, pol, [y0, y1], [a])
        expect = (-0.5 * np.linalg.slogdet(2 * np.pi * pol.Sigma_p)[1]
                  - 0.5 * np.log(2 * np.pi * 1e-4) - 0.5 * np.log(2 * np.pi * 1e-3))
        assert val == pytest.approx(expect, abs=1e-10)

    def test_longhand(self, rng):
        th = ModelParams.scalar(1, 1, r_f=0.001, mu=0.05, sigma_r=1e-4, sigma_z=1e-3, phi=0.1,
                                w=0.03)
        pol = GaussianPolicy([0.02, 0.01], [[0.0, 0.1], [0.0, 0.0]], random_spd(rng, 2, 1e-3))
        y, acts = simulate_market(th, pol, [1.0, 0.1], 3, 4)
        total = 0.0
        for t in range(3):
            x, z, (ap, am) = y[t, 0], y[t, 1], acts[t]
            u = ap - am
            ret = y[t + 1, 0] / (x + u) - 1.0
            total += stats.multivariate_normal(pol.mean(y[t]), pol.Sigma_p).logpdf(acts[t])
            total += stats.norm.logpdf(ret, 0.001 + 0.03 * z - 0.05 * u, 1e-2)
            total += stats.norm.logpdf(y[t + 1, 1], 0.9 * z, np.sqrt(1e-3))
        assert complete_data_loglik(th, pol, y, acts) == pytest.approx(total, abs=1e-10)

    def test_additive_over_trajectories(self, rng):
        th, prior = market_instance(rng)
        y1, a1 = simulate_market(th, prior, [1.0, 0.0], 3, 1)
        y2, a2 = simulate_market(th, prior, [1.0, 0.0], 3, 2)
        joined = complete_data_loglik(th, prior, y1, a1) + complete_data_loglik(th, prior, y2, a2)
        parts = sum(complete_data_loglik(th, prior, y1[t:t + 2], a1[t:t + 1]) for t in range(3))
        parts += complete_data_loglik(th, prior, y2, a2)
        assert joined == pytest.approx(parts, abs=1e-9)
        assert complete_data_loglik(th, prior, y1, a1, include_y0=2.5) == pytest.approx(
            complete_data_loglik(th, prior, y1, a1) + 2.5)


def market_setup(seed, steps=40, k=1):
    theta, prior, y, acts = synthetic_market(seed, steps, k)
    data = TransitionBatch(y[:-1], y[1:], 1)
    return theta, prior, data


class TestGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_omega_and_theta(self, seed):
        theta, prior, data = market_setup(seed, steps=10)
        rng = np.random.default_rng(seed)
        cfg = EmConfig()
        st = ih_if_run(data, EmConfig(max_iter=0), theta, prior).state
        om = ie.replace(st.omega, mu_a=st.omega.mu_a + rng.normal(0, 1e-3, 2),
                        Lambda_a=rng.normal(0, 1e-3, (2, 2)))
        obj = MarketObjective(data, prior, st.point, ThetaSpec(theta, 1), OmegaSpec(2, 2), cfg)
        f = obj.f_omega(theta)
        v = obj.omega_spec.pack(om)
        ga, gb = fd_gradient(f, v), complex_step_gradient(f, v)
        assert np.linalg.norm(ga - gb) <= 1e-5 * np.linalg.norm(gb)
        f = obj.f_theta(om)
        v = obj.theta_spec.pack(theta)
        ga, gb = fd_gradient(f, v), complex_step_gradient(f, v)
        assert np.linalg.norm(ga - gb) <= 1e-5 * np.linalg.norm(gb)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            ie.gradient(lambda v: 0.0, np.zeros(2), "magic")

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite(self):
        with pytest.raises(ie.NonFiniteGradientError):
            ie.gradient(lambda v: np.inf * v[0], np.ones(1))


class TestPacking:
    def test_theta_round_trip(self, rng):
        th, _ = market_instance(rng, k=2)
        spec = ThetaSpec(th, 2)
        back = spec.unpack(spec.pack(th))
        for k in ("lam", "beta"):
            assert getattr(back, k) == pytest.approx(getattr(th, k), rel=1e-12)
        np.testing.assert_allclose(back.W, th.W, rtol=1e-12)
        np.testing.assert_allclose(back.mu, th.mu, rtol=1e-12)
        assert len(spec.names) == spec.pack(th).size

    def test_omega_round_trip(self, rng):
        om = random_omega(rng, 3, 2)
        spec = OmegaSpec(3, 2)
        back = spec.unpack(spec.pack(om))
        for k in om.__dataclass_fields__:
            np.testing.assert_allclose(getattr(back, k), getattr(om, k), rtol=1e-10, atol=1e-15)
        assert len(spec.names) == spec.pack(om).size

    def test_check(self):
        om = VariationalParams.initial(2, 2, delta_ratio=0.5)
        with pytest.raises(ValueError, match="exceeds"):
            om.check(0.01)
        with pytest.raises(ValueError, match="positive definite"):
            ie.replace(om, Sigma_a=-np.eye(2)).check()


class TestEStep:
    def _state(self, seed=0, beta=2.0):
        theta, prior, data = market_setup(seed, steps=20)
        theta = theta.with_(beta=beta)
        return theta, prior, data, ih_if_run(data, EmConfig(max_iter=0), theta, prior).state

    def test_zero_rate(self):
        _, _, data, st = self._state()
        st.alpha_omega = 0.0
        om, *_ = e_step(st, data, EmConfig())
        assert om is st.omega

    def test_ascent_does_not_decrease(self):
        theta, prior, data, st = self._state()
        cfg = EmConfig()
        obj = ie._objective(st, data, cfg)
        f0 = obj.value(st.omega, theta)
        om, f1, step, gnorm = e_step(st, data, cfg, obj)
        assert step > 0 and gnorm > 0
        assert f1 >= f0
        assert obj.value(om, theta) == pytest.approx(f1, rel=1e-14)

    def _single(self, beta):
        rng = np.random.default_rng(9)
        th, prior, yt, yn, pt, st = one_transition(rng, beta=beta)
        data = TransitionBatch(yt, yn, 1)
        om = VariationalParams.initial(2, 2, sigma_a=1e-4, sigma_y=1e-4, delta_ratio=1e-4,
                                       mu_a=prior.mean(yt))
        obj = MarketObjective(data, prior, pt, ThetaSpec(th, 1), OmegaSpec(2, 2), EmConfig())
        return th, prior, yt, yn, om, obj, st

    def test_action_mean_reaches_map(self):
        th, prior, yt, yn, om, obj, _ = self._single(0.0)
        solved = obj.solve(th)
        f = lambda m: -obj.value(ie.replace(om, mu_a=m), th, solved)
        got = optimize.minimize(f, om.mu_a, method="Nelder-Mead",
                                options=dict(xatol=1e-10, fatol=1e-12, maxiter=20000)).x
        neg_log_post = lambda a: -(prior.logpdf(a, yt) + log_px(th, a, yt, yn))
        want = optimize.minimize(neg_log_post, prior.mean(yt), method="Nelder-Mead",
                                 options=dict(xatol=1e-10, fatol=1e-12, maxiter=20000)).x
        np.testing.assert_allclose(got, want, atol=1e-4)

    def _sigma_a_grad(self, om, th, obj):
        spec = obj.omega_spec
        f = obj.f_omega(th)
        idx = [i for i, n in enumerate(spec.names) if n.startswith("Sigma_a")]
        return complex_step_gradient(f, spec.pack(om), idx)[idx]

    def test_action_covariance_stationary_point(self):
        th, prior, yt, yn, om, obj, st = self._single(2.0)
        P = np.linalg.inv(prior.Sigma_p)
        S_star = np.linalg.inv(P - th.beta * st.aux.Gamma_beta)
        om = ie.replace(om, Sigma_a=S_star, Sigma_delta=1e-4 * S_star)
        g = self._sigma_a_grad(om, th, obj)
        scale = np.linalg.norm(self._sigma_a_grad(ie.replace(om, Sigma_a=2 * S_star,
                                                              Sigma_delta=1e-4 * S_star), th, obj))
        assert np.linalg.norm(g) < 1e-6 * scale

    @pytest.mark.xfail(strict=True, reason="the free energy's optimal action covariance is "
                                           "Σ_p S̃ Σ_p, not the posterior covariance S̃⁻¹")
    def test_action_covariance_is_posterior(self):
        th, prior, yt, yn, om, obj, st = self._single(2.0)
        S_post = st.policy.Sigma_p
        om = ie.replace(om, Sigma_a=S_post, Sigma_delta=1e-4 * S_post)
        g = self._sigma_a_grad(om, th, obj)
        scale = np.linalg.norm(self._sigma_a_grad(ie.replace(om, Sigma_a=2 * S_post,
                                                              Sigma_delta=1e-4 * S_post), th, obj))
        assert np.linalg.norm(g) < 1e-6 * scale


class TestMStep:
    def test_zero_rate(self):
        theta, prior, data = market_setup(1, steps=20)
        st = ih_if_run(data, EmConfig(max_iter=0), theta, prior).state
        st.alpha_theta = 0.0
        th, g, f, pol, *_ = m_step(st, data, EmConfig())
        assert th is st.theta
        ref = ie.policy_update(g, prior, theta.beta, st.point)
        np.testing.assert_array_equal(pol.A1, ref.A1)

    @pytest.mark.xfail(strict=True, reason="at the generator the saddle-point free energy is "
                                           "not stationary in θ (relative gradient ~0.1)")
    def test_gradient_small_at_generator(self):
        theta, prior, data = market_setup(0, steps=200)
        st = ih_if_run(data, EmConfig(max_iter=0), theta, prior).state
        obj = ie._objective(st, data, EmConfig())
        f = obj.f_theta(st.omega)
        v = obj.theta_spec.pack(theta)
        g = fd_gradient(f, v)
        assert np.linalg.norm(g) / abs(f(v)) < 1e-3

    def test_two_rounds_monotone(self):
        theta, prior, data = market_setup(2, steps=30)
        res = ih_if_run(data, EmConfig(max_iter=2, refresh_point=False), theta, prior)
        assert res.history[1] >= res.history[0] - 1e-8


class TestIhIf:
    def test_max_iter_zero(self):
        theta, prior, data = market_setup(3, steps=10)
        res = ih_if_run(data, EmConfig(max_iter=0), theta, prior)
        assert res.theta is theta and res.history == [] and res.iterations == 0

    def test_monotone_and_slope(self):
        theta, prior, data = market_setup(4, steps=40, k=2)
        assert np.all(prior.A1 == 0)
        res = ih_if_run(data, EmConfig(max_iter=15, signals_per_asset=2), theta, prior)
        assert np.all(np.diff(res.history) >= -1e-8)
        assert np.linalg.norm(res.policy.A1) > 0

    def test_mini_batches_without_replacement(self):
        stream = ie._batches(10, 3, np.random.default_rng(0))
        epoch = np.concatenate([next(stream) for _ in range(3)])
        assert len(set(epoch)) == 9

    def test_empty_data(self):
        with pytest.raises(ValueError):
            ih_if_run(TransitionBatch(np.zeros((0, 2)), np.zeros((0, 2)), 1), EmConfig(),
                      ModelParams.scalar(1, 1), GaussianPolicy.from_scalars(2, 2))

    def test_diagnostics_stream(self):
        theta, prior, data = market_setup(5, steps=10)
        lines = []
        ih_if_run(data, EmConfig(max_iter=2, diagnostics=lines.append), theta, prior)
        assert len(lines) == 2 and lines[0].startswith("iter=1 F_b=")

    def test_checkpoint_round_trip(self, tmp_path):
        theta, prior, data = market_setup(6, steps=10)
        st = ih_if_run(data, EmConfig(max_iter=2), theta, prior).state
        save_state(st, tmp_path / "ck.txt")
        back = load_state(tmp_path / "ck.txt")
        assert state_lines(back) == state_lines(st)


class TestInvestor:
    def test_single_step_windows_match_market_objective(self):
        theta, prior, data = market_setup(7, steps=12)
        st = ih_if_run(data, EmConfig(max_iter=0), theta, prior).state
        wins = [Window(np.vstack([a, b])) for a, b in zip(data.y, data.y_next)]
        obj = MarketObjective(data, prior, st.point, ThetaSpec(theta, 1), OmegaSpec(2, 2),
                              EmConfig())
        a = obj.value(st.omega, theta)
        b = investor_objective(theta, st.omega, wins, prior, EmConfig(), [st.point,
                               LinearizationPoint(np.zeros(2), data.y_next.mean(0),
                                                  data.y_next.mean(0))])
        assert b == pytest.approx(a, rel=1e-10)

    def test_single_step_runs_agree(self):
        theta, prior, data = market_setup(8, steps=12)
        cfg = EmConfig(max_iter=3, refresh_point=False)
        m = ih_if_run(data, cfg, theta, prior)
        wins = [Window(np.vstack([a, b])) for a, b in zip(data.y, data.y_next)]
        i = single_investor_run(wins, cfg, theta, prior)
        np.testing.assert_allclose(i.history, m.history, rtol=1e-8)
        np.testing.assert_allclose(ThetaSpec(theta, 1).pack(i.theta),
                                   ThetaSpec(theta, 1).pack(m.theta), rtol=1e-6, atol=1e-10)

    def test_observed_actions_use_complete_data(self):
        theta, prior, y, acts = synthetic_market(9, steps=6)
        wins = [Window(y[s:s + 4], acts[s:s + 3]) for s in (0, 3)]
        cfg = EmConfig(terminal="reward")
        total = investor_objective(theta, None, wins, prior, cfg)
        ref = 0.0
        for i, w in enumerate(wins):
            pts = ie._window_points(wins, None, 2, True, i)
            bp = ie.backward_pass(theta, prior, pts, 3)
            ref += complete_data_loglik(theta, bp.policies, w.y, w.actions)
        assert total == pytest.approx(ref, rel=1e-12)

    def test_null_signal(self):
        rng = np.random.default_rng(10)
        null = ModelParams.scalar(1, 1, sigma_r=1e-4, sigma_z=1e-3, phi=0.1, gamma_disc=0.5,
                                  beta=2.0, lam=1e-9, mu=1e-9)
        prior = GaussianPolicy.from_scalars(2, 2, 0.01, 0.0, 1e-3)
        y, acts = simulate_market(null, prior, [1.0, 0.0], 12, int(rng.integers(100)))
        wins = [Window(y[s:s + 4], acts[s:s + 3]) for s in (0, 4, 8)]
        res = single_investor_run(wins, EmConfig(max_iter=5, terminal="reward"), null, prior)
        assert res.complete_data
        for pol in res.policies:
            np.testing.assert_allclose(pol.A0, prior.A0, atol=1e-3)
            np.testing.assert_allclose(pol.A1, prior.A1, atol=1e-3)
            np.testing.assert_allclose(pol.Sigma_p, prior.Sigma_p, rtol=1e-3, atol=1e-9)

    def test_unknown_terminal(self):
        theta, prior, y, acts = synthetic_market(9, steps=4)
        with pytest.raises(ValueError):
            ie._investor_backward(theta, prior, ie._window_points(
                [Window(y, acts)], None, 2, True, 0), EmConfig(terminal="bogus"))
