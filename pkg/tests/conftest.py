import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from market_irl.entropy_rl import GaussianPolicy, LinearizationPoint
from market_irl.model_core import ModelParams, exact_transition

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_spd(rng, n, scale=1.0, jitter=0.1):
    A = rng.standard_normal((n, n))
    return scale * (A @ A.T / n + jitter * np.eye(n))


def random_params(rng, n=1, k=1, beta=1.0, gamma_disc=0.9, sigma_r=None, full=True):
    """Random structural parameters with block-sparse loadings."""
    nz = n * k
    mask = np.kron(np.eye(n), np.ones((1, k)))
    W = mask * rng.uniform(-0.1, 0.1, (n, nz))
    Sr = random_spd(rng, n, 1e-3) if sigma_r is None else sigma_r * np.eye(n)
    return ModelParams(
        r_f=rng.uniform(0, 0.01), W=W, mu=rng.uniform(0.01, 0.2, n), Sigma_r=Sr,
        Phi=rng.uniform(0.05, 0.5, nz), Sigma_z=random_spd(rng, nz, 1e-2),
        lam=rng.uniform(0.1, 1.0),
        Gamma_plus=np.diag(rng.uniform(0, 0.05, n)) if full else 0.0,
        Gamma_minus=np.diag(rng.uniform(0, 0.05, n)) if full else 0.0,
        Upsilon=mask * rng.uniform(0, 0.05, (n, nz)) if full else 0.0,
        nu_plus=rng.uniform(0, 0.01, n), nu_minus=rng.uniform(0, 0.01, n),
        gamma_disc=gamma_disc, beta=beta)


def random_point(rng, params, consistent=True):
    n, nz = params.n_assets, params.n_signals
    y = np.concatenate([rng.uniform(0.5, 1.5, n), rng.normal(0, 0.1, nz)])
    a = rng.uniform(0, 0.1, 2 * n)
    yn = exact_transition(params, y, a) if consistent else y + rng.normal(0, 0.01, y.size)
    return LinearizationPoint(a, y, yn)


def random_prior(rng, n_a, n_y, sigma2=0.01):
    return GaussianPolicy(rng.normal(0, 0.05, n_a), rng.normal(0, 0.01, (n_a, n_y)),
                          random_spd(rng, n_a, sigma2))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def market_instance(rng, k=1, beta=2.0, sigma_r=1e-4):
    """One-asset structural parameters and a flat prior, at CLI-like scales."""
    theta = ModelParams.scalar(
        1, k, mu=rng.uniform(0.02, 0.08), sigma_r=sigma_r, sigma_z=1e-3,
        lam=rng.uniform(0.2, 0.8), gamma_plus=0.01, gamma_minus=0.01, upsilon=0.01,
        gamma_disc=0.5, beta=beta, phi=0.1, w=rng.uniform(0.02, 0.06))
    return theta, GaussianPolicy.from_scalars(2, 1 + k, 0.0, 0.0, 1e-3)


def quad_log_evidence(theta, policy, y, y_next):
    """``log p_z + log ∫ π(a|y) p_x(Δ(a)) da`` for one asset by adaptive
    quadrature over the net trade ``u``, the only direction ``Δ`` depends on."""
    from scipy import integrate
    from market_irl.irl_engine import log_px, log_pz

    v = np.array([1.0, -1.0])
    m_u = v @ policy.mean(y)
    s2 = v @ policy.Sigma_p @ v
    sd = np.sqrt(s2)

    def dens(u):
        return (np.exp(-0.5 * (u - m_u) ** 2 / s2) / np.sqrt(2 * np.pi * s2)
                * np.exp(log_px(theta, np.array([u, 0.0]), y, y_next)))

    lo, hi = max(m_u - 15 * sd, -y[0] + 1e-12), m_u + 15 * sd
    val, _ = integrate.quad(dens, lo, hi, points=[m_u], limit=400, epsabs=0, epsrel=1e-12)
    return float(log_pz(theta, y, y_next)) + np.log(val)
