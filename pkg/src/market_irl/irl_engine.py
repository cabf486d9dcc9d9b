"""Inverse reinforcement learning by variational EM.

The recognition model ``q_ω`` has four Gaussian factors with linear means:

* ``ā | y_t ~ N(μ_a + Λ_a y_t, Σ_a)``
* ``ȳ' | y_{t+1} ~ N(μ_φ + Λ_φ y_{t+1}, Σ_φ)``
* ``ȳ | y_t, ȳ' ~ N(μ_ϕ + Λ1 y_t + Λ2 ȳ', Σ_ϕ)``
* ``a | ā ~ N(ā, Σ_δ)``

The free energy of a transition is ``H + F0 + F1`` (entropy, model energy
and value-function energy), all in closed form. Every routine is
complex-analytic so the free energy admits complex-step derivatives.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from ._linalg import as_array, block_mask, chol, inv_pd, logdet_pd, sym
from .entropy_rl import (AuxQuantities, BackwardResult, GaussianPolicy, LinearizationPoint,
                         PolicyCurvatureError, QuadraticF, QuadraticG,
                         aux_quantities, backward_pass, expected_next_f,
                         f_from_g, g_update, linearize_dynamics, policy_update,
                         reward_coefficients, shift_reward, stationary_solve,
                         terminal_f)
from .model_core import ModelParams, exact_transition

log = logging.getLogger(__name__)

LOG2PI = math.log(2.0 * math.pi)


class DomainError(ValueError):
    """Post-trade position ``x + ū`` is not strictly positive."""


class NonFiniteGradientError(FloatingPointError):
    pass


class EmFailure(RuntimeError):
    def __init__(self, msg: str, iteration: int):
        super().__init__(f"{msg} (iteration {iteration})")
        self.iteration = iteration


# ---------------------------------------------------------------------------
# Types


@dataclass(frozen=True)
class VariationalParams:
    mu_a: np.ndarray
    Lambda_a: np.ndarray
    Sigma_a: np.ndarray
    mu_phi: np.ndarray
    Lambda_phi: np.ndarray
    Sigma_phi: np.ndarray
    mu_varphi: np.ndarray
    Lambda_varphi_1: np.ndarray
    Lambda_varphi_2: np.ndarray
    Sigma_varphi: np.ndarray
    Sigma_delta: np.ndarray

    def __post_init__(self):
        for k in self.__dataclass_fields__:
            object.__setattr__(self, k, as_array(getattr(self, k)))

    @property
    def n_a(self) -> int:
        return self.mu_a.size

    @property
    def n_y(self) -> int:
        return self.mu_phi.size

    def check(self, ratio_max: float = 0.01) -> None:
        """Raise ValueError unless all covariances are SPD and Σ_δ is small."""
        for k in ("Sigma_a", "Sigma_phi", "Sigma_varphi", "Sigma_delta"):
            S = np.real(getattr(self, k))
            if not np.allclose(S, S.T) or np.linalg.eigvalsh(S).min() <= 0:
                raise ValueError(f"{k} must be symmetric positive definite")
        ratio = np.real(np.trace(self.Sigma_delta) / np.trace(self.Sigma_a))
        if ratio > ratio_max:
            raise ValueError(f"trace(Sigma_delta)/trace(Sigma_a) = {ratio:.3g} exceeds {ratio_max}")

    @classmethod
    def initial(cls, n_y: int, n_a: int, sigma_a: float = 1e-2, sigma_y: float = 1e-4,
                delta_ratio: float = 1e-3, mu_a=None) -> "VariationalParams":
        """Encoders that pass observed states through, with small spreads."""
        I = np.eye(n_y)
        return cls(
            mu_a=np.zeros(n_a) if mu_a is None else mu_a, Lambda_a=np.zeros((n_a, n_y)),
            Sigma_a=sigma_a * np.eye(n_a),
            mu_phi=np.zeros(n_y), Lambda_phi=I.copy(), Sigma_phi=sigma_y * I,
            mu_varphi=np.zeros(n_y), Lambda_varphi_1=I.copy(),
            Lambda_varphi_2=np.zeros((n_y, n_y)), Sigma_varphi=sigma_y * I,
            Sigma_delta=delta_ratio * sigma_a * np.eye(n_a))


@dataclass(frozen=True)
class TransitionBatch:
    """Observed transitions ``(y_t, y_{t+1})`` stacked row-wise."""

    y: np.ndarray
    y_next: np.ndarray
    n_assets: int
    actions: Optional[np.ndarray] = None

    def __post_init__(self):
        y, yn = np.atleast_2d(as_array(self.y)), np.atleast_2d(as_array(self.y_next))
        if y.shape != yn.shape or not np.all(np.isfinite(y)) or not np.all(np.isfinite(yn)):
            raise ValueError("transitions must be finite with matching shapes")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "y_next", yn)
        if self.actions is not None:
            object.__setattr__(self, "actions", np.atleast_2d(as_array(self.actions)))

    def __len__(self) -> int:
        return self.y.shape[0]

    def subset(self, idx) -> "TransitionBatch":
        acts = None if self.actions is None else self.actions[idx]
        return TransitionBatch(self.y[idx], self.y_next[idx], self.n_assets, acts)

    @classmethod
    def from_path(cls, x, z, actions=None) -> "TransitionBatch":
        x, z = np.atleast_2d(as_array(x)), as_array(z)
        z = z.reshape(x.shape[0], -1)
        y = np.hstack([x, z])
        return cls(y[:-1], y[1:], x.shape[1], actions)


@dataclass(frozen=True)
class ExpansionCoeffs:
    """Second-order expansion of the relative residual in ``δa``.

    ``d2[..., i, :, :]`` is half the Hessian of component ``i``.
    """

    d0: np.ndarray
    d1: np.ndarray
    d2: np.ndarray


# ---------------------------------------------------------------------------
# Variational marginals and closed-form blocks


def marginal_action_cov(omega: VariationalParams) -> np.ndarray:
    return omega.Sigma_a + omega.Sigma_delta


def marginal_ybar(omega: VariationalParams, y_t, y_next):
    """Mean (row per transition) and covariance of ``ȳ_t`` after integrating ``ȳ'``."""
    y_t, y_next = as_array(y_t), as_array(y_next)
    L2 = omega.Lambda_varphi_2
    mu_fwd = omega.mu_phi + y_next @ omega.Lambda_phi.T
    mu_h = mu_fwd @ L2.T + y_t @ omega.Lambda_varphi_1.T + omega.mu_varphi
    Sigma_h = omega.Sigma_varphi + L2 @ omega.Sigma_phi @ L2.T
    return mu_h, Sigma_h


def joint_precision(omega: VariationalParams) -> np.ndarray:
    """Precision of ``(ȳ', ȳ)`` in that order."""
    Pphi = inv_pd(omega.Sigma_phi)
    Pvar = inv_pd(omega.Sigma_varphi)
    L2 = omega.Lambda_varphi_2
    return np.block([[Pphi + L2.T @ Pvar @ L2, -L2.T @ Pvar],
                     [-Pvar @ L2, Pvar]])


def action_mean(omega: VariationalParams, y_t) -> np.ndarray:
    return omega.mu_a + as_array(y_t) @ omega.Lambda_a.T


def expansion_coeffs(theta: ModelParams, a_bar, y_t, y_next) -> ExpansionCoeffs:
    """Expansion of ``Δ = x'/(x+u) - 1 - r_f - W z + μ u`` around ``ā``.

    Inputs may be single vectors or row-stacked batches.
    """
    a_bar, y_t, y_next = as_array(a_bar), as_array(y_t), as_array(y_next)
    n = theta.n_assets
    x, z, xn = y_t[..., :n], y_t[..., n:], y_next[..., :n]
    u = a_bar[..., :n] - a_bar[..., n:]
    s = x + u
    bad = np.argwhere(np.real(s) <= 0)
    if bad.size:
        raise DomainError(f"x + u must be positive; violated for asset {int(bad[0][-1])}")
    S = np.hstack([np.eye(n), -np.eye(n)])
    ratio = xn / s
    d0 = ratio - 1.0 - theta.r_f - z @ theta.W.T + theta.mu * u
    coef1 = -ratio / s + theta.mu
    d1 = coef1[..., :, None] * S
    c2 = ratio / s ** 2
    vv = np.einsum("ia,ib->iab", S, S)
    d2 = c2[..., :, None, None] * vv
    return ExpansionCoeffs(d0, d1, d2)


def residual(theta: ModelParams, a, y_t, y_next):
    """Exact relative residual ``Δ`` of the x-transition."""
    return expansion_coeffs(theta, a, y_t, y_next).d0


def entropy_block(omega: VariationalParams):
    """Entropy of the joint ``(ȳ, ȳ')`` encoder plus that of ``q_ā``."""
    n_y, n_a = omega.n_y, omega.n_a
    c = math.log(2.0 * math.pi * math.e)
    return (0.5 * (2 * n_y * c + logdet_pd(omega.Sigma_phi) + logdet_pd(omega.Sigma_varphi))
            + 0.5 * (n_a * c + logdet_pd(omega.Sigma_a)))


def log_pz(theta: ModelParams, y_t, y_next):
    """Gaussian log-density of the signal transition."""
    n = theta.n_assets
    y_t, y_next = as_array(y_t), as_array(y_next)
    e = y_next[..., n:] - (1.0 - theta.Phi) * y_t[..., n:]
    k = theta.n_signals
    if k == 0:
        return np.zeros(e.shape[:-1])
    P = inv_pd(theta.Sigma_z)
    return -0.5 * (np.einsum("...i,ij,...j->...", e, P, e) + logdet_pd(theta.Sigma_z) + k * LOG2PI)


def log_px(theta: ModelParams, a, y_t, y_next):
    """Gaussian log-density of the relative residual (no Jacobian)."""
    d = residual(theta, a, y_t, y_next)
    P = inv_pd(theta.Sigma_r)
    n = theta.n_assets
    return -0.5 * (np.einsum("...i,ij,...j->...", d, P, d) + logdet_pd(theta.Sigma_r) + n * LOG2PI)


def energy0(omega: VariationalParams, theta: ModelParams, prior: GaussianPolicy, y_t, y_next):
    """Model energy with the residual expanded to second order around ``μ_a(y_t)``.

    The constant ``-(N_a/2) log 2π`` of the prior density is not included.
    """
    y_t, y_next = as_array(y_t), as_array(y_next)
    n = theta.n_assets
    mu_a = action_mean(omega, y_t)
    P = inv_pd(prior.Sigma_p)
    b0 = mu_a - prior.A0 - y_t @ prior.A1.T
    t_prior = -0.5 * np.einsum("...i,ij,...j->...", b0, P, b0)
    ec = expansion_coeffs(theta, mu_a, y_t, y_next)
    Rinv = inv_pd(theta.Sigma_r)
    Sd = omega.Sigma_delta
    t_d0 = -0.5 * np.einsum("...i,ij,...j->...", ec.d0, Rinv, ec.d0)
    t_d1 = -0.5 * np.einsum("...ia,ij,...jc,ca->...", ec.d1, Rinv, ec.d1, Sd)
    t_d2 = -np.einsum("...i,ij,...jab,ab->...", ec.d0, Rinv, ec.d2, Sd)
    const = (-0.5 * np.sum(Sd * P) - 0.5 * np.sum(omega.Sigma_a * P)
             - 0.5 * logdet_pd(prior.Sigma_p) - 0.5 * logdet_pd(theta.Sigma_r) - 0.5 * n * LOG2PI)
    return t_prior + t_d0 + log_pz(theta, y_t, y_next) + t_d1 + t_d2 + const


def energy1(omega: VariationalParams, g: QuadraticG, prior: GaussianPolicy, beta,
            y_t, y_next, aux: AuxQuantities):
    """Expected ``β(G - F)`` under ``q``.

    G coefficients are those at the linearization point; F follows from G
    with the hidden ``(ā, ȳ)`` entering through ``b = ā - Â0 - Â1 ȳ``.
    """
    y_t, y_next = as_array(y_t), as_array(y_next)
    A1 = prior.A1
    mu_h, Sigma_h = marginal_ybar(omega, y_t, y_next)
    mu_a = action_mean(omega, y_t)
    Gam, Ups = aux.Gamma_beta, aux.Upsilon_beta
    Q = 0.5 * A1.T @ Gam @ A1 - g.G_ay.T @ aux.E_ay
    D = aux.D_ay
    e = y_t - mu_h
    bbar = mu_a - prior.A0 - mu_h @ A1.T
    quad = np.einsum("...i,ij,...j->...", e, Q, e) + np.sum(Q.T * Sigma_h)
    lin = np.einsum("...i,...i->...", e, bbar @ D.T - aux.E_a) + np.sum((D @ A1).T * Sigma_h)
    cov_b = omega.Sigma_a + A1 @ Sigma_h @ A1.T
    zero = (0.5 * np.einsum("...i,ij,...j->...", bbar, Gam, bbar) + 0.5 * np.sum(Gam * cov_b)
            + bbar @ (Ups.T @ g.G_a) - 0.5 * beta * g.G_a @ aux.Sigma_p_tilde_inv @ g.G_a
            + aux.L_beta + np.sum(omega.Sigma_delta * g.G_aa))
    return beta * (quad + lin + zero)


def variational_free_energy(omega: VariationalParams, theta: ModelParams, g: QuadraticG,
                            prior: GaussianPolicy, beta, y_t, y_next, aux: AuxQuantities):
    """``H + F0 + F1`` summed over the supplied transitions."""
    e0 = energy0(omega, theta, prior, y_t, y_next)
    e1 = energy1(omega, g, prior, beta, y_t, y_next, aux)
    count = np.size(e0)
    return entropy_block(omega) * count + np.sum(e0) + np.sum(e1)


def complete_data_loglik(theta: ModelParams, policies, y, actions, include_y0=None):
    """``Σ_t [log π_t(a_t|y_t) + log p(y_{t+1}|y_t, a_t)]`` along one trajectory.

    ``policies`` is one policy or a list with one per step. ``include_y0``
    adds a constant ``log p(y0)`` (dropped by default).
    """
    y, actions = np.atleast_2d(as_array(y)), np.atleast_2d(as_array(actions))
    T = actions.shape[0]
    if y.shape[0] != T + 1:
        raise ValueError("need T+1 states for T actions")
    pols = policies if isinstance(policies, (list, tuple)) else [policies] * T
    total = 0.0 if include_y0 is None else include_y0
    for t in range(T):
        total = total + pols[t].logpdf(actions[t], y[t])
        total = total + log_px(theta, actions[t], y[t], y[t + 1]) + log_pz(theta, y[t], y[t + 1])
    return total


# ---------------------------------------------------------------------------
# Parameter vectors


def softplus(x):
    x = as_array(x)
    out = np.empty_like(x)
    big = np.real(x) > 30
    out[big] = x[big] + np.log1p(np.exp(-x[big]))
    out[~big] = np.log1p(np.exp(x[~big]))
    return out


def inv_softplus(v, floor: float = 1e-12):
    v = np.maximum(np.asarray(v, dtype=float), floor)
    return np.where(v > 30, v + np.log(-np.expm1(-v)), np.log(np.expm1(v)))


@dataclass(frozen=True)
class ThetaSpec:
    """Fitted coordinates of θ.

    λ, μ, β and the scalar instantaneous impact γ (Γ± = γI) go through
    soft-plus; W entries on the loading mask and the scalar cross impact
    (Υ = υ·mask) are free. Everything else stays at ``template``.
    """

    template: ModelParams
    n_signals_per_asset: int
    fit_beta: bool = True

    @property
    def mask(self) -> np.ndarray:
        return block_mask(self.template.n_assets, self.n_signals_per_asset) > 0

    @property
    def names(self) -> List[str]:
        n = self.template.n_assets
        names = ["lam"] + [f"mu[{i}]" for i in range(n)]
        names += ["beta"] if self.fit_beta else []
        names += [f"W[{i},{j}]" for i, j in zip(*np.nonzero(self.mask))]
        return names + ["gamma_impact", "upsilon"]

    def pack(self, p: ModelParams) -> np.ndarray:
        parts = [inv_softplus([p.lam]), inv_softplus(p.mu)]
        if self.fit_beta:
            parts.append(inv_softplus([p.beta]))
        parts += [np.real(p.W[self.mask]), inv_softplus([np.real(p.Gamma_plus[0, 0])]),
                  [np.real(p.Upsilon[self.mask]).mean() if self.mask.any() else 0.0]]
        return np.concatenate([np.asarray(v, dtype=float) for v in parts])

    def unpack(self, v) -> ModelParams:
        v = as_array(v)
        t = self.template
        n = t.n_assets
        i = 0
        lam = softplus(v[i:i + 1])[0]; i += 1
        mu = softplus(v[i:i + n]); i += n
        beta = t.beta
        if self.fit_beta:
            beta = softplus(v[i:i + 1])[0]; i += 1
        m = int(self.mask.sum())
        W = np.zeros(t.W.shape, dtype=v.dtype)
        W[self.mask] = v[i:i + m]; i += m
        gam = softplus(v[i:i + 1])[0]; i += 1
        ups = v[i]
        return replace(t, lam=lam, mu=mu, beta=beta, W=W, Gamma_plus=gam * np.eye(n),
                       Gamma_minus=gam * np.eye(n), Upsilon=ups * self.mask.astype(float))


def _chol_pack(S) -> np.ndarray:
    L = np.linalg.cholesky(np.real(S))
    L = L.copy()
    L[np.diag_indices_from(L)] = np.log(np.diag(L))
    return L[np.tril_indices_from(L)]


def _chol_unpack(v, n: int) -> np.ndarray:
    L = np.zeros((n, n), dtype=v.dtype)
    L[np.tril_indices(n)] = v
    d = np.diag_indices(n)
    L[d] = np.exp(L[d])
    return L @ L.T


@dataclass(frozen=True)
class OmegaSpec:
    """All ω coordinates; covariances via Cholesky factors with log-diagonal."""

    n_y: int
    n_a: int

    def _layout(self):
        ny, na = self.n_y, self.n_a
        tri = lambda k: k * (k + 1) // 2
        return [("mu_a", (na,)), ("Lambda_a", (na, ny)), ("Sigma_a", tri(na)),
                ("mu_phi", (ny,)), ("Lambda_phi", (ny, ny)), ("Sigma_phi", tri(ny)),
                ("mu_varphi", (ny,)), ("Lambda_varphi_1", (ny, ny)),
                ("Lambda_varphi_2", (ny, ny)), ("Sigma_varphi", tri(ny)),
                ("Sigma_delta", tri(na))]

    @property
    def names(self) -> List[str]:
        out = []
        for name, shape in self._layout():
            size = shape if isinstance(shape, int) else int(np.prod(shape))
            out += [f"{name}[{k}]" for k in range(size)]
        return out

    def pack(self, om: VariationalParams) -> np.ndarray:
        parts = []
        for name, shape in self._layout():
            val = getattr(om, name)
            parts.append(_chol_pack(val) if isinstance(shape, int) else np.real(val).ravel())
        return np.concatenate(parts)

    def unpack(self, v) -> VariationalParams:
        v = as_array(v)
        kw, i = {}, 0
        for name, shape in self._layout():
            if isinstance(shape, int):
                n = self.n_a if name in ("Sigma_a", "Sigma_delta") else self.n_y
                kw[name] = _chol_unpack(v[i:i + shape], n); i += shape
            else:
                size = int(np.prod(shape))
                kw[name] = v[i:i + size].reshape(shape); i += size
        return VariationalParams(**kw)


# ---------------------------------------------------------------------------
# Gradients


def fd_gradient(f: Callable, v: np.ndarray, coords=None, rel_step: float = 1e-6) -> np.ndarray:
    """Central finite differences with step ``rel_step * (1 + |v_k|)``."""
    v = np.asarray(v, dtype=float)
    coords = range(v.size) if coords is None else coords
    g = np.zeros(v.size)
    for k in coords:
        h = rel_step * (1.0 + abs(v[k]))
        vp, vm = v.copy(), v.copy()
        vp[k] += h
        vm[k] -= h
        g[k] = (f(vp) - f(vm)) / (2.0 * h)
    return g


def complex_step_gradient(f: Callable, v: np.ndarray, coords=None, h: float = 1e-30) -> np.ndarray:
    """Complex-step derivative; exact to rounding for analytic ``f``."""
    v = np.asarray(v, dtype=float)
    coords = range(v.size) if coords is None else coords
    g = np.zeros(v.size)
    for k in coords:
        vc = v.astype(complex)
        vc[k] += 1j * h
        g[k] = np.imag(f(vc)) / h
    return g


def gradient(f: Callable, v: np.ndarray, mode: str = "fd") -> np.ndarray:
    if mode == "fd":
        g = fd_gradient(f, v)
    elif mode == "complex":
        g = complex_step_gradient(f, v)
    else:
        raise ValueError(f"unknown gradient mode {mode!r}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError("gradient has non-finite entries")
    return g


# ---------------------------------------------------------------------------
# Free-energy objective over a batch


@dataclass
class EmConfig:
    """Settings of the variational EM loop.

    ``update_rule='ascent'`` takes ``v + α∇`` steps accepted only when the
    batch free energy does not decrease (step halved otherwise);
    ``'as_written'`` applies ``(1-α)v + α∇`` unconditionally.
    """

    max_iter: int = 200
    alpha_theta: float = 1e-2
    alpha_omega: float = 1e-2
    batch_size: Optional[int] = None
    seed: int = 0
    tol: float = 1e-7
    patience: int = 5
    grad_mode: str = "fd"
    update_rule: str = "ascent"
    delta_ratio_max: float = 0.01
    stationary_tol: float = 1e-13
    stationary_max_iter: int = 5000
    max_halvings: int = 40
    fit_beta: bool = True
    signals_per_asset: int = 1
    refresh_point: bool = True
    terminal: str = "stationary"
    diagnostics: Optional[Callable[[str], None]] = None
    on_iteration: Optional[Callable[["EmState"], None]] = None


def batch_point(omega: VariationalParams, batch: TransitionBatch) -> LinearizationPoint:
    """Batch mean of the variational means ``(μ_a(y), μ_h, μ_φ(y'))``."""
    mu_a = np.real(action_mean(omega, batch.y)).mean(axis=0)
    mu_h, _ = marginal_ybar(omega, batch.y, batch.y_next)
    mu_fwd = omega.mu_phi + batch.y_next @ omega.Lambda_phi.T
    return LinearizationPoint(mu_a, np.real(mu_h).mean(axis=0), np.real(mu_fwd).mean(axis=0))


class MarketObjective:
    """``𝓕_b(ω, θ)`` for a batch of transitions sharing one stationary
    value function at a fixed linearization point."""

    def __init__(self, batch: TransitionBatch, prior: GaussianPolicy, point: LinearizationPoint,
                 theta_spec: ThetaSpec, omega_spec: OmegaSpec, config: EmConfig):
        self.batch, self.prior, self.point = batch, prior, point
        self.theta_spec, self.omega_spec, self.config = theta_spec, omega_spec, config
        self._f_warm: Optional[QuadraticF] = None

    def solve(self, theta: ModelParams):
        """Stationary G and auxiliary quantities at the objective's point."""
        res = stationary_solve(theta, self.prior, theta.beta, self.point,
                               tol=self.config.stationary_tol,
                               max_iter=self.config.stationary_max_iter, f_init=self._f_warm)
        if not np.iscomplexobj(res.F.F_yy):
            self._f_warm = res.F
        return res

    def feasible(self, omega: VariationalParams) -> bool:
        ratio = np.real(np.trace(omega.Sigma_delta) / np.trace(omega.Sigma_a))
        if ratio > self.config.delta_ratio_max:
            return False
        n = self.batch.n_assets
        a = np.real(action_mean(omega, self.batch.y))
        return bool(np.all(self.batch.y[:, :n] + a[:, :n] - a[:, n:] > 0))

    def value(self, omega: VariationalParams, theta: ModelParams, solved=None):
        if not self.feasible(omega):
            return -np.inf
        try:
            res = solved if solved is not None else self.solve(theta)
            return variational_free_energy(omega, theta, res.G, self.prior, theta.beta,
                                           self.batch.y, self.batch.y_next, res.aux)
        except (PolicyCurvatureError, DomainError, np.linalg.LinAlgError):
            return -np.inf

    def f_omega(self, theta: ModelParams, solved=None) -> Callable:
        solved = solved if solved is not None else self.solve(theta)
        return lambda v: self.value(self.omega_spec.unpack(v), theta, solved)

    def f_theta(self, omega: VariationalParams) -> Callable:
        return lambda v: self.value(omega, self.theta_spec.unpack(v))


@dataclass
class EmState:
    theta: ModelParams
    omega: VariationalParams
    policy: GaussianPolicy
    g: QuadraticG
    f: QuadraticF
    prior: GaussianPolicy
    point: LinearizationPoint
    history: List[float] = field(default_factory=list)
    alpha_theta: float = 1e-2
    alpha_omega: float = 1e-2
    batch_size: Optional[int] = None
    iteration: int = 0


def _ascent(f: Callable, v: np.ndarray, f0: float, g: np.ndarray, alpha: float,
            rule: str, max_halvings: int):
    """One update of ``v`` along ``g``; returns ``(v, f, alpha_used, alpha_next)``."""
    if alpha == 0:
        return v, f0, 0.0, 0.0
    if rule == "as_written":
        v_new = (1.0 - alpha) * v + alpha * g
        return v_new, f(v_new), alpha, alpha
    if rule != "ascent":
        raise ValueError(f"unknown update rule {rule!r}")
    norm = np.linalg.norm(g)
    if norm == 0:
        return v, f0, 0.0, alpha
    step = alpha
    for _ in range(max_halvings):
        v_new = v + (step / norm) * g
        f_new = f(v_new)
        if np.isfinite(f_new) and f_new >= f0:
            return v_new, f_new, step, min(2.0 * step, 1e3 * alpha + 1.0)
        step *= 0.5
    return v, f0, 0.0, step


def e_step(state: EmState, batch: TransitionBatch, config: EmConfig,
           objective: Optional[MarketObjective] = None):
    """Gradient update of ω with θ and the value function held fixed.

    Returns ``(omega, free_energy, step_used, grad_norm)``.
    """
    obj = objective or _objective(state, batch, config)
    solved = obj.solve(state.theta)
    f = obj.f_omega(state.theta, solved)
    v = obj.omega_spec.pack(state.omega)
    f0 = f(v)
    if state.alpha_omega == 0:
        return state.omega, f0, 0.0, 0.0
    g = gradient(f, v, config.grad_mode)
    v_new, f_new, used, nxt = _ascent(f, v, f0, g, state.alpha_omega, config.update_rule,
                                      config.max_halvings)
    state.alpha_omega = nxt if config.update_rule == "ascent" else state.alpha_omega
    return obj.omega_spec.unpack(v_new), f_new, used, float(np.linalg.norm(g))


def m_step(state: EmState, batch: TransitionBatch, config: EmConfig,
           objective: Optional[MarketObjective] = None):
    """Gradient update of θ followed by a refresh of G, F and the policy.

    Returns ``(theta, g, f, policy, free_energy, step_used, grad_norm)``.
    """
    obj = objective or _objective(state, batch, config)
    f = obj.f_theta(state.omega)
    v = obj.theta_spec.pack(state.theta)
    f0 = f(v)
    if state.alpha_theta == 0:
        v_new, f_new, used, gnorm = v, f0, 0.0, 0.0
    else:
        g = gradient(f, v, config.grad_mode)
        gnorm = float(np.linalg.norm(g))
        v_new, f_new, used, nxt = _ascent(f, v, f0, g, state.alpha_theta, config.update_rule,
                                          config.max_halvings)
        if config.update_rule == "ascent":
            state.alpha_theta = nxt
    theta = obj.theta_spec.unpack(v_new) if used else state.theta
    res = obj.solve(theta)
    policy = policy_update(res.G, state.prior, theta.beta, obj.point)
    return theta, res.G, res.F, policy, f_new, used, gnorm


def _objective(state: EmState, batch: TransitionBatch, config: EmConfig) -> MarketObjective:
    spec = ThetaSpec(state.theta, config.signals_per_asset, config.fit_beta)
    return MarketObjective(batch, state.prior, state.point, spec,
                           OmegaSpec(state.omega.n_y, state.omega.n_a), config)


@dataclass
class IrlResult:
    theta: ModelParams
    policy: GaussianPolicy
    f: QuadraticF
    g: QuadraticG
    omega: VariationalParams
    history: List[float]
    iterations: int
    converged: bool
    state: EmState


def _batches(n: int, size: Optional[int], rng: np.random.Generator):
    """Endless mini-batch index stream, without replacement within an epoch."""
    if size is None or size >= n:
        while True:
            yield np.arange(n)
    while True:
        perm = rng.permutation(n)
        for k in range(0, n - size + 1, size):
            yield np.sort(perm[k:k + size])


def _emit(config: EmConfig, line: str) -> None:
    if config.diagnostics is not None:
        config.diagnostics(line)
    log.debug(line)


def ih_if_run(data: TransitionBatch, config: EmConfig, theta0: ModelParams,
              prior: GaussianPolicy, omega0: Optional[VariationalParams] = None) -> IrlResult:
    """Variational EM for the market portfolio (actions unobserved)."""
    if len(data) == 0:
        raise ValueError("no transitions supplied")
    n_y, n_a = data.y.shape[1], prior.n_a
    omega = omega0 or VariationalParams.initial(n_y, n_a)
    omega.check(config.delta_ratio_max)
    rng = np.random.default_rng(config.seed)
    stream = _batches(len(data), config.batch_size, rng)
    point = batch_point(omega, data)
    spec = ThetaSpec(theta0, config.signals_per_asset, config.fit_beta)
    ospec = OmegaSpec(n_y, n_a)
    obj = MarketObjective(data, prior, point, spec, ospec, config)
    try:
        res = obj.solve(theta0)
    except Exception as exc:
        raise EmFailure(f"initial value function failed: {exc}", 0) from exc
    state = EmState(theta0, omega, policy_update(res.G, prior, theta0.beta, point), res.G, res.F,
                    prior, point, [], config.alpha_theta, config.alpha_omega, config.batch_size)
    quiet, converged = 0, False
    for k in range(1, config.max_iter + 1):
        idx = next(stream)
        batch = data if len(idx) == len(data) else data.subset(idx)
        obj = MarketObjective(batch, prior, state.point, spec, ospec, config)
        obj._f_warm = state.f
        try:
            if config.refresh_point:
                cand = batch_point(state.omega, batch)
                cur = obj.value(state.omega, state.theta)
                obj_c = MarketObjective(batch, prior, cand, spec, ospec, config)
                obj_c._f_warm = state.f
                if obj_c.value(state.omega, state.theta) >= cur:
                    obj, state.point = obj_c, cand
            omega, fe_e, step_e, gn_e = e_step(state, batch, config, obj)
            state.omega = omega
            theta, g, f, policy, fe_m, step_m, gn_m = m_step(state, batch, config, obj)
        except (NonFiniteGradientError, PolicyCurvatureError, np.linalg.LinAlgError) as exc:
            raise EmFailure(str(exc), k) from exc
        state.theta, state.g, state.f, state.policy = theta, g, f, policy
        state.history.append(float(np.real(fe_m)))
        state.iteration = k
        _emit(config, f"iter={k} F_b={fe_m:.12g} grad_omega={gn_e:.3e} grad_theta={gn_m:.3e} "
                      f"step_omega={step_e:.3e} step_theta={step_m:.3e}")
        if config.on_iteration is not None:
            config.on_iteration(state)
        if len(state.history) > 1:
            prev = state.history[-2]
            rel = abs(state.history[-1] - prev) / max(abs(prev), 1e-300)
            quiet = quiet + 1 if rel < config.tol else 0
            if quiet >= config.patience:
                converged = True
                break
    return IrlResult(state.theta, state.policy, state.f, state.g, state.omega, state.history,
                     state.iteration, converged, state)


# ---------------------------------------------------------------------------
# Single-investor mode


@dataclass(frozen=True)
class Window:
    """One planning window: states ``y[0..T]`` and optionally actions ``a[0..T-1]``."""

    y: np.ndarray
    actions: Optional[np.ndarray] = None
    a_T: Optional[np.ndarray] = None

    @property
    def T(self) -> int:
        return self.y.shape[0] - 1


def _window_points(windows: Sequence[Window], omega: Optional[VariationalParams],
                   n_a: int, observed: bool, w_index: Optional[int] = None):
    """Per-step linearization points.

    Observed actions: the observed ``(a_t, y_t, y_{t+1})`` of one window.
    Otherwise: the mean over windows of the variational means at each step.
    """
    if observed:
        w = windows[w_index]
        T = w.T
        pts = [LinearizationPoint(w.actions[t], w.y[t], w.y[t + 1]) for t in range(T)]
        a_T = np.zeros(n_a) if w.a_T is None else w.a_T
        pts.append(LinearizationPoint(a_T, w.y[T], w.y[T]))
        return pts
    T = windows[0].T
    pts = []
    for t in range(T):
        yt = np.array([w.y[t] for w in windows])
        yn = np.array([w.y[t + 1] for w in windows])
        b = TransitionBatch(yt, yn, n_a // 2)
        pts.append(batch_point(omega, b))
    yT = np.mean([w.y[T] for w in windows], axis=0)
    pts.append(LinearizationPoint(np.zeros(n_a), yT, yT))
    return pts


def _investor_backward(theta, prior, points, config: EmConfig, f_warm=None):
    """Backward pass whose terminal value is either the fixed-action reward or
    the stationary value at the terminal point."""
    T = len(points) - 1
    if config.terminal == "reward":
        return backward_pass(theta, prior, points, T)
    if config.terminal != "stationary":
        raise ValueError(f"unknown terminal mode {config.terminal!r}")
    st = stationary_solve(theta, prior, theta.beta, points[T - 1], tol=config.stationary_tol,
                          max_iter=config.stationary_max_iter, f_init=f_warm)
    coeffs = reward_coefficients(theta)
    F_next = st.F
    out_G, out_F, out_pol, out_aux = [None] * T, [None] * (T + 1), [None] * T, [None] * T
    out_F[T] = F_next
    for t in range(T - 1, -1, -1):
        pt = points[t]
        H = expected_next_f(F_next, linearize_dynamics(theta, pt), pt)
        G = g_update(shift_reward(coeffs, pt), H, theta.gamma_disc)
        F_next, aux = f_from_g(G, prior, theta.beta, pt, t)
        out_G[t], out_F[t], out_aux[t] = G, F_next, aux
        out_pol[t] = policy_update(G, prior, theta.beta, pt, t)
    return BackwardResult(out_G, out_F, out_pol, out_aux, [])


def investor_objective(theta: ModelParams, omega: Optional[VariationalParams],
                       windows: Sequence[Window], prior: GaussianPolicy, config: EmConfig,
                       points=None):
    """Total objective over windows.

    With observed actions it is the complete-data log-likelihood under the
    backward-pass policies; otherwise the summed free energy with per-step
    value functions.
    """
    observed = windows[0].actions is not None
    n_a = prior.n_a
    try:
        if observed:
            total = 0.0
            for i, w in enumerate(windows):
                pts = _window_points(windows, None, n_a, True, i)
                bp = _investor_backward(theta, prior, pts, config)
                total = total + complete_data_loglik(theta, bp.policies, w.y, w.actions)
            return total
        pts = points if points is not None else _window_points(windows, omega, n_a, False)
        if not all(_omega_feasible(omega, w, config) for w in windows):
            return -np.inf
        bp = _investor_backward(theta, prior, pts, config)
        total = 0.0
        for t in range(windows[0].T):
            yt = np.array([w.y[t] for w in windows])
            yn = np.array([w.y[t + 1] for w in windows])
            total = total + variational_free_energy(omega, theta, bp.G[t], prior, theta.beta,
                                                    yt, yn, bp.aux[t])
        return total
    except (PolicyCurvatureError, DomainError, np.linalg.LinAlgError):
        return -np.inf


def _omega_feasible(omega: VariationalParams, w: Window, config: EmConfig) -> bool:
    ratio = np.real(np.trace(omega.Sigma_delta) / np.trace(omega.Sigma_a))
    if ratio > config.delta_ratio_max:
        return False
    n = omega.n_a // 2
    a = np.real(action_mean(omega, w.y[:-1]))
    return bool(np.all(w.y[:-1, :n] + a[:, :n] - a[:, n:] > 0))


@dataclass
class InvestorResult:
    theta: ModelParams
    policies: List[GaussianPolicy]
    f: QuadraticF
    omega: Optional[VariationalParams]
    history: List[float]
    iterations: int
    converged: bool
    complete_data: bool


def single_investor_run(windows: Sequence[Window], config: EmConfig, theta0: ModelParams,
                        prior: GaussianPolicy, omega0: Optional[VariationalParams] = None
                        ) -> InvestorResult:
    """EM over finite-horizon windows.

    With observed actions the inner action integral is dropped and θ
    maximizes the complete-data log-likelihood directly.
    """
    if not windows:
        raise ValueError("no windows supplied")
    observed = windows[0].actions is not None
    n_y, n_a = windows[0].y.shape[1], prior.n_a
    spec = ThetaSpec(theta0, config.signals_per_asset, config.fit_beta)
    ospec = OmegaSpec(n_y, n_a)
    theta = theta0
    omega = None if observed else (omega0 or VariationalParams.initial(n_y, n_a))
    points = None if observed else _window_points(windows, omega, n_a, False)
    a_th, a_om = config.alpha_theta, config.alpha_omega
    history, quiet, converged, k = [], 0, False, 0
    for k in range(1, config.max_iter + 1):
        if not observed:
            if config.refresh_point:
                cand = _window_points(windows, omega, n_a, False)
                if (investor_objective(theta, omega, windows, prior, config, cand)
                        >= investor_objective(theta, omega, windows, prior, config, points)):
                    points = cand
            f_om = lambda v: investor_objective(theta, ospec.unpack(v), windows, prior, config, points)
            v = ospec.pack(omega)
            f0 = f_om(v)
            if a_om:
                g = gradient(f_om, v, config.grad_mode)
                v, f0, _, a_om_next = _ascent(f_om, v, f0, g, a_om, config.update_rule,
                                              config.max_halvings)
                a_om = a_om_next if config.update_rule == "ascent" else a_om
                omega = ospec.unpack(v)
        f_th = lambda v: investor_objective(spec.unpack(v), omega, windows, prior, config, points)
        v = spec.pack(theta)
        f0 = f_th(v)
        if a_th:
            g = gradient(f_th, v, config.grad_mode)
            v_new, f0, used, a_next = _ascent(f_th, v, f0, g, a_th, config.update_rule,
                                              config.max_halvings)
            a_th = a_next if config.update_rule == "ascent" else a_th
            if used:
                theta = spec.unpack(v_new)
        history.append(float(np.real(f0)))
        _emit(config, f"iter={k} objective={f0:.12g}")
        if len(history) > 1:
            rel = abs(history[-1] - history[-2]) / max(abs(history[-2]), 1e-300)
            quiet = quiet + 1 if rel < config.tol else 0
            if quiet >= config.patience:
                converged = True
                break
    if observed:
        pts = _window_points(windows, None, n_a, True, 0)
    else:
        pts = points
    bp = _investor_backward(theta, prior, pts, config)
    return InvestorResult(theta, bp.policies, bp.F[0], omega, history, k, converged, observed)


def simulate_market(theta: ModelParams, policy: GaussianPolicy, y0, steps: int,
                    seed: int = 0):
    """Sample a path of the generative model under a Gaussian policy.

    Returns ``(y, actions)`` with ``y`` of shape (steps+1, n_y).
    """
    rng = np.random.default_rng(seed)
    y = [np.asarray(y0, dtype=float)]
    acts = []
    n = theta.n_assets
    for _ in range(steps):
        a = rng.multivariate_normal(policy.mean(y[-1]), policy.Sigma_p)
        eps = rng.multivariate_normal(np.zeros(n), theta.Sigma_r)
        eps_z = rng.multivariate_normal(np.zeros(theta.n_signals), theta.Sigma_z)
        y.append(exact_transition(theta, y[-1], a, eps, eps_z))
        acts.append(a)
    return np.array(y), np.array(acts)
