"""Entropy-regularized policy computation with locally quadratic value
functions.

All value functions are expanded around a linearization point
``(ā, ȳ, ȳ')``. With ``δa = a - ā`` and ``δy = y - ȳ``:

* ``G(δy, δa) = δaᵀG_aa δa + δyᵀG_yy δy + δaᵀG_ay δy + δaᵀG_a + δyᵀG_y + g0``
* ``F(δy) = δyᵀF_yy δy + δyᵀF_y + F0``

Policies are stored in absolute coordinates, ``π(a|y) = N(A0 + A1 y, Σ_p)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from ._linalg import (NotPositiveDefiniteError, as_array, chol, inv_pd,
                      logdet_identity_plus, logdet_pd, sym)
from .model_core import ModelParams, RewardCoeffs, reward_coefficients


class PolicyCurvatureError(NotPositiveDefiniteError):
    """``Σ_p⁻¹ - 2βG_aa`` is not positive definite: β is too large for the
    prior covariance and the action curvature of G."""

    def __init__(self, msg: str = "", t: Optional[int] = None):
        self.t = t
        where = f" at t={t}" if t is not None else ""
        super().__init__(f"posterior precision not positive definite{where}. {msg}".strip())


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, residual: float, iterations: int):
        super().__init__(f"{msg} (residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


# ---------------------------------------------------------------------------
# Coefficient bundles


@dataclass(frozen=True)
class GaussianPolicy:
    """Linear-Gaussian policy ``a ~ N(A0 + A1 y, Sigma_p)``."""

    A0: np.ndarray
    A1: np.ndarray
    Sigma_p: np.ndarray

    def __post_init__(self):
        A0 = as_array(self.A0).reshape(-1)
        A1 = as_array(self.A1)
        S = as_array(self.Sigma_p)
        if A1.ndim != 2 or A1.shape[0] != A0.size or S.shape != (A0.size, A0.size):
            raise ValueError("inconsistent policy dimensions")
        object.__setattr__(self, "A0", A0)
        object.__setattr__(self, "A1", A1)
        object.__setattr__(self, "Sigma_p", S)

    @classmethod
    def from_scalars(cls, n_a: int, n_y: int, a0: float = 0.0, a1: float = 0.0,
                     sigma2: float = 1.0, rho: float = 0.0) -> "GaussianPolicy":
        """Prior with constant intercept, constant slope, constant variance
        ``sigma2`` and constant correlation ``rho``."""
        S = sigma2 * ((1.0 - rho) * np.eye(n_a) + rho * np.ones((n_a, n_a)))
        return cls(np.full(n_a, float(a0)), np.full((n_a, n_y), float(a1)), S)

    @property
    def n_a(self) -> int:
        return self.A0.size

    def mean(self, y) -> np.ndarray:
        return self.A0 + self.A1 @ as_array(y)

    def logpdf(self, a, y):
        d = as_array(a) - self.mean(y)
        P = inv_pd(self.Sigma_p)
        k = self.A0.size
        return -0.5 * (d @ P @ d + logdet_pd(self.Sigma_p) + k * np.log(2 * np.pi))


@dataclass(frozen=True)
class QuadraticG:
    G_aa: np.ndarray
    G_yy: np.ndarray
    G_ay: np.ndarray
    G_a: np.ndarray
    G_y: np.ndarray
    g0: float

    def __post_init__(self):
        object.__setattr__(self, "G_aa", sym(as_array(self.G_aa)))
        object.__setattr__(self, "G_yy", sym(as_array(self.G_yy)))
        object.__setattr__(self, "G_ay", as_array(self.G_ay))
        object.__setattr__(self, "G_a", as_array(self.G_a).reshape(-1))
        object.__setattr__(self, "G_y", as_array(self.G_y).reshape(-1))

    def __call__(self, dy, da):
        dy, da = as_array(dy), as_array(da)
        return (da @ self.G_aa @ da + dy @ self.G_yy @ dy + da @ self.G_ay @ dy
                + da @ self.G_a + dy @ self.G_y + self.g0)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.G_aa), np.ravel(self.G_yy), np.ravel(self.G_ay),
                               self.G_a, self.G_y, np.atleast_1d(self.g0)])

    @classmethod
    def zeros(cls, n_a: int, n_y: int) -> "QuadraticG":
        return cls(np.zeros((n_a, n_a)), np.zeros((n_y, n_y)), np.zeros((n_a, n_y)),
                   np.zeros(n_a), np.zeros(n_y), 0.0)


@dataclass(frozen=True)
class QuadraticF:
    """Quadratic state-value function around ``center`` (None: origin)."""

    F_yy: np.ndarray
    F_y: np.ndarray
    F0: float
    center: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "F_yy", sym(as_array(self.F_yy)))
        object.__setattr__(self, "F_y", as_array(self.F_y).reshape(-1))

    def __call__(self, dy):
        dy = as_array(dy)
        return dy @ self.F_yy @ dy + dy @ self.F_y + self.F0

    def at(self, y):
        """Value at the absolute state ``y``."""
        y = as_array(y)
        c = np.zeros_like(y) if self.center is None else self.center
        return self(y - c)

    def blocks(self, n: int) -> dict:
        F = self.F_yy
        return dict(F_xx=F[:n, :n], F_xz=F[:n, n:], F_zx=F[n:, :n], F_zz=F[n:, n:],
                    F_x=self.F_y[:n], F_z=self.F_y[n:])

    def recenter(self, new_center) -> "QuadraticF":
        """Re-express the same function around ``new_center``."""
        new_center = as_array(new_center)
        old = np.zeros_like(new_center) if self.center is None else self.center
        d = new_center - old
        F_y = self.F_y + 2.0 * self.F_yy @ d
        F0 = self.F0 + d @ self.F_yy @ d + self.F_y @ d
        return QuadraticF(self.F_yy, F_y, F0, new_center)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.F_yy), self.F_y, np.atleast_1d(self.F0)])

    @classmethod
    def zeros(cls, n_y: int, center=None) -> "QuadraticF":
        return cls(np.zeros((n_y, n_y)), np.zeros(n_y), 0.0, center)


@dataclass(frozen=True)
class LinearizationPoint:
    a_bar: np.ndarray
    y_bar: np.ndarray
    y_bar_next: np.ndarray

    def __post_init__(self):
        for k in ("a_bar", "y_bar", "y_bar_next"):
            object.__setattr__(self, k, as_array(getattr(self, k)).reshape(-1))
        if self.y_bar.size != self.y_bar_next.size:
            raise ValueError("inconsistent linearization point")

    @property
    def n(self) -> int:
        if self.a_bar.size % 2:
            raise ValueError("buy/sell split needs an even action dimension")
        return self.a_bar.size // 2

    @property
    def u_bar(self) -> np.ndarray:
        n = self.n
        return self.a_bar[:n] - self.a_bar[n:]

    @property
    def x_bar(self) -> np.ndarray:
        return self.y_bar[:self.n]

    @property
    def s_bar(self) -> np.ndarray:
        """Post-trade positions ``x̄ + ū``."""
        return self.x_bar + self.u_bar


@dataclass(frozen=True)
class LinearizedDynamics:
    """``δy' = Psi_0 + Psi_y δy + Psi_a δa + noise``.

    The x-block of the noise covariance is ``Sigma_r ∘ s sᵀ`` with ``s`` the
    actual post-trade position, so it is carried as ``Sigma_r`` together with
    ``Sigma_y`` evaluated at the point.
    """

    Psi_0: np.ndarray
    Psi_y: np.ndarray
    Psi_a: np.ndarray
    Sigma_y: np.ndarray
    Omega_0: np.ndarray
    Omega_x: np.ndarray
    Omega_u: np.ndarray
    Omega_z: np.ndarray
    Sigma_r: np.ndarray
    Sigma_z: np.ndarray


@dataclass(frozen=True)
class ShiftedReward:
    """Reward re-expressed in deviations from the linearization point."""

    R_yy: np.ndarray
    R_aa: np.ndarray
    R_ay: np.ndarray
    R_a: np.ndarray
    R_y: np.ndarray
    r0: float

    def __call__(self, dy, da):
        dy, da = as_array(dy), as_array(da)
        return (dy @ self.R_yy @ dy + da @ self.R_aa @ da + da @ self.R_ay @ dy
                + da @ self.R_a + dy @ self.R_y + self.r0)


@dataclass(frozen=True)
class AuxQuantities:
    b: np.ndarray
    Sigma_p_tilde: np.ndarray
    Sigma_p_tilde_inv: np.ndarray
    Gamma_beta: np.ndarray
    Upsilon_beta: np.ndarray
    E_ay: np.ndarray
    D_ay: np.ndarray
    E_a: np.ndarray
    L_beta: float


@dataclass(frozen=True)
class ExpectedF:
    """``E[F(y')] = δaᵀH_aa δa + δyᵀH_yy δy + δaᵀH_ay δy + δaᵀH_a + δyᵀH_y + f_hat``."""

    H_aa: np.ndarray
    H_yy: np.ndarray
    H_ay: np.ndarray
    H_a: np.ndarray
    H_y: np.ndarray
    f_hat: float

    def __call__(self, dy, da):
        dy, da = as_array(dy), as_array(da)
        return (da @ self.H_aa @ da + dy @ self.H_yy @ dy + da @ self.H_ay @ dy
                + da @ self.H_a + dy @ self.H_y + self.f_hat)


# ---------------------------------------------------------------------------
# One-step building blocks


def linearize_dynamics(params: ModelParams, point: LinearizationPoint) -> LinearizedDynamics:
    """Affine expansion of the exact transition around the point."""
    mu = as_array(params.mu)
    if mu.ndim != 1:
        raise ValueError("impact matrix M must be diagonal")
    n, nz = params.n_assets, params.n_signals
    x_bar, z_bar = point.y_bar[:n], point.y_bar[n:]
    u_bar, s_bar = point.u_bar, point.s_bar
    growth = 1.0 + params.r_f + params.W @ z_bar - mu * u_bar
    Omega_x = np.diag(growth)
    Omega_u = Omega_x - np.diag(s_bar * mu)
    Omega_z = s_bar[:, None] * params.W
    Omega_0 = growth * s_bar - point.y_bar_next[:n]
    S = np.vstack([np.eye(n), -np.eye(n)])
    Psi_y = np.block([[Omega_x, Omega_z],
                      [np.zeros((nz, n)), np.diag(1.0 - params.Phi)]])
    Psi_a = np.vstack([Omega_u @ S.T, np.zeros((nz, 2 * n))])
    Psi_0 = np.concatenate([Omega_0, (1.0 - params.Phi) * z_bar - point.y_bar_next[n:]])
    Sigma_xx = params.Sigma_r * np.outer(s_bar, s_bar)
    Sigma_y = np.block([[Sigma_xx, np.zeros((n, nz))],
                        [np.zeros((nz, n)), params.Sigma_z]])
    return LinearizedDynamics(Psi_0, Psi_y, Psi_a, Sigma_y, Omega_0, Omega_x, Omega_u,
                              Omega_z, params.Sigma_r, params.Sigma_z)


def shift_reward(coeffs: RewardCoeffs, point: LinearizationPoint) -> ShiftedReward:
    """Re-expand the reward in ``(δy, δa)``.

    Gradients use the symmetric parts of ``R_yy`` and ``R_aa``; ``R_yy`` is
    not symmetric in its stored layout.
    """
    a_bar, y_bar = point.a_bar, point.y_bar
    Ryy_s = coeffs.R_yy + coeffs.R_yy.T
    Raa_s = coeffs.R_aa + coeffs.R_aa.T
    R_a = coeffs.R_a + Raa_s @ a_bar + coeffs.R_ay @ y_bar
    R_y = Ryy_s @ y_bar + coeffs.R_ay.T @ a_bar
    r0 = (a_bar @ coeffs.R_aa @ a_bar + y_bar @ coeffs.R_yy @ y_bar
          + a_bar @ coeffs.R_ay @ y_bar + a_bar @ coeffs.R_a)
    return ShiftedReward(coeffs.R_yy, coeffs.R_aa, coeffs.R_ay, R_a, R_y, r0)


def terminal_f(shifted: ShiftedReward, delta_a_T, stationary: bool = False,
               center=None) -> QuadraticF:
    """Terminal value: the reward with the final action held fixed."""
    if stationary:
        raise ValueError("terminal_f has no meaning in stationary mode")
    da = as_array(delta_a_T)
    F_yy = sym(shifted.R_yy)
    F_y = shifted.R_ay.T @ da + shifted.R_y
    F0 = da @ shifted.R_aa @ da + da @ shifted.R_a + shifted.r0
    return QuadraticF(F_yy, F_y, F0, center)


def expected_next_f(f_next: QuadraticF, lin: LinearizedDynamics,
                    point: LinearizationPoint) -> ExpectedF:
    """Closed-form ``E[F_{t+1}(y')]`` as a quadratic in ``(δy, δa)``.

    ``f_next`` is re-centered onto ``point.y_bar_next`` when its center differs.
    """
    if f_next.center is not None:
        f_next = f_next.recenter(point.y_bar_next)
    n = point.n
    F, Fy = f_next.F_yy, f_next.F_y
    nz = F.shape[0] - n
    K = F[:n, :n] * lin.Sigma_r
    S = np.vstack([np.eye(n), -np.eye(n)])
    P = np.vstack([np.eye(n), np.zeros((nz, n))])
    Pa, Py, P0 = lin.Psi_a, lin.Psi_y, lin.Psi_0
    s = point.s_bar
    FPa, FPy = F @ Pa, F @ Py
    H_aa = Pa.T @ FPa + S @ K @ S.T
    H_yy = Py.T @ FPy + P @ K @ P.T
    H_ay = 2.0 * Pa.T @ FPy + 2.0 * S @ K @ P.T
    H_a = Pa.T @ Fy + 2.0 * FPa.T @ P0 + 2.0 * S @ (K @ s)
    H_y = Py.T @ Fy + 2.0 * FPy.T @ P0 + 2.0 * P @ (K @ s)
    f_hat = (f_next.F0 + P0 @ Fy + P0 @ F @ P0 + s @ K @ s
             + np.sum(F[n:, n:] * lin.Sigma_z))
    return ExpectedF(sym(H_aa), sym(H_yy), H_ay, H_a, H_y, f_hat)


def g_update(shifted: ShiftedReward, expected_f: ExpectedF, gamma_disc: float) -> QuadraticG:
    """``G = R̂ + γ E[F']`` coefficient by coefficient."""
    g = gamma_disc
    return QuadraticG(
        G_aa=shifted.R_aa + g * expected_f.H_aa,
        G_yy=shifted.R_yy + g * expected_f.H_yy,
        G_ay=shifted.R_ay + g * expected_f.H_ay,
        G_a=shifted.R_a + g * expected_f.H_a,
        G_y=shifted.R_y + g * expected_f.H_y,
        g0=shifted.r0 + g * expected_f.f_hat,
    )


def aux_quantities(g: QuadraticG, prior: GaussianPolicy, beta, point: LinearizationPoint,
                   t: Optional[int] = None) -> AuxQuantities:
    """Intermediate matrices shared by the F update and the free energy."""
    Sp = prior.Sigma_p
    P = inv_pd(Sp)
    G_aa = g.G_aa
    L = chol(Sp)
    try:
        if beta == 0:
            logdet = 0.0
            L_beta = -np.sum(Sp * G_aa)
        else:
            logdet = logdet_identity_plus(-2.0 * beta * (L.T @ G_aa @ L))
            L_beta = logdet / (2.0 * beta)
        St = P - 2.0 * beta * G_aa
        St_inv = inv_pd(St)
    except NotPositiveDefiniteError as exc:
        raise PolicyCurvatureError(str(exc), t) from None
    Ups = St_inv @ P
    Gam = sym(-2.0 * Ups.T @ G_aa)
    A1 = prior.A1
    b = point.a_bar - prior.A0 - A1 @ point.y_bar
    E_ay = Ups @ A1 + 0.5 * beta * St_inv @ g.G_ay
    D_ay = g.G_ay.T @ Ups - A1.T @ Gam
    E_a = A1.T @ Ups.T @ g.G_a + beta * g.G_ay.T @ St_inv @ g.G_a
    return AuxQuantities(b, St, St_inv, Gam, Ups, E_ay, D_ay, E_a, L_beta)


def f_from_g(g: QuadraticG, prior: GaussianPolicy, beta, point: LinearizationPoint,
             t: Optional[int] = None):
    """``F(y) = (1/β) log ∫ π₀(a|y) exp(βG(y, a)) da`` in closed form.

    At ``β = 0`` the limit ``E_{π₀}[G]`` is returned. Returns ``(F, aux)``.
    """
    aux = aux_quantities(g, prior, beta, point, t)
    A1, b = prior.A1, aux.b
    F_yy = g.G_yy + g.G_ay.T @ aux.E_ay - 0.5 * A1.T @ aux.Gamma_beta @ A1
    F_y = g.G_y - aux.D_ay @ b + aux.E_a
    F0 = (g.g0 - 0.5 * b @ aux.Gamma_beta @ b - g.G_a @ aux.Upsilon_beta @ b
          + 0.5 * beta * g.G_a @ aux.Sigma_p_tilde_inv @ g.G_a - aux.L_beta)
    return QuadraticF(F_yy, F_y, F0, point.y_bar), aux


def policy_update(g: QuadraticG, prior: GaussianPolicy, beta, point: LinearizationPoint,
                  t: Optional[int] = None) -> GaussianPolicy:
    """Posterior ``π ∝ π₀ exp(βG)``. Returns ``prior`` itself when β is zero."""
    if beta == 0:
        return prior
    P = inv_pd(prior.Sigma_p)
    try:
        St_inv = inv_pd(P - 2.0 * beta * g.G_aa)
    except NotPositiveDefiniteError as exc:
        raise PolicyCurvatureError(str(exc), t) from None
    A1 = St_inv @ (P @ prior.A1 + beta * g.G_ay)
    A0 = point.a_bar + St_inv @ (P @ (prior.A0 - point.a_bar) + beta * g.G_a
                                 - beta * g.G_ay @ point.y_bar)
    return GaussianPolicy(A0, A1, St_inv)


def kl_dual_objective(C, pi, pi0, beta: float) -> float:
    """Objective whose minimum over ``C`` is ``-(1/β) KL[π || π₀]`` for
    discrete distributions ``pi`` and ``pi0``."""
    C, pi, pi0 = as_array(C), as_array(pi), as_array(pi0)
    return float(np.sum(-pi * (1.0 / beta + C) + pi0 * np.exp(beta * C) / beta))


def adversarial_cost(policy: GaussianPolicy, prior: GaussianPolicy, beta, a, y):
    """Indifference cost ``(1/β) log[π(a|y) / π₀(a|y)]``."""
    if beta == 0:
        raise ValueError("adversarial cost is undefined at beta = 0")
    return (policy.logpdf(a, y) - prior.logpdf(a, y)) / beta


# ---------------------------------------------------------------------------
# Recursions


@dataclass
class BackwardResult:
    """Per-step results for ``t = 0 .. T-1`` plus the terminal value ``F[T]``."""

    G: List[QuadraticG]
    F: List[QuadraticF]
    policies: List[GaussianPolicy]
    aux: List[AuxQuantities]
    shifted: List[ShiftedReward]


def backward_pass(params: ModelParams, prior, points: Sequence[LinearizationPoint],
                  T: int, a_T=None) -> BackwardResult:
    """Finite-horizon recursion from the terminal step back to ``t = 0``.

    ``points`` holds one linearization point per step ``t = 0 .. T``.
    ``a_T`` is the fixed terminal action (defaults to ``points[T].a_bar``).
    ``prior`` is one policy or a list with one per step.
    """
    if len(points) != T + 1:
        raise ValueError("need T + 1 linearization points")
    priors = list(prior) if isinstance(prior, (list, tuple)) else [prior] * T
    coeffs = reward_coefficients(params)
    beta, gam = params.beta, params.gamma_disc
    shifted_T = shift_reward(coeffs, points[T])
    da_T = np.zeros_like(points[T].a_bar) if a_T is None else as_array(a_T) - points[T].a_bar
    F_next = terminal_f(shifted_T, da_T, center=points[T].y_bar)
    Gs, Fs, pols, auxs, shs = [None] * T, [None] * (T + 1), [None] * T, [None] * T, [None] * (T + 1)
    Fs[T], shs[T] = F_next, shifted_T
    for t in range(T - 1, -1, -1):
        pt = points[t]
        lin = linearize_dynamics(params, pt)
        sh = shift_reward(coeffs, pt)
        H = expected_next_f(F_next, lin, pt)
        G = g_update(sh, H, gam)
        F_next, aux = f_from_g(G, priors[t], beta, pt, t)
        Gs[t], Fs[t], auxs[t], shs[t] = G, F_next, aux, sh
        pols[t] = policy_update(G, priors[t], beta, pt, t)
    return BackwardResult(Gs, Fs, pols, auxs, shs)


def _fixed_point_residual(new, old) -> float:
    """Scaled change of the real part; for complex input the imaginary part
    must settle too, measured relative to its own magnitude."""
    d = new - old
    re = np.max(np.abs(np.real(d))) / max(1.0, np.max(np.abs(np.real(new))))
    if not np.iscomplexobj(d):
        return float(re)
    scale = np.max(np.abs(np.imag(new)))
    im = np.max(np.abs(np.imag(d))) / scale if scale > 0 else 0.0
    return float(max(re, im))


@dataclass
class StationaryResult:
    G: QuadraticG
    F: QuadraticF
    policy: GaussianPolicy
    aux: AuxQuantities
    iterations: int
    residual: float


def stationary_solve(params: ModelParams, prior: GaussianPolicy, beta,
                     point: LinearizationPoint, tol: float = 1e-10, max_iter: int = 1000,
                     damping: float = 1.0, f_init: Optional[QuadraticF] = None,
                     raise_on_fail: bool = True) -> StationaryResult:
    """Fixed point of ``F -> E[F'] -> G -> F`` at a single linearization point.

    ``F`` is expanded around ``ȳ`` and shifted to ``ȳ'`` for the continuation
    value. ``damping`` in (0, 1] relaxes the coefficient update.
    """
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    coeffs = reward_coefficients(params)
    sh = shift_reward(coeffs, point)
    lin = linearize_dynamics(params, point)
    n_y = point.y_bar.size
    F = QuadraticF.zeros(n_y, point.y_bar) if f_init is None else f_init.recenter(point.y_bar)
    residual = np.inf
    for it in range(1, max_iter + 1):
        H = expected_next_f(F, lin, point)
        G = g_update(sh, H, params.gamma_disc)
        F_new, aux = f_from_g(G, prior, beta, point)
        if damping != 1.0:
            F_new = QuadraticF((1 - damping) * F.F_yy + damping * F_new.F_yy,
                               (1 - damping) * F.F_y + damping * F_new.F_y,
                               (1 - damping) * F.F0 + damping * F_new.F0, point.y_bar)
        residual = _fixed_point_residual(F_new.flat(), F.flat())
        F = F_new
        if residual < tol:
            break
    else:
        if raise_on_fail:
            raise ConvergenceError("stationary iteration did not converge", residual, max_iter)
    H = expected_next_f(F, lin, point)
    G = g_update(sh, H, params.gamma_disc)
    _, aux = f_from_g(G, prior, beta, point)
    policy = policy_update(G, prior, beta, point)
    return StationaryResult(G, F, policy, aux, it, residual)
