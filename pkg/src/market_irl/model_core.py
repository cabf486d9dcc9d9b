"""Generative market model: wealth, return and signal dynamics plus the
quadratic one-step reward.

Positions ``x`` (N), signals ``z`` (n_z = K*N), trades ``u = u+ - u-``.
The extended state is ``y = [x; z]`` and the split action ``a = [u+; u-]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ._linalg import as_array, block_mask


def _check_shape(name: str, a: np.ndarray, shape: tuple) -> None:
    if a.shape != shape:
        raise ValueError(f"{name} has shape {a.shape}, expected {shape}")


@dataclass(frozen=True)
class ModelParams:
    """Structural parameters of the generative model.

    Parameters
    ----------
    r_f : float
        Risk-free rate per period.
    W : ndarray, shape (N, n_z)
        Signal loadings (block-sparse in the stacked-predictor convention).
    mu : ndarray, shape (N,)
        Diagonal of the permanent-impact matrix M.
    Sigma_r : ndarray, shape (N, N)
        Residual return covariance.
    Phi : ndarray, shape (n_z,)
        Diagonal signal mean-reversion rates in [0, 1].
    Sigma_z : ndarray, shape (n_z, n_z)
        Signal noise covariance.
    lam : float
        Risk aversion.
    Gamma_plus, Gamma_minus : ndarray, shape (N, N)
        Instantaneous impact of buys and sells.
    Upsilon : ndarray, shape (N, n_z)
        Cross impact of signals on positions.
    nu_plus, nu_minus : ndarray, shape (N,)
        Linear fees.
    gamma_disc : float
        Discount factor in (0, 1].
    beta : float
        Inverse temperature of the entropy-regularized policy.
    """

    r_f: float
    W: np.ndarray
    mu: np.ndarray
    Sigma_r: np.ndarray
    Phi: np.ndarray
    Sigma_z: np.ndarray
    lam: float = 0.0
    Gamma_plus: Optional[np.ndarray] = None
    Gamma_minus: Optional[np.ndarray] = None
    Upsilon: Optional[np.ndarray] = None
    nu_plus: Optional[np.ndarray] = None
    nu_minus: Optional[np.ndarray] = None
    gamma_disc: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        W = as_array(self.W)
        if W.ndim != 2:
            raise ValueError("W must be a 2-d array")
        n, nz = W.shape
        mu = as_array(self.mu)
        if mu.ndim == 2:
            if np.any(mu - np.diag(np.diag(mu))):
                raise ValueError("impact matrix M must be diagonal")
            mu = np.diag(mu).copy()
        mu = mu.reshape(-1) if mu.ndim else np.full(n, mu)
        Phi = as_array(self.Phi)
        if Phi.ndim == 2:
            Phi = np.diag(Phi).copy()
        Phi = Phi.reshape(-1) if Phi.ndim else np.full(nz, Phi)

        def mat(v, shape, default):
            if v is None:
                return np.zeros(shape) if default == 0 else default
            a = as_array(v)
            if a.ndim == 0:
                if shape[0] == shape[1]:
                    return a * np.eye(shape[0])
                return a * block_mask(shape[0], shape[1] // shape[0])
            return a

        def vec(v, m):
            if v is None:
                return np.zeros(m)
            a = as_array(v)
            return np.full(m, a) if a.ndim == 0 else a

        fields = dict(
            r_f=self.r_f,
            W=W,
            mu=mu,
            Sigma_r=mat(self.Sigma_r, (n, n), 0),
            Phi=Phi,
            Sigma_z=mat(self.Sigma_z, (nz, nz), 0),
            Gamma_plus=mat(self.Gamma_plus, (n, n), 0),
            Gamma_minus=mat(self.Gamma_minus, (n, n), 0),
            Upsilon=mat(self.Upsilon, (n, nz), 0),
            nu_plus=vec(self.nu_plus, n),
            nu_minus=vec(self.nu_minus, n),
        )
        for k, v in fields.items():
            object.__setattr__(self, k, v)
        _check_shape("mu", self.mu, (n,))
        _check_shape("Sigma_r", self.Sigma_r, (n, n))
        _check_shape("Phi", self.Phi, (nz,))
        _check_shape("Sigma_z", self.Sigma_z, (nz, nz))
        for name in ("Gamma_plus", "Gamma_minus"):
            _check_shape(name, getattr(self, name), (n, n))
        _check_shape("Upsilon", self.Upsilon, (n, nz))
        _check_shape("nu_plus", self.nu_plus, (n,))
        _check_shape("nu_minus", self.nu_minus, (n,))

        re = np.real
        if np.any(re(self.mu) < 0):
            raise ValueError("impact mu must be non-negative")
        if np.any(re(self.Phi) < 0) or np.any(re(self.Phi) > 1):
            raise ValueError("Phi entries must lie in [0, 1]")
        if not 0 < re(self.gamma_disc) <= 1:
            raise ValueError("gamma_disc must lie in (0, 1]")
        if re(self.lam) < 0 or re(self.beta) < 0:
            raise ValueError("lam and beta must be non-negative")
        for name in ("Sigma_r", "Sigma_z"):
            S = re(getattr(self, name))
            if not np.allclose(S, S.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
            if S.size and np.linalg.eigvalsh(S).min() < -1e-12:
                raise ValueError(f"{name} must be positive semi-definite")

    @property
    def n_assets(self) -> int:
        return self.W.shape[0]

    @property
    def n_signals(self) -> int:
        return self.W.shape[1]

    @property
    def n_state(self) -> int:
        return self.W.shape[0] + self.W.shape[1]

    @property
    def M(self) -> np.ndarray:
        return np.diag(self.mu)

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    @classmethod
    def scalar(cls, n: int, k: int, *, r_f=0.0, w=0.0, mu=0.0, sigma_r=0.0,
               phi=0.0, sigma_z=0.0, lam=0.0, gamma_plus=0.0, gamma_minus=0.0,
               upsilon=0.0, nu_plus=0.0, nu_minus=0.0, gamma_disc=1.0,
               beta=1.0) -> "ModelParams":
        """Scalar-times-identity parametrization with a block-sparse W.

        ``sigma_r`` and ``sigma_z`` are variances.
        """
        mask = block_mask(n, k)
        nz = n * k
        return cls(
            r_f=r_f, W=w * mask, mu=np.full(n, mu), Sigma_r=sigma_r * np.eye(n),
            Phi=np.full(nz, phi), Sigma_z=sigma_z * np.eye(nz), lam=lam,
            Gamma_plus=gamma_plus * np.eye(n), Gamma_minus=gamma_minus * np.eye(n),
            Upsilon=upsilon * mask, nu_plus=np.full(n, nu_plus),
            nu_minus=np.full(n, nu_minus), gamma_disc=gamma_disc, beta=beta)


@dataclass(frozen=True)
class ExtendedState:
    x: np.ndarray
    z: np.ndarray
    t: int = 0

    def __post_init__(self):
        object.__setattr__(self, "x", as_array(self.x).reshape(-1))
        object.__setattr__(self, "z", as_array(self.z).reshape(-1))

    @property
    def y(self) -> np.ndarray:
        return np.concatenate([self.x, self.z])

    @classmethod
    def from_y(cls, y, n: int, t: int = 0) -> "ExtendedState":
        y = as_array(y)
        return cls(y[:n], y[n:], t)


@dataclass(frozen=True)
class Action:
    u_plus: np.ndarray
    u_minus: np.ndarray

    def __post_init__(self):
        up = as_array(self.u_plus).reshape(-1)
        um = as_array(self.u_minus).reshape(-1)
        if up.shape != um.shape:
            raise ValueError("u_plus and u_minus must have equal length")
        if np.any(np.real(up) < 0) or np.any(np.real(um) < 0):
            raise ValueError("action legs must be non-negative")
        object.__setattr__(self, "u_plus", up)
        object.__setattr__(self, "u_minus", um)

    @property
    def a(self) -> np.ndarray:
        return np.concatenate([self.u_plus, self.u_minus])

    @property
    def u(self) -> np.ndarray:
        return self.u_plus - self.u_minus

    @property
    def abs_u(self) -> np.ndarray:
        return self.u_plus + self.u_minus

    @classmethod
    def from_trade(cls, u) -> "Action":
        """Split a signed trade by strict sign; zeros go to neither leg."""
        u = as_array(u).reshape(-1)
        return cls(np.where(u > 0, u, 0.0), np.where(u < 0, -u, 0.0))


@dataclass(frozen=True)
class RewardCoeffs:
    """Coefficients of ``yᵀR_yy y + aᵀR_aa a + aᵀR_ay y + aᵀR_a``."""

    R_yy: np.ndarray
    R_aa: np.ndarray
    R_ay: np.ndarray
    R_a: np.ndarray


@dataclass(frozen=True)
class Trajectory:
    states: Sequence[ExtendedState]
    actions: Optional[Sequence[Action]] = None
    residuals: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.actions is not None and len(self.actions) != len(self.states) - 1:
            raise ValueError("need one action per transition")

    @property
    def horizon(self) -> int:
        return len(self.states) - 1


def _y_a(y, a):
    y = y.y if isinstance(y, ExtendedState) else as_array(y)
    a = a.a if isinstance(a, Action) else as_array(a)
    return y, a


def split_matrix(n: int) -> np.ndarray:
    """The 2N x N matrix [I; -I] mapping u to the action layout (u = Sᵀa)."""
    return np.vstack([np.eye(n), -np.eye(n)])


def state_selector(n: int, nz: int) -> np.ndarray:
    """The (N+n_z) x N matrix [I; 0] extracting x from y (x = Pᵀy)."""
    return np.vstack([np.eye(n), np.zeros((nz, n))])


def excess_returns(params: ModelParams, z, u, eps) -> np.ndarray:
    """Excess returns ``W z - Mᵀu + eps``."""
    z, u, eps = as_array(z), as_array(u), as_array(eps)
    n = params.n_assets
    if z.shape != (params.n_signals,) or u.shape != (n,) or eps.shape != (n,):
        raise ValueError("dimension mismatch in excess_returns")
    return params.W @ z - params.mu * u + eps


def step_wealth(x, u, r) -> np.ndarray:
    """Next positions ``(1 + r) * (x + u)``."""
    x, u, r = as_array(x), as_array(u), as_array(r)
    return (1.0 + r) * (x + u)


def step_signals(params: ModelParams, z, eps_z=None, rng: np.random.Generator | None = None):
    """Next signals ``(1 - Phi) * z + eps_z``.

    When ``eps_z`` is None a draw from N(0, Sigma_z) is taken from ``rng``.
    """
    z = as_array(z)
    if eps_z is None:
        if rng is None:
            raise ValueError("need eps_z or rng")
        eps_z = rng.multivariate_normal(np.zeros(z.size), params.Sigma_z)
    return (1.0 - params.Phi) * z + as_array(eps_z)


def exact_transition(params: ModelParams, y, a, eps=None, eps_z=None) -> np.ndarray:
    """Exact next extended state for given noise draws (zero noise if omitted)."""
    y, a = _y_a(y, a)
    n = params.n_assets
    x, z = y[:n], y[n:]
    u = a[:n] - a[n:]
    eps = np.zeros(n) if eps is None else as_array(eps)
    eps_z = np.zeros(z.size) if eps_z is None else as_array(eps_z)
    r = params.r_f + excess_returns(params, z, u, eps)
    return np.concatenate([step_wealth(x, u, r), step_signals(params, z, eps_z)])


def reward_coefficients(params: ModelParams) -> RewardCoeffs:
    """Assemble the quadratic reward coefficients.

    ``R_ay`` uses ``+W`` on the buy leg and ``-W`` on the sell leg and
    ``R_a`` carries the sell fee on the sell leg, which is what the component
    sum implies.
    """
    n, nz = params.n_assets, params.n_signals
    A = params.M + params.lam * params.Sigma_r
    R_aa = np.block([[-A, A], [A, -A]])
    zero_nz = np.zeros((nz, n + nz))
    R_yy = np.vstack([
        np.hstack([-params.lam * params.Sigma_r, params.W - params.Upsilon]),
        zero_nz,
    ])
    B = params.M + 2.0 * params.lam * params.Sigma_r
    R_ay = np.block([
        [-B - params.Gamma_plus.T, params.W],
        [B - params.Gamma_minus.T, -params.W],
    ])
    R_a = -np.concatenate([params.nu_plus, params.nu_minus])
    return RewardCoeffs(R_yy=R_yy, R_aa=R_aa, R_ay=R_ay, R_a=R_a)


def expected_reward(coeffs: RewardCoeffs, y, a):
    """Expected one-step reward ``yᵀR_yy y + aᵀR_aa a + aᵀR_ay y + aᵀR_a``."""
    y, a = _y_a(y, a)
    if y.shape != (coeffs.R_yy.shape[0],) or a.shape != (coeffs.R_aa.shape[0],):
        raise ValueError("dimension mismatch in expected_reward")
    return y @ coeffs.R_yy @ y + a @ coeffs.R_aa @ a + a @ coeffs.R_ay @ y + a @ coeffs.R_a


def terminal_action(x_prev, x_target) -> Action:
    """Trade that brings ``x_prev`` onto ``x_target``, split by sign."""
    x_prev, x_target = as_array(x_prev), as_array(x_target)
    if x_prev.shape != x_target.shape:
        raise ValueError("dimension mismatch in terminal_action")
    return Action.from_trade(x_target - x_prev)


def portfolio_excess_change(x, u, r, r_f) -> float:
    """Change of portfolio value in excess of risk-free growth."""
    x, u, r = as_array(x), as_array(u), as_array(r)
    if not x.shape == u.shape == r.shape:
        raise ValueError("dimension mismatch in portfolio_excess_change")
    return (r - r_f) @ (x + u)
