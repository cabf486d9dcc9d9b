"""Geometric mean reversion: simulation, 1-d limits and likelihood calibration.

One-step dynamics of the market caps ``x`` (per asset, ``Δt`` folded into κ):

    x' = x + x (κθΔt - κΔt x) + x η,    κθΔt = φ + (1 + φ)(r_f + w z)

with ``η ~ N(0, Σ_x)`` and ``Σ_x`` diagonal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy.optimize import minimize

from ._linalg import block_mask

LOG2PI = math.log(2.0 * math.pi)


class UndefinedLevelError(ValueError):
    """The mean level θ needs ``κΔt != 0``."""


@dataclass(frozen=True)
class GmrParams:
    """Parameters of the multivariate GMR model.

    Parameters
    ----------
    kappa : ndarray, shape (N,)
        Mean-reversion speeds per unit time (negative values admitted).
    w : ndarray, shape (N, K*N)
        Block-sparse signal loadings.
    Sigma_x : ndarray, shape (N,)
        Diagonal residual variances σ_i².
    phi : ndarray, shape (N,)
        Slope of the deterministic policy.
    mu : ndarray, shape (N,)
        Permanent impact (informational; not used by the dynamics).
    r_f : float
    dt : float
    """

    kappa: np.ndarray
    w: np.ndarray
    Sigma_x: np.ndarray
    phi: np.ndarray
    mu: Optional[np.ndarray] = None
    r_f: float = 0.0
    dt: float = 1.0

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.w, dtype=float))
        n = w.shape[0]
        vec = lambda v: np.full(n, float(v)) if np.ndim(v) == 0 else np.asarray(v, dtype=float).reshape(-1)
        S = np.asarray(self.Sigma_x, dtype=float)
        if S.ndim == 2:
            if np.any(S - np.diag(np.diag(S))):
                raise ValueError("Sigma_x must be diagonal")
            S = np.diag(S).copy()
        S = vec(S)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "kappa", vec(self.kappa))
        object.__setattr__(self, "Sigma_x", S)
        object.__setattr__(self, "phi", vec(self.phi))
        object.__setattr__(self, "mu", None if self.mu is None else vec(self.mu))
        if w.shape[1] % n:
            raise ValueError("w must have K*N columns")
        if np.any((w != 0) & (block_mask(n, w.shape[1] // n) == 0)):
            raise ValueError("w violates the block-sparsity pattern")
        if np.any(S <= 0):
            raise ValueError("Sigma_x entries must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def n_assets(self) -> int:
        return self.w.shape[0]

    @property
    def signals_per_asset(self) -> int:
        return self.w.shape[1] // self.w.shape[0]

    def growth(self, z) -> np.ndarray:
        """``κθΔt = φ + (1 + φ)(r_f + w z)``; ``z`` may be row-stacked."""
        z = np.asarray(z, dtype=float)
        return self.phi + (1.0 + self.phi) * (self.r_f + z @ self.w.T)


@dataclass(frozen=True)
class MarketPath:
    """Rescaled market caps ``x`` (T x N) with signals ``z`` (T x K*N)."""

    x: np.ndarray
    z: np.ndarray
    dt: float = 1.0
    nonpositive: bool = False

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        z = np.asarray(self.z, dtype=float).reshape(x.shape[0], -1)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "nonpositive", bool(np.any(x <= 0)))


@dataclass
class CalibConfig:
    """Settings for maximum-likelihood calibration.

    ``form`` selects the arithmetic-return or log-return residual.
    ``nu`` picks the Stratonovich (1) or Ito (2) correction in mode formulas.
    """

    reg_lambda: float = 1e-2
    nonneg_weights: bool = True
    form: str = "arithmetic"
    fit_phi: bool = True
    phi: float = 0.0
    sigma2_floor: float = 1e-14
    gtol: float = 1e-10
    ftol: float = 1e-15
    maxiter: int = 2000
    nu: int = 2

    def __post_init__(self):
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be non-negative")
        if self.form not in ("arithmetic", "log"):
            raise ValueError(f"unknown likelihood form {self.form!r}")
        if self.nu not in (1, 2):
            raise ValueError("nu must be 1 or 2")


@dataclass
class CalibResult:
    params: GmrParams
    converged: np.ndarray
    messages: List[str]
    nll: np.ndarray
    n_obs: int
    iterations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


# ---------------------------------------------------------------------------
# Levels and structural mapping


def theta_level(params: GmrParams, z) -> np.ndarray:
    """Mean level ``θ(z) = κθΔt / (κΔt)``."""
    kdt = params.kappa * params.dt
    if np.any(kdt == 0):
        raise UndefinedLevelError("mean level undefined where kappa * dt = 0 "
                                  "(mu * phi * (1 + phi) = 0)")
    return params.growth(z) / kdt


def from_structural(mu, phi, r_f, W, Sigma_r, dt: float = 1.0) -> GmrParams:
    """Map impact ``μ`` and policy slope ``φ`` to GMR parameters.

    ``κΔt = μ φ (1 + φ)`` and ``σ_i² = (1 + φ_i)² Σ_r,ii``.
    """
    mu, phi = np.atleast_1d(np.asarray(mu, float)), np.atleast_1d(np.asarray(phi, float))
    if np.any(mu <= 0) or np.any(phi <= 0):
        raise ValueError("mu and phi must be positive; for mu = phi = 0 use "
                         "simulate_lognormal (the log-normal return model)")
    Sigma_r = np.atleast_2d(np.asarray(Sigma_r, float))
    var = np.diag(Sigma_r) if Sigma_r.shape[0] == Sigma_r.shape[1] and Sigma_r.shape[0] > 1 else Sigma_r.ravel()
    var = np.broadcast_to(var, mu.shape)
    kappa = mu * phi * (1.0 + phi) / dt
    return GmrParams(kappa, W, (1.0 + phi) ** 2 * var, phi, mu, float(r_f), dt)


# ---------------------------------------------------------------------------
# Simulation


def draw_noise(Sigma_x, steps: int, seed: int) -> np.ndarray:
    """Shared noise stream ``η_t ~ N(0, diag Σ_x)`` (steps x N)."""
    rng = np.random.default_rng(seed)
    sd = np.sqrt(np.asarray(Sigma_x, dtype=float))
    return rng.standard_normal((steps, sd.size)) * sd


def simulate_gmr(params: GmrParams, x0, z_path, seed: int, steps: Optional[int] = None,
                 noise: Optional[np.ndarray] = None) -> MarketPath:
    """Simulate the one-step GMR recursion under given signals.

    ``z_path`` has at least ``steps`` rows; ``noise`` overrides the seeded draws.
    Non-positive caps are flagged on the returned path, not clamped.
    """
    z_path = np.asarray(z_path, dtype=float).reshape(len(z_path), -1)
    steps = z_path.shape[0] if steps is None else steps
    eta = draw_noise(params.Sigma_x, steps, seed) if noise is None else noise
    x = np.empty((steps + 1, params.n_assets))
    x[0] = x0
    kdt = params.kappa * params.dt
    for t in range(steps):
        g = params.growth(z_path[t])
        x[t + 1] = x[t] + x[t] * (g - kdt * x[t]) + x[t] * eta[t]
    return MarketPath(x, z_path[:steps + 1] if z_path.shape[0] > steps
                      else np.vstack([z_path, z_path[-1:]]), params.dt)


def simulate_lognormal(r_f, w, x0, z_path, Sigma_r, seed: int, steps: Optional[int] = None,
                       noise: Optional[np.ndarray] = None) -> MarketPath:
    """Reference model without impact: ``x' = x (1 + r_f + w z + η)``."""
    w = np.atleast_2d(np.asarray(w, dtype=float))
    z_path = np.asarray(z_path, dtype=float).reshape(len(z_path), -1)
    steps = z_path.shape[0] if steps is None else steps
    Sigma_r = np.asarray(Sigma_r, dtype=float)
    var = np.diag(Sigma_r) if Sigma_r.ndim == 2 else Sigma_r
    eta = draw_noise(var, steps, seed) if noise is None else noise
    x = np.empty((steps + 1, w.shape[0]))
    x[0] = x0
    for t in range(steps):
        x[t + 1] = x[t] * (1.0 + r_f + w @ z_path[t] + eta[t])
    return MarketPath(x, z_path[:steps + 1] if z_path.shape[0] > steps
                      else np.vstack([z_path, z_path[-1:]]))


def logistic_map(s0: float, rate: float, steps: int) -> np.ndarray:
    """Iterates of ``s' = s + rate · s (1 - s)``."""
    s = np.empty(steps + 1)
    s[0] = s0
    for t in range(steps):
        s[t + 1] = s[t] + rate * s[t] * (1.0 - s[t])
    return s


SCHEMES = ("direct", "reciprocal", "log")


def _gmr_1d_increment(scheme: str, kappa, theta, sigma, dt):
    sig2 = sigma * sigma
    if scheme == "direct":
        return (lambda s, dw: s + kappa * s * (theta - s) * dt + sigma * s * dw,
                lambda x: x, lambda s: s)
    if scheme == "reciprocal":
        return (lambda s, dw: s + (kappa - (kappa * theta - sig2) * s) * dt - sigma * s * dw,
                lambda x: 1.0 / x, lambda s: 1.0 / s)
    if scheme == "log":
        drift = kappa * theta - 0.5 * sig2
        return (lambda s, dw: s + (drift - kappa * np.exp(s)) * dt + sigma * dw,
                np.log, np.exp)
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


def simulate_gmr_1d(kappa: float, theta: float, sigma: float, x0, dt: float, steps: int,
                    seed: int, scheme: str = "direct", noise: Optional[np.ndarray] = None,
                    record: bool = True):
    """Euler path of ``dx = κ x (θ - x) dt + σ x dW`` in one of three coordinates.

    ``x0`` may be an array of independent starting points (vectorized paths).
    ``noise`` supplies standard normal increments of shape (steps, *x0.shape).
    Returns the path in ``x`` (steps+1 rows) or only the terminal value when
    ``record`` is False.
    """
    step, fwd, back = _gmr_1d_increment(scheme, kappa, theta, sigma, dt)
    x0 = np.asarray(x0, dtype=float)
    rng = np.random.default_rng(seed)
    sq = math.sqrt(dt)
    s = fwd(x0)
    out = [back(s)] if record else None
    for t in range(steps):
        eps = noise[t] if noise is not None else rng.standard_normal(x0.shape)
        s = step(s, sq * eps)
        if record:
            out.append(back(s))
    return np.array(out) if record else back(s)


def stationary_histogram(kappa: float, theta: float, sigma: float, dt: float, steps: int,
                         seed: int, x0: Optional[float] = None, bin_width: float = 0.1,
                         chunk: int = 1_000_000, burn_in: int = 0):
    """Histogram of one long direct-scheme path, with bins centred on
    multiples of ``bin_width``. Returns ``(centres, counts)``."""
    rng = np.random.default_rng(seed)
    x = float(theta if x0 is None else x0)
    a, b = kappa * theta * dt, kappa * dt
    sq = sigma * math.sqrt(dt)
    counts = {}
    done = 0
    while done < steps:
        m = min(chunk, steps - done)
        dw = (rng.standard_normal(m) * sq).tolist()
        xs = [0.0] * m
        for i in range(m):
            x = x + x * (a - b * x) + x * dw[i]
            xs[i] = x
        if done + m > burn_in:
            arr = np.asarray(xs[max(0, burn_in - done):])
            idx = np.floor(arr / bin_width + 0.5).astype(np.int64)
            for k, c in zip(*np.unique(idx, return_counts=True)):
                counts[int(k)] = counts.get(int(k), 0) + int(c)
        done += m
    keys = np.array(sorted(counts))
    return keys * bin_width, np.array([counts[k] for k in keys])


def stationary_extrema(kappa: float, theta: float, sigma: float, nu: int = 2):
    """Extrema of the stationary density: ``x = 0`` and ``κθ - ν σ²/2`` over κ."""
    return 0.0, (kappa * theta - nu * sigma ** 2 / 2.0) / kappa


# ---------------------------------------------------------------------------
# Likelihood


def _residuals(kappa, phi, w_i, log_s2, x, xn, z_i, r_f, dt, form):
    g = phi + (1.0 + phi) * (r_f + z_i @ w_i)
    if form == "arithmetic":
        return (xn - x) / x - g + kappa * dt * x
    return np.log(xn / x) - g + 0.5 * np.exp(log_s2) + kappa * dt * x


def neg_log_likelihood(params: GmrParams, path: MarketPath,
                       config: Optional[CalibConfig] = None) -> float:
    """Gaussian NLL of one-step residuals summed over assets and steps."""
    config = config or CalibConfig()
    x = path.x
    if config.form == "log" and np.any(x <= 0):
        raise ValueError("log-form likelihood needs strictly positive caps")
    K = params.signals_per_asset
    total = 0.0
    for i in range(params.n_assets):
        z_i = path.z[:-1, i * K:(i + 1) * K]
        w_i = params.w[i, i * K:(i + 1) * K]
        s2 = params.Sigma_x[i]
        v = _residuals(params.kappa[i], params.phi[i], w_i, math.log(s2), x[:-1, i], x[1:, i],
                       z_i, params.r_f, params.dt, config.form)
        total += 0.5 * np.sum(v * v) / s2 + 0.5 * v.size * (LOG2PI + math.log(s2))
    return float(total)


def asset_objective(p, x, xn, z_i, r_f, dt, config: CalibConfig, phi_fixed: float):
    """Scaled NLL plus weight regularization for one asset, with gradient.

    ``p = (κ, [φ], w_1..w_K, log σ²)``.
    """
    K = z_i.shape[1]
    fit_phi = config.fit_phi
    kappa = p[0]
    phi = p[1] if fit_phi else phi_fixed
    off = 2 if fit_phi else 1
    w = p[off:off + K]
    ls2 = p[off + K]
    v = _residuals(kappa, phi, w, ls2, x, xn, z_i, r_f, dt, config.form)
    T = v.size
    inv = math.exp(-ls2)
    reg = config.reg_lambda * (w.sum() - 1.0) ** 2
    f = (0.5 * inv * np.dot(v, v) + 0.5 * T * (LOG2PI + ls2)) / T + reg
    rv = inv * v
    grad = np.empty_like(p)
    grad[0] = np.dot(rv, dt * x)
    signal = r_f + z_i @ w
    if fit_phi:
        grad[1] = -np.sum(rv * (1.0 + signal))
    grad[off:off + K] = -(1.0 + phi) * (rv @ z_i)
    dls = -0.5 * inv * np.dot(v, v) + 0.5 * T
    if config.form == "log":
        dls += 0.5 * math.exp(ls2) * np.sum(rv)
    grad[off + K] = dls
    grad /= T
    grad[off:off + K] += 2.0 * config.reg_lambda * (w.sum() - 1.0)
    return f, grad


def calibrate(path: MarketPath, config: Optional[CalibConfig] = None,
              init: Optional[GmrParams] = None, r_f: float = 0.0,
              signals_per_asset: Optional[int] = None) -> CalibResult:
    """Per-asset maximum likelihood with L-BFGS-B.

    Minimizes NLL + λ (Σ_k w_ik - 1)² per asset subject to ``w ≥ 0`` and
    ``σ² ≥ floor``. Unconverged assets are reported with their partial fit.
    """
    config = config or CalibConfig()
    x, z = path.x, path.z
    T, N = x.shape
    if T < 3:
        raise ValueError("need at least 2 transitions per asset")
    if config.form == "log" and np.any(x <= 0):
        raise ValueError("log-form likelihood needs strictly positive caps")
    K = signals_per_asset or (init.signals_per_asset if init is not None else z.shape[1] // N)
    if z.shape[1] != K * N:
        raise ValueError("signal panel must have K*N columns")
    kappa, phi = np.zeros(N), np.full(N, config.phi)
    w = np.zeros((N, K * N))
    s2 = np.zeros(N)
    ok, msgs, nll, iters = np.zeros(N, bool), [], np.zeros(N), np.zeros(N, int)
    floor = math.log(config.sigma2_floor)
    for i in range(N):
        xi, xni, zi = x[:-1, i], x[1:, i], z[:-1, i * K:(i + 1) * K]
        if init is not None:
            p_phi = init.phi[i]
            p0 = [init.kappa[i]] + ([p_phi] if config.fit_phi else []) \
                + list(init.w[i, i * K:(i + 1) * K]) + [math.log(init.Sigma_x[i])]
        else:
            p_phi = config.phi
            r = (xni - xi) / xi
            p0 = [0.0] + ([config.phi] if config.fit_phi else []) + [1.0 / K] * K \
                + [math.log(max(np.var(r), config.sigma2_floor))]
        wb = (0.0, None) if config.nonneg_weights else (None, None)
        bounds = [(None, None)] + ([(-0.99, None)] if config.fit_phi else []) \
            + [wb] * K + [(floor, None)]
        res = minimize(asset_objective, np.asarray(p0, float), jac=True, method="L-BFGS-B",
                       bounds=bounds,
                       args=(xi, xni, zi, r_f, path.dt, config, p_phi),
                       options=dict(gtol=config.gtol, ftol=config.ftol, maxiter=config.maxiter,
                                    maxcor=30))
        p = res.x
        off = 2 if config.fit_phi else 1
        kappa[i] = p[0]
        phi[i] = p[1] if config.fit_phi else p_phi
        w[i, i * K:(i + 1) * K] = p[off:off + K]
        s2[i] = math.exp(p[off + K])
        ok[i] = bool(res.success)
        msgs.append(str(res.message))
        nll[i] = res.fun * xi.size
        iters[i] = res.nit
    params = GmrParams(kappa, w, s2, phi, None if init is None else init.mu, r_f, path.dt)
    return CalibResult(params, ok, msgs, nll, T - 1, iters)


def fitted_levels(params: GmrParams, z) -> np.ndarray:
    """Series of fitted mean levels ``θ(z_t)`` (NaN where κ = 0)."""
    kdt = params.kappa * params.dt
    with np.errstate(divide="ignore", invalid="ignore"):
        out = params.growth(z) / kdt
    return np.where(kdt == 0, np.nan, out)


def synthetic_market(n_assets: int = 5, steps: int = 2000, seed: int = 0,
                     gammas=(0.9, 0.96), signal_sd: float = 0.05, level: float = 0.2,
                     phi_range=(0.6, 1.0), weights=(0.6, 0.4), sigma: float = 0.015):
    """GMR panel driven by EMA-smoothed noise signals.

    Speeds are set so the zero-signal level is ``level`` for every asset.
    Returns ``(params, path)``.
    """
    from .signals_data import ema_signal, stack_predictors
    rng = np.random.default_rng(seed)
    per_asset = []
    for _ in range(n_assets):
        per_asset.append([ema_signal(rng.standard_normal(steps + 1) * signal_sd
                                     / math.sqrt((1 - g) / (1 + g)), g) for g in gammas])
    panel, mask = stack_predictors(per_asset)
    phi = np.linspace(*phi_range, n_assets) if n_assets > 1 else np.array([np.mean(phi_range)])
    w = mask * np.tile(np.asarray(weights, float), n_assets)
    params = GmrParams(phi / level, w, np.full(n_assets, sigma ** 2), phi)
    path = simulate_gmr(params, np.full(n_assets, level), panel.values, seed=seed + 1_000_003,
                        steps=steps)
    return params, path
