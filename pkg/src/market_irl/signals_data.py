"""Market-cap panels and predictive signals."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from ._linalg import block_mask


class PanelError(ValueError):
    """Malformed market-cap input."""


class SignalRangeError(IndexError):
    """Request for a signal value outside its usable (look-ahead free) range."""


@dataclass(frozen=True)
class MarketPanel:
    """Dense T x N panel of market caps divided by ``rescale_factor``."""

    tickers: List[str]
    dates: List[str]
    caps: np.ndarray
    rescale_factor: float

    def __post_init__(self):
        caps = np.asarray(self.caps, dtype=float)
        if caps.shape != (len(self.dates), len(self.tickers)):
            raise PanelError("caps shape does not match dates x tickers")
        if np.any(caps <= 0):
            raise PanelError("caps must be positive")
        if any(a >= b for a, b in zip(self.dates, self.dates[1:])):
            raise PanelError("dates must be strictly increasing")
        object.__setattr__(self, "caps", caps)

    def year_windows(self) -> Dict[str, slice]:
        """Calendar-year index ranges, keyed by ``YYYY``."""
        out: Dict[str, slice] = {}
        for i, d in enumerate(self.dates):
            y = d[:4]
            s = out.get(y)
            out[y] = slice(i, i + 1) if s is None else slice(s.start, i + 1)
        return out


@dataclass(frozen=True)
class SignalSeries:
    """A single signal with its descriptor and usable range ``[0, usable_stop)``."""

    values: np.ndarray
    descriptor: Dict[str, object]
    usable_stop: int

    def __len__(self) -> int:
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def at(self, t: int) -> float:
        if not 0 <= t < self.usable_stop:
            raise SignalRangeError(f"index {t} outside usable range [0, {self.usable_stop})")
        return float(self.values[t])

    @property
    def usable(self) -> np.ndarray:
        return self.values[:self.usable_stop]


@dataclass(frozen=True)
class SignalPanel:
    """T x (K*N) signals stacked asset by asset, K per asset."""

    values: np.ndarray
    spec: List[Dict[str, object]] = field(default_factory=list)
    usable_stop: Optional[int] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v.reshape(v.shape[0], -1))
        if self.usable_stop is None:
            object.__setattr__(self, "usable_stop", v.shape[0])

    def row(self, t: int) -> np.ndarray:
        if not 0 <= t < self.usable_stop:
            raise SignalRangeError(f"row {t} outside usable range [0, {self.usable_stop})")
        return self.values[t]

    @property
    def usable(self) -> np.ndarray:
        return self.values[:self.usable_stop]


# ---------------------------------------------------------------------------
# Panel ingestion


def load_market_caps(source: Union[str, os.PathLike, io.TextIOBase]) -> MarketPanel:
    """Read ``date,ticker,cap`` rows into a dense panel rescaled by the
    average total market cap."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    else:
        rows = list(csv.reader(source))
    if not rows or [h.strip().lower() for h in rows[0]] != ["date", "ticker", "cap"]:
        raise PanelError("expected header date,ticker,cap")
    cells: Dict[tuple, float] = {}
    for k, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise PanelError(f"line {k}: expected 3 fields")
        d, tk, c = row[0].strip(), row[1].strip(), float(row[2])
        if (d, tk) in cells:
            raise PanelError(f"duplicate entry for ({d}, {tk})")
        if not c > 0:
            raise PanelError(f"non-positive cap for ({d}, {tk})")
        cells[(d, tk)] = c
    dates = sorted({d for d, _ in cells})
    tickers = sorted({t for _, t in cells})
    caps = np.empty((len(dates), len(tickers)))
    for i, d in enumerate(dates):
        for j, tk in enumerate(tickers):
            if (d, tk) not in cells:
                raise PanelError(f"missing cap for ({d}, {tk})")
            caps[i, j] = cells[(d, tk)]
    factor = float(caps.sum(axis=1).mean())
    return MarketPanel(tickers, dates, caps / factor, factor)


def write_market_caps(path, tickers: Sequence[str], dates: Sequence[str], caps) -> None:
    caps = np.asarray(caps, dtype=float)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "ticker", "cap"])
        for i, d in enumerate(dates):
            for j, tk in enumerate(tickers):
                w.writerow([d, tk, repr(float(caps[i, j]))])


# ---------------------------------------------------------------------------
# Signals


def _demean(v: np.ndarray, stop: int) -> np.ndarray:
    out = v.copy()
    out[:stop] -= v[:stop].mean()
    return out


def ema_signal(series, gamma: float, demean: bool = True) -> SignalSeries:
    """``e_t = γ e_{t-1} + (1 - γ) x_t`` with ``e_0 = x_0``."""
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    x = np.asarray(series, dtype=float).reshape(-1)
    e = np.empty_like(x)
    if x.size:
        e[0] = x[0]
    for t in range(1, x.size):
        e[t] = gamma * e[t - 1] + (1.0 - gamma) * x[t]
    if demean:
        e = _demean(e, e.size)
    return SignalSeries(e, {"kind": "ema", "gamma": gamma, "demean": demean}, e.size)


def oracle_signal(series) -> SignalSeries:
    """Demeaned realized next-step return; the last entry is not usable."""
    x = np.asarray(series, dtype=float).reshape(-1)
    if x.size < 2:
        raise ValueError("oracle signal needs at least two observations")
    r = np.empty_like(x)
    r[:-1] = x[1:] / x[:-1] - 1.0
    r[-1] = np.nan
    r = _demean(r, x.size - 1)
    return SignalSeries(r, {"kind": "oracle", "demean": True}, x.size - 1)


def noise_signal(length: int, seed: int) -> SignalSeries:
    """Demeaned i.i.d. standard normal draws."""
    v = np.random.default_rng(seed).standard_normal(length)
    if length:
        v = v - v.mean()
    return SignalSeries(v, {"kind": "noise", "seed": seed}, length)


def simulate_ou_signals(Phi, Sigma_z, z0, steps: int, seed: int) -> SignalPanel:
    """``z' = (1 - Φ) z + ε``, ``ε ~ N(0, Σ_z)``; returns steps+1 rows."""
    Phi = np.asarray(Phi, dtype=float)
    if Phi.ndim == 2:
        if np.any(Phi - np.diag(np.diag(Phi))):
            raise ValueError("Phi must be diagonal")
        Phi = np.diag(Phi)
    Phi = Phi.reshape(-1)
    if np.any(Phi < 0) or np.any(Phi > 1):
        raise ValueError("Phi entries must lie in [0, 1]")
    n = Phi.size
    Sigma_z = np.asarray(Sigma_z, dtype=float)
    Sigma_z = Sigma_z * np.eye(n) if Sigma_z.ndim == 0 else Sigma_z
    rng = np.random.default_rng(seed)
    eps = rng.multivariate_normal(np.zeros(n), Sigma_z, size=steps) if steps else np.zeros((0, n))
    z = np.empty((steps + 1, n))
    z[0] = z0
    for t in range(steps):
        z[t + 1] = (1.0 - Phi) * z[t] + eps[t]
    return SignalPanel(z, [{"kind": "ou", "Phi": float(p)} for p in Phi])


def stack_predictors(per_asset_signals: Sequence[Sequence]) -> tuple:
    """Stack K signals for each of N assets into a (T, K*N) panel.

    Returns ``(SignalPanel, mask)`` with the N x (K*N) loading mask.
    """
    n = len(per_asset_signals)
    if n == 0:
        raise ValueError("no assets supplied")
    ks = {len(s) for s in per_asset_signals}
    if len(ks) != 1 or 0 in ks:
        raise ValueError("every asset needs the same positive number of signals")
    k = ks.pop()
    flat = [s for asset in per_asset_signals for s in asset]
    lengths = {len(s) for s in flat}
    if len(lengths) != 1:
        raise ValueError("signals have ragged lengths")
    values = np.column_stack([np.asarray(s, dtype=float) for s in flat])
    spec = [dict(s.descriptor) if isinstance(s, SignalSeries) else {"kind": "array"} for s in flat]
    stop = min(s.usable_stop if isinstance(s, SignalSeries) else len(s) for s in flat)
    return SignalPanel(values, spec, stop), block_mask(n, k)
