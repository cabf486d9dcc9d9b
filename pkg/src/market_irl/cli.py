"""Command-line front end: ``market-irl simulate | calibrate-gmr | irl | report``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure
in simulation, 4 unconverged calibration assets, 5 EM failure.
"""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import click
import numpy as np

from . import __version__
from . import config as cfgmod
from . import gmr
from .checkpoint import save_state
from .entropy_rl import GaussianPolicy
from .irl_engine import (EmConfig, EmFailure, TransitionBatch, VariationalParams, Window,
                         ih_if_run, simulate_market, single_investor_run)
from .model_core import ModelParams
from .signals_data import (PanelError, ema_signal, load_market_caps, noise_signal,
                           oracle_signal, write_market_caps)

EXIT_CONFIG, EXIT_NUMERIC, EXIT_UNCONVERGED, EXIT_EM = 2, 3, 4, 5


class CommandError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------------------
# Shared plumbing


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_csv(path: Path, header: List[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_manifest(out: Path, command: str, seed: int, outputs: List[str], **extra) -> None:
    values = dict(command=command, seed=seed, version=__version__,
                  outputs=",".join(sorted(outputs)))
    values.update({k: v for k, v in extra.items()})
    (out / "manifest.txt").write_text(cfgmod.dump(values), encoding="utf-8")


def _setup(ctx: click.Context, schema) -> tuple:
    obj = ctx.obj
    given = {}
    if obj["config"] is not None:
        try:
            given = cfgmod.parse_text(Path(obj["config"]).read_text(encoding="utf-8"))
        except OSError as exc:
            raise CommandError(f"cannot read config: {exc}", EXIT_CONFIG)
    schema = dict(schema, seed=(int, 0))
    try:
        values = cfgmod.resolve(schema, given, {"seed": obj["seed"]})
    except cfgmod.ConfigError as exc:
        raise CommandError(f"config error: {exc}", EXIT_CONFIG)
    out = Path(obj["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(cfgmod.dump(values), encoding="utf-8")
    return values, out


def _run(ctx: click.Context, fn) -> None:
    try:
        fn()
    except CommandError as exc:
        click.echo(f"error: {exc}", err=True)
        ctx.exit(exc.code)


@click.group()
@click.version_option(__version__)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="Flat key = value configuration file.")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Seed (overrides config).")
@click.option("--out", default="out", show_default=True, help="Output directory.")
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True,
              help="Worker threads for per-asset calibration.")
@click.pass_context
def cli(ctx, config_path, seed, out, threads):
    """Market-level inverse reinforcement learning and GMR calibration."""
    ctx.obj = dict(config=config_path, seed=seed, out=out, threads=threads)


# ---------------------------------------------------------------------------
# simulate

SIMULATE_SCHEMA = {
    "model": (str, "gmr"),
    "n_assets": (int, 5),
    "steps": (int, 2000),
    "level": (float, 0.2),
    "sigma": (float, 0.015),
    "signal_sd": (float, 0.05),
    "gammas": (tuple, (0.9, 0.96)),
    "weights": (tuple, (0.6, 0.4)),
    "phi_min": (float, 0.6),
    "phi_max": (float, 1.0),
    "r_f": (float, 0.0),
    "lognormal_limit": (bool, False),
    "start_date": (str, "2010-01-01"),
    "cap_scale": (float, 1.0),
}


def _dates(start: str, n: int) -> List[str]:
    if n == 0:
        return []
    days = np.busday_offset(np.datetime64(start, "D"), np.arange(n), roll="forward")
    return [str(d) for d in days]


def _tickers(n: int) -> List[str]:
    return [f"S{i + 1:02d}" for i in range(n)]


@cli.command()
@click.pass_context
def simulate(ctx):
    """Simulate market caps and signals."""

    def body():
        c, out = _setup(ctx, SIMULATE_SCHEMA)
        if c["model"] not in ("gmr", "lognormal"):
            raise CommandError("config error: model must be gmr or lognormal", EXIT_CONFIG)
        if c["n_assets"] < 1 or c["steps"] < 0 or len(c["weights"]) != len(c["gammas"]):
            raise CommandError("config error: need n_assets >= 1, steps >= 0 and one weight "
                               "per signal", EXIT_CONFIG)
        n, k, steps = c["n_assets"], len(c["gammas"]), c["steps"]
        tickers = _tickers(n)
        sig_header = ["date"] + [f"{t}:ema{g}" for t in tickers for g in c["gammas"]]
        outputs = ["caps.csv", "signals.csv", "manifest.txt", "resolved_config.txt"]
        if steps == 0:
            _write_csv(out / "caps.csv", ["date", "ticker", "cap"], [])
            _write_csv(out / "signals.csv", sig_header, [])
            _write_manifest(out, "simulate", c["seed"], outputs, nonpositive=False)
            return
        try:
            params, path = gmr.synthetic_market(
                n, steps, c["seed"], gammas=c["gammas"], signal_sd=c["signal_sd"],
                level=c["level"], phi_range=(c["phi_min"], c["phi_max"]), weights=c["weights"],
                sigma=c["sigma"])
            if c["lognormal_limit"] or c["model"] == "lognormal":
                params = replace(params, kappa=np.zeros(n), phi=np.zeros(n), r_f=c["r_f"])
            else:
                params = replace(params, r_f=c["r_f"])
            noise = gmr.draw_noise(params.Sigma_x, steps, c["seed"] + 1_000_003)
            x0 = np.full(n, c["level"])
            if c["model"] == "lognormal":
                path = gmr.simulate_lognormal(c["r_f"], params.w, x0, path.z, params.Sigma_x,
                                              0, steps, noise=noise)
            else:
                path = gmr.simulate_gmr(params, x0, path.z, 0, steps, noise=noise)
        except (OverflowError, FloatingPointError) as exc:
            raise CommandError(f"numeric failure: {exc}", EXIT_NUMERIC)
        except ValueError as exc:
            raise CommandError(f"config error: {exc}", EXIT_CONFIG)
        if not np.all(np.isfinite(path.x)):
            raise CommandError("numeric failure: simulated caps are not finite", EXIT_NUMERIC)
        dates = _dates(c["start_date"], steps + 1)
        write_market_caps(out / "caps.csv", tickers, dates, path.x * c["cap_scale"])
        _write_csv(out / "signals.csv", sig_header,
                   ([d] + [_fmt(v) for v in row] for d, row in zip(dates, path.z)))
        _write_csv(out / "true_params.csv", ["ticker", "kappa", "phi", "sigma2"]
                   + [f"w{j + 1}" for j in range(k)],
                   ([t, _fmt(params.kappa[i]), _fmt(params.phi[i]), _fmt(params.Sigma_x[i])]
                    + [_fmt(v) for v in params.w[i, i * k:(i + 1) * k]]
                    for i, t in enumerate(tickers)))
        _write_manifest(out, "simulate", c["seed"], outputs + ["true_params.csv"],
                        nonpositive=path.nonpositive)
        if path.nonpositive:
            click.echo("warning: simulated path has non-positive caps", err=True)

    _run(ctx, body)


# ---------------------------------------------------------------------------
# calibrate-gmr

CALIBRATE_SCHEMA = {
    "caps": (str, ""),
    "signals": (str, "ema"),
    "signals_file": (str, ""),
    "gammas": (tuple, (0.9, 0.96)),
    "windows": (str, "year"),
    "reg_lambda": (float, 1e-2),
    "form": (str, "arithmetic"),
    "fit_phi": (bool, True),
    "nonneg_weights": (bool, True),
    "sigma2_floor": (float, 1e-14),
    "maxiter": (int, 2000),
}


def _read_signal_file(path: str, dates: List[str], n: int):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "date":
        raise CommandError(f"input error: {path}: expected a date column", EXIT_CONFIG)
    body = {r[0]: [float(v) for v in r[1:]] for r in rows[1:] if r}
    if any(d not in body for d in dates):
        raise CommandError(f"input error: {path}: signal dates do not cover the panel",
                           EXIT_CONFIG)
    z = np.array([body[d] for d in dates])
    if z.shape[1] % n:
        raise CommandError(f"input error: {path}: need K signals per ticker", EXIT_CONFIG)
    return z


def _window_signals(c, x: np.ndarray, z_file: Optional[np.ndarray], seed: int):
    """Signals for one calibration window; returns (x, z) trimmed to the usable range."""
    T, n = x.shape
    if c["signals"] == "file":
        z = z_file - z_file.mean(axis=0)
        return x, z
    if c["signals"] == "ema":
        cols = []
        for i in range(n):
            r = np.concatenate([[0.0], x[1:, i] / x[:-1, i] - 1.0])
            for g in c["gammas"]:
                cols.append(ema_signal(r, g, demean=True).values)
        return x, np.column_stack(cols)
    if c["signals"] == "oracle_noise":
        cols = []
        for i in range(n):
            cols += [oracle_signal(x[:, i]).values, noise_signal(T, seed + i).values]
        return x[:T - 1], np.column_stack(cols)[:T - 1]
    raise CommandError("config error: signals must be ema, oracle_noise or file", EXIT_CONFIG)


@cli.command("calibrate-gmr")
@click.pass_context
def calibrate_gmr(ctx):
    """Calibrate GMR parameters per asset and calendar window."""

    def body():
        c, out = _setup(ctx, CALIBRATE_SCHEMA)
        if not c["caps"]:
            raise CommandError("config error: caps is required", EXIT_CONFIG)
        try:
            panel = load_market_caps(c["caps"])
            ccfg = gmr.CalibConfig(reg_lambda=c["reg_lambda"], form=c["form"],
                                   fit_phi=c["fit_phi"], nonneg_weights=c["nonneg_weights"],
                                   sigma2_floor=c["sigma2_floor"], maxiter=c["maxiter"])
        except (OSError, PanelError, ValueError) as exc:
            raise CommandError(f"input error: {exc}", EXIT_CONFIG)
        if c["windows"] not in ("year", "all"):
            raise CommandError("config error: windows must be year or all", EXIT_CONFIG)
        n = len(panel.tickers)
        z_all = None
        if c["signals"] == "file":
            z_all = _read_signal_file(c["signals_file"], panel.dates, n)
        wins = panel.year_windows() if c["windows"] == "year" else {"all": slice(0, len(panel.dates))}
        labels = sorted(wins)

        def fit(label):
            sl = wins[label]
            x = panel.caps[sl]
            zf = None if z_all is None else z_all[sl]
            if x.shape[0] < 3:
                return label, None, None
            xw, zw = _window_signals(c, x, zf, c["seed"])
            if xw.shape[0] < 3:
                return label, None, None
            return label, gmr.calibrate(gmr.MarketPath(xw, zw), ccfg), zw

        with ThreadPoolExecutor(max_workers=ctx.obj["threads"]) as pool:
            results = {lab: (res, z) for lab, res, z in pool.map(fit, labels)}
        k = None
        failed = []
        kappa_rows, s2_rows, w_rows = [], [], []
        for i, t in enumerate(panel.tickers):
            kr, sr, wr = [t], [t], [t]
            for lab in labels:
                res, _ = results[lab]
                if res is None:
                    kr.append("skip"); sr.append("skip")
                    continue
                p = res.params
                k = p.signals_per_asset
                kr.append(_fmt(p.kappa[i])); sr.append(_fmt(p.Sigma_x[i]))
                wr += [_fmt(v) for v in p.w[i, i * k:(i + 1) * k]]
                if not res.converged[i]:
                    failed.append(f"{t}@{lab}")
            kappa_rows.append(kr); s2_rows.append(sr); w_rows.append(wr)
        _write_csv(out / "kappa.csv", ["ticker"] + labels, kappa_rows)
        _write_csv(out / "sigma2.csv", ["ticker"] + labels, s2_rows)
        fitted = [lab for lab in labels if results[lab][0] is not None]
        k = k or 0
        _write_csv(out / "weights.csv",
                   ["ticker"] + [f"{lab}:w{j + 1}" for lab in fitted for j in range(k)], w_rows)
        level_rows = []
        for lab in fitted:
            res, z = results[lab]
            sl = wins[lab]
            levels = gmr.fitted_levels(res.params, z)
            dates = panel.dates[sl][:levels.shape[0]]
            for r, d in enumerate(dates):
                for i, t in enumerate(panel.tickers):
                    level_rows.append([d, t, _fmt(panel.caps[sl][r, i]), _fmt(levels[r, i])])
        _write_csv(out / "levels.csv", ["date", "ticker", "cap", "level"], level_rows)
        skipped = [lab for lab in labels if results[lab][0] is None]
        _write_manifest(out, "calibrate-gmr", c["seed"],
                        ["kappa.csv", "sigma2.csv", "weights.csv", "levels.csv", "manifest.txt",
                         "resolved_config.txt"],
                        rescale_factor=repr(panel.rescale_factor),
                        windows=",".join(labels), skipped=",".join(skipped),
                        unconverged=",".join(failed))
        if failed:
            raise CommandError("unconverged assets: " + ", ".join(failed), EXIT_UNCONVERGED)

    _run(ctx, body)


# ---------------------------------------------------------------------------
# irl

IRL_SCHEMA = {
    "mode": (str, "market"),
    "data": (str, "synthetic"),
    "steps": (int, 200),
    "n_assets": (int, 1),
    "signals_per_asset": (int, 2),
    "r_f": (float, 0.0),
    "w": (tuple, (0.05, 0.02)),
    "mu": (float, 0.05),
    "sigma_r": (float, 1e-4),
    "phi": (tuple, (0.1, 0.04)),
    "sigma_z": (float, 1e-3),
    "lam": (float, 0.5),
    "gamma_impact": (float, 0.01),
    "upsilon": (float, 0.01),
    "gamma_disc": (float, 0.5),
    "beta": (float, 2.0),
    "init_beta": (float, None),
    "init_lam": (float, None),
    "init_mu": (float, None),
    "prior_a0": (float, 0.0),
    "prior_sigma2": (float, 1e-3),
    "x0": (float, 1.0),
    "max_iter": (int, 50),
    "alpha_theta": (float, 1e-2),
    "alpha_omega": (float, 1e-2),
    "batch_size": (int, 0),
    "grad_mode": (str, "fd"),
    "update_rule": (str, "ascent"),
    "horizon": (int, 5),
    "observed_actions": (bool, False),
    "terminal": (str, "stationary"),
    "fit_beta": (bool, True),
}


def _irl_params(c) -> ModelParams:
    n, k = c["n_assets"], c["signals_per_asset"]
    base = ModelParams.scalar(n, k, r_f=c["r_f"], mu=c["mu"], sigma_r=c["sigma_r"],
                              sigma_z=c["sigma_z"], lam=c["lam"], gamma_plus=c["gamma_impact"],
                              gamma_minus=c["gamma_impact"], upsilon=c["upsilon"],
                              gamma_disc=c["gamma_disc"], beta=c["beta"])
    w, phi = np.asarray(c["w"]), np.asarray(c["phi"])
    if w.size != k or phi.size != k:
        raise CommandError("config error: w and phi need one entry per signal", EXIT_CONFIG)
    return base.with_(W=base.W * np.tile(w, n), Phi=np.tile(phi, n))


def _read_irl_data(path: str, n: int, nz: int):
    try:
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise CommandError(f"input error: {exc}", EXIT_CONFIG)
    if arr.shape[1] not in (n + nz, 3 * n + nz):
        raise CommandError("input error: data needs columns x, z and optionally a", EXIT_CONFIG)
    y = arr[:, :n + nz]
    acts = arr[:-1, n + nz:] if arr.shape[1] > n + nz else None
    return y, acts


@cli.command()
@click.pass_context
def irl(ctx):
    """Fit structural parameters by variational EM."""

    def body():
        c, out = _setup(ctx, IRL_SCHEMA)
        if c["mode"] not in ("market", "investor"):
            raise CommandError("config error: mode must be market or investor", EXIT_CONFIG)
        truth = _irl_params(c)
        n, nz = truth.n_assets, truth.n_signals
        prior = GaussianPolicy.from_scalars(2 * n, n + nz, c["prior_a0"], 0.0, c["prior_sigma2"])
        if c["data"] == "synthetic":
            y0 = np.concatenate([np.full(n, c["x0"]), np.zeros(nz)])
            y, acts = simulate_market(truth, prior, y0, c["steps"], c["seed"])
        else:
            y, acts = _read_irl_data(c["data"], n, nz)
        init = truth.with_(**{k: c[f"init_{k}"] for k in ("beta", "lam")
                              if c[f"init_{k}"] is not None})
        if c["init_mu"] is not None:
            init = init.with_(mu=np.full(n, c["init_mu"]))
        diag = open(out / "diagnostics.txt", "w", encoding="utf-8")
        ck = out / "checkpoint.txt"
        em = EmConfig(max_iter=c["max_iter"], alpha_theta=c["alpha_theta"],
                      alpha_omega=c["alpha_omega"],
                      batch_size=c["batch_size"] or None, seed=c["seed"],
                      grad_mode=c["grad_mode"], update_rule=c["update_rule"],
                      signals_per_asset=c["signals_per_asset"], terminal=c["terminal"],
                      fit_beta=c["fit_beta"],
                      diagnostics=lambda line: diag.write(line + "\n"),
                      on_iteration=lambda st: save_state(st, ck))
        notes = []
        try:
            if c["mode"] == "market":
                res = ih_if_run(TransitionBatch(y[:-1], y[1:], n), em, init, prior)
                save_state(res.state, ck)
                theta, policy, f, hist = res.theta, res.policy, res.f, res.history
                notes.append("path: market free energy (actions unobserved)")
            else:
                T = c["horizon"]
                use_acts = c["observed_actions"]
                if use_acts and acts is None:
                    raise CommandError("config error: observed_actions needs action data",
                                       EXIT_CONFIG)
                wins = [Window(y[s:s + T + 1], acts[s:s + T] if use_acts else None)
                        for s in range(0, y.shape[0] - T, T)]
                if not wins:
                    raise CommandError("config error: horizon exceeds the data", EXIT_CONFIG)
                res = single_investor_run(wins, em, init, prior)
                theta, policy, f, hist = res.theta, res.policies[0], res.f, res.history
                notes.append("path: complete-data log-likelihood (actions observed)"
                             if res.complete_data else "path: windowed free energy")
        except EmFailure as exc:
            diag.close()
            raise CommandError(f"EM failure: {exc}", EXIT_EM)
        except (ValueError, np.linalg.LinAlgError) as exc:
            diag.close()
            raise CommandError(f"EM failure: {exc}", EXIT_EM)
        diag.close()
        _write_csv(out / "history.csv", ["iteration", "objective"],
                   ([i + 1, _fmt(v)] for i, v in enumerate(hist)))
        lines = [f"mode = {c['mode']}"] + [f"note = {s}" for s in notes]
        lines += [f"rationality_index_beta = {_fmt(np.real(theta.beta))}",
                  f"lam = {_fmt(np.real(theta.lam))}",
                  "mu = " + ",".join(_fmt(v) for v in np.real(theta.mu)),
                  "W = " + ",".join(_fmt(v) for v in np.real(theta.W).ravel()),
                  f"gamma_impact = {_fmt(np.real(theta.Gamma_plus[0, 0]))}",
                  "policy_A0 = " + ",".join(_fmt(v) for v in np.real(policy.A0)),
                  "policy_A1 = " + ",".join(_fmt(v) for v in np.real(policy.A1).ravel()),
                  "policy_Sigma_p = " + ",".join(_fmt(v) for v in np.real(policy.Sigma_p).ravel()),
                  "F_yy = " + ",".join(_fmt(v) for v in np.real(f.F_yy).ravel()),
                  "F_y = " + ",".join(_fmt(v) for v in np.real(f.F_y)),
                  f"F0 = {_fmt(np.real(f.F0))}",
                  f"iterations = {len(hist)}"]
        (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        outs = ["history.csv", "report.txt", "diagnostics.txt", "manifest.txt",
                "resolved_config.txt"] + (["checkpoint.txt"] if ck.exists() else [])
        _write_manifest(out, "irl", c["seed"], outs, mode=c["mode"])

    _run(ctx, body)


# ---------------------------------------------------------------------------
# report

REPORT_SCHEMA = {"inputs": (str, "")}


def _read_manifest(run: Path) -> Dict[str, str]:
    path = run / "manifest.txt"
    if not path.exists():
        raise CommandError(f"input error: missing manifest {path}", EXIT_CONFIG)
    try:
        m = cfgmod.parse_text(path.read_text(encoding="utf-8"))
    except cfgmod.ConfigError as exc:
        raise CommandError(f"input error: corrupted manifest {path}: {exc}", EXIT_CONFIG)
    if "command" not in m:
        raise CommandError(f"input error: corrupted manifest {path}: no command", EXIT_CONFIG)
    return m


def svg_lines(series: Dict[str, tuple], title: str, width: int = 640, height: int = 360) -> str:
    """Static SVG with one polyline per named ``(x, y)`` series."""
    pad = 40
    xs = np.concatenate([np.asarray(s[0], float) for s in series.values()])
    ys = np.concatenate([np.asarray(s[1], float) for s in series.values()])
    ok = np.isfinite(ys)
    x0, x1 = (xs.min(), xs.max()) if xs.size else (0.0, 1.0)
    y0, y1 = (ys[ok].min(), ys[ok].max()) if ok.any() else (0.0, 1.0)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    sx = lambda v: pad + (v - x0) / (x1 - x0) * (width - 2 * pad)
    sy = lambda v: height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
             'fill="none" stroke="#444"/>',
             f'<text x="{pad}" y="{pad - 12}" font-size="13">{title}</text>',
             f'<text x="{pad}" y="{height - 12}" font-size="10">y: {y0:.4g} .. {y1:.4g}</text>']
    for j, (name, (x, y)) in enumerate(series.items()):
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, y) if np.isfinite(b))
        col = colors[j % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{col}" stroke-width="1" points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 120}" y="{pad + 14 * (j + 1)}" font-size="11" '
                     f'fill="{col}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


@cli.command()
@click.pass_context
def report(ctx):
    """Merge run outputs into a summary with level-vs-cap plots."""

    def body():
        c, out = _setup(ctx, REPORT_SCHEMA)
        runs = [Path(p.strip()) for p in c["inputs"].split(",") if p.strip()]
        if not runs:
            raise CommandError("config error: inputs is required", EXIT_CONFIG)
        sections = ["# market-irl report", ""]
        outputs = ["report.md", "manifest.txt", "resolved_config.txt"]
        for run in runs:
            m = _read_manifest(run)
            sections += [f"## {run.name}: {m['command']} (seed {m.get('seed', '?')})", ""]
            if m["command"] == "calibrate-gmr":
                for name in ("kappa", "sigma2", "weights"):
                    p = run / f"{name}.csv"
                    if not p.exists():
                        raise CommandError(f"input error: missing {p}", EXIT_CONFIG)
                    rows = list(csv.reader(open(p, encoding="utf-8")))
                    sections.append(f"### {name}")
                    sections.append("| " + " | ".join(rows[0]) + " |")
                    sections.append("|" + "---|" * len(rows[0]))
                    sections += ["| " + " | ".join(r) + " |" for r in rows[1:]]
                    sections.append("")
                lv = run / "levels.csv"
                if lv.exists():
                    rows = list(csv.DictReader(open(lv, encoding="utf-8")))
                    for t in sorted({r["ticker"] for r in rows}):
                        sel = [r for r in rows if r["ticker"] == t]
                        idx = np.arange(len(sel), dtype=float)
                        cap = np.array([float(r["cap"]) for r in sel])
                        lev = np.array([float(r["level"]) for r in sel])
                        stem = f"{run.name}_{t}_level"
                        _write_csv(out / f"{stem}.csv", ["date", "cap", "level"],
                                   ([r["date"], r["cap"], r["level"]] for r in sel))
                        (out / f"{stem}.svg").write_text(
                            svg_lines({"cap": (idx, cap), "level": (idx, lev)},
                                      f"{t}: market cap vs fitted mean level"), encoding="utf-8")
                        outputs += [f"{stem}.csv", f"{stem}.svg"]
                        sections.append(f"![{t}]({stem}.svg)")
                    sections.append("")
            elif m["command"] == "irl":
                p = run / "report.txt"
                if p.exists():
                    sections += ["```", p.read_text(encoding="utf-8").rstrip(), "```", ""]
            else:
                sections += [f"outputs: {m.get('outputs', '')}", ""]
        (out / "report.md").write_text("\n".join(sections), encoding="utf-8")
        _write_manifest(out, "report", c["seed"], outputs,
                        inputs=",".join(str(r) for r in runs))

    _run(ctx, body)


def main() -> None:
    cli(prog_name="market-irl")


if __name__ == "__main__":
    main()
