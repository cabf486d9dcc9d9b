"""Flat key-value text serialization of EM state.

Each line is ``<key> <rows>x<cols> <values...>`` with values row-major in
``repr`` precision, so a save/load round trip is exact.
"""
from __future__ import annotations

from dataclasses import fields
from typing import Dict

import numpy as np

from .entropy_rl import GaussianPolicy, LinearizationPoint, QuadraticF, QuadraticG
from .irl_engine import EmState, VariationalParams
from .model_core import ModelParams

HEADER = "# market_irl checkpoint v1"


class CheckpointError(ValueError):
    pass


def _fmt(key: str, value) -> str:
    a = np.atleast_2d(np.real(np.asarray(value, dtype=complex)))
    if np.ndim(value) == 1:
        a = a.reshape(1, -1)
    vals = " ".join(repr(float(v)) for v in a.ravel())
    return f"{key} {a.shape[0]}x{a.shape[1]} {vals}".rstrip()


def _dump(prefix: str, obj, keys) -> list:
    out = []
    for k in keys:
        v = getattr(obj, k)
        if v is None:
            continue
        out.append(_fmt(f"{prefix}.{k}", v))
    return out


def state_lines(state: EmState) -> list:
    lines = [HEADER, f"iteration 1x1 {float(state.iteration)!r}"]
    lines += _dump("theta", state.theta, [f.name for f in fields(ModelParams)])
    lines += _dump("omega", state.omega, [f.name for f in fields(VariationalParams)])
    lines += _dump("policy", state.policy, ["A0", "A1", "Sigma_p"])
    lines += _dump("prior", state.prior, ["A0", "A1", "Sigma_p"])
    lines += _dump("g", state.g, ["G_aa", "G_yy", "G_ay", "G_a", "G_y", "g0"])
    lines += _dump("f", state.f, ["F_yy", "F_y", "F0", "center"])
    lines += _dump("point", state.point, ["a_bar", "y_bar", "y_bar_next"])
    lines.append(_fmt("alpha", [state.alpha_theta, state.alpha_omega]))
    if state.history:
        lines.append(_fmt("history", state.history))
    return lines


def save_state(state: EmState, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(state_lines(state)) + "\n")


def read_entries(path) -> Dict[str, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != HEADER:
        raise CheckpointError(f"{path}: missing or unsupported header")
    out = {}
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        try:
            r, c = (int(v) for v in parts[1].split("x"))
            vals = np.array([float(v) for v in parts[2:]])
            if vals.size != r * c:
                raise ValueError("value count does not match dimensions")
        except (IndexError, ValueError) as exc:
            raise CheckpointError(f"{path}:{n}: {exc}") from None
        out[parts[0]] = vals.reshape(r, c)
    return out


def _group(entries, prefix):
    return {k.split(".", 1)[1]: v for k, v in entries.items() if k.startswith(prefix + ".")}


def load_state(path) -> EmState:
    e = read_entries(path)
    vec_keys = {"mu", "Phi", "nu_plus", "nu_minus", "A0", "G_a", "G_y", "F_y", "center",
                "mu_a", "mu_phi", "mu_varphi", "a_bar", "y_bar", "y_bar_next"}
    scal_keys = {"r_f", "lam", "gamma_disc", "beta", "g0", "F0"}

    def conv(d):
        out = {}
        for k, v in d.items():
            if k in scal_keys:
                out[k] = float(v[0, 0])
            elif k in vec_keys:
                out[k] = v.ravel()
            else:
                out[k] = v
        return out

    try:
        theta = ModelParams(**conv(_group(e, "theta")))
        omega = VariationalParams(**conv(_group(e, "omega")))
        policy = GaussianPolicy(**conv(_group(e, "policy")))
        prior = GaussianPolicy(**conv(_group(e, "prior")))
        g = QuadraticG(**conv(_group(e, "g")))
        f = QuadraticF(**conv(_group(e, "f")))
        point = LinearizationPoint(**conv(_group(e, "point")))
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    alpha = e.get("alpha", np.array([[0.0, 0.0]])).ravel()
    hist = list(e["history"].ravel()) if "history" in e else []
    return EmState(theta, omega, policy, g, f, prior, point, hist, float(alpha[0]),
                   float(alpha[1]), None, int(e["iteration"][0, 0]))
