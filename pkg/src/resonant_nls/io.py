"""Run configuration, solution bundles and atomic file output.

Configs are JSON documents with an explicit ``version``. Every default is
materialized by :func:`resolve_config`, so the echoed config alone
reproduces a run.
"""
from __future__ import annotations

import copy
import json
import math
import os
import tempfile
from pathlib import Path

from .fourier import FourierSeries
from .geometry import SetParams
from .nonlinear import Amplitude, IterationTrace, ProblemContext, Solution
from .operators import LatticeWindow

SCHEMA_VERSION = 1
BUNDLE_FORMAT = "resonant-nls-solution"


class ConfigError(ValueError):
    pass


SET_DEFAULTS = {"delta": 0.2, "epsilon": 0.2, "window_radius": 12, "mode": "poly",
                "prefactor": 1.0, "witness_rtol": 1e-9}

PROBLEM_DEFAULTS = {
    "t": None, "j": None, "q": None, "A": [0.0, 0.0], "sigma": 0.0,
    "window_radius": 6, "branch": "plus", "mode": "resonant",
    "fp_tol": None, "series_tol": 1e-12, "residual_tol": 1e-8, "r_max": 30, "nodes": 64,
    "m_max": 50, "support_cap": None, "series_method": "column", "gamma2": 0.5,
    "amp_bound": None, "pair_only": False, "split_mean": False,
}

SWEEP_DEFAULTS = {"family": None, "k_values": None, "layer_position": 0.5, "count": 400,
                  "h": 1e-5, "point_method": "sample"}

TRACE_DEFAULTS = {"lambda0": None, "step": None, "max_points": 20, "layer_position": 0.5,
                  "h": 1e-5, "count": 400, "point_method": "sample", "corrector_rtol": 1e-9}

_PASSTHROUGH = ("fp_tol", "series_tol", "residual_tol", "r_max", "nodes", "m_max", "support_cap",
                "series_method", "gamma2", "amp_bound", "pair_only", "split_mean")


def _fill(block: dict, defaults: dict, where: str) -> dict:
    unknown = set(block) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    out = dict(defaults)
    out.update(block)
    return out


def _as_complex(x, name) -> complex:
    if isinstance(x, (int, float)):
        return complex(x)
    if isinstance(x, (list, tuple)) and len(x) == 2:
        return complex(float(x[0]), float(x[1]))
    raise ConfigError(f"{name} must be a number or a [re, im] pair")


def _need(cond, msg):
    if not cond:
        raise ConfigError(msg)


def resolve_config(raw: dict, command: str) -> dict:
    """Validate ``raw`` and return a copy with every default filled in."""
    _need(isinstance(raw, dict), "config must be a JSON object")
    cfg = copy.deepcopy(raw)
    version = cfg.get("version", SCHEMA_VERSION)
    _need(version == SCHEMA_VERSION, f"unsupported config version {version!r}")
    allowed = {"version", "seed", "out", "problem", "sweep", "trace"}
    extra = set(cfg) - allowed
    _need(not extra, f"unknown top-level keys: {sorted(extra)}")
    cfg["version"] = SCHEMA_VERSION
    cfg["seed"] = cfg.get("seed", 0)
    _need(isinstance(cfg["seed"], int) and cfg["seed"] >= 0, "seed must be a non-negative integer")
    cfg["out"] = cfg.get("out", "out")
    _need("problem" in cfg, "config needs a 'problem' block")
    prob = cfg["problem"]
    _need(isinstance(prob, dict), "'problem' must be an object")
    for key in ("n", "l", "V"):
        _need(key in prob, f"problem.{key} is required")
    set_block = prob.pop("set_params", {})
    n, l, V = prob.pop("n"), prob.pop("l"), prob.pop("V")
    prob = _fill(prob, PROBLEM_DEFAULTS, "problem")
    prob["set_params"] = _fill(set_block, SET_DEFAULTS, "problem.set_params")
    prob.update(n=n, l=l, V=V)
    _need(isinstance(n, int) and n in (1, 2, 3), "problem.n must be 1, 2 or 3")
    _need(isinstance(l, int) and l >= 1, "problem.l must be a positive integer")
    try:
        FourierSeries.from_dict(V)
    except Exception as exc:  # noqa: BLE001
        raise ConfigError(f"problem.V is not a valid Fourier series: {exc}") from exc
    _need(prob["mode"] in ("resonant", "nonresonant"), "problem.mode must be resonant or nonresonant")
    _need(prob["branch"] in ("plus", "minus"), "problem.branch must be plus or minus")
    _need(prob["series_method"] in ("column", "full"), "problem.series_method must be column or full")
    _as_complex(prob["A"], "problem.A")
    if isinstance(prob["A"], (int, float)):
        prob["A"] = [float(prob["A"]), 0.0]
    if prob["mode"] == "resonant":
        _need(prob["q"] is not None and len(prob["q"]) == n, "resonant mode needs problem.q of length n")
    if command == "solve":
        for key in ("t", "j"):
            _need(prob[key] is not None and len(prob[key]) == n, f"solve needs problem.{key} of length n")
    cfg["problem"] = prob
    if command == "sweep":
        _need("sweep" in cfg, "sweep needs a 'sweep' block")
        sw = _fill(cfg["sweep"], SWEEP_DEFAULTS, "sweep")
        _need(sw["family"] is not None and sw["k_values"] is not None,
              "sweep.family and sweep.k_values are required")
        _need(sw["point_method"] in ("sample", "construct"), "sweep.point_method must be sample or construct")
        cfg["sweep"] = sw
    if command == "trace":
        _need("trace" in cfg, "trace needs a 'trace' block")
        tr = _fill(cfg["trace"], TRACE_DEFAULTS, "trace")
        _need(isinstance(tr["lambda0"], (int, float)) and tr["lambda0"] > 0,
              "trace.lambda0 must be a positive number")
        _need(tr["point_method"] in ("sample", "construct"), "trace.point_method must be sample or construct")
        cfg["trace"] = tr
    return cfg


def set_params_from(d: dict) -> SetParams:
    return SetParams(**d)


def problem_parts(prob: dict):
    """Common constructor arguments (everything except t and j)."""
    V = FourierSeries.from_dict(prob["V"])
    amp = Amplitude(_as_complex(prob["A"], "A"), float(prob["sigma"]))
    kw = {key: prob[key] for key in _PASSTHROUGH}
    return V, amp, set_params_from(prob["set_params"]), kw


def context_from_config(prob: dict) -> ProblemContext:
    try:
        V, amp, sp, kw = problem_parts(prob)
        j = tuple(prob["j"])
        window = LatticeWindow(prob["n"], prob["window_radius"], j)
        return ProblemContext(prob["n"], prob["l"], tuple(prob["t"]), j, V, amp, window,
                              q=None if prob["q"] is None else tuple(prob["q"]),
                              branch=prob["branch"], mode=prob["mode"], set_params=sp, **kw)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"invalid problem: {exc}") from exc


def context_to_config(ctx: ProblemContext) -> dict:
    sp = ctx.set_params
    out = {
        "n": ctx.n, "l": ctx.l, "t": [float(x) for x in ctx.t], "j": list(ctx.j),
        "q": None if ctx.q is None else list(ctx.q),
        "V": ctx.V.to_dict(), "A": [complex(ctx.amp.A).real, complex(ctx.amp.A).imag],
        "sigma": float(ctx.amp.sigma), "window_radius": ctx.window.radius,
        "branch": ctx.branch, "mode": ctx.mode,
        "set_params": {"delta": sp.delta, "epsilon": sp.epsilon, "window_radius": sp.window_radius,
                       "mode": sp.mode, "prefactor": sp.prefactor, "witness_rtol": sp.witness_rtol},
    }
    for key in _PASSTHROUGH:
        out[key] = getattr(ctx, key)
    return out


def _clean(x):
    """JSON-safe copy: non-finite floats become null."""
    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def _unclean(xs):
    return [float("nan") if v is None else v for v in xs]


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def solution_to_bundle(sol: Solution, ctx: ProblemContext) -> dict:
    return {
        "format": BUNDLE_FORMAT,
        "version": SCHEMA_VERSION,
        "context": context_to_config(ctx),
        "W": sol.W.to_dict(),
        "psi": sol.psi.to_dict(),
        "lambda": float(sol.lam),
        "residual": float(sol.residual),
        "deficit": None if sol.deficit is None else float(sol.deficit),
        "fp_defect": float(sol.fp_defect),
        "trace": sol.trace.to_dict(),
        "diagnostics": sol.diagnostics,
    }


def bundle_parts(bundle: dict):
    """``(ctx, W, psi, lambda, trace)`` from a stored bundle."""
    if bundle.get("format") != BUNDLE_FORMAT:
        raise ConfigError("not a solution bundle")
    if bundle.get("version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported bundle version {bundle.get('version')!r}")
    ctx = context_from_config(bundle["context"])
    W = FourierSeries.from_dict(bundle["W"])
    psi = FourierSeries.from_dict(bundle["psi"])
    tr = dict(bundle["trace"])
    for key in ("dW", "dE", "ratio", "truncated_mass"):
        tr[key] = _unclean(tr[key])
    return ctx, W, psi, float(bundle["lambda"]), IterationTrace.from_dict(tr)


def atomic_write(path, text: str) -> None:
    """Write ``text`` next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
