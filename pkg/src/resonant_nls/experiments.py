"""Parameter sweeps that turn asymptotic statements into trend checks, and
the isoenergetic-curve tracer."""
from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import (SetParams, binomial_sigma, chi0_test, chi_q_test, fold_to_cell,
                       make_rng, measure_fraction, points_with_defect, sample_resonant_layer)
from .nonlinear import Amplitude, ProblemContext, assemble_solution, iterate_fixed_point
from .operators import LatticeWindow
from .perturbation import gradient_lambda, model_gradient

log = logging.getLogger(__name__)

FAMILIES = ("contraction", "gradient", "deficit", "measure", "lambda_gap")
SLOPE_PASS = -0.2


class NoResonantPoint(RuntimeError):
    pass


def thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("RB_THREADS", "1")))
    except ValueError:
        return 1


def fit_slope(ks, values) -> float:
    """Least-squares slope of log(value) against log(k)."""
    ks = np.asarray(ks, dtype=float)
    v = np.asarray(values, dtype=float)
    ok = np.isfinite(v) & (v > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(ks[ok]), np.log(v[ok]), 1)[0])


def find_resonant_point(k, q, sp: SetParams, l: int, seed: int, target: float = 0.5,
                        count: int = 400, sign: int = 1):
    """Accepted layer sample whose defect / bound is closest to ``target``.

    Only points with ``sign * defect > 0`` are considered, so that for the
    plus branch the pair member j carries the larger level.
    """
    samples = sample_resonant_layer(k, q, sp, count, seed, l)
    bound = sp.near_bound(k, len(q))
    good = [(t, d) for t, d in samples if d.accepted and sign * d.defect > 0]
    if not good:
        raise NoResonantPoint(f"no accepted resonant point at k = {k} among {count} samples")
    return min(good, key=lambda x: abs(abs(x[1].defect) / bound - target))


def construct_resonant_point(k, q, sp: SetParams, l: int, target: float = 0.5,
                             sign: int = 1, tries: int = 40):
    """Accepted point with defect exactly ``sign * target * bound``.

    When no point on the sphere of radius k passes the test, nearby radii
    ``k (1 + m 1e-3)``, m = 1, -1, 2, ... are tried in turn.
    """
    n = len(q)
    for m in [0] + [s * i for i in range(1, tries + 1) for s in (1, -1)]:
        kk = k * (1 + 1e-3 * m)
        D = sign * target * sp.near_bound(kk, n)
        for x in points_with_defect(kk, q, D):
            jj, t = fold_to_cell(x)
            dec = chi_q_test(t, float(np.linalg.norm(x)), q, sp, l)
            if dec.accepted:
                return t, dec
    raise NoResonantPoint(f"no resonant point with the requested defect near k = {k}")


def find_nonresonant_point(k, sp: SetParams, l: int, n: int, seed: int, count: int = 200):
    rng = make_rng(seed)
    for _ in range(count):
        d = rng.normal(size=n)
        x = k * d / np.linalg.norm(d)
        j = np.floor(x)
        t = x - j
        dec = chi0_test(t, float(np.linalg.norm(x)), sp, l)
        if dec.accepted:
            return t, dec
    raise NoResonantPoint(f"no non-resonant point at k = {k}")


@dataclass
class ContextTemplate:
    """Everything in a problem except the quasimomentum and the index j."""

    n: int
    l: int
    V: object
    amp: Amplitude
    window_radius: int
    q: tuple | None = None
    branch: str = "plus"
    mode: str = "resonant"
    set_params: SetParams = SetParams()
    extra: dict = field(default_factory=dict)
    point_method: str = "sample"

    def at(self, t, j) -> ProblemContext:
        return ProblemContext(self.n, self.l, tuple(t), tuple(j), self.V, self.amp,
                              LatticeWindow(self.n, self.window_radius, tuple(j)),
                              q=self.q, branch=self.branch, mode=self.mode,
                              set_params=self.set_params, **self.extra)

    def point(self, k, seed, target=0.5, count=400):
        if self.mode == "resonant":
            sign = 1 if self.branch == "plus" else -1
            if self.point_method == "construct":
                t, d = construct_resonant_point(k, self.q, self.set_params, self.l, target, sign)
            else:
                t, d = find_resonant_point(k, self.q, self.set_params, self.l, seed, target,
                                           count, sign)
        else:
            t, d = find_nonresonant_point(k, self.set_params, self.l, self.n, seed, count)
        return t, d.j


@dataclass
class SweepSpec:
    family: str
    k_values: list
    template: ContextTemplate | None = None
    seed: int = 0
    layer_position: float = 0.5
    count: int = 400
    h: float = 1e-5

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown sweep family {self.family!r}")
        if len(self.k_values) < 3:
            raise ValueError("a sweep needs at least 3 points")
        if any(b <= a for a, b in zip(self.k_values, self.k_values[1:])):
            raise ValueError("k values must be strictly increasing")
        if self.family != "measure" and self.template is None:
            raise ValueError("this family needs a problem template")


@dataclass
class SweepTable:
    family: str
    k: list
    metric: list
    slope: float
    passed: bool
    extra: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "metric", "fit_slope", "pass"])
        for k, m in zip(self.k, self.metric):
            w.writerow([repr(float(k)), repr(float(m)), repr(float(self.slope)), str(bool(self.passed)).lower()])
        return buf.getvalue()


def lambda_at(ctx: ProblemContext) -> float:
    """Eigenvalue of the converged self-consistent problem at ctx."""
    W, _ = iterate_fixed_point(ctx)
    return assemble_solution(W, ctx).lam


def _point_metric(spec: SweepSpec, k: float, i: int):
    tpl = spec.template
    if spec.family == "measure":
        sp = tpl.set_params if tpl is not None else SetParams(window_radius=int(np.ceil(k)) + 2)
        sp = SetParams(sp.delta, sp.epsilon, max(sp.window_radius, int(np.ceil(k)) + 2), sp.mode,
                       sp.prefactor, sp.witness_rtol)
        q = tpl.q if tpl is not None else (1, 0)
        l = tpl.l if tpl is not None else 2
        frac = measure_fraction(k, q, sp, spec.count, spec.seed + i, l)
        return frac, {"sigma": binomial_sigma(frac, spec.count)}
    t, j = tpl.point(k, spec.seed + i, spec.layer_position, spec.count)
    ctx = tpl.at(t, j)
    if spec.family == "gradient":
        g, _ = gradient_lambda(lambda s: lambda_at(ctx.with_(t=tuple(s))), np.asarray(t), spec.h)
        kk = ctx.k
        ratio = np.linalg.norm(g) / (2 * ctx.l * kk ** (2 * ctx.l - 1))
        return abs(ratio - 1), {"ratio": float(ratio), "t": list(t), "j": list(j)}
    W, trace = iterate_fixed_point(ctx)
    sol = assemble_solution(W, ctx, trace)
    info = {"t": list(t), "j": list(j), "residual": sol.residual}
    if spec.family == "contraction":
        if trace.converged and len(trace.m) == 1:
            return 0.0, info  # fixed point reached in one step
        return trace.plateau(10 * ctx.tol_fp), info
    if spec.family == "deficit":
        return sol.deficit, info
    _, block = ctx.model
    return abs(sol.lam - block.eigenvalue(ctx.branch)), info


def run_sweep(spec: SweepSpec) -> SweepTable:
    """One row per k: metric, common log-log slope and a pass flag."""
    ks = list(spec.k_values)

    def work(args):
        i, k = args
        try:
            return _point_metric(spec, k, i)
        except Exception as exc:  # noqa: BLE001 - failures are recorded per row
            log.warning("sweep point k=%s failed: %s", k, exc)
            return float("nan"), {"error": str(exc)}

    with ThreadPoolExecutor(max_workers=thread_cap()) as pool:
        results = list(pool.map(work, enumerate(ks)))
    metric = [float(m) if m is not None else float("nan") for m, _ in results]
    extra = [e for _, e in results]
    good = [m for m in metric if np.isfinite(m)]
    slope = fit_slope(ks, metric)
    if spec.family == "measure":
        sig = [e.get("sigma", 0.0) for e in extra]
        passed = all(
            metric[i + 1] <= metric[i] + 3 * np.hypot(sig[i], sig[i + 1])
            for i in range(len(ks) - 1)
        ) and len(good) == len(ks)
    elif spec.family == "contraction" and all(m == 0 for m in good) and good:
        passed = True  # every run converged in one step
    else:
        passed = len(good) >= 3 and np.isfinite(slope) and slope <= SLOPE_PASS
    return SweepTable(spec.family, ks, metric, slope, bool(passed), extra)


# isoenergetic curves


@dataclass
class IsoCurve:
    lambda0: float
    points: list
    lambdas: list
    deviations: list
    branch: str
    boundary: bool = False
    model_points: list = field(default_factory=list)

    @property
    def max_model_deviation(self) -> float:
        return float(max(self.deviations)) if self.deviations else float("nan")

    def to_csv(self) -> str:
        n = len(self.points[0]) if self.points else 0
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index"] + [f"t_{i+1}" for i in range(n)] + ["lambda", "model_deviation"])
        for i, (t, lam, dev) in enumerate(zip(self.points, self.lambdas, self.deviations)):
            w.writerow([i] + [repr(float(x)) for x in t] + [repr(float(lam)), repr(float(dev))])
        return buf.getvalue()


def reference_level(ctx: ProblemContext):
    """Closed-form comparison surface: a +- b (resonant) or |j+t|^(2l)."""
    j = np.asarray(ctx.j)
    if ctx.mode == "resonant":
        v = ctx.V[ctx.q]
        qv = np.asarray(ctx.q)

        def value(t):
            pj = np.sum((j + t) ** 2) ** ctx.l
            pq = np.sum((j - qv + t) ** 2) ** ctx.l
            b = np.hypot(abs(v), 0.5 * (pj - pq))
            a = 0.5 * (pj + pq)
            return a + b if ctx.branch == "plus" else a - b

        def grad(t):
            return model_gradient(t, ctx.j, ctx.q, v, ctx.l, ctx.branch)
    else:
        def value(t):
            return np.sum((j + t) ** 2) ** ctx.l

        def grad(t):
            x = j + t
            return 2 * ctx.l * np.sum(x**2) ** (ctx.l - 1) * x
    return value, grad


def project_to_level(f, grad, t, level, tol=1e-14, max_iter=50):
    """Newton steps along the gradient until f(t) = level."""
    t = np.asarray(t, dtype=float).copy()
    for _ in range(max_iter):
        g = grad(t)
        step = (f(t) - level) / np.dot(g, g) * g
        t -= step
        if np.linalg.norm(step) <= tol * max(1.0, np.linalg.norm(t)):
            break
    return t


def _tangent(g, prev=None, q=None):
    if g.size == 2:
        tau = np.array([-g[1], g[0]])
    else:
        axis = np.asarray(q, dtype=float) if q is not None else np.array([0.0, 0.0, 1.0])
        tau = np.cross(g, axis)
        if np.linalg.norm(tau) == 0:
            tau = np.cross(g, np.array([1.0, 0.0, 0.0]))
    tau /= np.linalg.norm(tau)
    if prev is not None and np.dot(tau, prev) < 0:
        tau = -tau
    return tau


def _in_patch(ctx: ProblemContext, t) -> bool:
    sp = ctx.set_params
    k = float(np.linalg.norm(np.asarray(ctx.j) + t))
    if ctx.mode == "resonant":
        dec = chi_q_test(t, k, ctx.q, sp, ctx.l)
    else:
        dec = chi0_test(t, k, sp, ctx.l)
    return dec.accepted and dec.j == ctx.j


def trace_isoenergetic(lambda0: float, template: ContextTemplate, step: float | None = None,
                       max_points: int = 20, seed: int = 0, layer_position: float = 0.5,
                       h: float = 1e-5, count: int = 400, corrector_rtol: float = 1e-9) -> IsoCurve:
    """March along ``lambda_W(t) = lambda0`` by tangent prediction and
    gradient-direction Newton correction.

    Each point also records its distance to the closed-form reference curve.
    """
    l = template.l
    k0 = lambda0 ** (1.0 / (2 * l))
    t0, j = template.point(k0, seed, layer_position, count)
    ctx0 = template.at(t0, j)
    if step is None:
        # 1/50 of the estimated patch width along the tangent
        width = ctx0.set_params.near_bound(k0, ctx0.n) if ctx0.mode == "resonant" else 0.5
        qn = np.linalg.norm(ctx0.q) if ctx0.q is not None else 1.0
        step = width / (2 * qn) / 50
    ref_f, ref_g = reference_level(ctx0)

    def lam(t):
        return lambda_at(ctx0.with_(t=tuple(t)))

    def grad(t):
        g, _ = gradient_lambda(lam, t, h)
        return g

    def correct(t):
        g = grad(t)
        polished = False
        for _ in range(30):
            val = lam(t)
            err = val - lambda0
            if abs(err) <= corrector_rtol * abs(lambda0):
                if polished:
                    return t, val
                polished = True
            t = t - err / np.dot(g, g) * g
        raise RuntimeError("corrector did not converge")

    pts, lams, devs, model_pts = [], [], [], []
    boundary = False
    t = np.asarray(t0, dtype=float)
    try:
        t, val = correct(t)
    except RuntimeError:
        return IsoCurve(lambda0, [], [], [], template.branch, boundary=True)
    tau = None
    while len(pts) < max_points:
        if not _in_patch(ctx0, t):
            boundary = True
            break
        s = project_to_level(ref_f, ref_g, t, lambda0)
        pts.append(t.copy())
        lams.append(val)
        devs.append(float(np.linalg.norm(s - t)))
        model_pts.append(s)
        g = grad(t)
        tau = _tangent(g, tau, template.q)
        try:
            t, val = correct(t + step * tau)
        except RuntimeError:
            boundary = True
            break
    return IsoCurve(lambda0, pts, lams, devs, template.branch, boundary, model_pts)
