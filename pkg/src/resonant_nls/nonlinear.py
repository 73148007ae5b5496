"""Self-consistent potential iteration ``W -> V + sigma |psi_W|^2`` and the
assembly and verification of the resulting stationary solution."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .fourier import FourierSeries, cap_support, modulus_squared, multiply, star_norm
from .geometry import SetParams, chi0_test, chi_q_test
from .operators import LatticeWindow, TruncatedOperator, build_model, op_norm_zero
from .perturbation import (nonresonant_contour, nonresonant_series, resonant_contour,
                           resonant_series, two_wave_deficit)


class NonContraction(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class Amplitude:
    A: complex
    sigma: float

    @property
    def strength(self) -> float:
        """``|sigma| |A|^2``."""
        return abs(self.sigma) * abs(self.A) ** 2


@dataclass(frozen=True)
class ProblemContext:
    n: int
    l: int
    t: tuple
    j: tuple
    V: FourierSeries
    amp: Amplitude
    window: LatticeWindow
    q: tuple | None = None
    branch: str = "plus"
    mode: str = "resonant"
    set_params: SetParams = SetParams()
    fp_tol: float | None = None
    series_tol: float = 1e-12
    residual_tol: float = 1e-8
    r_max: int = 30
    nodes: int = 64
    m_max: int = 50
    support_cap: float | None = None
    series_method: str = "column"
    gamma2: float = 0.5
    amp_bound: float | None = None
    pair_only: bool = False
    split_mean: bool = False

    def __post_init__(self):
        object.__setattr__(self, "t", tuple(float(x) for x in self.t))
        object.__setattr__(self, "j", tuple(int(x) for x in self.j))
        if self.q is not None:
            object.__setattr__(self, "q", tuple(int(x) for x in self.q))
        if len(self.t) != self.n or len(self.j) != self.n or self.V.dim != self.n:
            raise ValueError("dimension mismatch in problem context")
        if self.mode not in ("resonant", "nonresonant"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.branch not in ("plus", "minus"):
            raise ValueError(f"unknown branch {self.branch!r}")
        if self.mode == "resonant" and (self.q is None or not any(self.q)):
            raise ValueError("resonant mode needs a nonzero q")
        if not (2 * self.l > self.n or (self.l == 1 and self.n == 2)):
            raise ValueError("need 2l > n or (l = 1, n = 2)")

    @property
    def k(self) -> float:
        return float(np.linalg.norm(np.asarray(self.j) + np.asarray(self.t)))

    @property
    def tol_fp(self) -> float:
        return 1e-12 * star_norm(self.V) if self.fp_tol is None else self.fp_tol

    @property
    def cap(self) -> float:
        if self.support_cap is not None:
            return self.support_cap
        return 4 * max(self.V.support_radius, 1.0)

    @cached_property
    def model(self):
        return build_model(self.t, self.j, self.q, self.V, self.window, self.l)

    @cached_property
    def contour(self):
        if self.mode == "resonant":
            _, block = self.model
            return resonant_contour(block, self.branch, self.set_params.mode,
                                    self.set_params.epsilon, self.nodes)
        return nonresonant_contour(self.k, self.l, self.n, self.set_params.delta, self.nodes)

    def with_(self, **kw) -> "ProblemContext":
        return replace(self, **kw)


def psi_from_projection(E, j, A: complex, window: LatticeWindow | None = None) -> FourierSeries:
    """Periodic part of the eigenfunction: harmonic ``i - j`` carries ``A E[i, j]``."""
    if isinstance(E, TruncatedOperator):
        window, m = E.window, E.matrix
    else:
        m = np.asarray(E)
    if window is None:
        raise ValueError("a window is needed to label the coefficients")
    col = m[:, window.index_of(j)]
    harm = window.points - np.asarray(j)
    return FourierSeries(window.dim, zip(harm.tolist(), (A * col).tolist()))


def solve_linear(W: FourierSeries, ctx: ProblemContext):
    """Eigenvalue and projection of ``H0 + W`` for the configured mode."""
    if ctx.mode == "resonant":
        return resonant_series(ctx.t, ctx.j, ctx.q, W, ctx.V, ctx.window, ctx.l, ctx.contour,
                               ctx.r_max, ctx.series_tol, ctx.branch, ctx.series_method,
                               model=ctx.model, pair_only=ctx.pair_only,
                               split_mean=ctx.split_mean)
    return nonresonant_series(ctx.t, ctx.j, W, ctx.window, ctx.l, ctx.contour, ctx.r_max,
                              ctx.series_tol, ctx.set_params.delta, ctx.series_method)


def apply_map(W: FourierSeries, ctx: ProblemContext):
    """One application of ``W -> V + sigma |psi_W|^2`` (support capped).

    Returns the new series and a diagnostics dict holding the eigenvalue,
    projection, psi and series statistics of the solve at W.
    """
    lam, E = solve_linear(W, ctx)
    psi = psi_from_projection(E.value, ctx.j, ctx.amp.A)
    new = ctx.V
    if ctx.amp.sigma != 0:
        new = ctx.V + modulus_squared(psi).scale(ctx.amp.sigma)
    new, lost = cap_support(new, ctx.cap)
    diag = {"lambda": lam.value, "E": E.value, "psi": psi, "truncated_mass": lost,
            "lambda_series": lam, "E_series": E}
    return new, diag


@dataclass
class IterationTrace:
    m: list = field(default_factory=list)
    dW: list = field(default_factory=list)
    dE: list = field(default_factory=list)
    ratio: list = field(default_factory=list)
    truncated_mass: list = field(default_factory=list)
    converged: bool = False
    m_final: int = 0

    def add(self, m, dW, dE, truncated):
        prev = self.dW[-1] if self.dW else None
        if prev is None:
            r = float("nan")
        elif prev > 0:
            r = dW / prev
        else:
            r = 0.0 if dW == 0 else float("inf")
        self.m.append(m)
        self.dW.append(float(dW))
        self.dE.append(float(dE))
        self.ratio.append(float(r))
        self.truncated_mass.append(float(truncated))

    def plateau(self, floor: float = 0.0) -> float:
        """Median contraction ratio over steps whose size is above ``floor``."""
        rs = [r for r, a, b in zip(self.ratio[1:], self.dW[:-1], self.dW[1:])
              if np.isfinite(r) and a > floor and b > floor]
        return float(np.median(rs)) if rs else float("nan")

    def to_dict(self) -> dict:
        return {"m": self.m, "dW": self.dW, "dE": self.dE, "ratio": self.ratio,
                "truncated_mass": self.truncated_mass, "converged": self.converged,
                "m_final": self.m_final}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["m", "dW", "dE", "ratio"])
        for row in zip(self.m, self.dW, self.dE, self.ratio):
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
        return buf.getvalue()


def initial_potential(ctx: ProblemContext) -> FourierSeries:
    if ctx.mode == "resonant":
        return ctx.V
    return ctx.V + FourierSeries.constant(ctx.n, ctx.amp.sigma * abs(ctx.amp.A) ** 2)


def iterate_fixed_point(ctx: ProblemContext, m_max: int | None = None,
                        W0: FourierSeries | None = None):
    """Iterate the potential map from ``W0`` (default: the mode's starting point).

    Stops when ``||W_m - W_{m-1}||_* <= fp_tol`` (or after one step when
    sigma = 0). Three consecutive expanding steps abort with
    :class:`NonContraction`.
    """
    m_max = ctx.m_max if m_max is None else m_max
    trace = IterationTrace()
    W = initial_potential(ctx) if W0 is None else W0
    E_prev = None
    tol = ctx.tol_fp
    for m in range(1, m_max + 1):
        W_new, diag = apply_map(W, ctx)
        E = diag["E"].matrix
        dE = float("nan") if E_prev is None else op_norm_zero(E - E_prev)
        trace.add(m, star_norm(W_new - W), dE, diag["truncated_mass"])
        E_prev = E
        W = W_new
        if trace.dW[-1] <= tol or ctx.amp.sigma == 0:
            trace.converged = True
            break
        if len(trace.ratio) >= 3 and all(r > 1 for r in trace.ratio[-3:]):
            trace.m_final = m
            raise NonContraction(f"potential map expanded for 3 consecutive steps (m = {m})", trace)
    trace.m_final = trace.m[-1] if trace.m else 0
    return W, trace


@dataclass
class Solution:
    lam: float
    psi: FourierSeries
    W: FourierSeries
    trace: IterationTrace
    residual: float
    deficit: float | None
    fp_defect: float
    E: TruncatedOperator | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return bool(self.trace.converged)


def pde_residual(lam: float, psi: FourierSeries, ctx: ProblemContext) -> float:
    """Relative L2 residual of the stationary equation for ``u = psi e^{i<P_j(t),x>}``.

    Computed exactly on Fourier coefficients (convolutions, no grid)."""
    if len(psi) == 0:
        return float("inf")
    base = np.asarray(ctx.j) + np.asarray(ctx.t)
    kin = FourierSeries(ctx.n, {s: float(np.sum((base + s) ** 2)) ** ctx.l * c for s, c in psi})
    if ctx.pair_only:
        zero, mq = (0,) * ctx.n, tuple(-x for x in ctx.q)
        coupled = FourierSeries(ctx.n, {
            zero: ctx.V[ctx.q] * psi[mq] + ctx.V[zero] * psi[zero],
            mq: ctx.V[mq] * psi[zero] + ctx.V[zero] * psi[mq]})
    else:
        coupled = multiply(ctx.V, psi)
    res = kin + coupled - psi.scale(lam)
    if ctx.amp.sigma != 0:
        res = res + multiply(modulus_squared(psi), psi).scale(ctx.amp.sigma)
    num = math.sqrt(sum(abs(c) ** 2 for _, c in res))
    den = abs(lam) * math.sqrt(sum(abs(c) ** 2 for _, c in psi))
    return num / den


def residual(sol: Solution, ctx: ProblemContext) -> float:
    return pde_residual(sol.lam, sol.psi, ctx)


def assemble_solution(W: FourierSeries, ctx: ProblemContext, trace: IterationTrace | None = None) -> Solution:
    """Final solve at W: eigenvalue, psi, two-wave deficit, residual and the
    fixed-point defect ``||M W - W||_*``."""
    MW, diag = apply_map(W, ctx)
    lam, E, psi = diag["lambda"], diag["E"], diag["psi"]
    deficit = None
    if ctx.mode == "resonant":
        deficit = two_wave_deficit(E, ctx.model[1], ctx.amp.A, ctx.branch)
    sol = Solution(lam=lam, psi=psi, W=W, trace=trace or IterationTrace(), residual=float("nan"),
                   deficit=deficit, fp_defect=star_norm(MW - W), E=E,
                   diagnostics={"lambda_series": diag["lambda_series"].diagnostics(),
                                "E_series": diag["E_series"].diagnostics()})
    if len(psi) == 0:
        # A = 0: the equation is linear, check the unit-amplitude eigenfunction
        unit = psi_from_projection(E, ctx.j, 1.0, ctx.window)
        sol.residual = pde_residual(lam, unit, ctx.with_(amp=Amplitude(1.0, 0.0)))
    else:
        sol.residual = pde_residual(lam, psi, ctx)
    return sol


def solve(ctx: ProblemContext) -> Solution:
    W, trace = iterate_fixed_point(ctx)
    return assemble_solution(W, ctx, trace)


@dataclass
class Check:
    name: str
    lhs: float
    rhs: float
    relation: str
    passed: bool

    def __str__(self):
        mark = "ok" if self.passed else "FAILED"
        return f"{self.name}: {self.lhs:.6g} {self.relation} {self.rhs:.6g} [{mark}]"


@dataclass
class RegimeReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self):
        return [c for c in self.checks if not c.passed]

    def __str__(self):
        return "\n".join(str(c) for c in self.checks)


def _lt(name, a, b):
    return Check(name, float(a), float(b), "<", bool(a < b))


def _gt(name, a, b):
    return Check(name, float(a), float(b), ">", bool(a > b))


def validate_regime(ctx: ProblemContext) -> RegimeReport:
    """Evaluate every smallness / separation inequality of the active mode."""
    sp = ctx.set_params
    checks = []
    s = ctx.amp.strength
    if sp.mode == "gpe2d":
        eps = sp.epsilon
        checks.append(Check("setting", ctx.l, 1, "==", ctx.l == 1 and ctx.n == 2))
        checks.append(_lt("||V||_* < eps^9", star_norm(ctx.V), eps**9))
        if ctx.mode == "resonant":
            checks.append(_gt("|v_q| > eps^10", abs(ctx.V[ctx.q]), eps**10))
        checks.append(_lt("|sigma||A|^2 < eps^11", s, eps**11))
    else:
        checks.append(_lt("9 delta < 2l - n", 9 * sp.delta, 2 * ctx.l - ctx.n))
        bound = ctx.amp_bound if ctx.amp_bound is not None else ctx.k ** (-2 * ctx.l * ctx.gamma2)
        checks.append(_lt("|sigma||A|^2 < amplitude bound", s, bound))
        if ctx.mode == "resonant":
            checks.append(_gt("|v_q| > 0", abs(ctx.V[ctx.q]), 0.0))
    if ctx.mode == "resonant":
        dec = chi_q_test(ctx.t, ctx.k, ctx.q, sp, ctx.l)
        ok = dec.accepted and dec.j == ctx.j
        checks.append(Check(f"resonant set membership ({dec.label})", float(ok), 1, "==", ok))
    else:
        dec = chi0_test(ctx.t, ctx.k, sp, ctx.l)
        ok = dec.accepted and dec.j == ctx.j
        checks.append(Check(f"non-resonant set membership ({dec.label})", float(ok), 1, "==", ok))
    return RegimeReport(checks)
