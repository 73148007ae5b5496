"""Contour-integral perturbation series around the free and model operators,
the dense eigensolver used to check them, and finite-difference gradients.

Conventions: for a perturbation ``B`` of a reference operator ``H_ref`` with
resolvent ``R(z)``, the order-r terms are

    g_r = (-1)^r / (2 pi i r) Tr  oint (R B)^r dz
    G_r = (-1)^(r+1) / (2 pi i) oint (R B)^r R dz

and ``lambda = lambda_ref + sum g_r``, ``E = E_ref + sum G_r``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .fourier import FourierSeries, mean_split
from .operators import (LatticeWindow, ModelBlock, ModelResolvent, TruncatedOperator,
                        build_model, h0_levels, multiplication_sparse, op_norm_zero,
                        pair_coupling)

log = logging.getLogger(__name__)


class ContourError(ValueError):
    pass


class SeriesDivergence(RuntimeError):
    def __init__(self, msg, terms):
        super().__init__(msg)
        self.terms = terms


class OracleAmbiguity(ValueError):
    def __init__(self, msg, candidates):
        super().__init__(msg)
        self.candidates = list(candidates)


class GradientError(RuntimeError):
    pass


@dataclass(frozen=True)
class Contour:
    """Circle ``|z - center| = radius`` sampled at ``nodes`` equispaced points."""

    center: float
    radius: float
    nodes: int = 64

    def __post_init__(self):
        if self.radius <= 0:
            raise ContourError("contour radius must be positive")
        if self.nodes < 4:
            raise ContourError("need at least 4 quadrature nodes")

    def offsets(self) -> np.ndarray:
        theta = 2 * np.pi * (np.arange(self.nodes) + 0.5) / self.nodes
        return self.radius * np.exp(1j * theta)

    def weights(self) -> np.ndarray:
        """Trapezoid weights for ``oint f dz`` at :meth:`offsets`."""
        return 1j * self.offsets() * (2 * np.pi / self.nodes)


def resonant_contour(block: ModelBlock, branch: str = "plus", mode: str = "poly",
                     epsilon: float | None = None, nodes: int = 64) -> Contour:
    """Circle around the chosen model eigenvalue.

    Radius ``|v_q| / 10`` in the polyharmonic setting, ``epsilon**10 / 4`` in the
    two-dimensional setting.
    """
    if mode == "gpe2d":
        if epsilon is None:
            raise ContourError("gpe2d contour needs epsilon")
        radius = epsilon**10 / 4
    else:
        radius = abs(block.v_q) / 10
    return Contour(block.eigenvalue(branch), radius, nodes)


def nonresonant_contour(k: float, l: int, n: int, delta: float, nodes: int = 64) -> Contour:
    """Circle around ``k^(2l)`` of radius ``k^(2l - n - delta)``."""
    return Contour(k ** (2 * l), k ** (2 * l - n - delta), nodes)


@dataclass
class SeriesResult:
    value: object
    terms: list
    r_used: int
    converged: bool
    coefficients: list = field(default_factory=list)

    def diagnostics(self, oracle_gap=None) -> dict:
        return {"r_used": self.r_used, "terms": [float(x) for x in self.terms],
                "converged": bool(self.converged),
                "oracle_gap": None if oracle_gap is None else float(oracle_gap)}


def _check_contour(contour: Contour, R: ModelResolvent, expected_inside: int = 1):
    vals = R.shifted[np.isfinite(R.shifted)] + R.center
    if R.bidx is not None:
        vals = np.concatenate([vals, R.bvals + R.center])
    dist = np.abs(vals - contour.center)
    if np.any(np.abs(dist - contour.radius) <= 1e-9 * contour.radius):
        raise ContourError("a reference eigenvalue lies on the contour")
    inside = int(np.sum(dist < contour.radius))
    if inside != expected_inside:
        raise ContourError(f"contour encloses {inside} reference eigenvalues, expected {expected_inside}")


def _apply_cols(R: ModelResolvent, zetas: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Column k of the result is ``R(center + zetas[k]) Y[:, k]``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        D = 1.0 / (R.shifted[:, None] - zetas[None, :])
    D[~np.isfinite(R.shifted)] = 0.0
    out = D * Y
    if R.bidx is not None:
        inv = 1.0 / (R.bvals[:, None] - zetas[None, :])  # 2 x Nz
        coeffs = R.bvecs.conj().T @ Y[R.bidx]
        out[R.bidx] = R.bvecs @ (inv * coeffs)
    return out


def _series_column(R: ModelResolvent, contour: Contour, B, ist: int, c0: np.ndarray,
                   href_row, r_max: int, tol: float):
    """Series via contour integrals of one column of each term.

    The summed projection is rank one and Hermitian, so it is fixed by its
    column ``ist``; the order-r eigenvalue and projection terms are the
    Taylor coefficients of ``(H c)_ist / c_ist`` and ``c c^H / c_ist`` in the
    coupling strength. ``href_row(x)`` returns ``((H_ref - center) x)_ist``.
    """
    N = c0.size
    zetas = contour.offsets()
    wq = contour.weights()
    pref = 1.0 / (2j * np.pi)
    e = np.zeros(N, dtype=complex)
    e[ist] = 1.0
    Y = _apply_cols(R, zetas, np.repeat(e[:, None], zetas.size, axis=1))
    cs = [c0.astype(complex)]
    D = [cs[0][ist]]
    d = [1.0 / D[0]]
    Nn = [href_row(cs[0])]
    lam = []
    E_terms = []
    terms = []
    converged = False
    r = 0
    for r in range(1, r_max + 1):
        Y = _apply_cols(R, zetas, B @ Y)
        c_r = ((-1) ** (r + 1)) * pref * (Y @ wq)
        cs.append(c_r)
        D.append(c_r[ist])
        d.append(-sum(D[s] * d[r - s] for s in range(1, r + 1)) / D[0])
        Nn.append(href_row(c_r) + (B @ cs[r - 1])[ist])
        lam_r = sum(Nn[s] * d[r - s] for s in range(r + 1))
        lam.append(lam_r)
        # g_m = sum_{u+w=m} c_u conj(d_w), E_r = sum_s c_s g_{r-s}^H
        g = [sum(cs[u] * np.conj(d[m - u]) for u in range(m + 1)) for m in range(r + 1)]
        C = np.stack(cs, axis=1)
        G = np.stack(g[::-1], axis=1)
        E_r = C @ G.conj().T
        E_terms.append(E_r)
        tl, te = abs(lam_r), op_norm_zero(E_r)
        terms.append((tl, te))
        if tl <= tol and te <= tol:
            converged = True
            break
        size = [max(a, b) for a, b in terms]
        if len(size) >= 4 and size[-1] > size[-2] > size[-3] > size[-4]:
            raise SeriesDivergence(f"series terms grew for 3 consecutive orders (r = {r})", terms)
    lam0 = Nn[0] * d[0]
    return lam0, lam, E_terms, terms, converged, r


def _series_full(R: ModelResolvent, contour: Contour, B, P0: np.ndarray, r_max: int, tol: float):
    """Literal evaluation of every term with full matrices (small windows)."""
    N = P0.shape[0]
    Bd = B.toarray() if sparse.issparse(B) else np.asarray(B)
    zetas = contour.offsets()
    wq = contour.weights()
    pref = 1.0 / (2j * np.pi)
    eye = np.eye(N, dtype=complex)
    Rz = np.stack([R.apply(z, eye) for z in zetas])  # Nz x N x N
    RB = Rz @ Bd
    Y = np.broadcast_to(eye, Rz.shape).copy()
    lam, E_terms, terms = [], [], []
    converged = False
    r = 0
    for r in range(1, r_max + 1):
        Y = RB @ Y
        tr = np.trace(Y, axis1=1, axis2=2)
        g_r = ((-1) ** r) * pref / r * np.dot(wq, tr)
        G_r = ((-1) ** (r + 1)) * pref * np.tensordot(wq, Y @ Rz, axes=(0, 0))
        lam.append(g_r)
        E_terms.append(G_r)
        tl, te = abs(g_r), op_norm_zero(G_r)
        terms.append((tl, te))
        if tl <= tol and te <= tol:
            converged = True
            break
        size = [max(a, b) for a, b in terms]
        if len(size) >= 4 and size[-1] > size[-2] > size[-3] > size[-4]:
            raise SeriesDivergence(f"series terms grew for 3 consecutive orders (r = {r})", terms)
    return lam, E_terms, terms, converged, r


def _finish(window, base_value, lam_terms, E0, E_terms, terms, converged, r, shift=0.0):
    lam_val = float(np.real(base_value + sum(lam_terms) + shift))
    E = E0.astype(complex).copy()
    for G in E_terms:
        E += G
    lam_res = SeriesResult(lam_val, [t[0] for t in terms], r, converged,
                           coefficients=[complex(x) for x in lam_terms])
    E_res = SeriesResult(TruncatedOperator(window, E), [t[1] for t in terms], r, converged)
    return lam_res, E_res


def dominant_index(block: ModelBlock, branch: str = "plus") -> int:
    e = block.vector(branch)
    return block.idx[0] if abs(e[0]) >= abs(e[1]) else block.idx[1]


def resonant_series(t, j, q, W: FourierSeries, V: FourierSeries, w: LatticeWindow, l: int,
                    contour: Contour | None = None, r_max: int = 30, tol: float = 1e-12,
                    branch: str = "plus", method: str = "column", model=None,
                    pair_only: bool = False, split_mean: bool = False):
    """Eigenvalue and projection of ``H0 + W`` near the model eigenvalue.

    The reference operator is the model built from V; the perturbation is
    ``W - P V P`` with P the projection onto the resonant pair. ``model`` may
    pass a prebuilt ``(operator, block)`` pair. With ``pair_only`` the
    operator studied is ``H0 + P W P`` (W acts only inside the pair).
    ``split_mean`` moves the constant part of W out of the series and adds
    it to the eigenvalue (exact: it is a multiple of the identity).
    """
    shift = 0.0
    if split_mean and not pair_only:
        W, mean = mean_split(W)
        shift = mean.real
    if model is None:
        model = build_model(t, j, q, V, w, l)
    _, block = model
    if contour is None:
        contour = resonant_contour(block, branch)
    lev = h0_levels(t, w, l)
    R = ModelResolvent(lev, block, contour.center)
    _check_contour(contour, R)
    if pair_only:
        B = sparse.lil_matrix(pair_coupling(W, j, q, w).matrix)
    else:
        B = multiplication_sparse(W, w).tolil()
    ij, ijq = block.idx
    B[ij, ijq] -= block.v_q
    B[ijq, ij] -= block.v_mq
    B = B.tocsr()
    B.eliminate_zeros()
    e = block.vector(branch)
    P0 = np.zeros((w.size, w.size), dtype=complex)
    P0[np.ix_([ij, ijq], [ij, ijq])] = np.outer(e, e.conj())
    lam_ref = block.eigenvalue(branch)
    if method == "full":
        lam, E_terms, terms, conv, r = _series_full(R, contour, B, P0, r_max, tol)
        return _finish(w, lam_ref, lam, P0, E_terms, terms, conv, r, shift=shift)
    ist = dominant_index(block, branch)
    partner = ijq if ist == ij else ij
    coupling = block.v_q if ist == ij else block.v_mq
    shift_ist = lev[ist] - contour.center

    def href_row(x):
        return shift_ist * x[ist] + coupling * x[partner]

    _, lam, E_terms, terms, conv, r = _series_column(R, contour, B, ist, P0[:, ist], href_row, r_max, tol)
    return _finish(w, lam_ref, lam, P0, E_terms, terms, conv, r, shift=shift)


def nonresonant_series(t, j, W: FourierSeries, w: LatticeWindow, l: int,
                       contour: Contour | None = None, r_max: int = 30, tol: float = 1e-12,
                       delta: float = 0.2, method: str = "column"):
    """Eigenvalue and projection of ``H0 + W`` near the free level ``p_j``.

    The constant part of W is split off and added back to the eigenvalue.
    """
    t = np.asarray(t, dtype=float)
    j = tuple(int(x) for x in j)
    Wt, mean = mean_split(W)
    lev = h0_levels(t, w, l)
    ij = w.index_of(j)
    k = float(np.linalg.norm(np.asarray(j) + t))
    if contour is None:
        contour = nonresonant_contour(k, l, t.size, delta)
    R = ModelResolvent(lev, None, contour.center)
    _check_contour(contour, R)
    B = multiplication_sparse(Wt, w)
    P0 = np.zeros((w.size, w.size), dtype=complex)
    P0[ij, ij] = 1.0
    if method == "full":
        lam, E_terms, terms, conv, r = _series_full(R, contour, B, P0, r_max, tol)
        return _finish(w, lev[ij], lam, P0, E_terms, terms, conv, r, shift=mean.real)
    shift_ist = lev[ij] - contour.center

    def href_row(x):
        return shift_ist * x[ij]

    _, lam, E_terms, terms, conv, r = _series_column(R, contour, B, ij, P0[:, ij], href_row, r_max, tol)
    return _finish(w, lev[ij], lam, P0, E_terms, terms, conv, r, shift=mean.real)


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float


@dataclass(frozen=True)
class Nearest:
    x: float


def _phase_fix_vec(v):
    v = v / np.linalg.norm(v)
    i = int(np.argmax(np.abs(v) > 0))
    f = v[i]
    return v * (abs(f) / f) if f != 0 else v


def direct_oracle(t, W: FourierSeries, w: LatticeWindow, l: int, selector, coupling=None):
    """Dense Hermitian eigensolve of ``H0 + W`` on the window.

    ``coupling`` replaces the multiplication matrix of W when given (for
    instance a pair-restricted operator). Returns (eigenvalue, projection,
    unit eigenvector).
    """
    H = np.diag(h0_levels(t, w, l)).astype(complex)
    if coupling is None:
        H += multiplication_sparse(W, w).toarray()
    else:
        H += coupling.matrix if isinstance(coupling, TruncatedOperator) else np.asarray(coupling)
    herm = np.abs(H - H.conj().T).max()
    if herm > 1e-12 * max(1.0, np.abs(H).max()):
        raise ValueError(f"operator is not Hermitian (defect {herm:.3g})")
    vals, vecs = np.linalg.eigh(H)
    if isinstance(selector, Interval):
        hits = np.flatnonzero((vals > selector.lo) & (vals < selector.hi))
        if hits.size != 1:
            raise OracleAmbiguity(
                f"{hits.size} eigenvalues in ({selector.lo:.12g}, {selector.hi:.12g})",
                vals[hits].tolist())
        i = int(hits[0])
    elif isinstance(selector, Nearest):
        i = int(np.argmin(np.abs(vals - selector.x)))
    else:
        raise TypeError("selector must be Interval or Nearest")
    v = _phase_fix_vec(vecs[:, i])
    E = np.outer(v, v.conj())
    return float(vals[i]), TruncatedOperator(w, E), v


def gradient_lambda(solve, t, h: float = 1e-5, richardson: bool = False):
    """Central-difference gradient of ``solve(t)``.

    Returns (gradient, error estimate); the estimate is the Richardson
    correction when ``richardson`` is set, else NaN.
    """
    t = np.asarray(t, dtype=float)

    def central(step):
        g = np.empty(t.size)
        for s in range(t.size):
            e = np.zeros(t.size)
            e[s] = step
            try:
                g[s] = (solve(t + e) - solve(t - e)) / (2 * step)
            except Exception as exc:  # noqa: BLE001 - any failure of the recipe
                raise GradientError(f"stencil solve failed along axis {s}: {exc}") from exc
        return g

    g1 = central(h)
    if not richardson:
        return g1, float("nan")
    g2 = central(h / 2)
    g = (4 * g2 - g1) / 3
    return g, float(np.linalg.norm(g - g2))


def model_gradient(t, j, q, v_q: complex, l: int, branch: str = "plus") -> np.ndarray:
    """Analytic gradient of ``a +- b`` in t."""
    t = np.asarray(t, dtype=float)
    Pj = np.asarray(j) + t
    Pq = np.asarray(j) - np.asarray(q) + t
    sj, sq = Pj @ Pj, Pq @ Pq
    pj, pq = sj**l, sq**l
    dpj = 2 * l * sj ** (l - 1) * Pj
    dpq = 2 * l * sq ** (l - 1) * Pq
    half = 0.5 * (pj - pq)
    b = np.hypot(abs(v_q), half)
    da = 0.5 * (dpj + dpq)
    db = half * 0.5 * (dpj - dpq) / b
    return da + db if branch == "plus" else da - db


def two_wave_deficit(E, block: ModelBlock, A: complex = 1.0, branch: str = "plus") -> float:
    """Wiener norm of the part of ``psi / A`` not explained by the model pair."""
    m = E.matrix if isinstance(E, TruncatedOperator) else np.asarray(E)
    ij, ijq = block.idx
    e = block.vector(branch)
    scale = A if A != 0 else 1.0
    psi = scale * m[:, ij]
    ref = np.zeros_like(psi)
    ref[ij] = scale * e[0] * np.conj(e[0])
    ref[ijq] = scale * e[1] * np.conj(e[0])
    return float(np.sum(np.abs(psi - ref)) / abs(scale))
