"""Plane-wave matrices on a finite lattice window.

Row/column ``a`` of every matrix corresponds to the lattice vector
``window.points[a]``; the multiplication operator by ``W`` has entries
``W[a, b] = w_{a-b}``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .fourier import FourierSeries


class ModelError(ValueError):
    pass


class SpectrumError(ValueError):
    """Resolvent requested at (or numerically on) an eigenvalue."""


@dataclass(frozen=True)
class LatticeWindow:
    """Box ``{j : |j_i - center_i| <= radius}`` enumerated lexicographically."""

    dim: int
    radius: int
    center: tuple = None

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be non-negative")
        c = (0,) * self.dim if self.center is None else tuple(int(v) for v in self.center)
        if len(c) != self.dim:
            raise ValueError("center has the wrong dimension")
        object.__setattr__(self, "center", c)

    @property
    def side(self) -> int:
        return 2 * self.radius + 1

    @property
    def size(self) -> int:
        return self.side**self.dim

    @property
    def points(self) -> np.ndarray:
        axes = [np.arange(-self.radius, self.radius + 1) + c for c in self.center]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1)

    def contains(self, j) -> bool:
        u = np.asarray(j) - self.center
        return bool(np.all(np.abs(u) <= self.radius))

    def index_of(self, j) -> int:
        if not self.contains(j):
            raise KeyError(f"{tuple(j)} lies outside the window")
        u = np.asarray(j) - self.center + self.radius
        return int(np.ravel_multi_index(tuple(u), (self.side,) * self.dim))

    def shift_pairs(self, q):
        """Index pairs (a, b) with ``points[a] - points[b] == q`` inside the window."""
        q = np.asarray(q, dtype=int)
        u = self.points - np.asarray(self.center) + self.radius
        v = u - q
        ok = np.all((v >= 0) & (v < self.side), axis=1)
        rows = np.flatnonzero(ok)
        cols = np.ravel_multi_index(tuple(v[ok].T), (self.side,) * self.dim)
        return rows, cols

    def to_dict(self) -> dict:
        return {"dim": self.dim, "radius": self.radius, "center": list(self.center)}


@dataclass
class TruncatedOperator:
    window: LatticeWindow
    matrix: np.ndarray
    truncated_mass: float = 0.0

    def __matmul__(self, other):
        m = other.matrix if isinstance(other, TruncatedOperator) else other
        return TruncatedOperator(self.window, self.matrix @ m)

    def __sub__(self, other):
        return TruncatedOperator(self.window, self.matrix - _mat(other))

    def __add__(self, other):
        return TruncatedOperator(self.window, self.matrix + _mat(other))

    def is_hermitian(self, rtol=1e-12) -> bool:
        m = self.matrix
        scale = max(np.abs(m).max(initial=0.0), 1.0)
        return bool(np.abs(m - m.conj().T).max(initial=0.0) <= rtol * scale)


def _mat(T):
    if isinstance(T, TruncatedOperator):
        return T.matrix
    if sparse.issparse(T):
        return T.toarray()
    return np.asarray(T)


def h0_levels(t, w: LatticeWindow, l: int) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return np.sum((w.points + t) ** 2, axis=1) ** l


def build_h0(t, w: LatticeWindow, l: int) -> TruncatedOperator:
    """Free operator: diagonal with entries ``|j + t|^(2l)``."""
    return TruncatedOperator(w, np.diag(h0_levels(t, w, l)).astype(complex))


def _mult_triplets(W: FourierSeries, w: LatticeWindow):
    rows, cols, vals, lost = [], [], [], 0.0
    for q, c in W:
        r, s = w.shift_pairs(q)
        if r.size == 0:
            lost += abs(c)
            continue
        rows.append(r)
        cols.append(s)
        vals.append(np.full(r.size, c, dtype=complex))
    if rows:
        return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), lost
    e = np.zeros(0, dtype=int)
    return e, e, np.zeros(0, dtype=complex), lost


def build_multiplication(W: FourierSeries, w: LatticeWindow) -> TruncatedOperator:
    """Dense matrix of multiplication by W; harmonics too long for the window
    are dropped and their mass recorded in ``truncated_mass``."""
    if W.dim != w.dim:
        raise ValueError("dimension mismatch between series and window")
    r, c, v, lost = _mult_triplets(W, w)
    m = np.zeros((w.size, w.size), dtype=complex)
    m[r, c] = v
    return TruncatedOperator(w, m, truncated_mass=lost)


def multiplication_sparse(W: FourierSeries, w: LatticeWindow) -> sparse.csr_matrix:
    r, c, v, _ = _mult_triplets(W, w)
    return sparse.csr_matrix((v, (r, c)), shape=(w.size, w.size))


def op_norm_zero(T) -> float:
    """Half the largest combined row+column absolute sum."""
    if sparse.issparse(T):
        a = abs(T)
        col = np.asarray(a.sum(axis=0)).ravel()
        row = np.asarray(a.sum(axis=1)).ravel()
    else:
        a = np.abs(_mat(T))
        if a.size == 0:
            return 0.0
        col = a.sum(axis=0)
        row = a.sum(axis=1)
    return 0.5 * float(np.max(col + row, initial=0.0))


def _phase_fix(v: np.ndarray) -> np.ndarray:
    v = v / np.linalg.norm(v)
    nz = np.flatnonzero(np.abs(v) > 0)
    if nz.size:
        f = v[nz[0]]
        v = v * (abs(f) / f)
        v[nz[0]] = abs(v[nz[0]])
    return v


@dataclass
class ModelBlock:
    """Closed-form data of the resonant 2x2 block on (j, j - q).

    Components of ``e_plus`` / ``e_minus`` are ordered (j, j - q).
    """

    j: tuple
    j_minus_q: tuple
    q: tuple
    p_j: float
    p_jq: float
    v_q: complex
    v_mq: complex
    a: float
    b: float
    lambda_plus: float
    lambda_minus: float
    e_plus: np.ndarray
    e_minus: np.ndarray
    idx: tuple = field(default=(None, None))

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.p_j, self.v_q], [self.v_mq, self.p_jq]], dtype=complex)

    def eigenvalue(self, branch: str = "plus") -> float:
        return self.lambda_plus if branch == "plus" else self.lambda_minus

    def vector(self, branch: str = "plus") -> np.ndarray:
        return self.e_plus if branch == "plus" else self.e_minus

    def eig_residual(self) -> float:
        m = self.matrix
        return max(
            float(np.linalg.norm(m @ self.e_plus - self.lambda_plus * self.e_plus)),
            float(np.linalg.norm(m @ self.e_minus - self.lambda_minus * self.e_minus)),
        )


def model_block(p_j: float, p_jq: float, v_q: complex, v_mq: complex | None = None,
                j=(0, 0), q=(1, 0), idx=(None, None)) -> ModelBlock:
    """Eigen-data of ``[[p_j, v_q], [v_-q, p_jq]]`` from the closed formulas."""
    v_q = complex(v_q)
    v_mq = np.conj(v_q) if v_mq is None else complex(v_mq)
    if v_q == 0:
        raise ModelError("the resonant coefficient v_q vanishes; the model is undefined")
    a = 0.5 * (p_j + p_jq)
    half = 0.5 * (p_j - p_jq)
    b = float(np.hypot(abs(v_q), half))
    vv = abs(v_q) ** 2
    # p_jq - lambda_plus = -half - b and p_j - lambda_minus = half + b,
    # each written without cancellation
    up = -(half + b) if half >= 0 else vv / (half - b)
    lo = (half + b) if half >= 0 else vv / (b - half)
    # with entry (j, j-q) = v_q the eigenvectors carry conj(v_q) = v_-q
    e_plus = _phase_fix(np.array([up, -v_mq], dtype=complex))
    e_minus = _phase_fix(np.array([-v_q, lo], dtype=complex))
    jq = tuple(int(x) - int(y) for x, y in zip(j, q))
    return ModelBlock(tuple(int(x) for x in j), jq, tuple(int(x) for x in q), float(p_j),
                      float(p_jq), v_q, v_mq, a, b, a + b, a - b, e_plus, e_minus, idx)


def build_model(t, j, q, V: FourierSeries, w: LatticeWindow, l: int):
    """Model operator: free operator plus the single coupling ``v_q`` between
    j and j - q. Returns (TruncatedOperator, ModelBlock)."""
    j = tuple(int(x) for x in j)
    q = tuple(int(x) for x in q)
    jq = tuple(a - b for a, b in zip(j, q))
    if not (w.contains(j) and w.contains(jq)):
        raise ModelError("j and j - q must both lie in the window")
    v_q, v_mq = V[q], V[tuple(-x for x in q)]
    if v_q == 0:
        raise ModelError("the resonant coefficient v_q vanishes; the model is undefined")
    lev = h0_levels(t, w, l)
    ij, ijq = w.index_of(j), w.index_of(jq)
    block = model_block(lev[ij], lev[ijq], v_q, v_mq, j=j, q=q, idx=(ij, ijq))
    m = np.diag(lev).astype(complex)
    m[ij, ijq] = v_q
    m[ijq, ij] = v_mq
    return TruncatedOperator(w, m), block


def pair_coupling(W: FourierSeries, j, q, w: LatticeWindow) -> TruncatedOperator:
    """Restriction of multiplication by W to the pair (j, j - q)."""
    j = tuple(int(x) for x in j)
    jq = tuple(a - int(b) for a, b in zip(j, q))
    ij, ijq = w.index_of(j), w.index_of(jq)
    zero = (0,) * w.dim
    m = np.zeros((w.size, w.size), dtype=complex)
    m[ij, ij] = m[ijq, ijq] = W[zero]
    m[ij, ijq] = W[tuple(q)]
    m[ijq, ij] = W[tuple(-int(x) for x in q)]
    return TruncatedOperator(w, m)


def model_projection(block: ModelBlock, branch: str, w: LatticeWindow) -> TruncatedOperator:
    """Rank-one spectral projection of the model for one branch."""
    e = block.vector(branch)
    ij, ijq = block.idx
    m = np.zeros((w.size, w.size), dtype=complex)
    sub = np.outer(e, e.conj())
    m[np.ix_([ij, ijq], [ij, ijq])] = sub
    return TruncatedOperator(w, m)


class ModelResolvent:
    """Closed-form resolvent of the model, evaluated at ``z = center + zeta``.

    Levels are stored relative to ``center`` so that small contours around an
    eigenvalue keep full relative precision.
    """

    def __init__(self, levels: np.ndarray, block: ModelBlock | None, center: float = 0.0):
        self.center = float(center)
        self.shifted = np.asarray(levels, dtype=float) - self.center
        self.block = block
        if block is not None:
            ij, ijq = block.idx
            self.bidx = np.array([ij, ijq])
            self.shifted[self.bidx] = np.inf  # handled separately
            self.bvals = np.array([block.lambda_plus - self.center, block.lambda_minus - self.center])
            if block.lambda_plus == self.center:
                self.bvals[0] = 0.0
            if block.lambda_minus == self.center:
                self.bvals[1] = 0.0
            self.bvecs = np.stack([block.e_plus, block.e_minus], axis=1)
        else:
            self.bidx = None

    def distance(self, zeta: complex) -> float:
        d = np.min(np.abs(self.shifted - zeta), initial=np.inf)
        if self.bidx is not None:
            d = min(d, float(np.min(np.abs(self.bvals - zeta))))
        return float(d)

    def diag_inverse(self, zeta) -> np.ndarray:
        """``1 / (level - z)`` off the block (zero on the block rows)."""
        zeta = np.atleast_1d(np.asarray(zeta, dtype=complex))
        with np.errstate(divide="ignore"):
            out = 1.0 / (self.shifted[None, :] - zeta[:, None])
        return out

    def apply(self, zeta: complex, X: np.ndarray) -> np.ndarray:
        """``(H_model - z)^{-1} X`` for a matrix or vector X."""
        X = np.asarray(X)
        d = 1.0 / (self.shifted - zeta)
        d[~np.isfinite(self.shifted)] = 0.0
        out = d.reshape((-1,) + (1,) * (X.ndim - 1)) * X
        if self.bidx is not None:
            inv = 1.0 / (self.bvals - zeta)
            xb = X[self.bidx]
            coeffs = self.bvecs.conj().T @ xb
            out[self.bidx] = self.bvecs @ (inv.reshape((2,) + (1,) * (X.ndim - 1)) * coeffs)
        return out


def resolvent_apply(model: TruncatedOperator, block: ModelBlock | None, z: complex, X,
                    l: int | None = None, t=None) -> TruncatedOperator:
    """Apply ``(H_model - z)^{-1}`` to X using the closed form.

    The free levels are read from the model diagonal; the block rows use the
    explicit 2x2 spectral decomposition.
    """
    levels = np.real(np.diag(model.matrix)).copy()
    R = ModelResolvent(levels, block, 0.0)
    if R.distance(z) <= 1e-12 * max(abs(z), 1.0):
        raise SpectrumError(f"z = {z} lies on the model spectrum")
    out = R.apply(complex(z), _mat(X))
    return TruncatedOperator(model.window, out)


def dump_operator(T: TruncatedOperator) -> str:
    """Debug dump: JSON matrix of [re, im] pairs with window metadata."""
    m = _mat(T)
    payload = {
        "window": T.window.to_dict(),
        "matrix": [[[float(x.real), float(x.imag)] for x in row] for row in m],
    }
    return json.dumps(payload)


def load_operator(text: str) -> TruncatedOperator:
    data = json.loads(text)
    w = LatticeWindow(data["window"]["dim"], data["window"]["radius"], tuple(data["window"]["center"]))
    arr = np.array(data["matrix"], dtype=float)
    return TruncatedOperator(w, arr[..., 0] + 1j * arr[..., 1])
