"""Quasimomentum geometry: Bloch vectors, von Laue defect, resonant and
non-resonant set membership, and Monte Carlo sampling of resonant layers.

Wave vectors are ``P_j(t) = j + t`` with integer ``j`` and ``t`` in [0,1)^n.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

log = logging.getLogger(__name__)

WITNESS_RTOL = 1e-9


class WindowError(ValueError):
    """The scanned lattice window cannot certify the requested property."""


class EmptyLayerError(ValueError):
    pass


@dataclass(frozen=True)
class SetParams:
    """Parameters of the resonant / non-resonant set tests.

    mode is ``"poly"`` (the 2l > n setting, bounds in powers of k) or
    ``"gpe2d"`` (two-dimensional l = 1 setting, bounds in powers of epsilon).
    """

    delta: float = 0.2
    epsilon: float = 0.2
    window_radius: int = 12
    mode: str = "poly"
    prefactor: float = 1.0
    witness_rtol: float = WITNESS_RTOL

    def __post_init__(self):
        if self.mode not in ("poly", "gpe2d"):
            raise ValueError(f"unknown set mode {self.mode!r}")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.window_radius < 1:
            raise ValueError("window_radius must be >= 1")

    def near_bound(self, k: float, n: int) -> float:
        """Bound on |p_{j-q}^2 - p_j^2| for the resonant pair."""
        if self.mode == "gpe2d":
            return self.epsilon
        return self.prefactor * k ** (-n + 2 - self.delta)

    def separation_bound(self, k: float, n: int) -> float:
        """Lower bound on the squared-level gaps to every other index."""
        if self.mode == "gpe2d":
            return 2 * self.epsilon**6
        return 2 * self.prefactor * k ** (-n + 2 - 6 * self.delta)

    def layer_bound(self, k: float, n: int) -> float:
        """Half-width of the spherical layer around the von Laue plane."""
        if self.mode == "gpe2d":
            return self.epsilon
        return 4 * self.prefactor * k ** (-n + 2 - self.delta)


@dataclass
class Decision:
    accepted: bool
    j: tuple | None = None
    reason: str = ""
    witness: tuple | None = None
    defect: float = float("nan")
    min_gap: float = float("nan")
    notes: list = field(default_factory=list)

    @property
    def label(self) -> str:
        return "accept" if self.accepted else f"reject:{self.reason}"


def bloch_vector(j, t) -> np.ndarray:
    j = np.asarray(j, dtype=float)
    t = np.asarray(t, dtype=float)
    if j.shape != t.shape:
        raise ValueError("j and t must have the same dimension")
    return j + t


def fold_to_cell(x):
    """Decompose ``x = j + t`` with integer j and t in [0,1)^n."""
    x = np.asarray(x, dtype=float)
    j = np.floor(x)
    t = x - j
    # guard against t == 1.0 from rounding of tiny negative parts
    over = t >= 1.0
    j[over] += 1
    t[over] -= 1.0
    return tuple(int(v) for v in j), t


def von_laue_defect(j, q, t) -> float:
    """``|P_j(t)|^2 - |P_{j-q}(t)|^2 = 2 <q, j+t> - |q|^2``."""
    q = np.asarray(q, dtype=float)
    if not np.any(q):
        raise ValueError("q must be nonzero")
    x = bloch_vector(j, t)
    return float(2 * np.dot(q, x) - np.dot(q, q))


@lru_cache(maxsize=32)
def _window_points(n: int, M: int) -> np.ndarray:
    axes = [np.arange(-M, M + 1)] * n
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


def _check_window(k: float, p: SetParams):
    if p.window_radius < np.ceil(k) + 1:
        raise WindowError(
            f"window radius {p.window_radius} cannot cover the sphere of radius {k:.6g}"
        )


def _witness(pts, sq, k, p: SetParams):
    """Indices whose wave vector has length k (relative tolerance)."""
    hits = np.flatnonzero(np.abs(np.sqrt(sq) - k) <= p.witness_rtol * k)
    return hits


def _choose_witness(pts, hits, dec_notes, q=None):
    cands = sorted(tuple(int(v) for v in pts[h]) for h in hits)
    if q is not None and len(cands) > 1:
        # on a von Laue plane both members of the pair are witnesses; label
        # the pair by the member whose partner j - q is also on the sphere
        paired = [c for c in cands if tuple(a - b for a, b in zip(c, q)) in cands]
        if paired:
            cands = paired + [c for c in cands if c not in paired]
    if len(cands) > 1:
        msg = f"several witnesses {cands}; using {cands[0]}"
        log.info(msg)
        dec_notes.append(msg)
    return cands[0]


def chi0_test(t, k: float, p: SetParams, l: int) -> Decision:
    """Non-resonant set test: unique witness with an isolated level."""
    t = np.asarray(t, dtype=float)
    n = t.size
    _check_window(k, p)
    pts = _window_points(n, p.window_radius)
    sq = np.sum((pts + t) ** 2, axis=1)
    notes: list = []
    hits = _witness(pts, sq, k, p)
    if hits.size == 0:
        return Decision(False, reason="no_witness")
    j = _choose_witness(pts, hits, notes)
    jj = int(np.flatnonzero(np.all(pts == j, axis=1))[0])
    lev = sq**l
    gaps = np.abs(lev - lev[jj])
    gaps[jj] = np.inf
    m = int(np.argmin(gaps))
    bound = p.prefactor * k ** (2 * l - n - p.delta)
    dec = Decision(gaps[m] > bound, j=j, min_gap=float(gaps[m]), notes=notes)
    if not dec.accepted:
        dec.reason = "gap"
        dec.witness = tuple(int(v) for v in pts[m])
    return dec


def chi_q_test(t, k: float, q, p: SetParams, l: int = 1) -> Decision:
    """Resonant set test for the pair (j, j - q).

    ``l`` is accepted for signature symmetry; the printed conditions use
    squared levels in both modes.
    """
    t = np.asarray(t, dtype=float)
    q = tuple(int(v) for v in q)
    n = t.size
    if not any(q):
        raise ValueError("q must be nonzero")
    _check_window(k, p)
    pts = _window_points(n, p.window_radius)
    sq = np.sum((pts + t) ** 2, axis=1)
    notes: list = []
    hits = _witness(pts, sq, k, p)
    if hits.size == 0:
        return Decision(False, reason="no_witness")
    j = _choose_witness(pts, hits, notes, q)
    jq = tuple(a - b for a, b in zip(j, q))
    defect = von_laue_defect(j, q, t)
    sq_j = float(np.sum((np.asarray(j) + t) ** 2))
    dec = Decision(False, j=j, defect=defect, notes=notes)
    if abs(defect) >= p.near_bound(k, n):
        dec.reason = "near_degeneracy"
        dec.witness = jq
        return dec
    others = ~(np.all(pts == j, axis=1) | np.all(pts == jq, axis=1))
    gaps = np.abs(sq_j - sq)
    gaps[~others] = np.inf
    m = int(np.argmin(gaps))
    dec.min_gap = float(gaps[m])
    if gaps[m] <= p.separation_bound(k, n):
        dec.reason = "separation"
        dec.witness = tuple(int(v) for v in pts[m])
        return dec
    dec.accepted = True
    return dec


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based 64-bit generator so runs replay exactly."""
    return np.random.Generator(np.random.Philox(int(seed)))


def _orthonormal_frame(u: np.ndarray):
    a = np.eye(3)[int(np.argmin(np.abs(u)))]
    e1 = np.cross(u, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    return e1, e2


def layer_points(k: float, q, bound: float, count: int, rng) -> np.ndarray:
    """Uniform points on ``{|x| = k, ||x|^2 - |x - q|^2| < bound}``."""
    q = np.asarray(q, dtype=float)
    n = q.size
    nq = np.linalg.norm(q)
    # the defect along the sphere is 2 k |q| cos(phi) - |q|^2
    c_lo = (nq**2 - bound) / (2 * k * nq)
    c_hi = (nq**2 + bound) / (2 * k * nq)
    if bound <= 0 or c_lo >= 1 or c_hi <= -1:
        raise EmptyLayerError("the layer does not meet the sphere")
    c_lo, c_hi = max(c_lo, -1.0), min(c_hi, 1.0)
    u = q / nq
    if n == 2:
        phi_lo, phi_hi = np.arccos(c_hi), np.arccos(c_lo)
        phi = rng.uniform(phi_lo, phi_hi, size=count)
        sign = np.where(rng.random(count) < 0.5, -1.0, 1.0)
        theta = np.arctan2(u[1], u[0]) + sign * phi
        return k * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    if n == 3:
        c = rng.uniform(c_lo, c_hi, size=count)
        az = rng.uniform(0.0, 2 * np.pi, size=count)
        s = np.sqrt(np.clip(1 - c**2, 0.0, None))
        e1, e2 = _orthonormal_frame(u)
        dirs = (c[:, None] * u + (s * np.cos(az))[:, None] * e1 + (s * np.sin(az))[:, None] * e2)
        return k * dirs
    raise ValueError("layers are implemented for n = 2 and 3")


def points_with_defect(k: float, q, defect: float, azimuths: int = 8) -> np.ndarray:
    """Points of the sphere ``|x| = k`` with ``|x|^2 - |x - q|^2 = defect``."""
    q = np.asarray(q, dtype=float)
    nq = np.linalg.norm(q)
    u = q / nq
    c = (defect + nq**2) / (2 * nq)
    if abs(c) >= k:
        return np.zeros((0, q.size))
    s = np.sqrt(k * k - c * c)
    if q.size == 2:
        perp = np.array([-u[1], u[0]])
        return np.stack([c * u + s * perp, c * u - s * perp])
    e1, e2 = _orthonormal_frame(u)
    az = 2 * np.pi * np.arange(azimuths) / azimuths
    return c * u + s * (np.cos(az)[:, None] * e1 + np.sin(az)[:, None] * e2)


def sample_resonant_layer(k: float, q, p: SetParams, count: int, seed: int, l: int = 1):
    """Draw points on the resonant layer, fold them into the cell and test them.

    Returns a list of ``(t, decision)`` pairs.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    n = len(q)
    bound = p.layer_bound(k, n)
    rng = make_rng(seed)
    xs = layer_points(k, q, bound, count, rng)
    out = []
    for x in xs:
        j, t = fold_to_cell(x)
        kk = float(np.linalg.norm(x))
        dec = chi_q_test(t, kk, q, p, l)
        if dec.j is None:
            dec.j = j
        out.append((t, dec))
    return out


def measure_fraction(k: float, q, p: SetParams, count: int, seed: int, l: int = 1) -> float:
    """Fraction of layer samples rejected by the resonant set test."""
    samples = sample_resonant_layer(k, q, p, count, seed, l)
    rejected = sum(1 for _, d in samples if not d.accepted)
    return rejected / len(samples)


def binomial_sigma(frac: float, count: int) -> float:
    return float(np.sqrt(max(frac * (1 - frac), 1.0 / count) / count))


def samples_to_csv(samples, seed: int) -> str:
    """Render sampler output as CSV text."""
    if not samples:
        return ""
    n = len(samples[0][0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"t_{i+1}" for i in range(n)] + [f"j_{i+1}" for i in range(n)]
               + ["decision", "defect", "min_gap", "seed"])
    for t, d in samples:
        j = d.j if d.j is not None else ("",) * n
        w.writerow([repr(float(v)) for v in t] + list(j)
                   + [d.label, repr(float(d.defect)), repr(float(d.min_gap)), seed])
    return buf.getvalue()
