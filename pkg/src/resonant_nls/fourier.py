"""Finite Fourier series on the integer lattice.

A series is a finite map ``q -> c_q`` standing for the 2pi-periodic function
``f(x) = sum_q c_q exp(i <q, x>)``.
"""
from __future__ import annotations

import json
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np
from scipy import signal

ZERO_THRESHOLD = 1e-300


def _key(q) -> tuple:
    return tuple(int(v) for v in q)


class FourierSeries:
    """Immutable finite Fourier series.

    Coefficients with modulus at or below ``ZERO_THRESHOLD`` are dropped at
    construction (exact zeros only; numerical truncation is explicit, see
    :func:`truncate`).
    """

    __slots__ = ("_dim", "_coeffs", "_radius")

    def __init__(self, dim: int, coeffs: Mapping | Iterable = ()):
        if dim not in (1, 2, 3):
            raise ValueError(f"unsupported dimension {dim}")
        items = coeffs.items() if isinstance(coeffs, Mapping) else coeffs
        store = {}
        for q, c in items:
            k = _key(q)
            if len(k) != dim:
                raise ValueError(f"harmonic {k} does not have dimension {dim}")
            c = complex(c)
            if not np.isfinite(c):
                raise ValueError(f"non-finite coefficient at {k}")
            if abs(c) > ZERO_THRESHOLD:
                store[k] = store.get(k, 0j) + c
        store = {k: v for k, v in sorted(store.items()) if abs(v) > ZERO_THRESHOLD}
        self._dim = dim
        self._coeffs = MappingProxyType(store)
        self._radius = max((float(np.linalg.norm(k)) for k in store), default=0.0)

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def coeffs(self) -> Mapping:
        return self._coeffs

    @property
    def support_radius(self) -> float:
        """Largest Euclidean norm among stored harmonics."""
        return self._radius

    @property
    def max_component(self) -> int:
        return max((max(abs(v) for v in k) for k in self._coeffs), default=0)

    def __getitem__(self, q) -> complex:
        return self._coeffs.get(_key(q), 0j)

    def __len__(self):
        return len(self._coeffs)

    def __iter__(self):
        return iter(self._coeffs.items())

    def __repr__(self):
        body = ", ".join(f"{k}: {v:.6g}" for k, v in self._coeffs.items())
        return f"FourierSeries(dim={self._dim}, {{{body}}})"

    def __eq__(self, other):
        if not isinstance(other, FourierSeries):
            return NotImplemented
        return self._dim == other._dim and dict(self._coeffs) == dict(other._coeffs)

    def __hash__(self):
        return hash((self._dim, tuple(self._coeffs.items())))

    def __reduce__(self):
        return (FourierSeries, (self._dim, dict(self._coeffs)))

    def __copy__(self):
        return self

    def __deepcopy__(self, memo):
        return self  # immutable

    def __add__(self, other: "FourierSeries") -> "FourierSeries":
        _check_dims(self, other)
        out = dict(self._coeffs)
        for k, v in other:
            out[k] = out.get(k, 0j) + v
        return FourierSeries(self._dim, out)

    def __neg__(self):
        return self.scale(-1.0)

    def __sub__(self, other: "FourierSeries") -> "FourierSeries":
        return self + (-other)

    def scale(self, c: complex) -> "FourierSeries":
        return FourierSeries(self._dim, {k: c * v for k, v in self._coeffs.items()})

    def is_hermitian_symbol(self, tol: float = 0.0) -> bool:
        """True when ``c(-q) == conj(c(q))``, i.e. the function is real."""
        for k, v in self._coeffs.items():
            m = tuple(-x for x in k)
            if abs(self[m] - np.conj(v)) > tol * max(1.0, abs(v)):
                return False
        return True

    def allclose(self, other: "FourierSeries", atol: float = 0.0) -> bool:
        """Coefficientwise agreement within ``atol`` over the union of supports."""
        _check_dims(self, other)
        keys = set(self._coeffs) | set(other.coeffs)
        return all(abs(self[k] - other[k]) <= atol for k in keys)

    def keys_array(self) -> np.ndarray:
        return np.array(list(self._coeffs.keys()), dtype=int).reshape(-1, self._dim)

    def values_array(self) -> np.ndarray:
        return np.array(list(self._coeffs.values()), dtype=complex)

    @classmethod
    def zero(cls, dim: int) -> "FourierSeries":
        return cls(dim, {})

    @classmethod
    def constant(cls, dim: int, c: complex) -> "FourierSeries":
        return cls(dim, {(0,) * dim: c})

    # serialization
    def to_dict(self) -> dict:
        return {
            "dim": self._dim,
            "coeffs": [
                {"q": list(k), "re": float(v.real), "im": float(v.imag)}
                for k, v in self._coeffs.items()
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "FourierSeries":
        try:
            dim = int(data["dim"])
            items = [(c["q"], complex(c.get("re", 0.0), c.get("im", 0.0))) for c in data["coeffs"]]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed Fourier series: {exc}") from exc
        return cls(dim, items)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FourierSeries":
        return cls.from_dict(json.loads(text))


def _check_dims(F: FourierSeries, G: FourierSeries):
    if F.dim != G.dim:
        raise ValueError(f"dimension mismatch: {F.dim} vs {G.dim}")


def star_norm(F: FourierSeries) -> float:
    """Wiener norm: sum of coefficient moduli."""
    return float(sum(abs(v) for _, v in F))


def reflect_conjugate(F: FourierSeries) -> FourierSeries:
    """Series of ``conj(f(x))``: ``c(q) -> conj(c(-q))``."""
    return FourierSeries(F.dim, {tuple(-x for x in k): np.conj(v) for k, v in F})


def to_dense(F: FourierSeries):
    """Pack coefficients into a dense box; returns (array, lower corner)."""
    if len(F) == 0:
        return np.zeros((1,) * F.dim, dtype=complex), np.zeros(F.dim, dtype=int)
    keys = F.keys_array()
    lo = keys.min(axis=0)
    hi = keys.max(axis=0)
    arr = np.zeros(tuple(hi - lo + 1), dtype=complex)
    arr[tuple((keys - lo).T)] = F.values_array()
    return arr, lo


def from_dense(arr: np.ndarray, lo) -> FourierSeries:
    lo = np.asarray(lo, dtype=int)
    idx = np.argwhere(np.abs(arr) > ZERO_THRESHOLD)
    vals = arr[tuple(idx.T)]
    return FourierSeries(arr.ndim, zip((idx + lo).tolist(), vals.tolist()))


def multiply(F: FourierSeries, G: FourierSeries) -> FourierSeries:
    """Coefficients of the pointwise product (direct convolution)."""
    _check_dims(F, G)
    if len(F) == 0 or len(G) == 0:
        return FourierSeries.zero(F.dim)
    a, alo = to_dense(F)
    b, blo = to_dense(G)
    c = signal.convolve(a, b, mode="full", method="direct")
    return from_dense(c, alo + blo)


def modulus_squared(F: FourierSeries) -> FourierSeries:
    """Series of ``|f(x)|^2``."""
    return multiply(F, reflect_conjugate(F))


def mean_split(F: FourierSeries):
    """Split off the zeroth coefficient: returns (zero-mean part, mean)."""
    zero = (0,) * F.dim
    mean = F[zero]
    rest = FourierSeries(F.dim, {k: v for k, v in F if k != zero})
    return rest, mean


def truncate(F: FourierSeries, tol: float | None = None) -> tuple[FourierSeries, float]:
    """Drop coefficients with modulus below ``tol`` (default 1e-14 * ||F||_*).

    Returns the truncated series and the dropped mass.
    """
    if tol is None:
        tol = 1e-14 * star_norm(F)
    keep = {k: v for k, v in F if abs(v) >= tol}
    dropped = float(sum(abs(v) for k, v in F if abs(v) < tol))
    return FourierSeries(F.dim, keep), dropped


def cap_support(F: FourierSeries, radius: float) -> tuple[FourierSeries, float]:
    """Keep harmonics with Euclidean norm <= radius; report the dropped mass."""
    keep, dropped = {}, 0.0
    for k, v in F:
        if np.dot(k, k) <= radius * radius + 1e-9:
            keep[k] = v
        else:
            dropped += abs(v)
    return FourierSeries(F.dim, keep), dropped


def evaluate_grid(F: FourierSeries, points_per_axis: int) -> np.ndarray:
    """Samples of f on the grid ``x = 2 pi m / P`` (array of shape (P,)*dim)."""
    P = int(points_per_axis)
    if P < 2 * F.max_component + 1:
        raise ValueError(
            f"grid of {P} points aliases harmonics up to {F.max_component}"
        )
    arr = np.zeros((P,) * F.dim, dtype=complex)
    for k, v in F:
        arr[tuple(x % P for x in k)] += v
    return np.fft.ifftn(arr) * P**F.dim


def coefficients_from_grid(samples: np.ndarray, dim: int | None = None) -> FourierSeries:
    """Inverse of :func:`evaluate_grid` (harmonics folded to |q_i| <= P/2)."""
    samples = np.asarray(samples)
    dim = samples.ndim if dim is None else dim
    P = samples.shape[0]
    arr = np.fft.fftn(samples) / P**dim
    out = {}
    for idx in np.argwhere(np.abs(arr) > ZERO_THRESHOLD):
        q = tuple(int(i) if i <= P // 2 else int(i) - P for i in idx)
        out[q] = arr[tuple(idx)]
    return FourierSeries(dim, out)
