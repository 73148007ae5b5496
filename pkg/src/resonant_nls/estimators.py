"""scikit-learn style wrappers.

Rows of ``X`` are wave vectors ``x = j + t``; each row is folded into its
lattice index j and quasimomentum t before solving.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .fourier import FourierSeries
from .geometry import SetParams, chi0_test, chi_q_test, fold_to_cell
from .nonlinear import Amplitude, ProblemContext, solve
from .operators import LatticeWindow

FEATURES = ("lambda", "residual", "deficit", "fp_defect")


def _as_series(V, n):
    if isinstance(V, FourierSeries):
        return V
    if isinstance(V, dict) and "coeffs" in V:
        return FourierSeries.from_dict(V)
    if V is None:
        return FourierSeries(n, {})
    return FourierSeries(n, V)


class _WaveVectorMixin:
    def _check_X(self, X, reset: bool):
        X = check_array(X, dtype=np.float64)
        if reset:
            if X.shape[1] not in (1, 2, 3):
                raise ValueError("wave vectors must have 1, 2 or 3 components")
            self.n_features_in_ = X.shape[1]
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def _set_params_obj(self, x_max: float) -> SetParams:
        radius = self.set_window_radius
        if radius is None:
            radius = int(np.ceil(x_max)) + 2
        return SetParams(delta=self.delta, epsilon=self.epsilon, window_radius=radius,
                         mode=self.set_mode)


class TwoWaveSolver(_WaveVectorMixin, TransformerMixin, RegressorMixin, BaseEstimator):
    """Self-consistent eigenvalue at each wave vector.

    ``predict`` returns the eigenvalue. ``transform`` returns the columns
    listed in ``FEATURES``. ``fit`` only validates the parameters and
    records the input width, as no state is learned from data.
    """

    def __init__(self, V=None, l=2, q=(1, 0), A=0.0, sigma=0.0, branch="plus",
                 mode="resonant", window_radius=6, delta=0.2, epsilon=0.2, set_mode="poly",
                 set_window_radius=None, residual_tol=1e-8, split_mean=False):
        self.V = V
        self.l = l
        self.q = q
        self.A = A
        self.sigma = sigma
        self.branch = branch
        self.mode = mode
        self.window_radius = window_radius
        self.delta = delta
        self.epsilon = epsilon
        self.set_mode = set_mode
        self.set_window_radius = set_window_radius
        self.residual_tol = residual_tol
        self.split_mean = split_mean

    def fit(self, X, y=None):
        X = self._check_X(X, reset=True)
        n = self.n_features_in_
        if self.mode not in ("resonant", "nonresonant"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "resonant" and (self.q is None or len(self.q) != n):
            raise ValueError("q must have one entry per feature")
        self.V_ = _as_series(self.V, n)
        self.amp_ = Amplitude(complex(self.A), float(self.sigma))
        return self

    def context(self, x) -> ProblemContext:
        """Problem context for one wave vector."""
        check_is_fitted(self, "V_")
        j, t = fold_to_cell(np.asarray(x, dtype=float))
        sp = self._set_params_obj(float(np.max(np.abs(x))) + 1)
        return ProblemContext(self.n_features_in_, self.l, tuple(t), j, self.V_, self.amp_,
                              LatticeWindow(self.n_features_in_, self.window_radius, j),
                              q=tuple(self.q) if self.mode == "resonant" else None,
                              branch=self.branch, mode=self.mode, set_params=sp,
                              residual_tol=self.residual_tol, split_mean=self.split_mean)

    def _rows(self, X):
        check_is_fitted(self, "V_")
        X = self._check_X(X, reset=False)
        out = np.empty((X.shape[0], len(FEATURES)))
        for i, x in enumerate(X):
            sol = solve(self.context(x))
            deficit = np.nan if sol.deficit is None else sol.deficit
            out[i] = (sol.lam, sol.residual, deficit, sol.fp_defect)
        return out

    def predict(self, X):
        return self._rows(X)[:, 0]

    def transform(self, X):
        return self._rows(X)

    def get_feature_names_out(self, input_features=None):
        return np.asarray(FEATURES, dtype=object)


class ResonantSetClassifier(_WaveVectorMixin, ClassifierMixin, BaseEstimator):
    """Labels wave vectors 1 when they pass the set test, 0 otherwise.

    With ``q`` given the resonant-pair test is used, with ``q=None`` the
    non-resonant isolation test. The sphere radius is ``|x|``.
    """

    def __init__(self, q=(1, 0), l=2, delta=0.2, epsilon=0.2, set_mode="poly",
                 set_window_radius=None):
        self.q = q
        self.l = l
        self.delta = delta
        self.epsilon = epsilon
        self.set_mode = set_mode
        self.set_window_radius = set_window_radius

    def fit(self, X, y=None):
        X = self._check_X(X, reset=True)
        if self.q is not None and len(self.q) != self.n_features_in_:
            raise ValueError("q must have one entry per feature")
        self.classes_ = np.array([0, 1])
        return self

    def decisions(self, X):
        """Full :class:`Decision` objects for each row."""
        check_is_fitted(self, "classes_")
        X = self._check_X(X, reset=False)
        sp = self._set_params_obj(float(np.max(np.abs(X), initial=0.0)) + 1)
        out = []
        for x in X:
            _, t = fold_to_cell(x)
            k = float(np.linalg.norm(x))
            if self.q is None:
                out.append(chi0_test(t, k, sp, self.l))
            else:
                out.append(chi_q_test(t, k, self.q, sp, self.l))
        return out

    def predict(self, X):
        return np.array([int(d.accepted) for d in self.decisions(X)])
