import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from _problems import Q, V_POLY, poly_template, resonant_context
from resonant_nls.estimators import FEATURES, ResonantSetClassifier, TwoWaveSolver
from resonant_nls.experiments import construct_resonant_point
from resonant_nls.geometry import SetParams
from resonant_nls.nonlinear import solve


def wave_vector(k=9.0, target=0.5):
    t, dec = construct_resonant_point(k, Q, SetParams(window_radius=30), 2, target)
    return np.asarray(dec.j) + np.asarray(t)


class TestTwoWaveSolver:
    def test_params_and_clone(self):
        est = TwoWaveSolver(V=V_POLY, A=0.03, sigma=1.0)
        params = est.get_params()
        assert params["A"] == 0.03 and params["V"] is V_POLY
        twin = clone(est)
        assert twin.get_params()["sigma"] == 1.0 and not hasattr(twin, "V_")

    def test_predict_matches_direct_solve(self):
        x = wave_vector()
        est = TwoWaveSolver(V=V_POLY, set_window_radius=30).fit(x[None, :])
        lam = est.predict(x[None, :])
        ctx = resonant_context(9.0, poly_template())
        assert np.allclose(ctx.j + np.asarray(ctx.t), x, atol=1e-12)
        assert lam[0] == solve(ctx).lam

    def test_transform_columns(self):
        X = np.stack([wave_vector(9.0), wave_vector(12.0)])
        est = TwoWaveSolver(V=V_POLY, A=0.03, sigma=1.0, set_window_radius=30)
        F = est.fit_transform(X)
        assert F.shape == (2, len(FEATURES))
        assert list(est.get_feature_names_out()) == list(FEATURES)
        assert np.all(F[:, 1] <= 1e-8) and np.all(F[:, 2] > 0)

    def test_nonresonant_deficit_is_nan(self):
        x = np.array([3.0, 1.0]) + np.array([0.41, 0.27])
        est = TwoWaveSolver(V={}, mode="nonresonant", q=None, set_window_radius=12,
                            window_radius=3)
        F = est.fit_transform(x[None, :])
        assert np.isnan(F[0, 2])
        assert F[0, 0] == pytest.approx(float(x @ x) ** 2, rel=1e-15)

    def test_dict_potential(self):
        est = TwoWaveSolver(V=V_POLY.to_dict()).fit(np.zeros((1, 2)))
        assert est.V_ == V_POLY

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            TwoWaveSolver(V=V_POLY).predict(np.zeros((1, 2)))

    def test_width_checks(self):
        est = TwoWaveSolver(V=V_POLY).fit(np.zeros((1, 2)))
        with pytest.raises(ValueError):
            est.predict(np.zeros((1, 3)))
        with pytest.raises(ValueError):
            TwoWaveSolver(V=V_POLY, q=(1, 0, 0)).fit(np.zeros((1, 2)))
        with pytest.raises(ValueError):
            TwoWaveSolver(mode="other").fit(np.zeros((1, 2)))
        with pytest.raises(ValueError):
            TwoWaveSolver().fit(np.zeros((1, 4)))


class TestResonantSetClassifier:
    def test_labels(self):
        X = np.stack([wave_vector(9.0), wave_vector(12.0), [0.5, 8.0]])
        clf = ResonantSetClassifier(set_window_radius=30).fit(X)
        assert list(clf.predict(X)) == [1, 1, 0]
        assert clf.score(X, [1, 1, 0]) == 1.0
        assert [d.reason for d in clf.decisions(X)][2] == "separation"

    def test_nonresonant_test(self):
        X = np.stack([wave_vector(9.0, target=0.0)])
        clf = ResonantSetClassifier(q=None, set_window_radius=30).fit(X)
        assert list(clf.predict(X)) == [0]

    def test_classes_and_clone(self):
        clf = ResonantSetClassifier().fit(np.zeros((1, 2)))
        assert list(clf.classes_) == [0, 1]
        assert clone(clf).get_params() == clf.get_params()

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            ResonantSetClassifier().predict(np.zeros((1, 2)))

    def test_q_width(self):
        with pytest.raises(ValueError):
            ResonantSetClassifier(q=(1, 0, 0)).fit(np.zeros((1, 2)))
