"""Sklearn API surface: params/clone, fit/transform round trips, validation."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import Pipeline

from favae.datasets import gen_2d_reaching
from favae.estimator import FAVAE, check_latents, check_sequences


def tiny_estimator(**kw):
    defaults = dict(latent_dims=(2, 2), capacity=(1.0, 0.5), channels=4,
                    block_depth=1, epochs=15, beta=1.0, random_state=0)
    defaults.update(kw)
    return FAVAE(**defaults)


@pytest.fixture(scope="module")
def sequences():
    return gen_2d_reaching(100).sequences()


class TestSklearnProtocol:
    def test_get_set_params_roundtrip(self):
        est = tiny_estimator()
        params = est.get_params()
        assert params["beta"] == 1.0
        assert params["latent_dims"] == (2, 2)
        est.set_params(beta=3.5, epochs=7)
        assert est.beta == 3.5
        assert est.epochs == 7

    def test_clone_preserves_params(self):
        est = tiny_estimator(beta=2.5)
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()

    def test_unfitted_transform_raises(self, sequences):
        with pytest.raises(NotFittedError):
            tiny_estimator().transform(sequences)

    def test_pipeline_composes(self, sequences):
        pipe = Pipeline([("favae", tiny_estimator(epochs=5))])
        Z = pipe.fit_transform(sequences)
        assert Z.shape == (20, 4)


class TestFitTransform:
    def test_fit_transform_shapes(self, sequences):
        est = tiny_estimator().fit(sequences)
        Z = est.transform(sequences)
        assert Z.shape == (20, 4)
        X_hat = est.inverse_transform(Z)
        assert X_hat.shape == sequences.shape
        assert np.all(np.isfinite(X_hat))
        np.testing.assert_array_equal(est.ladder_of_dim(), [0, 0, 1, 1])

    def test_fit_is_deterministic(self, sequences):
        a = tiny_estimator().fit(sequences).transform(sequences)
        b = tiny_estimator().fit(sequences).transform(sequences)
        np.testing.assert_array_equal(a, b)

    def test_score_is_negative_recon(self, sequences):
        est = tiny_estimator().fit(sequences)
        score = est.score(sequences)
        assert score < 0
        assert score == pytest.approx(-est.train_recon_)

    def test_transform_validates_shape(self, sequences):
        est = tiny_estimator().fit(sequences)
        with pytest.raises(ValueError, match="channels"):
            est.transform(np.zeros((3, 5, 100)))
        with pytest.raises(ValueError, match="length"):
            est.transform(np.zeros((3, 2, 50)))

    def test_inverse_transform_validates(self, sequences):
        est = tiny_estimator().fit(sequences)
        with pytest.raises(ValueError, match="latents"):
            est.inverse_transform(np.zeros((3, 9)))


class TestValidationHelpers:
    def test_check_sequences_accepts_lists(self):
        X = check_sequences([[[0.0, 1.0]], [[2.0, 3.0]]])
        assert X.shape == (2, 1, 2)
        assert np.issubdtype(X.dtype, np.floating)

    def test_check_sequences_rejects_2d(self):
        with pytest.raises(ValueError, match="N, C, T"):
            check_sequences(np.zeros((4, 7)))

    def test_check_sequences_rejects_nan(self):
        X = np.zeros((2, 1, 3))
        X[0, 0, 1] = np.nan
        with pytest.raises(ValueError, match="NaN"):
            check_sequences(X)

    def test_check_latents_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="NaN"):
            check_latents(np.array([[np.inf, 0.0]]), 2)
