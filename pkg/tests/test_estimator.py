import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dpf import ParticleFilterEstimator
from dpf.ssm import LinearGaussianSSM, kalman_filter, make_dataset


@pytest.fixture(scope="module")
def data():
    ds = make_dataset(LinearGaussianSSM(), 12, 10, 4)
    X = np.stack([t.observations[:, 0] for t in ds.trajectories])
    y = np.stack([t.states for t in ds.trajectories])
    return X, y


def test_params_round_trip_and_clone():
    est = ParticleFilterEstimator(n_particles=40, resampler="soft", lr=0.02)
    params = est.get_params()
    assert params["n_particles"] == 40 and params["resampler"] == "soft"
    twin = clone(est)
    assert twin.get_params() == params
    twin.set_params(epochs=3)
    assert twin.epochs == 3 and est.epochs == 10


def test_predict_before_fit_raises(data):
    with pytest.raises(NotFittedError):
        ParticleFilterEstimator().predict(data[0])


def test_fit_predict_score_shapes(data):
    X, _ = data
    est = ParticleFilterEstimator(n_particles=30, epochs=2, minibatch=4, lr=0.05).fit(X)
    assert est.predict(X).shape == (12, 11, 1)
    assert np.isfinite(est.score(X))
    assert est.params_["dynamic.A"].shape == (1, 1)


def test_zero_epochs_at_truth_tracks_kalman(data):
    X, _ = data
    est = ParticleFilterEstimator(n_particles=2000, epochs=0, theta_init=(0.9, 1.0)).fit(X)
    means = est.predict(X[:2])
    for i in range(2):
        kf = kalman_filter(LinearGaussianSSM(), X[i])
        assert np.sqrt(np.mean((means[i, :, 0] - kf.means) ** 2)) < 0.1


def test_supervised_loss_requires_states(data):
    X, y = data
    with pytest.raises(ValueError, match="ground-truth"):
        ParticleFilterEstimator(loss="rmse", epochs=1).fit(X)
    est = ParticleFilterEstimator(loss="rmse", n_particles=20, epochs=1, minibatch=6).fit(X, y)
    assert est.predict(X).shape == y.shape


def test_input_validation(data):
    X, y = data
    with pytest.raises(ValueError):
        ParticleFilterEstimator(epochs=0).fit(X, y[:, :5])
    est = ParticleFilterEstimator(epochs=0, n_particles=10).fit(X)
    with pytest.raises(ValueError, match="features"):
        est.predict(np.zeros((2, 10, 3)))
    with pytest.raises(ValueError):
        est.predict(np.full((2, 10), np.nan))
