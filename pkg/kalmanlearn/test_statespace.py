import numpy as np
import pytest
from .errors import ErrorType, KalmanError
from .statespace import (CategoricalSoftmaxObs, Trajectory, check_jacobians,
    is_observable, make_linear_gaussian, make_nonlinear,
    make_regression_model, quadratic_system, simulate)

def test_linear_gaussian_validation():
    """Test model construction rejects bad shapes and noise."""
    with pytest.raises(KalmanError) as e:
        make_linear_gaussian(np.eye(2), np.ones((1, 3)), np.eye(2), [[1.0]])
    assert e.value.type == ErrorType.DIMENSION

    with pytest.raises(KalmanError) as e:
        make_linear_gaussian(np.eye(2), np.ones((1, 2)), np.eye(2), [[0.0]])
    assert e.value.type == ErrorType.NOT_POSITIVE_DEFINITE

    with pytest.raises(KalmanError) as e:
        make_linear_gaussian(np.eye(2), np.ones((1, 2)), -np.eye(2), [[1.0]])
    assert e.value.type == ErrorType.NOT_POSITIVE_DEFINITE

def test_model_is_immutable():
    """Test model matrices cannot be changed in place."""
    model = make_linear_gaussian(np.eye(2), np.ones((1, 2)), np.eye(2),
        [[1.0]])
    with pytest.raises(ValueError):
        model.Q[0, 0] = 5.0

def test_jacobians():
    """Test analytic Jacobians against finite differences."""
    assert check_jacobians(quadratic_system(), points=20) <= 1e-6
    model = make_regression_model(3, "logistic")
    assert check_jacobians(model, points=20) <= 1e-6

    # A wrong Jacobian is caught.
    bad = make_nonlinear(
        transition=lambda x, u, th: np.sin(x),
        observation=lambda x, u, th: x[:1],
        transition_jacobian=lambda x, u, th: np.eye(2),
        observation_jacobian=lambda x, u, th: np.array([[1.0, 0.0]]),
        Q=np.eye(2),
        R=[[1.0]],
    )
    assert check_jacobians(bad, points=5) > 1e-3

def test_simulate_reproducible():
    """Test simulation is a pure function of the seed."""
    model = quadratic_system(Q=0.01 * np.eye(2), R=[[0.1]])
    a = simulate(model, 25, [1.0, 0.5], seed=3)
    b = simulate(model, 25, [1.0, 0.5], seed=3)
    c = simulate(model, 25, [1.0, 0.5], seed=4)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.observations, b.observations)
    assert not np.array_equal(a.observations, c.observations)

def test_simulate_noiseless():
    """Test the quadratic system recursion without noise."""
    traj = simulate(quadratic_system(), 5, [1.0, 0.0], seed=0,
        observation_noise=False)
    assert np.allclose(traj.states[1], [0.9, 1.0])
    assert np.allclose(traj.states[2], [0.81, 0.5 + 0.81])
    assert np.allclose(traj.observations[:, 0], traj.states[:, 0])

    with pytest.raises(KalmanError) as e:
        simulate(quadratic_system(), 0, [1.0, 0.0], seed=0)
    assert e.value.type == ErrorType.INVALID_INPUT

def test_trajectory_files(tmp_path):
    """Test trajectory save and load."""
    traj = simulate(quadratic_system(), 10, [1.0, -1.0], seed=1)
    path = tmp_path / "traj.npz"
    traj.save(path)
    loaded = Trajectory.load(path)
    assert np.array_equal(loaded.states, traj.states)
    assert loaded.seed == 1
    assert len(loaded.snapshot_pairs()) == 9

    with pytest.raises(KalmanError) as e:
        Trajectory.load(tmp_path / "missing.npz")
    assert e.value.type == ErrorType.NOT_FOUND

def test_observability():
    """Test the observability rank check."""
    assert is_observable([[1.0, 1.0], [0.0, 1.0]], [[1.0, 0.0]])
    assert not is_observable(np.eye(2), [[1.0, 0.0]])

def test_categorical_emission():
    """Test softmax emission probabilities and innovation."""
    rng = np.random.default_rng(0)
    obs = CategoricalSoftmaxObs(W=rng.standard_normal((5, 3)))
    h = rng.standard_normal(3)
    s = obs.probabilities(h)
    assert abs(s.sum() - 1.0) < 1e-12
    r = obs.innovation(2, h)
    assert abs(r.sum()) < 1e-12
    assert r[2] == pytest.approx(1.0 - s[2])
    assert obs.log_likelihood(2, h) == pytest.approx(np.log(s[2]))
