import numpy as np
import pytest
from scipy.special import softmax
from .geometry import (equivalence_gap, fisher_categorical, fisher_gaussian,
    gaussian_log_likelihood, gaussian_score, limit_equivalence_fit,
    natural_gradient_step, reparameterize)
from .errors import ErrorType, KalmanError
from .linalg import jacobian_fd

def spd(rng, d):
    A = rng.standard_normal((d, d))
    return A @ A.T / d + 0.1 * np.eye(d)

def test_fisher_gaussian():
    """Test the Gaussian Fisher metric and its reparameterization."""
    rng = np.random.default_rng(0)
    H = rng.standard_normal((3, 2))
    R = spd(rng, 3)
    F = fisher_gaussian(H, R)
    assert np.allclose(F.F, H.T @ np.linalg.solve(R, H))
    assert F.regularization == pytest.approx(1e-8 * np.trace(F.F) / 2)
    T = rng.standard_normal((2, 2))
    assert np.allclose(reparameterize(F, T).F, T.T @ F.F @ T)

def test_fisher_categorical():
    """Test the categorical Fisher metric is PSD with a null direction."""
    rng = np.random.default_rng(1)
    W = rng.standard_normal((4, 3))
    s = softmax(W @ rng.standard_normal(3))
    F = fisher_categorical(W, s)
    assert np.linalg.eigvalsh(F.F)[0] >= -1e-12
    # Shifting every logit equally leaves the likelihood unchanged.
    F = fisher_categorical(np.ones((4, 1)), s)
    assert abs(F.F[0, 0]) <= 1e-12

    with pytest.raises(KalmanError) as e:
        fisher_categorical(W, np.array([0.5, 0.5, 0.5, -0.5]))
    assert e.value.type == ErrorType.INVALID_INPUT

def test_fisher_categorical_two_classes():
    """Test the two-class Fisher metric against its closed form."""
    rng = np.random.default_rng(5)
    W = rng.standard_normal((2, 3))
    h = rng.standard_normal(3)
    s = softmax(W @ h)
    sigma = 1.0 / (1.0 + np.exp(-(W[0] - W[1]) @ h))
    w = W[0] - W[1]
    F = fisher_categorical(W, s)
    assert np.allclose(F.F, sigma * (1 - sigma) * np.outer(w, w), atol=1e-12)

def test_fisher_categorical_monte_carlo():
    """Test the categorical Fisher metric is the score covariance."""
    rng = np.random.default_rng(6)
    W = rng.standard_normal((4, 3))
    s = softmax(W @ rng.standard_normal(3))
    n = 100_000
    counts = np.bincount(rng.choice(4, size=n, p=s), minlength=4)
    scores = W.T @ (np.eye(4) - s[None, :]).T
    F_mc = (scores * (counts / n)) @ scores.T
    F = fisher_categorical(W, s)
    assert np.linalg.norm(F_mc - F.F) <= 0.03 * np.linalg.norm(F.F)

def test_natural_gradient_invariance():
    """Test natural steps commute with a linear reparameterization."""
    rng = np.random.default_rng(7)
    F = fisher_gaussian(rng.standard_normal((4, 3)), spd(rng, 4),
        regularization=0.0)
    T = rng.standard_normal((3, 3)) + 3.0 * np.eye(3)
    phi = rng.standard_normal(3)
    theta = T @ phi
    g = rng.standard_normal(3)
    step_theta = natural_gradient_step(theta, F, g, 0.3) - theta
    step_phi = natural_gradient_step(phi, reparameterize(F, T), T.T @ g,
        0.3) - phi
    assert np.allclose(T @ step_phi, step_theta, atol=1e-10)
    # A plain gradient step does not commute.
    assert not np.allclose(T @ (0.3 * T.T @ g), 0.3 * g)

def test_score_is_gradient():
    """Test the Gaussian score is the log-likelihood gradient."""
    rng = np.random.default_rng(2)
    H = rng.standard_normal((3, 2))
    R = spd(rng, 3)
    y = rng.standard_normal(3)
    theta = rng.standard_normal(2)
    numeric = jacobian_fd(
        lambda th: np.array([gaussian_log_likelihood(y, H @ th, R)]), theta)
    assert np.allclose(gaussian_score(H, R, y - H @ theta), numeric[0],
        atol=1e-6)

def test_natural_gradient_step():
    """Test the natural gradient step solves with the regularized metric."""
    F = fisher_gaussian(np.eye(2), np.eye(2), regularization=0.0)
    step = natural_gradient_step(np.zeros(2), F, np.array([1.0, 2.0]), 0.5)
    assert np.allclose(step, [0.5, 1.0])

def test_gap_ng_limit():
    """Test gap_ng decays linearly in the noise scale."""
    rng = np.random.default_rng(3)
    fit = limit_equivalence_fit(spd(rng, 3), rng.standard_normal((4, 3)))
    assert fit.r2 >= 0.99
    assert fit.slope == pytest.approx(1.0, abs=0.1)
    assert fit.gaps[0] < 1e-6

def test_gap_damped():
    """Test the Kalman gain at P = F^-1 is half the natural gradient."""
    rng = np.random.default_rng(4)
    H = rng.standard_normal((3, 3)) + 2.0 * np.eye(3)
    gap = equivalence_gap(np.eye(3), H, spd(rng, 3))
    assert gap.gap_damped <= 1e-10

def test_gap_rank_deficient():
    """Test rank-deficient H reports undefined gaps."""
    gap = equivalence_gap(np.eye(2), [[1.0, 1.0]], [[1.0]])
    assert gap.gap_ng is None and gap.gap_damped is None
    assert gap.notes
    with pytest.raises(KalmanError) as e:
        limit_equivalence_fit(np.eye(2), [[1.0, 1.0]])
    assert e.value.type == ErrorType.RANK_DEFICIENT
