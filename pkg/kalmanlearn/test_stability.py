import numpy as np
import pytest
from .covariance import (Dense, LowRankPlusDiagonal, densify, gain,
    truncate_rank)
from .errors import ErrorType, KalmanError
from .filtering import initial_belief, run_filter
from .stability import (contraction_check, convex_convergence_audit,
    error_trace, excitation_window, fit_rate, kalman_preconditioners,
    lowrank_perturbation_margin, mean_square_recursion_check,
    stability_report, twin_run, window_products)
from .statespace import make_linear_gaussian, simulate

def spd(rng, d):
    A = rng.standard_normal((d, d))
    return A @ A.T / d + 0.1 * np.eye(d)

def test_contraction_identity():
    """Test I - KH equals (I + P H^T R^-1 H)^-1."""
    rng = np.random.default_rng(0)
    for d in (1, 5, 30):
        res = contraction_check(spd(rng, d), rng.standard_normal((2, d)),
            spd(rng, 2))
        assert res.identity_residual <= 1e-8
        assert res.rho <= 1.0 + 1e-12

    # No information leaves the covariance unchanged.
    res = contraction_check(np.eye(2), np.zeros((1, 2)), [[1.0]])
    assert res.rho == pytest.approx(1.0)

def test_contraction_audit_limit(monkeypatch):
    """Test the identity check refuses above the audit threshold."""
    from .config import settings
    monkeypatch.setattr(settings, "AUDIT_THRESHOLD", 3)
    with pytest.raises(KalmanError) as e:
        contraction_check(np.eye(4), np.ones((1, 4)), [[1.0]])
    assert e.value.type == ErrorType.AUDIT_LIMIT

def gains(H_seq, q=0.01):
    P = np.eye(2)
    K_seq = []
    for H in H_seq:
        P = P + q * np.eye(2)
        K = gain(Dense(P=P), H, np.eye(1)).K
        K_seq.append(K)
        P = (np.eye(2) - K @ H) @ P
    return K_seq

def test_rotating_excitation():
    """Test a rotating rank-one Jacobian is persistently exciting."""
    angles = np.arange(12) * np.pi / 3
    rot = [np.array([[np.cos(a), np.sin(a)]]) for a in angles]
    windows = excitation_window(rot, np.eye(1), 3)
    # Three directions 60 degrees apart sum to 1.5 I.
    assert all(a == pytest.approx(1.5) and b == pytest.approx(1.5)
        for a, b in windows)

def test_persistent_excitation():
    """Test alternating Jacobians contract and constant ones do not."""
    e1, e2 = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    alt = [e1, e2] * 5
    windows = excitation_window(alt, np.eye(1), 2)
    assert min(a for a, _ in windows) == pytest.approx(1.0)
    assert all(w.norm < 1.0 for w in window_products(gains(alt), alt, 2))

    const = [e1] * 10
    assert max(a for a, _ in excitation_window(const, np.eye(1), 2)) \
        == pytest.approx(0.0, abs=1e-12)
    assert all(w.norm == pytest.approx(1.0)
        for w in window_products(gains(const), const, 2))

    with pytest.raises(KalmanError) as e:
        excitation_window(alt, np.eye(1), 0)
    assert e.value.type == ErrorType.INVALID_INPUT

def test_fit_rate():
    """Test rate fitting on geometric sequences."""
    rate, r2 = fit_rate(0.5 ** np.arange(20))
    assert rate == pytest.approx(0.5)
    assert r2 == pytest.approx(1.0)
    assert fit_rate([3.0, 3.0, 3.0]) == (1.0, 1.0)
    assert fit_rate([1.0]) == (0.0, 1.0)

def test_error_trace():
    """Test Lyapunov values and error contraction of a scalar run."""
    model = make_linear_gaussian([[1.0]], [[1.0]], [[0.0]], [[0.01]])
    traj = simulate(model, 40, [2.0], seed=0)
    run = run_filter(model, initial_belief([0.0], sigma0_sq=1.0),
        traj.observations)
    trace = error_trace(run, [2.0])
    assert len(trace.lyapunov) == 41
    assert all(v >= 0 for v in trace.lyapunov)
    assert trace.errors[-1] < trace.errors[0]

    with pytest.raises(KalmanError) as e:
        error_trace([], [0.0])
    assert e.value.type == ErrorType.INVALID_INPUT

def test_mean_square_recursion():
    """Test the error-covariance recursion against simulation."""
    rng = np.random.default_rng(1)
    H_seq = [rng.standard_normal((1, 2)) for _ in range(5)]
    K_seq = [0.3 * H.T for H in H_seq]
    res = mean_square_recursion_check(K_seq, H_seq, [[0.5]], np.eye(2),
        A=0.9 * np.eye(2), Q=0.1 * np.eye(2), replicates=40_000, seed=3)
    assert res.passed
    assert len(res.E) == 6

def test_convex_audit():
    """Test the preconditioned convergence recursion holds."""
    hessian = np.diag([1.0, 2.0, 3.0, 4.0])
    pre = kalman_preconditioners(hessian, 20, q=0.5)
    assert len(pre) == 20
    noisy = convex_convergence_audit(hessian, pre, 0.2, sigma=0.1,
        replicates=100, seed=0)
    assert all(noisy.per_step)
    assert noisy.first_violation is None
    clean = convex_convergence_audit(hessian, pre, 0.2, replicates=1)
    assert clean.max_rate <= 1.0 - 0.2 * clean.mu * clean.m + 1e-10

    with pytest.raises(KalmanError) as e:
        convex_convergence_audit(np.diag([1.0, 0.0]), pre[:1], 0.1)
    assert e.value.type == ErrorType.NOT_POSITIVE_DEFINITE

def test_perturbation_margin():
    """Test exact truncations have zero gain perturbation."""
    rng = np.random.default_rng(2)
    U = rng.standard_normal((5, 2))
    P = U @ U.T + 0.5 * np.eye(5)
    H = rng.standard_normal((5, 5)) + 3.0 * np.eye(5)
    res = lowrank_perturbation_margin(P, densify(truncate_rank(P, 2)), H,
        np.eye(5))
    assert res.delta_K_norm <= 1e-8
    assert res.margin > 0

def test_twin_run():
    """Test two filters on the same data converge together."""
    rng = np.random.default_rng(3)
    H = rng.standard_normal((4, 4)) + 3.0 * np.eye(4)
    model = make_linear_gaussian(0.9 * np.eye(4), H, 0.01 * np.eye(4),
        np.eye(4))
    traj = simulate(model, 30, np.ones(4), seed=1)
    P0 = LowRankPlusDiagonal(U=rng.standard_normal((4, 2)), delta=0.5)
    twin = twin_run(model, P0, np.zeros(4), 3.0 * np.ones(4),
        traj.observations)
    assert twin.rate < 1.0
    assert twin.recursion_residual <= 1e-8
    assert twin.max_rho < 1.0

def test_stability_report():
    """Test per-step diagnostics of a recorded run."""
    model = make_linear_gaussian(0.9 * np.eye(2), [[1.0, 0.0]],
        0.01 * np.eye(2), [[0.1]])
    traj = simulate(model, 10, [1.0, 1.0], seed=0)
    run = run_filter(model, initial_belief(np.zeros(2)), traj.observations)
    report = stability_report(model, run.beliefs, traj.observations,
        window=2, reference=np.zeros(2))
    assert len(report.contraction_spectral_radius) == 10
    assert max(report.identity_residual) <= 1e-8
    assert report.excitation
    assert "persistent excitation fails in some window" in report.notes
