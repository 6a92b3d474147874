"""
Property suites run by `kalmanlearn verify`. Each criterion checks a
numerical property against an independent oracle and reports pass or
fail with the measured value.
"""
import time
from typing import Callable
from unittest import mock
import numpy as np
from pydantic import BaseModel
from scipy.special import softmax
from .bench import continual_eval, gain_scaling
from .covariance import (BlockDiagonal, Dense, KroneckerPair,
    LowRankPlusDiagonal, densify, gain, truncate_rank)
from .filtering import (dare_solve, dense_covariance, filter_step,
    initial_belief)
from .geometry import equivalence_gap, limit_equivalence_fit
from .koopman import (Dictionary, edmd_fit, lifted_filter_step, lifted_prior,
    lifted_vs_ekf)
from .linalg import jacobian_fd
from .logs import get_logger
from .models import LearnerSpec, PermutedFeatures
from .observer import (compare_correction, initial_state, innovation_correct,
    make_toy_decoder, natural_direction)
from .stability import (contraction_check, convex_convergence_audit,
    excitation_window, kalman_preconditioners, lowrank_perturbation_margin,
    twin_run, window_products)
from .statespace import (CategoricalSoftmaxObs, StateSpaceModel,
    make_linear_gaussian, make_regression_model, noise_generator,
    quadratic_system, simulate)

log = get_logger(__name__)

GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0

class CriterionResult(BaseModel):
    """
    The outcome of one verification criterion.
    """
    suite: str
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

Check = Callable[[], tuple[bool, str]]

def _spd(rng: np.random.Generator, d: int, floor: float = 0.1) -> np.ndarray:
    A = rng.standard_normal((d, d))
    return A @ A.T / d + floor * np.eye(d)

def contraction_identity(instances: int = 1000, seed: int = 0):
    worst = 0.0
    for k in range(instances):
        rng = noise_generator(seed, k, 20)
        d = int(rng.integers(1, 65))
        m = int(rng.integers(1, d + 1))
        res = contraction_check(_spd(rng, d), rng.standard_normal((m, d)),
            _spd(rng, m))
        worst = max(worst, res.identity_residual)
    return worst <= 1e-8, f"max identity residual {worst:.3g}"

def golden_ratio(steps: int = 40):
    model = make_linear_gaussian([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    belief = initial_belief([0.0], sigma0_sq=1.0)
    for _ in range(steps):
        belief, _ = filter_step(belief, model, None, [0.0])
    P_pred = float(dense_covariance(belief)[0, 0]) + 1.0
    dare = dare_solve([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    err = abs(P_pred - GOLDEN)
    agree = abs(float(dare.P[0, 0]) - P_pred)
    return err <= 1e-9 and agree <= 1e-6, \
        f"|P - phi| = {err:.3g}, |DARE - filter| = {agree:.3g}"

def ridge_consistency(seeds: int = 20, d: int = 8, T: int = 50,
    R: float = 0.01, sigma0_sq: float = 1.0):
    worst = 0.0
    for seed in range(seeds):
        rng = noise_generator(seed, 0, 21)
        X = rng.standard_normal((T, d))
        y = X @ rng.standard_normal(d) + 0.1 * rng.standard_normal(T)
        model = make_regression_model(d, "linear", R=R)
        belief = initial_belief(np.zeros(d), sigma0_sq=sigma0_sq)
        for t in range(T):
            belief, _ = filter_step(belief, model, X[t], [y[t]])
            Xt, yt = X[:t + 1], y[:t + 1]
            ridge = np.linalg.solve(Xt.T @ Xt + R / sigma0_sq * np.eye(d),
                Xt.T @ yt)
            worst = max(worst, float(np.max(np.abs(belief.mean - ridge))))
    return worst <= 1e-6, f"max prefix deviation {worst:.3g}"

def natural_gradient_limit(instances: int = 5, seed: int = 0):
    worst_r2, worst_damped = 1.0, 0.0
    for k in range(instances):
        rng = noise_generator(seed, k, 22)
        d = int(rng.integers(2, 7))
        m = d + int(rng.integers(0, 3))
        fit = limit_equivalence_fit(_spd(rng, d),
            rng.standard_normal((m, d)), np.logspace(-9, -2, 8))
        worst_r2 = min(worst_r2, fit.r2)
        H = rng.standard_normal((d, d)) + 2.0 * np.eye(d)
        gap = equivalence_gap(np.eye(d), H, _spd(rng, d))
        worst_damped = max(worst_damped, gap.gap_damped)
    return worst_r2 >= 0.99 and worst_damped <= 1e-10, \
        f"min fit R^2 {worst_r2:.4f}, max damped gap {worst_damped:.3g}"

def _rel(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))

def structured_gains(instances: int = 100, seed: int = 0):
    worst = {"lowrank": 0.0, "block": 0.0, "kronecker": 0.0}
    for k in range(instances):
        rng = noise_generator(seed, k, 23)
        d, m = 6, 3
        H = rng.standard_normal((m, d))
        R = _spd(rng, m)
        reprs = {
            "lowrank": LowRankPlusDiagonal(U=rng.standard_normal((d, d)),
                delta=0.5),
            "block": BlockDiagonal(blocks=[_spd(rng, 2), _spd(rng, 4)]),
            "kronecker": KroneckerPair(A=_spd(rng, 2), B=_spd(rng, 3)),
        }
        for name, P in reprs.items():
            oracle = gain(Dense(P=densify(P)), H, R).K
            worst[name] = max(worst[name], _rel(gain(P, H, R).K, oracle))
    scaling = gain_scaling()
    ok = max(worst.values()) <= 1e-8 and scaling.fit.r2 >= 0.95
    return ok, ", ".join(f"{k} {v:.3g}" for k, v in worst.items()) + \
        f"; wall-time fit R^2 {scaling.fit.r2:.3f}"

def convergence_audit(replicates: int = 100, seed: int = 0):
    hessian = np.diag([1.0, 2.0, 3.0, 4.0])
    eta = 0.2
    pre = kalman_preconditioners(hessian, 30, q=0.5)
    noisy = convex_convergence_audit(hessian, pre, eta, sigma=0.1,
        replicates=replicates, seed=seed)
    clean = convex_convergence_audit(hessian, pre, eta, sigma=0.0,
        replicates=1, seed=seed)
    limit = 1.0 - eta * clean.mu * clean.m + 1e-10
    ok = all(noisy.per_step) and clean.max_rate is not None \
        and clean.max_rate <= limit
    return ok, f"first violation {noisy.first_violation}, noiseless " \
        f"rate {clean.max_rate:.4g} vs bound {limit:.4g}"

def _filter_gains(H_seq: list, q: float = 0.01):
    d = H_seq[0].shape[1]
    P = np.eye(d)
    K_seq, P_seq = [], []
    for H in H_seq:
        P = P + q * np.eye(d)
        P_seq.append(P)
        g = gain(Dense(P=P), H, np.eye(1))
        K_seq.append(g.K)
        P = (np.eye(d) - g.K @ H) @ P
        P = 0.5 * (P + P.T)
    return K_seq, P_seq

def persistent_excitation(steps: int = 20):
    e1, e2 = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    alternating = [e1 if t % 2 == 0 else e2 for t in range(steps)]
    K_seq, P_seq = _filter_gains(alternating)
    excited = window_products(K_seq, alternating, 2, P_seq, np.eye(1))
    constant = [e1] * steps
    K_c, _ = _filter_gains(constant)
    alpha = min(a for a, _ in excitation_window(constant, np.eye(1), 2))
    stuck = window_products(K_c, constant, 2)
    worst_excited = max(w.norm for w in excited)
    rho_stuck = min(w.norm for w in stuck)
    ok = worst_excited < 1.0 and abs(alpha) <= 1e-12 \
        and abs(rho_stuck - 1.0) <= 1e-12
    return ok, f"excited window norm {worst_excited:.4f}, unexcited alpha " \
        f"{alpha:.3g} with norm {rho_stuck:.6f}"

def lowrank_robustness(instances: int = 50, seed: int = 0):
    d, r, T = 6, 4, 40
    certified, kept = 0, 0
    for k in range(instances):
        rng = noise_generator(seed, k, 24)
        U = rng.standard_normal((d, r))
        w = rng.standard_normal(d)
        P = U @ U.T + 0.1 * np.eye(d) + 1e-3 * np.outer(w, w)
        P_lr = truncate_rank(P, r)
        # Full column rank, so the exact filter contracts in every direction.
        H = rng.standard_normal((d, d)) + 3.0 * np.eye(d)
        if lowrank_perturbation_margin(P, densify(P_lr), H, np.eye(d)) \
            .margin <= 0:
            continue
        certified += 1
        model = make_linear_gaussian(0.9 * np.eye(d), H, 0.01 * np.eye(d),
            np.eye(d))
        traj = simulate(model, T, rng.standard_normal(d), seed + k)
        twin = twin_run(model, P_lr, np.zeros(d), 5.0 * np.ones(d),
            traj.observations)
        kept += twin.rate < 1.0
    return certified > 0 and kept == certified, \
        f"{kept} of {certified} certified truncations contract"

def edmd_exactness():
    system = quadratic_system()
    dictionary = Dictionary.from_exponents([[1, 0], [0, 1], [2, 0]])
    pairs = []
    for k in range(5):
        x0 = noise_generator(0, k, 25).standard_normal(2)
        pairs.extend(simulate(system, 20, x0, k).snapshot_pairs())
    model = edmd_fit(pairs, dictionary, reg=0.0, C=[[0.0, 1.0, 0.0]],
        R=[[0.01]])
    K_true = np.array([[0.9, 0.0, 0.0], [0.0, 0.5, 1.0], [0.0, 0.0, 0.81]])
    err = float(np.max(np.abs(model.K - K_true)))
    calls = mock.Mock(side_effect=AssertionError("linearized"))
    with mock.patch.object(StateSpaceModel, "F", calls), \
        mock.patch.object(StateSpaceModel, "H", calls):
        z = lifted_prior(dictionary, np.zeros(2), np.eye(2))
        for t in range(10):
            z = lifted_filter_step(z, model, [0.0], relift=True)
    ok = err <= 1e-8 and calls.call_count == 0
    return ok, f"max |K - K_true| {err:.3g}, linearizations " \
        f"{calls.call_count}"

def lifted_vs_ekf_rmse(seeds: int = 50):
    # x1 is measured, x2 is unobservable; both filters share its prior.
    res = lifted_vs_ekf(range(seeds), observe=0)
    wins = res.win_fraction
    return wins >= 0.6, f"lifted wins {wins:.0%}, mean RMSE lifted " \
        f"{np.mean(res.lifted):.4f} EKF {np.mean(res.ekf):.4f}"

def observer_correction(seeds: int = 50, seed: int = 0):
    model = make_toy_decoder(8, 12, seed)
    rng = noise_generator(seed, 0, 26)
    h = rng.standard_normal(8)
    emission = CategoricalSoftmaxObs(W=model.W)
    jac_err = float(np.max(np.abs(emission.jacobian(h) - jacobian_fd(
        lambda x: softmax(model.W @ x), h))))
    before = {k: np.copy(getattr(model, k)) for k in ("A", "E", "b", "W")}
    sigma_sq = 1e4
    state = initial_state(model, mean=h, sigma0_sq=sigma_sq)
    token = int(np.argmin(model.probabilities(h)))
    after = innovation_correct(state, model, token)
    step = after.belief.mean - h
    ref = natural_direction(state, model, token, eps=1.0 / sigma_sq)
    cosine = float(step @ ref / (np.linalg.norm(step) * np.linalg.norm(ref)))
    for t in range(5):
        state = innovation_correct(state, model, t % model.V)
    unchanged = all(np.array_equal(before[k], getattr(model, k))
        for k in before)
    wins = compare_correction(model, range(seeds), T=100,
        dropout=0.1).stats.win_fraction
    ok = jac_err <= 1e-6 and unchanged and cosine >= 0.99 and wins >= 0.8
    return ok, f"Jacobian error {jac_err:.3g}, parameters unchanged " \
        f"{unchanged}, cosine {cosine:.4f}, corrected wins {wins:.0%}"

def continual_forgetting(seeds: int = 20):
    task = PermutedFeatures()
    wins = 0
    for seed in range(seeds):
        filt = continual_eval(task, LearnerSpec(), seed=seed)
        sgd = continual_eval(task, LearnerSpec(kind="sgd", lr=0.05),
            seed=seed)
        wins += filt.forgetting < sgd.forgetting
    return wins >= 0.7 * seeds, \
        f"filtering forgets less on {wins} of {seeds} seeds"

SUITES: dict[str, list[tuple[str, Check]]] = {
    "filter": [
        ("contraction identity", contraction_identity),
        ("golden-ratio fixed point", golden_ratio),
        ("ridge consistency", ridge_consistency),
    ],
    "geometry": [
        ("natural-gradient limit", natural_gradient_limit),
    ],
    "covariance": [
        ("structured gains", structured_gains),
    ],
    "stability": [
        ("convergence audit", convergence_audit),
        ("persistent excitation", persistent_excitation),
        ("low-rank robustness", lowrank_robustness),
    ],
    "koopman": [
        ("EDMD exactness", edmd_exactness),
        ("lifted beats EKF", lifted_vs_ekf_rmse),
    ],
    "observer": [
        ("observer correction", observer_correction),
    ],
    "bench": [
        ("continual forgetting", continual_forgetting),
    ],
}

SUITE_NAMES = list(SUITES) + ["all"]

# Wall-clock limit for the full suite.
ALL_BUDGET_SECONDS = 600.0

def run_suite(name: str) -> list[CriterionResult]:
    """
    Run one named suite, or every suite for "all".
    """
    names = list(SUITES) if name == "all" else [name]
    results = []
    start = time.perf_counter()
    for suite in names:
        for label, check in SUITES[suite]:
            t0 = time.perf_counter()
            try:
                passed, detail = check()
            except Exception as e:
                log.exception("criterion %s failed with an error", label)
                passed, detail = False, f"error: {e}"
            results.append(CriterionResult(suite=suite, name=label,
                passed=bool(passed), detail=detail,
                seconds=time.perf_counter() - t0))
    if name == "all":
        total = time.perf_counter() - start
        results.append(CriterionResult(suite="all", name="runtime",
            passed=total < ALL_BUDGET_SECONDS,
            detail=f"{total:.1f} s", seconds=total))
    return results
