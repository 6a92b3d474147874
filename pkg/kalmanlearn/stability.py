"""
Stability diagnostics for filter runs: the contraction identity,
persistent excitation, Lyapunov traces, the mean-square error recursion,
the convex convergence audit and low-rank perturbation margins.
"""
from typing import Sequence
import numpy as np
import numpy.typing as npt
import scipy.linalg as la
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import linregress
from .config import settings
from .covariance import CovarianceRepr, Dense, densify, gain, predict_cov
from .errors import Error, ErrorType, KalmanError
from .filtering import (GaussianBelief, innovate, lyapunov_value, predict,
    update)
from .linalg import (as_matrix, as_vector, require_pd, require_square,
    spd_solve, spectral_radius, symmetrize)
from .logs import get_logger
from .models import RunRecord
from .statespace import Model, noise_generator, sqrt_factor

log = get_logger(__name__)

Array = npt.NDArray[np.float64]

def _dense(P: CovarianceRepr | Array) -> Array:
    if isinstance(P, np.ndarray | list):
        return as_matrix(P, "P")
    return densify(P)

class ContractionResult(BaseModel):
    rho: float
    identity_residual: float

def contraction_check(P_pred, H, R) -> ContractionResult:
    """
    Compare I - K H against (I + P H^T R^-1 H)^-1, computed independently.
    """
    P = _dense(P_pred)
    H, R = as_matrix(H, "H"), as_matrix(R, "R")
    require_pd(R, "R")
    d = P.shape[0]
    if d > settings.AUDIT_THRESHOLD:
        raise KalmanError(Error(type=ErrorType.AUDIT_LIMIT,
            msg=f"contraction check of dimension {d} exceeds the audit "
                f"threshold",
            ctx={"dim": d},
        ))
    g = gain(Dense(P=P), H, R, with_contraction=True)
    info = la.inv(np.eye(d) + P @ H.T @ spd_solve(R, H, "R"))
    return ContractionResult(
        rho=spectral_radius(g.contraction),
        identity_residual=float(np.linalg.norm(g.contraction - info)),
    )

def excitation_window(H_seq: Sequence, R, N: int) -> list[tuple[float, float]]:
    """
    (alpha_hat, beta_hat), the extreme eigenvalues of sum H^T R^-1 H over
    every window of N consecutive Jacobians.
    """
    if N < 1:
        raise KalmanError(Error(type=ErrorType.INVALID_INPUT,
            msg="window length must be positive",
            input=N,
        ))
    R = as_matrix(R, "R")
    info = [symmetrize(as_matrix(H).T @ spd_solve(R, as_matrix(H), "R"))
        for H in H_seq]
    out = []
    for s in range(len(info) - N + 1):
        lam = la.eigvalsh(np.sum(info[s:s + N], axis=0))
        out.append((float(lam[0]), float(lam[-1])))
    return out

class WindowProduct(BaseModel):
    start: int
    norm: float
    alpha: float | None = None
    bound: float | None = None

def window_products(K_seq: Sequence, H_seq: Sequence, N: int,
    P_seq: Sequence | None = None, R=None) -> list[WindowProduct]:
    """
    Spectral norms of the products of I - K_k H_k over windows of N steps.
    With the predicted covariances and R, each window also carries the
    bound (1 + lambda_min(P) alpha_hat)^-1.
    """
    mats = [np.eye(as_matrix(K).shape[0]) - as_matrix(K) @ as_matrix(H)
        for K, H in zip(K_seq, H_seq)]
    alphas = excitation_window(H_seq, R, N) if R is not None else None
    out = []
    for s in range(len(mats) - N + 1):
        M = np.eye(mats[s].shape[0])
        for k in range(s, s + N):
            M = mats[k] @ M
        item = WindowProduct(start=s, norm=float(np.linalg.norm(M, 2)))
        if alphas is not None:
            item.alpha = alphas[s][0]
            if P_seq is not None:
                lam = min(float(la.eigvalsh(_dense(P_seq[k]))[0])
                    for k in range(s, s + N))
                item.bound = 1.0 / (1.0 + lam * item.alpha)
        out.append(item)
    return out

def fit_rate(norms: Sequence[float]) -> tuple[float, float]:
    """
    Contraction rate exp(slope) and R^2 of a least-squares line through
    log norms; norms at or below 1e-12 are left out of the fit.
    """
    t = np.arange(len(norms), dtype=float)
    v = np.asarray(norms, dtype=float)
    keep = v > 1e-12
    if np.count_nonzero(keep) < 2:
        return 0.0, 1.0
    y = np.log(v[keep])
    if np.ptp(y) == 0:
        return 1.0, 1.0
    fit = linregress(t[keep], y)
    return float(np.exp(fit.slope)), float(fit.rvalue ** 2)

class ErrorTrace(BaseModel):
    errors: list[float]
    lyapunov: list[float]
    rate: float
    r2: float
    flagged: list[int] = Field(default_factory=list)

def error_trace(run: RunRecord | Sequence[GaussianBelief], theta_star,
    slack: float | None = None) -> ErrorTrace:
    """
    Estimation errors, Lyapunov values V = e^T P^-1 e and the fitted
    contraction rate of a run. theta_star is a fixed vector or one row per
    belief. Steps where V grows by more than the slack are flagged.
    """
    beliefs = run.beliefs if isinstance(run, RunRecord) else list(run)
    if not beliefs:
        raise KalmanError(Error(type=ErrorType.INVALID_INPUT,
            msg="run holds no beliefs",
        ))
    truth = np.asarray(theta_star, dtype=float)
    if truth.ndim == 1:
        truth = np.tile(truth, (len(beliefs), 1))
    errors, values = [], []
    for b, x in zip(beliefs, truth):
        errors.append(float(np.linalg.norm(b.mean - x)))
        values.append(lyapunov_value(b, x))
    slack = 2.0 * beliefs[0].dim if slack is None else slack
    flagged = [t + 1 for t in range(len(values) - 1)
        if values[t + 1] - values[t] > slack]
    rate, r2 = fit_rate(errors)
    return ErrorTrace(errors=errors, lyapunov=values, rate=rate, r2=r2,
        flagged=flagged)

class MeanSquareCheck(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    E: list[np.ndarray]
    empirical: list[np.ndarray]
    rel_error: float
    passed: bool

def mean_square_recursion_check(K_seq: Sequence, H_seq: Sequence, R, E0,
    A=None, Q=None, replicates: int = 10_000, seed: int = 0,
    tol: float = 5e-2) -> MeanSquareCheck:
    """
    Propagate E' = (I - K H)(A E A^T + Q)(I - K H)^T + K R K^T and compare
    with second moments of simulated errors over seeded replicates.
    """
    E0, R = as_matrix(E0, "E0"), as_matrix(R, "R")
    d = E0.shape[0]
    A = np.eye(d) if A is None else as_matrix(A, "A")
    Q = np.zeros((d, d)) if Q is None else as_matrix(Q, "Q")
    LQ, LR = sqrt_factor(Q), sqrt_factor(R)
    e = (sqrt_factor(E0) @ noise_generator(seed, 0, 0).standard_normal(
        (d, replicates)))
    E = E0.copy()
    Es, emp = [E], [e @ e.T / replicates]
    worst = 0.0
    for t, (K, H) in enumerate(zip(K_seq, H_seq), start=1):
        K, H = as_matrix(K, "K"), as_matrix(H, "H")
        IKH = np.eye(d) - K @ H
        E = symmetrize(IKH @ (A @ E @ A.T + Q) @ IKH.T + K @ R @ K.T)
        w = LQ @ noise_generator(seed, t, 0).standard_normal((d, replicates))
        v = LR @ noise_generator(seed, t, 1).standard_normal(
            (R.shape[0], replicates))
        e = IKH @ (A @ e + w) - K @ v
        Et = e @ e.T / replicates
        Es.append(E)
        emp.append(Et)
        scale = np.linalg.norm(E)
        err = np.linalg.norm(Et - E) / scale if scale > 0 \
            else np.linalg.norm(Et)
        worst = max(worst, float(err))
    return MeanSquareCheck(E=Es, empirical=emp, rel_error=worst,
        passed=worst <= tol)

def kalman_preconditioners(hessian, steps: int, q: float = 0.5,
    P0=None) -> list[Array]:
    """
    Posterior covariances of a filter observing the gradient of a
    quadratic, with Fisher information equal to its Hessian and parameter
    diffusion q I. They serve as preconditioners in the convergence audit.
    """
    Hs = as_matrix(hessian, "hessian")
    d = Hs.shape[0]
    H = sqrt_factor(symmetrize(Hs)).T
    P = Dense(P=np.eye(d) if P0 is None else as_matrix(P0, "P0"))
    out = []
    for _ in range(steps):
        P = predict_cov(P, None, q)
        g = gain(P, H, np.eye(d))
        P = Dense(P=symmetrize(P.P - g.K @ g.innovation_cov @ g.K.T))
        out.append(P.P)
    return out

class ConvergenceAudit(BaseModel):
    m: float
    M: float
    mu: float
    L: float
    step_condition: bool
    mean_sq: list[float]
    bound: list[float]
    per_step: list[bool]
    first_violation: int | None = None
    max_rate: float | None = None

def convex_convergence_audit(hessian, preconditioners: Sequence, eta: float,
    sigma: float = 0.0, theta0=None, replicates: int = 100,
    seed: int = 0) -> ConvergenceAudit:
    """
    Audit E|theta_t - theta*|^2 for preconditioned gradient descent on
    f = (theta - theta*)^T Hs (theta - theta*) / 2 with gradient noise of
    total variance sigma^2 against the recursion
    E' <= (1 - eta mu m) E + eta^2 M^2 sigma^2, with 3 sigma slack.
    """
    Hs = symmetrize(as_matrix(hessian, "hessian"))
    require_square(Hs, "hessian")
    d = Hs.shape[0]
    if replicates < 1:
        raise KalmanError(Error(type=ErrorType.INVALID_INPUT,
            msg="replicates must be positive",
            input=replicates,
        ))
    mu_L = la.eigvalsh(Hs)
    mu, L = float(mu_L[0]), float(mu_L[-1])
    if mu <= 0:
        raise KalmanError(Error(type=ErrorType.NOT_POSITIVE_DEFINITE,
            msg=f"objective is not strongly convex: min eigenvalue {mu:.3g}",
            ctx={"min_eigenvalue": mu},
        ))
    Bs = [symmetrize(as_matrix(B)) for B in preconditioners]
    spectra = [la.eigvalsh(B) for B in Bs]
    m = float(min(s[0] for s in spectra))
    M = float(max(s[-1] for s in spectra))
    theta0 = np.ones(d) if theta0 is None else as_vector(theta0, "theta0")
    e = np.tile(theta0[:, None], (1, replicates))
    sq = np.sum(e * e, axis=0)
    mean_sq, bound, per_step, rates = [float(np.mean(sq))], [], [], []
    first = None
    contraction = 1.0 - eta * mu * m
    for t, B in enumerate(Bs):
        xi = sigma / np.sqrt(d) * noise_generator(seed, t, 2) \
            .standard_normal((d, replicates))
        e = e - eta * B @ (Hs @ e + xi)
        sq_next = np.sum(e * e, axis=0)
        limit = contraction * mean_sq[-1] + eta ** 2 * M ** 2 * sigma ** 2
        se = float(np.std(sq_next) / np.sqrt(replicates))
        ok = float(np.mean(sq_next)) <= limit + 3 * se + 1e-12 * limit
        if mean_sq[-1] > 0:
            rates.append(float(np.mean(sq_next)) / mean_sq[-1])
        mean_sq.append(float(np.mean(sq_next)))
        bound.append(limit)
        per_step.append(bool(ok))
        if not ok and first is None:
            first = t + 1
            log.warning("convergence bound violated at step %d", first)
    return ConvergenceAudit(m=m, M=M, mu=mu, L=L,
        step_condition=bool(eta <= 2 * m / (L * M ** 2)),
        mean_sq=mean_sq, bound=bound, per_step=per_step,
        first_violation=first, max_rate=max(rates) if rates else None)

class PerturbationMargin(BaseModel):
    delta_K_norm: float
    delta_P_norm: float
    ratio: float | None
    rho_exact: float
    margin: float
    approx_contraction_norm: float

def lowrank_perturbation_margin(P_exact, P_approx, H, R) -> PerturbationMargin:
    """
    Gain perturbation from replacing P_exact with a structured
    approximation and the margin (1 - rho_exact) - |dK H|_2. A positive
    margin certifies that the approximate filter still contracts.
    """
    P, Pt = _dense(P_exact), _dense(P_approx)
    H, R = as_matrix(H, "H"), as_matrix(R, "R")
    g = gain(Dense(P=P), H, R, with_contraction=True)
    gt = gain(Dense(P=Pt), H, R, with_contraction=True)
    dK = gt.K - g.K
    dP = float(np.linalg.norm(Pt - P, 2))
    dK_norm = float(np.linalg.norm(dK, 2))
    rho = spectral_radius(g.contraction)
    return PerturbationMargin(
        delta_K_norm=dK_norm,
        delta_P_norm=dP,
        ratio=dK_norm / dP if dP > 0 else None,
        rho_exact=rho,
        margin=(1.0 - rho) - float(np.linalg.norm(dK @ H, 2)),
        approx_contraction_norm=float(np.linalg.norm(gt.contraction, 2)),
    )

class TwinRun(BaseModel):
    differences: list[float]
    rate: float
    r2: float
    recursion_residual: float
    max_rho: float

def twin_run(model: Model, cov0: CovarianceRepr, mean_a, mean_b,
    observations, inputs=None) -> TwinRun:
    """
    Run two filters from different means on the same data. The distance
    between their means is checked against d' = (I - K H) F d.
    """
    a = GaussianBelief(mean=as_vector(mean_a, "mean_a"), cov=cov0)
    b = GaussianBelief(mean=as_vector(mean_b, "mean_b"), cov=cov0)
    Y = np.asarray(observations, dtype=float).reshape(
        len(observations), -1)
    diffs = [float(np.linalg.norm(a.mean - b.mean))]
    worst, max_rho = 0.0, 0.0
    for t in range(Y.shape[0]):
        u = None if inputs is None else inputs[t]
        F = np.eye(a.dim) if model.identity_transition \
            else model.F(a.mean, u)
        prev = a.mean - b.mean
        pa, pb = predict(a, model, u), predict(b, model, u)
        ia = innovate(pa, model, Y[t], u)
        a, g = update(pa, ia, model.R)
        b, _ = update(pb, innovate(pb, model, Y[t], u), model.R)
        M = (np.eye(a.dim) - g.K @ ia.H) @ F
        d = a.mean - b.mean
        worst = max(worst, float(np.linalg.norm(d - M @ prev)))
        max_rho = max(max_rho, spectral_radius(M))
        diffs.append(float(np.linalg.norm(d)))
    rate, r2 = fit_rate(diffs)
    return TwinRun(differences=diffs, rate=rate, r2=r2,
        recursion_residual=worst, max_rho=max_rho)

class StabilityReport(BaseModel):
    """
    Per-step contraction diagnostics of a run, serializable with the run
    metrics.
    """
    contraction_spectral_radius: list[float] = Field(default_factory=list)
    identity_residual: list[float] = Field(default_factory=list)
    excitation: list[tuple[float, float]] = Field(default_factory=list)
    lyapunov: list[float] = Field(default_factory=list)
    notes: list[str] = Field(default_factory=list)

def stability_report(model: Model, beliefs: Sequence[GaussianBelief],
    observations, inputs=None, window: int | None = None,
    reference=None) -> StabilityReport:
    """
    Recompute the contraction identity at every step of a recorded run and
    the excitation of its Jacobians over windows.
    """
    report = StabilityReport()
    H_seq = []
    for t in range(len(beliefs) - 1):
        u = None if inputs is None else inputs[t]
        pred = predict(beliefs[t], model, u)
        H = model.H(pred.mean, u)
        H_seq.append(H)
        c = contraction_check(densify(pred.cov), H, model.R)
        report.contraction_spectral_radius.append(c.rho)
        report.identity_residual.append(c.identity_residual)
        if c.rho >= 1.0:
            report.notes.append(f"step {t + 1}: no contraction")
    N = window or beliefs[0].dim
    if len(H_seq) >= N:
        report.excitation = excitation_window(H_seq, model.R, N)
        if min(a for a, _ in report.excitation) <= 0:
            report.notes.append("persistent excitation fails in some window")
    if reference is not None:
        report.lyapunov = error_trace(beliefs, reference).lyapunov
    return report
