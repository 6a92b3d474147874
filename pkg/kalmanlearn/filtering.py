"""
The recursive estimation engine: predict, innovate, gain and update, with
EKF linearization at the predicted mean and a steady-state Riccati solver.
"""
import time
import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, model_validator
from .config import settings
from .covariance import (CovarianceRepr, GainResult, densify, gain,
    innovation_covariance, make_covariance, measurement_update, predict_cov)
from .errors import Error, ErrorType, KalmanError
from .linalg import (as_matrix, as_vector, jacobian_fd, require_finite,
    require_pd, require_square, spd_solve, spectral_radius, symmetrize)
from .logs import get_logger
from .models import RunRecord, StepEntry
from .statespace import (CategoricalSoftmaxObs, GaussianObs, Model,
    observability_matrix)

log = get_logger(__name__)

Array = npt.NDArray[np.float64]

class GaussianBelief(BaseModel):
    """
    A Gaussian posterior N(mean, cov) after `step` filter steps.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mean: np.ndarray
    cov: CovarianceRepr
    step: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_dims(self) -> "GaussianBelief":
        if self.cov.dim != self.mean.size:
            raise ValueError(f"covariance dimension {self.cov.dim} does not "
                f"match mean length {self.mean.size}")
        return self

    @property
    def dim(self) -> int:
        return self.mean.size

class Innovation(BaseModel):
    """
    The residual y - y_hat with its Jacobian and covariance.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    residual: np.ndarray
    predicted_obs: np.ndarray
    H: np.ndarray
    S: np.ndarray

def initial_belief(mean, cov: CovarianceRepr | None = None,
    sigma0_sq: float | None = None) -> GaussianBelief:
    """
    A step-0 belief; the covariance defaults to sigma0^2 I.
    """
    mean = as_vector(mean, "mean") if np.size(mean) else np.zeros(0)
    if cov is None:
        cov = make_covariance("dense", mean.size, sigma0_sq)
    return GaussianBelief(mean=mean, cov=cov, step=0)

def predict(belief: GaussianBelief, model: Model, u: Array | None = None,
    delta_min: float | None = None) -> GaussianBelief:
    """
    Propagate the belief through the transition map and its Jacobian.
    """
    step = belief.step + 1
    if belief.dim != model.dim:
        raise KalmanError(Error(type=ErrorType.DIMENSION,
            msg=f"belief has dimension {belief.dim}, model {model.dim}",
        ))
    if model.identity_transition:
        mean, A = np.array(belief.mean, dtype=float), None
    else:
        mean = model.f(belief.mean, u)
        require_finite(mean, "transition", step=step)
        A = model.F(belief.mean, u)
        require_finite(A, "transition Jacobian", step=step)
    cov = predict_cov(belief.cov, A, model.process_noise, delta_min)
    return GaussianBelief(mean=mean, cov=cov, step=step)

def _categorical_noise(s: Array) -> Array:
    return symmetrize(np.diag(s) - np.outer(s, s)) + 1e-6 * np.eye(s.size)

def innovate(belief_pred: GaussianBelief,
    model: Model | CategoricalSoftmaxObs, y, u: Array | None = None,
    R: Array | None = None) -> Innovation:
    """
    Compare an observation against the prediction at the predicted mean.

    With a CategoricalSoftmaxObs y is a token index, the residual is
    e_y - s and R defaults to the softmax covariance plus 1e-6 I.
    """
    mean = belief_pred.mean
    if isinstance(model, CategoricalSoftmaxObs):
        token = int(y)
        if not 0 <= token < model.vocab:
            raise KalmanError(Error(type=ErrorType.INVALID_INPUT,
                msg=f"token {token} outside vocabulary of {model.vocab}",
                input=token,
            ))
        predicted = model.probabilities(mean)
        H = model.jacobian(mean)
        residual = model.innovation(token, mean)
        R = _categorical_noise(predicted) if R is None else as_matrix(R, "R")
    else:
        y = as_vector(y, "y")
        require_finite(y, "observation", step=belief_pred.step)
        predicted = model.h(mean, u)
        require_finite(predicted, "observation map", step=belief_pred.step)
        H = model.H(mean, u)
        residual = y - predicted
        R = model.R if R is None else as_matrix(R, "R")
    _, S = innovation_covariance(belief_pred.cov, H, R)
    return Innovation(residual=residual, predicted_obs=predicted, H=H, S=S)

def update(belief_pred: GaussianBelief, innov: Innovation, R,
    with_contraction: bool = False, jobs: int = 1,
    delta_min: float | None = None) -> tuple[GaussianBelief, GainResult]:
    """
    Posterior mean and covariance after a measurement, with the gain.
    delta_min floors the isotropic term of low-rank covariances.
    """
    g = gain(belief_pred.cov, innov.H, R, with_contraction=with_contraction,
        jobs=jobs)
    mean = belief_pred.mean + g.K @ innov.residual
    require_finite(mean, "posterior mean", step=belief_pred.step)
    cov = measurement_update(belief_pred.cov, g.K, innov.H, R, delta_min)
    return GaussianBelief(mean=mean, cov=cov, step=belief_pred.step), g

def lyapunov_value(belief: GaussianBelief, reference: Array) -> float:
    """
    V = e^T P^-1 e for e = mean - reference.
    """
    e = belief.mean - as_vector(reference, "reference")
    return float(e @ belief.cov.inverse_apply(e))

def filter_step(belief: GaussianBelief, model: Model, u: Array | None,
    y, audit: bool = False, reference: Array | None = None,
    likelihood: CategoricalSoftmaxObs | None = None, R: Array | None = None,
    jobs: int = 1, delta_min: float | None = None,
    audit_threshold: int | None = None) -> tuple[GaussianBelief, StepEntry]:
    """
    One predict, innovate and update cycle with its step diagnostics. The
    contraction radius is audited up to audit_threshold dimensions.
    """
    start = time.perf_counter()
    pred = predict(belief, model, u, delta_min)
    if likelihood is not None:
        innov = innovate(pred, likelihood, y, R=R)
        R = _categorical_noise(innov.predicted_obs) if R is None else R
    else:
        innov = innovate(pred, model, y, u, R=R)
        R = model.R if R is None else R
    limit = settings.AUDIT_THRESHOLD if audit_threshold is None \
        else audit_threshold
    audit = audit and belief.dim <= limit
    post, g = update(pred, innov, R, with_contraction=audit, jobs=jobs,
        delta_min=delta_min)
    r = innov.residual
    nis = float(r @ spd_solve(innov.S, r))
    # One-step predictive N(y_hat, S) evaluated at the residual.
    predictive = GaussianObs(R=innov.S)
    entry = StepEntry(
        step=post.step,
        loss=float(r @ r) / max(r.size, 1),
        innovation_norm=float(np.linalg.norm(r)),
        gain_norm=float(np.linalg.norm(g.K)),
        rho=spectral_radius(g.contraction) if audit else None,
        lyapunov=lyapunov_value(post, reference)
            if reference is not None else None,
        nis=nis,
        loglik=predictive.log_likelihood(r, np.zeros(r.size)),
        wall_time=time.perf_counter() - start,
    )
    log.debug("step %d: |r|=%.3g |K|=%.3g", entry.step,
        entry.innovation_norm, entry.gain_norm)
    return post, entry

def steady_state_step(belief: GaussianBelief, model: Model, K, y,
    u: Array | None = None) -> GaussianBelief:
    """
    Constant-gain filtering: the mean follows the recursion with a fixed K
    and the covariance is left unchanged.
    """
    mean = belief.mean if model.identity_transition \
        else model.f(belief.mean, u)
    step = belief.step + 1
    require_finite(mean, "transition", step=step)
    mean = mean + as_matrix(K, "K") @ (as_vector(y, "y") - model.h(mean, u))
    return GaussianBelief(mean=mean, cov=belief.cov, step=step)

def run_filter(model: Model, belief0: GaussianBelief, observations,
    inputs=None, audit: bool = False, reference: Array | None = None,
    keep_beliefs: bool = True) -> RunRecord:
    """
    Filter a whole observation sequence. On failure the partial record is
    attached to the raised error.
    """
    Y = np.asarray(observations, dtype=float)
    Y = Y.reshape(Y.shape[0], -1)
    U = [None] * Y.shape[0] if inputs is None else np.asarray(inputs, float)
    record = RunRecord()
    belief = belief0
    if keep_beliefs:
        record.beliefs.append(belief)
    try:
        for t in range(Y.shape[0]):
            belief, entry = filter_step(belief, model, U[t], Y[t],
                audit=audit, reference=reference)
            record.append(entry)
            if keep_beliefs:
                record.beliefs.append(belief)
    except KalmanError as e:
        e.record = record
        raise
    record.final["innovation_norm"] = record.entries[-1].innovation_norm \
        if record.entries else 0.0
    return record

class DareResult(BaseModel):
    """
    Steady-state Riccati solution: predicted covariance P, filtered
    covariance, steady-state gain and diagnostics.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    P: np.ndarray
    P_filtered: np.ndarray
    K: np.ndarray
    iterations: int
    residual: float
    warnings: list[str] = Field(default_factory=list)

def _riccati(P: Array, A: Array, H: Array, Q: Array,
    R: Array) -> tuple[Array, Array, Array]:
    S = symmetrize(H @ P @ H.T + R)
    K = spd_solve(S, H @ P, "S").T
    P_filt = symmetrize(P - K @ S @ K.T)
    return symmetrize(A @ P_filt @ A.T + Q), P_filt, K

def dare_solve(A, H, Q, R, tol: float = 1e-12, max_iter: int = 10_000,
    P0=None) -> DareResult:
    """
    Solve the discrete algebraic Riccati equation by iterating the
    predicted-covariance Riccati map from P0 = Q.
    """
    A, H, Q, R = (as_matrix(A, "A"), as_matrix(H, "H"), as_matrix(Q, "Q"),
        as_matrix(R, "R"))
    n = A.shape[0]
    require_square(A, "A")
    require_square(Q, "Q", n)
    require_square(R, "R", H.shape[0])
    require_pd(R, "R")
    if H.shape[1] != n:
        raise KalmanError(Error(type=ErrorType.DIMENSION,
            msg=f"H has {H.shape[1]} columns, expected {n}",
        ))
    if tol <= 0:
        raise KalmanError(Error(type=ErrorType.INVALID_INPUT,
            msg="tol must be positive",
            input=tol,
        ))
    warnings = []
    if n <= settings.AUDIT_THRESHOLD and \
        np.linalg.matrix_rank(observability_matrix(A, H)) < n:
        warnings.append("(A, H) is not observable; convergence is not "
            "guaranteed")
        log.warning(warnings[-1])
    P = Q.copy() if P0 is None else as_matrix(P0, "P0")
    diff = np.inf
    for k in range(1, max_iter + 1):
        P_next, P_filt, K = _riccati(P, A, H, Q, R)
        diff = float(np.linalg.norm(P_next - P))
        P = P_next
        if diff <= tol:
            P_check, P_filt, K = _riccati(P, A, H, Q, R)
            return DareResult(P=P, P_filtered=P_filt, K=K, iterations=k,
                residual=float(np.linalg.norm(P_check - P)),
                warnings=warnings)
    raise KalmanError(Error(type=ErrorType.CONVERGENCE,
        msg=f"Riccati iteration did not converge in {max_iter} steps; "
            f"last residual {diff:.3g}",
        ctx={"residual": diff, "iterations": max_iter},
    ))

def dense_covariance(belief: GaussianBelief) -> Array:
    """
    The belief covariance as a dense matrix at audit scale.
    """
    return densify(belief.cov)
