"""
Fisher information and the Kalman gain to natural gradient correspondence.
"""
from typing import Literal
import numpy as np
import numpy.typing as npt
import scipy.linalg as la
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import linregress, multivariate_normal
from .covariance import CovarianceRepr, Dense, densify, gain
from .errors import Error, ErrorType, KalmanError
from .linalg import (as_matrix, as_vector, require_pd, require_square,
    spd_solve, symmetrize)

Array = npt.NDArray[np.float64]

class FisherMetric(BaseModel):
    """
    A Fisher information matrix with its diagonal regularization.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    F: np.ndarray
    source: Literal["gaussian", "categorical"]
    regularization: float = Field(default=0.0, ge=0)

    @property
    def dim(self) -> int:
        return self.F.shape[0]

    @property
    def regularized(self) -> Array:
        return self.F + self.regularization * np.eye(self.dim)

def default_regularization(F: Array) -> float:
    """
    1e-8 * trace(F) / d, or 1e-8 for a zero matrix.
    """
    d = max(F.shape[0], 1)
    tr = float(np.trace(F))
    return 1e-8 * tr / d if tr > 0 else 1e-8

def fisher_gaussian(H, R, regularization: float | None = None) -> FisherMetric:
    """
    F = H^T R^-1 H.
    """
    H, R = as_matrix(H, "H"), as_matrix(R, "R")
    require_square(R, "R", H.shape[0])
    require_pd(R, "R")
    F = symmetrize(H.T @ spd_solve(R, H, "R"))
    eps = default_regularization(F) if regularization is None \
        else regularization
    return FisherMetric(F=F, source="gaussian", regularization=eps)

def fisher_categorical(W, s, regularization: float | None = None,
    tol: float = 1e-10) -> FisherMetric:
    """
    F_h = W^T (diag(s) - s s^T) W for softmax probabilities s.
    """
    W, s = as_matrix(W, "W"), as_vector(s, "s")
    if s.size != W.shape[0]:
        raise KalmanError(Error(type=ErrorType.DIMENSION,
            msg=f"s has length {s.size}, W has {W.shape[0]} rows",
        ))
    if np.any(s < -tol) or abs(float(np.sum(s)) - 1.0) > tol:
        raise KalmanError(Error(type=ErrorType.INVALID_INPUT,
            msg="s is not a probability vector",
            ctx={"sum": float(np.sum(s)), "min": float(np.min(s))},
        ))
    F = symmetrize(W.T @ (np.diag(s) - np.outer(s, s)) @ W)
    eps = default_regularization(F) if regularization is None \
        else regularization
    return FisherMetric(F=F, source="categorical", regularization=eps)

def natural_gradient_step(theta, F: FisherMetric, grad,
    eta: float) -> Array:
    """
    theta + eta (F + eps I)^-1 grad.
    """
    theta, grad = as_vector(theta, "theta"), as_vector(grad, "grad")
    return theta + eta * spd_solve(F.regularized, grad, "F")

def reparameterize(F: FisherMetric, T) -> FisherMetric:
    """
    The metric in phi coordinates for theta = T phi.
    """
    T = as_matrix(T, "T")
    return FisherMetric(F=symmetrize(T.T @ F.F @ T), source=F.source,
        regularization=F.regularization)

def gaussian_log_likelihood(y, y_hat, R) -> float:
    return float(multivariate_normal.logpdf(as_vector(y, "y"),
        mean=as_vector(y_hat, "y_hat"), cov=as_matrix(R, "R")))

def gaussian_score(H, R, residual) -> Array:
    """
    H^T R^-1 (y - y_hat), the gradient of the Gaussian log-likelihood.
    """
    H = as_matrix(H, "H")
    return H.T @ spd_solve(as_matrix(R, "R"), as_vector(residual, "residual"),
        "R")

class EquivalenceGap(BaseModel):
    """
    Relative distances of the Kalman gain from the natural-gradient
    preconditioner F^-1 H^T R^-1 and from half of it.
    """
    gap_ng: float | None = None
    gap_damped: float | None = None
    notes: list[str] = Field(default_factory=list)

def _dense(P: CovarianceRepr | Array) -> Array:
    if isinstance(P, np.ndarray | list):
        return as_matrix(P, "P")
    return densify(P)

def equivalence_gap(P: CovarianceRepr | Array, H, R) -> EquivalenceGap:
    """
    gap_ng uses the given P; gap_damped sets P = F^-1 exactly. Both need
    H of full column rank.
    """
    P = _dense(P)
    H, R = as_matrix(H, "H"), as_matrix(R, "R")
    require_pd(P, "P")
    out = EquivalenceGap()
    if np.linalg.matrix_rank(H) < H.shape[1]:
        out.notes.append("H is rank deficient; F is singular and both gaps "
            "are undefined")
        return out
    HtRi = spd_solve(R, H, "R").T
    F = symmetrize(HtRi @ H)
    G = la.solve(F, HtRi, assume_a="pos")
    K = gain(Dense(P=P), H, R).K
    # K - G = -(P^-1 + F)^-1 P^-1 G, free of cancellation as R -> 0.
    Pinv = la.solve(P, np.eye(P.shape[0]), assume_a="pos")
    diff = la.solve(symmetrize(Pinv + F), Pinv @ G, assume_a="pos")
    out.gap_ng = float(np.linalg.norm(diff) / np.linalg.norm(K))
    K_star = gain(Dense(P=la.inv(F)), H, R).K
    out.gap_damped = float(np.linalg.norm(K_star - 0.5 * G)
        / np.linalg.norm(K_star))
    if H.shape[0] != H.shape[1]:
        out.notes.append("H is not square; gap_damped is reported, not "
            "asserted")
    return out

class LimitFit(BaseModel):
    """
    Log-log fit of gap_ng against the observation noise scale.
    """
    scales: list[float]
    gaps: list[float]
    slope: float
    intercept: float
    r2: float

def limit_equivalence_fit(P, H, scales=None) -> LimitFit:
    """
    gap_ng(P, H, r I) over noise scales r with a linear fit in log-log
    coordinates.
    """
    scales = np.logspace(-9, -2, 8) if scales is None \
        else np.asarray(scales, dtype=float)
    H = as_matrix(H, "H")
    gaps = []
    for r in scales:
        g = equivalence_gap(P, H, r * np.eye(H.shape[0]))
        if g.gap_ng is None:
            raise KalmanError(Error(type=ErrorType.RANK_DEFICIENT,
                msg="H must have full column rank",
                input=list(H.shape),
            ))
        gaps.append(g.gap_ng)
    fit = linregress(np.log(scales), np.log(gaps))
    return LimitFit(scales=scales.tolist(), gaps=gaps, slope=fit.slope,
        intercept=fit.intercept, r2=fit.rvalue ** 2)
