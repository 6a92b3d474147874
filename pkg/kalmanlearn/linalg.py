"""
Shared dense linear algebra helpers.
"""
from typing import Any, Callable
import numpy as np
import numpy.typing as npt
import scipy.linalg as la
from .config import settings
from .errors import Error, ErrorType, KalmanError

Array = npt.NDArray[np.float64]

def as_matrix(a: Any, name: str = "matrix") -> Array:
    """
    Convert a nested sequence or scalar to a 2-D float array.
    """
    m = np.atleast_2d(np.asarray(a, dtype=float))
    if m.ndim != 2:
        raise KalmanError(Error(type=ErrorType.DIMENSION,
            msg=f"{name} must be two dimensional",
            input=list(m.shape),
        ))
    return m

def as_vector(a: Any, name: str = "vector") -> Array:
    """
    Convert a sequence or scalar to a 1-D float array.
    """
    v = np.atleast_1d(np.asarray(a, dtype=float))
    if v.ndim != 1:
        raise KalmanError(Error(type=ErrorType.DIMENSION,
            msg=f"{name} must be one dimensional",
            input=list(v.shape),
        ))
    return v

def symmetrize(m: Array) -> Array:
    return 0.5 * (m + m.T)

def require_square(m: Array, name: str, n: int | None = None):
    """
    Reject non-square matrices or matrices of the wrong order.
    """
    if m.shape[0] != m.shape[1] or (n is not None and m.shape[0] != n):
        raise KalmanError(Error(type=ErrorType.DIMENSION,
            msg=f"{name} has shape {m.shape}, expected square of order "
                f"{n if n is not None else m.shape[0]}",
            input=list(m.shape),
        ))

def min_eigenvalue(m: Array) -> float:
    if m.size == 0:
        return np.inf
    return float(la.eigvalsh(symmetrize(m))[0])

def require_symmetric(m: Array, name: str, tol: float = 1e-9):
    """
    Reject matrices that are not symmetric within a relative tolerance.
    """
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if m.size and float(np.max(np.abs(m - m.T))) > tol * scale:
        raise KalmanError(Error(type=ErrorType.INVALID_INPUT,
            msg=f"{name} is not symmetric",
            ctx={"asymmetry": float(np.max(np.abs(m - m.T)))},
        ))

def require_psd(m: Array, name: str):
    """
    Reject matrices that are not symmetric positive semi-definite.
    """
    require_symmetric(m, name)
    lam = min_eigenvalue(m)
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if lam < -settings.PD_TOLERANCE * scale * max(1, m.shape[0]):
        raise KalmanError(Error(type=ErrorType.NOT_POSITIVE_DEFINITE,
            msg=f"{name} is not positive semi-definite: min eigenvalue "
                f"{lam:.6g}",
            ctx={"min_eigenvalue": lam},
        ))

def require_pd(m: Array, name: str, floor: float = 1e-12):
    """
    Reject matrices whose minimum eigenvalue is below the floor.
    """
    require_symmetric(m, name)
    lam = min_eigenvalue(m)
    if not lam >= floor:
        raise KalmanError(Error(type=ErrorType.NOT_POSITIVE_DEFINITE,
            msg=f"{name} is not positive definite: min eigenvalue {lam:.6g}",
            ctx={"min_eigenvalue": lam},
        ))

def require_finite(a: Array, name: str, step: int | None = None):
    """
    Reject arrays holding NaN or infinite values.
    """
    if not np.all(np.isfinite(a)):
        raise KalmanError(Error(type=ErrorType.NON_FINITE,
            msg=f"{name} is not finite"
                + (f" at step {step}" if step is not None else ""),
            ctx={"step": step},
        ))

def spd_solve(S: Array, B: Array, name: str = "S") -> Array:
    """
    Solve S X = B for symmetric positive definite S, refusing numerically
    singular systems.
    """
    lam = la.eigvalsh(symmetrize(S))
    lam_min, lam_max = float(lam[0]), float(lam[-1])
    if lam_min <= 0 or lam_max / lam_min > settings.CONDITION_LIMIT:
        raise KalmanError(Error(type=ErrorType.SINGULAR,
            msg=f"{name} is numerically singular: min eigenvalue "
                f"{lam_min:.6g}",
            ctx={"min_eigenvalue": lam_min, "max_eigenvalue": lam_max},
        ))
    return la.cho_solve(la.cho_factor(symmetrize(S)), B)

def spectral_radius(m: Array) -> float:
    if m.size == 0:
        return 0.0
    return float(np.max(np.abs(la.eigvals(m))))

def jacobian_fd(fn: Callable[[Array], Array], x: Array) -> Array:
    """
    Central finite-difference Jacobian with step
    cbrt(eps) * max(1, |x_i|) per coordinate.
    """
    x = as_vector(x, "x")
    f0 = np.atleast_1d(np.asarray(fn(x), dtype=float))
    J = np.zeros((f0.size, x.size))
    for i in range(x.size):
        h = settings.FD_STEP_SCALE * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        # The representable step, not the requested one.
        step = xp[i] - xm[i]
        J[:, i] = (np.atleast_1d(fn(xp)) - np.atleast_1d(fn(xm))) / step
    return J
