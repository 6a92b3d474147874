"""
Structured covariance representations and the gain and update algebra.

Four families are supported: dense, block-diagonal, low-rank plus
isotropic diagonal (P = U U^T + delta I) and Kronecker pairs (P = A kron B).
Gains for the low-rank family never form a d x d matrix; Kronecker gains
route through the dense path at audit scale.
"""
from concurrent.futures import ThreadPoolExecutor
from typing import Annotated, Literal
import numpy as np
import numpy.typing as npt
import scipy.linalg as la
from pydantic import BaseModel, ConfigDict, Field
from .config import settings
from .errors import Error, ErrorType, KalmanError
from .linalg import (as_matrix, min_eigenvalue, require_pd, require_psd,
    require_square, spd_solve, symmetrize)
from .logs import get_logger

log = get_logger(__name__)

Array = npt.NDArray[np.float64]

class Dense(BaseModel):
    """
    A full symmetric covariance matrix.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: Literal["dense"] = "dense"
    P: np.ndarray

    @property
    def dim(self) -> int:
        return self.P.shape[0]

    def apply(self, V: Array) -> Array:
        return self.P @ V

    def inverse_apply(self, V: Array) -> Array:
        return spd_solve(self.P, V, "P")

class BlockDiagonal(BaseModel):
    """
    A covariance made of independent diagonal blocks.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: Literal["block"] = "block"
    blocks: list[np.ndarray]

    @property
    def dim(self) -> int:
        return sum(b.shape[0] for b in self.blocks)

    def slices(self) -> list[slice]:
        out, start = [], 0
        for b in self.blocks:
            out.append(slice(start, start + b.shape[0]))
            start += b.shape[0]
        return out

    def apply(self, V: Array) -> Array:
        return np.concatenate([b @ V[sl]
            for b, sl in zip(self.blocks, self.slices())])

    def inverse_apply(self, V: Array) -> Array:
        return np.concatenate([spd_solve(b, V[sl], "block")
            for b, sl in zip(self.blocks, self.slices())])

class LowRankPlusDiagonal(BaseModel):
    """
    P = U U^T + delta I with U of shape (d, r) and delta > 0.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: Literal["lowrank"] = "lowrank"
    U: np.ndarray
    delta: float = Field(gt=0)

    @property
    def dim(self) -> int:
        return self.U.shape[0]

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def apply(self, V: Array) -> Array:
        return self.U @ (self.U.T @ V) + self.delta * V

    def inverse_apply(self, V: Array) -> Array:
        """
        Woodbury: (U U^T + delta I)^-1 V without forming a d x d matrix.
        """
        core = self.delta * np.eye(self.rank) + self.U.T @ self.U
        inner = la.cho_solve(la.cho_factor(core), self.U.T @ V)
        return (V - self.U @ inner) / self.delta

class KroneckerPair(BaseModel):
    """
    P = A kron B with A of order m and B of order n.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: Literal["kronecker"] = "kronecker"
    A: np.ndarray
    B: np.ndarray

    @property
    def dim(self) -> int:
        return self.A.shape[0] * self.B.shape[0]

    def _stack(self, V: Array) -> tuple[Array, bool]:
        m, n = self.A.shape[0], self.B.shape[0]
        if V.ndim == 1:
            return V.reshape(1, m, n), True
        return V.T.reshape(V.shape[1], m, n), False

    def _unstack(self, X: Array, vector: bool) -> Array:
        if vector:
            return X.reshape(-1)
        return X.reshape(X.shape[0], -1).T

    def apply(self, V: Array) -> Array:
        """
        (A kron B) vec(X) = vec(B X A^T) for column-major vec.
        """
        X, vector = self._stack(V)
        return self._unstack(self.A @ X @ self.B.T, vector)

    def inverse_apply(self, V: Array) -> Array:
        X, vector = self._stack(V)
        Z = np.linalg.solve(self.A, X)
        Z = np.swapaxes(np.linalg.solve(self.B, np.swapaxes(Z, -1, -2)),
            -1, -2)
        return self._unstack(Z, vector)

CovarianceRepr = Annotated[
    Dense | BlockDiagonal | LowRankPlusDiagonal | KroneckerPair,
    Field(discriminator="kind"),
]

class GainResult(BaseModel):
    """
    A Kalman gain with its innovation covariance.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    K: np.ndarray
    innovation_cov: np.ndarray
    contraction: np.ndarray | None = None

def _audit_guard(d: int, threshold: int | None, what: str):
    limit = settings.AUDIT_THRESHOLD if threshold is None else threshold
    if d > limit:
        raise KalmanError(Error(type=ErrorType.AUDIT_LIMIT,
            msg=f"{what} of dimension {d} exceeds the audit threshold "
                f"{limit}",
            ctx={"dim": d, "threshold": limit},
        ))

def densify(repr: CovarianceRepr, threshold: int | None = None) -> Array:
    """
    The exact dense equivalent of a structured covariance.
    """
    _audit_guard(repr.dim, threshold, "densify")
    match repr:
        case Dense():
            return np.array(repr.P, dtype=float)
        case BlockDiagonal():
            return la.block_diag(*repr.blocks)
        case LowRankPlusDiagonal():
            return repr.U @ repr.U.T + repr.delta * np.eye(repr.dim)
        case KroneckerPair():
            return np.kron(repr.A, repr.B)
    raise KalmanError(Error(type=ErrorType.INVALID_INPUT,
        msg="unknown covariance representation",
    ))

def floor_dense(P: Dense, delta_min: float | None = None) -> Dense:
    """
    Raise the eigenvalues of a dense covariance to at least delta_min.
    """
    delta_min = settings.DELTA_FLOOR if delta_min is None else delta_min
    lam, V = la.eigh(symmetrize(P.P))
    if lam[0] >= delta_min:
        return P
    return Dense(P=symmetrize((V * np.maximum(lam, delta_min)) @ V.T))

def _check_obs(repr: CovarianceRepr, H, R) -> tuple[Array, Array]:
    H, R = as_matrix(H, "H"), as_matrix(R, "R")
    if H.shape[1] != repr.dim:
        raise KalmanError(Error(type=ErrorType.DIMENSION,
            msg=f"H has {H.shape[1]} columns, covariance has dimension "
                f"{repr.dim}",
            input=list(H.shape),
        ))
    require_square(R, "R", H.shape[0])
    require_pd(R, "R")
    return H, R

def _block_products(repr: BlockDiagonal, H: Array,
    jobs: int = 1) -> list[Array]:
    """
    P_i H_i^T per block; blocks may run concurrently, the result order is
    the block order.
    """
    def one(i: int) -> Array:
        sl = repr.slices()[i]
        return repr.blocks[i] @ H[:, sl].T
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, range(len(repr.blocks))))
    return [one(i) for i in range(len(repr.blocks))]

def innovation_covariance(repr: CovarianceRepr, H, R,
    jobs: int = 1) -> tuple[Array, Array]:
    """
    P H^T and S = H P H^T + R.
    """
    H, R = _check_obs(repr, H, R)
    if isinstance(repr, KroneckerPair):
        _audit_guard(repr.dim, None, "Kronecker gain")
    if isinstance(repr, BlockDiagonal):
        parts = _block_products(repr, H, jobs)
        S = np.array(R, dtype=float)
        for sl, PHt_i in zip(repr.slices(), parts):
            S = S + H[:, sl] @ PHt_i
        PHt = np.concatenate(parts) if parts else np.zeros((0, H.shape[0]))
    else:
        PHt = repr.apply(H.T)
        S = H @ PHt + R
    return PHt, symmetrize(S)

def gain(P_pred: CovarianceRepr, H, R, with_contraction: bool = False,
    jobs: int = 1) -> GainResult:
    """
    K = P H^T (H P H^T + R)^-1 for any covariance family.
    """
    H, R = _check_obs(P_pred, H, R)
    PHt, S = innovation_covariance(P_pred, H, R, jobs=jobs)
    K = spd_solve(S, PHt.T, "S").T
    contraction = None
    if with_contraction:
        contraction = np.eye(P_pred.dim) - K @ H
    return GainResult(K=K, innovation_cov=S, contraction=contraction)

def split_gain(P: LowRankPlusDiagonal, H, R) -> Array:
    """
    The decoupled approximation U (U^T H^T)(H U U^T H^T + R)^-1
    + delta H^T R^-1, which drops the delta H H^T term from the low-rank
    inverse.
    """
    H, R = _check_obs(P, H, R)
    HU = H @ P.U
    low = P.U @ (HU.T @ spd_solve(symmetrize(HU @ HU.T + R), np.eye(
        H.shape[0]), "S"))
    return low + P.delta * spd_solve(R, H, "R").T

def _joseph(P: Array, K: Array, H: Array, R: Array) -> Array:
    IKH = np.eye(P.shape[0]) - K @ H
    if settings.skip_symmetrize:
        return IKH @ P @ IKH.T
    return symmetrize(IKH @ P @ IKH.T + K @ R @ K.T)

def _require_update_psd(P: Array, name: str):
    if P.shape[0] > settings.AUDIT_THRESHOLD:
        return
    lam = min_eigenvalue(P)
    scale = max(1.0, float(np.max(np.abs(P)))) if P.size else 1.0
    if lam < -settings.PD_TOLERANCE * scale * max(1, P.shape[0]):
        raise KalmanError(Error(type=ErrorType.NOT_POSITIVE_DEFINITE,
            msg=f"{name} lost positive semi-definiteness: min eigenvalue "
                f"{lam:.6g}",
            ctx={"min_eigenvalue": lam},
        ))

def _retruncate(W: Array, M: Array, delta: float, r: int,
    delta_min: float) -> LowRankPlusDiagonal:
    """
    Keep the top r eigenpairs of delta I + W M W^T and fold the mean of the
    discarded spectrum into the new delta.
    """
    d = W.shape[0]
    Qw, Rw = la.qr(W, mode="economic")
    lam, V = la.eigh(symmetrize(Rw @ M @ Rw.T))
    span = delta + lam[::-1]
    vecs = Qw @ V[:, ::-1]
    k = span.size
    off = d - k
    keep = min(r, d)
    # Merge the in-span spectrum with the off-span eigenvalue delta.
    kept_span, kept_off, p = [], 0, 0
    for _ in range(keep):
        if p < k and (kept_off >= off or span[p] >= delta):
            kept_span.append(p)
            p += 1
        else:
            kept_off += 1
    dropped = d - keep
    if dropped == 0:
        new_delta = delta_min
    else:
        tail = float(np.sum(span[p:])) + delta * (off - kept_off)
        new_delta = max(delta_min, tail / dropped)
    cols = [vecs[:, i] * np.sqrt(max(span[i] - new_delta, 0.0))
        for i in kept_span]
    if kept_off:
        if d <= settings.AUDIT_THRESHOLD:
            full, _ = la.qr(W, mode="full")
            comp = full[:, k:k + kept_off]
            mag = np.sqrt(max(delta - new_delta, 0.0))
            cols.extend(comp[:, j] * mag for j in range(kept_off))
        else:
            cols.extend(np.zeros(d) for _ in range(kept_off))
    while len(cols) < r:
        cols.append(np.zeros(d))
    U = np.column_stack(cols) if cols else np.zeros((d, 0))
    return LowRankPlusDiagonal(U=U, delta=new_delta)

def truncate_rank(P_dense, r: int,
    delta_min: float | None = None) -> LowRankPlusDiagonal:
    """
    Best rank-r plus isotropic approximation of a symmetric PSD matrix:
    U spans the top r eigenvectors scaled by sqrt(max(lambda_i - delta, 0))
    and delta is the mean of the discarded eigenvalues, floored at
    delta_min.
    """
    P = as_matrix(P_dense, "P")
    require_square(P, "P")
    require_psd(P, "P")
    delta_min = settings.DELTA_FLOOR if delta_min is None else delta_min
    d = P.shape[0]
    lam, V = la.eigh(symmetrize(P))
    lam, V = lam[::-1], V[:, ::-1]
    keep = min(r, d)
    if keep >= d:
        delta = delta_min
    else:
        delta = max(delta_min, float(np.mean(lam[keep:])))
    U = V[:, :keep] * np.sqrt(np.clip(lam[:keep] - delta, 0.0, None))
    if r > keep:
        U = np.hstack([U, np.zeros((d, r - keep))])
    return LowRankPlusDiagonal(U=U, delta=delta)

def nearest_kronecker(P, m: int, n: int) -> KroneckerPair:
    """
    The Kronecker pair closest to P in Frobenius norm, by a rank-one SVD of
    the rearranged matrix, with factors kept symmetric positive definite.
    """
    P = as_matrix(P, "P")
    require_square(P, "P", m * n)
    Rr = P.reshape(m, n, m, n).transpose(0, 2, 1, 3).reshape(m * m, n * n)
    u, s, vt = np.linalg.svd(Rr, full_matrices=False)
    A = np.sqrt(s[0]) * u[:, 0].reshape(m, m)
    B = np.sqrt(s[0]) * vt[0].reshape(n, n)
    if np.trace(A) < 0:
        A, B = -A, -B
    A, B = symmetrize(A), symmetrize(B)
    floor = settings.DELTA_FLOOR
    for name, F in (("A", A), ("B", B)):
        lam, V = la.eigh(F)
        if lam[0] < floor:
            F = (V * np.clip(lam, floor, None)) @ V.T
        if name == "A":
            A = F
        else:
            B = F
    return KroneckerPair(A=A, B=B)

def kronecker_from_fisher(A_f, B_f) -> KroneckerPair:
    """
    P = A_f^-1 kron B_f^-1 from Kronecker Fisher factors.
    """
    A_f, B_f = as_matrix(A_f, "A"), as_matrix(B_f, "B")
    require_pd(A_f, "A")
    require_pd(B_f, "B")
    return KroneckerPair(A=la.inv(A_f), B=la.inv(B_f))

def measurement_update(P_pred: CovarianceRepr, K, H, R,
    delta_min: float | None = None) -> CovarianceRepr:
    """
    Posterior covariance after a measurement with gain K, kept in the same
    family as P_pred.
    """
    H, R = _check_obs(P_pred, H, R)
    K = as_matrix(K, "K")
    delta_min = settings.DELTA_FLOOR if delta_min is None else delta_min
    match P_pred:
        case Dense():
            P = _joseph(P_pred.P, K, H, R)
            _require_update_psd(P, "P")
            return Dense(P=P)
        case BlockDiagonal():
            _, S = innovation_covariance(P_pred, H, R)
            blocks = []
            for sl, B in zip(P_pred.slices(), P_pred.blocks):
                Hi, Ki = H[:, sl], K[sl]
                # The other blocks act as extra observation noise.
                R_eff = symmetrize(S - Hi @ B @ Hi.T)
                Bi = _joseph(B, Ki, Hi, R_eff)
                _require_update_psd(Bi, "block")
                blocks.append(Bi)
            return BlockDiagonal(blocks=blocks)
        case LowRankPlusDiagonal():
            _, S = innovation_covariance(P_pred, H, R)
            r, m = P_pred.rank, H.shape[0]
            W = np.hstack([P_pred.U, K])
            M = la.block_diag(np.eye(r), -S)
            return _retruncate(W, M, P_pred.delta, r, delta_min)
        case KroneckerPair():
            P = _joseph(densify(P_pred), K, H, R)
            return nearest_kronecker(P, P_pred.A.shape[0], P_pred.B.shape[0])
    raise KalmanError(Error(type=ErrorType.INVALID_INPUT,
        msg="unknown covariance representation",
    ))

def _isotropic(Q: Array | float | None, d: int) -> float | None:
    if Q is None:
        return 0.0
    if np.isscalar(Q):
        return float(Q)
    Q = np.asarray(Q, dtype=float)
    if Q.size == 0:
        return 0.0
    q = float(Q[0, 0])
    if np.allclose(Q, q * np.eye(d), rtol=0.0, atol=1e-15):
        return q
    return None

def _as_noise(Q: Array | float | None, d: int) -> Array:
    if Q is None:
        return np.zeros((d, d))
    if np.isscalar(Q):
        return float(Q) * np.eye(d)
    Q = as_matrix(Q, "Q")
    require_square(Q, "Q", d)
    return Q

def _block_part(M: Array, sls: list[slice], name: str) -> list[Array]:
    mask = la.block_diag(*[np.ones((sl.stop - sl.start,) * 2) for sl in sls])
    if np.any(np.abs(M[mask == 0]) > 0):
        raise KalmanError(Error(type=ErrorType.STRUCTURE,
            msg=f"{name} couples covariance blocks",
        ))
    return [M[sl, sl] for sl in sls]

def _noise_diagonal(Q: Array | float | None, d: int) -> Array:
    if Q is None:
        return np.zeros(d)
    if np.isscalar(Q):
        return np.full(d, float(Q))
    Q = as_matrix(Q, "Q")
    require_square(Q, "Q", d)
    return np.diag(Q).copy()

def _lowrank_predict(P: LowRankPlusDiagonal, A: Array | None,
    Q: Array | float | None, delta_min: float) -> LowRankPlusDiagonal:
    """
    A (U U^T + delta I) A^T + Q without a d x d intermediate. U moves to
    A U; delta A A^T + Q is carried by its diagonal, whose largest r
    entries join the low-rank core and whose remainder becomes the new
    isotropic term before re-truncation to rank r. Exact in trace, and
    exact whenever A and Q are diagonal and d <= r + 1.
    """
    d, r = P.dim, P.rank
    if A is None:
        AU, D = P.U, np.full(d, P.delta)
    else:
        AU = A @ P.U
        D = P.delta * np.einsum("ij,ij->i", A, A)
    D = D + _noise_diagonal(Q, d)
    k = min(r, d - 1)
    order = np.argsort(D)[::-1]
    top, rest = order[:k], order[k:]
    base = max(delta_min, float(np.mean(D[rest])))
    E = np.zeros((d, k))
    E[top, np.arange(k)] = 1.0
    W = np.hstack([AU, E])
    M = la.block_diag(np.eye(r), np.diag(np.clip(D[top] - base, 0.0, None)))
    log.debug("factored low-rank predict: dim %d rank %d delta %.3g",
        d, r, base)
    return _retruncate(W, M, base, r, delta_min)

def predict_cov(P: CovarianceRepr, A: Array | None = None,
    Q: Array | float | None = None,
    delta_min: float | None = None) -> CovarianceRepr:
    """
    A P A^T + Q in the family of P. A of None is the identity; Q may be an
    array, an isotropic scalar, or None.
    """
    d = P.dim
    if A is not None:
        A = as_matrix(A, "A")
        require_square(A, "A", d)
    delta_min = settings.DELTA_FLOOR if delta_min is None else delta_min
    match P:
        case Dense():
            Pn = P.P if A is None else A @ P.P @ A.T
            return Dense(P=symmetrize(Pn + _as_noise(Q, d)))
        case BlockDiagonal():
            sls = P.slices()
            As = [None] * len(sls) if A is None \
                else _block_part(A, sls, "transition")
            Qs = _block_part(_as_noise(Q, d), sls, "process noise")
            blocks = []
            for B, Ai, Qi in zip(P.blocks, As, Qs):
                Bn = B if Ai is None else Ai @ B @ Ai.T
                blocks.append(symmetrize(Bn + Qi))
            return BlockDiagonal(blocks=blocks)
        case LowRankPlusDiagonal():
            q = _isotropic(Q, d)
            a = 1.0 if A is None else _isotropic(A, d)
            if q is not None and a is not None:
                return LowRankPlusDiagonal(U=a * P.U,
                    delta=a * a * P.delta + q)
            return _lowrank_predict(P, A, Q, delta_min)
        case KroneckerPair():
            q = _isotropic(Q, d)
            if A is None and q == 0.0:
                return P
            dense = densify(P)
            if A is not None:
                dense = A @ dense @ A.T
            return nearest_kronecker(symmetrize(dense + _as_noise(Q, d)),
                P.A.shape[0], P.B.shape[0])
    raise KalmanError(Error(type=ErrorType.INVALID_INPUT,
        msg="unknown covariance representation",
    ))

def make_covariance(kind: Literal["dense", "block", "lowrank", "kronecker"],
    d: int, sigma0_sq: float | None = None, rank: int = 16,
    blocks: list[int] | None = None,
    kron_shape: tuple[int, int] | None = None) -> CovarianceRepr:
    """
    An isotropic prior sigma0^2 I in the requested family.
    """
    s2 = settings.SIGMA0_SQ if sigma0_sq is None else sigma0_sq
    match kind:
        case "dense":
            return Dense(P=s2 * np.eye(d))
        case "block":
            sizes = blocks or [d]
            if sum(sizes) != d:
                raise KalmanError(Error(type=ErrorType.DIMENSION,
                    msg=f"block sizes {sizes} do not sum to {d}",
                    input=sizes,
                ))
            return BlockDiagonal(blocks=[s2 * np.eye(b) for b in sizes])
        case "lowrank":
            return LowRankPlusDiagonal(U=np.zeros((d, rank)), delta=s2)
        case "kronecker":
            m, n = kron_shape or (1, d)
            if m * n != d:
                raise KalmanError(Error(type=ErrorType.DIMENSION,
                    msg=f"Kronecker shape {(m, n)} does not give {d}",
                    input=[m, n],
                ))
            s = float(np.sqrt(s2))
            return KroneckerPair(A=s * np.eye(m), B=s * np.eye(n))
    raise KalmanError(Error(type=ErrorType.INVALID_INPUT,
        msg=f"unknown covariance kind {kind}",
        input=kind,
    ))
