"""
Koopman lifting: observable dictionaries, EDMD estimation of the lifted
operator, exact linear Kalman filtering in lifted coordinates and spectral
analysis.
"""
from itertools import combinations_with_replacement, product
from typing import Annotated, Literal, Sequence
import numpy as np
import numpy.typing as npt
import scipy.linalg as la
from numpy.polynomial.hermite_e import hermegauss
from pydantic import BaseModel, ConfigDict, Field, model_validator
from .covariance import (CovarianceRepr, Dense, densify, gain,
    measurement_update, predict_cov)
from .errors import Error, ErrorType, KalmanError
from .filtering import GaussianBelief, innovate, filter_step, update
from .linalg import as_matrix, as_vector, symmetrize
from .logs import get_logger
from .statespace import (StateSpaceModel, make_linear_gaussian,
    noise_generator, quadratic_system, simulate, sqrt_factor)

log = get_logger(__name__)

Array = npt.NDArray[np.float64]

class MonomialTerm(BaseModel):
    """
    prod_i x_i ** exponents[i].
    """
    model_config = ConfigDict(frozen=True)

    kind: Literal["monomial"] = "monomial"
    exponents: tuple[int, ...]

    @property
    def degree(self) -> int:
        return sum(self.exponents)

    @property
    def name(self) -> str:
        parts = []
        for i, e in enumerate(self.exponents):
            if e == 1:
                parts.append(f"x{i + 1}")
            elif e > 1:
                parts.append(f"x{i + 1}^{e}")
        return "*".join(parts) or "1"

    def evaluate(self, X: Array) -> Array:
        return np.prod(X ** np.asarray(self.exponents), axis=1)

class RadialBump(BaseModel):
    """
    exp(-|x - center|^2 / (2 width^2)).
    """
    model_config = ConfigDict(frozen=True)

    kind: Literal["radial"] = "radial"
    center: tuple[float, ...]
    width: float = Field(gt=0)

    @property
    def name(self) -> str:
        c = ",".join(f"{v:g}" for v in self.center)
        return f"rbf({c};{self.width:g})"

    def evaluate(self, X: Array) -> Array:
        r2 = np.sum((X - np.asarray(self.center)) ** 2, axis=1)
        return np.exp(-0.5 * r2 / self.width ** 2)

Observable = Annotated[MonomialTerm | RadialBump, Field(discriminator="kind")]

class Dictionary(BaseModel):
    """
    An ordered list of observables of the state.
    """
    model_config = ConfigDict(frozen=True)

    state_dim: int = Field(gt=0)
    terms: list[Observable]

    @model_validator(mode="after")
    def check_terms(self) -> "Dictionary":
        for t in self.terms:
            size = len(t.exponents) if isinstance(t, MonomialTerm) \
                else len(t.center)
            if size != self.state_dim:
                raise ValueError(f"observable {t.name} does not act on "
                    f"{self.state_dim} coordinates")
        return self

    @property
    def dim(self) -> int:
        return len(self.terms)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.terms]

    @classmethod
    def from_exponents(cls, exponents: Sequence[Sequence[int]]) \
        -> "Dictionary":
        terms = [MonomialTerm(exponents=tuple(int(v) for v in e))
            for e in exponents]
        if not terms:
            raise KalmanError(Error(type=ErrorType.INVALID_INPUT,
                msg="a dictionary needs at least one observable",
            ))
        return cls(state_dim=len(terms[0].exponents), terms=terms)

    def lift_many(self, X) -> Array:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.state_dim:
            raise KalmanError(Error(type=ErrorType.DIMENSION,
                msg=f"states have {X.shape[1]} coordinates, dictionary "
                    f"expects {self.state_dim}",
            ))
        return np.column_stack([t.evaluate(X) for t in self.terms])

    def lift(self, x) -> Array:
        return self.lift_many(as_vector(x, "x")[None, :])[0]

    def coordinate_projection(self) -> Array | None:
        """
        C with C lift(x) = x, when every coordinate is an observable.
        """
        C = np.zeros((self.state_dim, self.dim))
        for i in range(self.state_dim):
            unit = tuple(int(j == i) for j in range(self.state_dim))
            hits = [k for k, t in enumerate(self.terms)
                if isinstance(t, MonomialTerm) and t.exponents == unit]
            if not hits:
                return None
            C[i, hits[0]] = 1.0
        return C

def lift(dictionary: Dictionary, x) -> Array:
    return dictionary.lift(x)

def lift_many(dictionary: Dictionary, X) -> Array:
    return dictionary.lift_many(X)

def identity_dictionary(n: int) -> Dictionary:
    return monomial_dictionary(n, 1)

def monomial_dictionary(n: int, degree: int) -> Dictionary:
    """
    All monomials of degree 1 to degree, no constant. Terms are ordered by
    degree, then by combinations_with_replacement order of the variables:
    in 2-D with degree 2 this gives x1, x2, x1^2, x1*x2, x2^2.
    """
    terms = []
    for k in range(1, degree + 1):
        for combo in combinations_with_replacement(range(n), k):
            e = [0] * n
            for i in combo:
                e[i] += 1
            terms.append(MonomialTerm(exponents=tuple(e)))
    return Dictionary(state_dim=n, terms=terms)

def radial_dictionary(n: int, grid: Sequence[float], width: float,
    include_coordinates: bool = True) -> Dictionary:
    """
    Radial bumps centred on the tensor grid grid^n, optionally preceded by
    the coordinate observables.
    """
    terms = list(identity_dictionary(n).terms) if include_coordinates else []
    for c in product(grid, repeat=n):
        terms.append(RadialBump(center=tuple(float(v) for v in c),
            width=width))
    return Dictionary(state_dim=n, terms=terms)

def parse_dictionary(spec: str, n: int) -> Dictionary:
    """
    Build a dictionary from "identity", "monomial:DEGREE" or
    "terms:E1;E2;..." where each E is comma separated exponents.
    """
    kind, _, arg = spec.partition(":")
    try:
        match kind.strip():
            case "identity":
                return identity_dictionary(n)
            case "monomial":
                return monomial_dictionary(n, int(arg))
            case "terms":
                return Dictionary.from_exponents([
                    [int(v) for v in e.split(",")]
                    for e in arg.split(";") if e.strip()])
    except ValueError as e:
        raise KalmanError(Error(type=ErrorType.INVALID_INPUT,
            msg=f"invalid dictionary spec {spec!r}: {e}",
            input=spec,
        ))
    raise KalmanError(Error(type=ErrorType.INVALID_INPUT,
        msg=f"unknown dictionary spec {spec!r}",
        input=spec,
    ))

class KoopmanModel(BaseModel):
    """
    A linear Gaussian model z' = K z + w, y = C z + v over lifted states.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    K: np.ndarray
    C: np.ndarray
    Q_lift: np.ndarray
    R: np.ndarray
    dictionary: Dictionary
    residual: float = 0.0

    @model_validator(mode="after")
    def check_dims(self) -> "KoopmanModel":
        d = self.K.shape[0]
        if self.K.shape != (d, d) or self.C.shape[1] != d \
            or self.Q_lift.shape != (d, d) \
            or self.R.shape != (self.C.shape[0],) * 2 \
            or self.dictionary.dim != d:
            raise ValueError("inconsistent Koopman model dimensions")
        if not np.all(np.isfinite(self.K)):
            raise ValueError("K is not finite")
        return self

    @property
    def dim(self) -> int:
        return self.K.shape[0]

def koopman_model(K, C, Q_lift, R,
    dictionary: Dictionary | None = None) -> KoopmanModel:
    """
    A Koopman model from explicit matrices; the dictionary defaults to the
    identity lift.
    """
    K = as_matrix(K, "K")
    return KoopmanModel(K=K, C=as_matrix(C, "C"),
        Q_lift=as_matrix(Q_lift, "Q"), R=as_matrix(R, "R"),
        dictionary=dictionary or identity_dictionary(K.shape[0]))

def edmd_operator(G, G_next, reg: float | None = None) -> Array:
    """
    K minimizing sum |g'_t - K g_t|^2 for lifted snapshot rows, by the
    Tikhonov-regularized normal equations and one refinement step.
    """
    G, G_next = as_matrix(G, "G"), as_matrix(G_next, "G_next")
    A = G.T @ G
    d = A.shape[0]
    lam = 1e-10 * float(np.trace(A)) / d if reg is None else reg
    fac = la.cho_factor(A + lam * np.eye(d))
    B = G.T @ G_next
    Kt = la.cho_solve(fac, B)
    Kt = Kt + la.cho_solve(fac, B - A @ Kt)
    return Kt.T

def edmd_fit(snapshot_pairs: Sequence[tuple], dictionary: Dictionary,
    reg: float | None = None, C=None, R=None,
    rank_tol: float | None = None) -> KoopmanModel:
    """
    Fit a Koopman model from (x_t, x_{t+1}) pairs. Q_lift is the residual
    covariance plus a 1e-9 floor; C defaults to the coordinate projection
    and R to the identity.
    """
    if not snapshot_pairs:
        raise KalmanError(Error(type=ErrorType.RANK_DEFICIENT,
            msg="no snapshot pairs",
        ))
    X = np.array([np.atleast_1d(p[0]) for p in snapshot_pairs], dtype=float)
    Y = np.array([np.atleast_1d(p[1]) for p in snapshot_pairs], dtype=float)
    G, G_next = dictionary.lift_many(X), dictionary.lift_many(Y)
    N, d = G.shape
    if N < d:
        raise KalmanError(Error(type=ErrorType.RANK_DEFICIENT,
            msg=f"{N} snapshots cannot determine {d} observables",
            ctx={"snapshots": N, "dim": d},
        ))
    _, s, Vt = np.linalg.svd(G, full_matrices=False)
    tol = max(N, d) * np.finfo(float).eps * s[0] if rank_tol is None \
        else rank_tol
    rank = int(np.sum(s > tol))
    if rank < d:
        names = dictionary.names
        directions = []
        for v in Vt[rank:]:
            top = np.argsort(-np.abs(v))[:3]
            directions.append(" + ".join(f"{v[i]:.3g}*{names[i]}"
                for i in top if abs(v[i]) > 1e-6))
        raise KalmanError(Error(type=ErrorType.RANK_DEFICIENT,
            msg=f"lifted snapshots have rank {rank} < {d}; deficient "
                f"directions: {'; '.join(directions)}",
            ctx={"rank": rank, "directions": directions},
        ))
    K = edmd_operator(G, G_next, reg)
    E = G_next - G @ K.T
    residual = float(np.linalg.norm(E) / max(np.linalg.norm(G_next), 1e-300))
    Q_lift = symmetrize(E.T @ E / max(N - 1, 1)) + 1e-9 * np.eye(d)
    if C is None:
        C = dictionary.coordinate_projection()
        if C is None:
            raise KalmanError(Error(type=ErrorType.INVALID_INPUT,
                msg="dictionary lacks coordinate observables; pass C",
            ))
    C = as_matrix(C, "C")
    R = np.eye(C.shape[0]) if R is None else as_matrix(R, "R")
    log.info("EDMD fit: %d snapshots, %d observables, residual %.3g", N, d,
        residual)
    return KoopmanModel(K=K, C=C, Q_lift=Q_lift, R=R, dictionary=dictionary,
        residual=residual)

def as_state_space(model: KoopmanModel) -> StateSpaceModel:
    return make_linear_gaussian(model.K, model.C, model.Q_lift, model.R)

def lifted_prior(dictionary: Dictionary, mean, cov, points: int = 5,
    samples: int = 100_000, seed: int = 0) -> GaussianBelief:
    """
    Moment-matched Gaussian over z = lift(x) for x ~ N(mean, cov), by
    Gauss-Hermite quadrature on small state dimensions and seeded sampling
    otherwise.
    """
    mean, cov = as_vector(mean, "mean"), as_matrix(cov, "cov")
    n = mean.size
    L = sqrt_factor(cov)
    if points ** n <= 1_000_000:
        nodes, weights = hermegauss(points)
        weights = weights / np.sqrt(2 * np.pi)
        grid = np.array(list(product(nodes, repeat=n)))
        w = np.prod(np.array(list(product(weights, repeat=n))), axis=1)
    else:
        grid = noise_generator(seed, 0, 4).standard_normal((samples, n))
        w = np.full(samples, 1.0 / samples)
    Z = dictionary.lift_many(mean + grid @ L.T)
    mu = w @ Z
    D = Z - mu
    P = symmetrize((D * w[:, None]).T @ D)
    return GaussianBelief(mean=mu, cov=Dense(P=P))

def lifted_update(belief: GaussianBelief, model: KoopmanModel,
    y) -> GaussianBelief:
    y = as_vector(y, "y")
    g = gain(belief.cov, model.C, model.R)
    mean = belief.mean + g.K @ (y - model.C @ belief.mean)
    cov = measurement_update(belief.cov, g.K, model.C, model.R)
    return GaussianBelief(mean=mean, cov=cov, step=belief.step)

def relift_belief(belief: GaussianBelief,
    dictionary: Dictionary) -> GaussianBelief:
    """
    Moment-match a lifted belief back onto the lifted manifold: the
    Gaussian over x read off the coordinate observables is lifted again.
    Observables that are functions of the coordinates, such as x1^2, then
    pick up what the filter learned about the coordinates.
    """
    Pi = dictionary.coordinate_projection()
    if Pi is None:
        raise KalmanError(Error(type=ErrorType.INVALID_INPUT,
            msg="re-lifting needs every state coordinate as an observable",
            input=dictionary.names,
        ))
    P = densify(belief.cov)
    lifted = lifted_prior(dictionary, Pi @ belief.mean,
        symmetrize(Pi @ P @ Pi.T))
    return GaussianBelief(mean=lifted.mean, cov=lifted.cov, step=belief.step)

def lifted_filter_step(belief: GaussianBelief, model: KoopmanModel, y,
    relift: bool = False) -> GaussianBelief:
    """
    A linear Kalman step in lifted coordinates. No Jacobian is evaluated.
    With relift the posterior is moment-matched back onto the lifted
    manifold.
    """
    cov = predict_cov(belief.cov, model.K, model.Q_lift)
    pred = GaussianBelief(mean=model.K @ belief.mean, cov=cov,
        step=belief.step + 1)
    post = lifted_update(pred, model, y)
    return relift_belief(post, model.dictionary) if relift else post

class SpectrumReport(BaseModel):
    eigenvalues: list[complex]
    radius: float
    modal_condition: float
    stable: bool

def spectrum(model: KoopmanModel) -> SpectrumReport:
    lam, V = la.eig(model.K)
    radius = float(np.max(np.abs(lam))) if lam.size else 0.0
    if radius >= 1.0:
        log.warning("lifted operator is not stable: spectral radius %.6g",
            radius)
    return SpectrumReport(eigenvalues=[complex(v) for v in lam],
        radius=radius, modal_condition=float(np.linalg.cond(V)),
        stable=radius < 1.0)

def modal_rollout(model: KoopmanModel, z0, T: int,
    max_condition: float = 1e8) -> Array:
    """
    z_t = V Lambda^t V^-1 z0 for t = 0..T, refused when the eigenvector
    matrix is ill conditioned.
    """
    z0 = as_vector(z0, "z0")
    lam, V = la.eig(model.K)
    cond = float(np.linalg.cond(V))
    if not cond <= max_condition:
        raise KalmanError(Error(type=ErrorType.SINGULAR,
            msg=f"eigenvector matrix condition number {cond:.3g} exceeds "
                f"{max_condition:.3g}; K is defective or nearly so",
            ctx={"condition": cond},
        ))
    c = la.solve(V, z0.astype(complex))
    t = np.arange(T + 1)[:, None]
    return np.real((lam[None, :] ** t * c[None, :]) @ V.T)

class PairedRMSE(BaseModel):
    lifted: list[float]
    ekf: list[float]

    @property
    def win_fraction(self) -> float:
        wins = sum(a <= b for a, b in zip(self.lifted, self.ekf))
        return wins / max(len(self.lifted), 1)

def lifted_vs_ekf(seeds: Sequence[int], T: int = 30, q: float = 1e-4,
    r: float = 0.01, observe: int = 0, relift: bool = True,
    fit_seed: int = 10_000) -> PairedRMSE:
    """
    State RMSE of the lifted Kalman filter and of the EKF on the quadratic
    benchmark system, on the same trajectories. x0 ~ N(0, I) and both
    filters start from that prior. `observe` picks the measured coordinate.
    """
    Cx = np.zeros((1, 2))
    Cx[0, observe] = 1.0
    system = quadratic_system(Q=q * np.eye(2), R=[[r]], C=Cx)
    dictionary = Dictionary.from_exponents([[1, 0], [0, 1], [2, 0]])
    pairs = []
    for k in range(20):
        x0 = noise_generator(fit_seed, k, 3).standard_normal(2)
        pairs.extend(simulate(system, 50, x0, fit_seed + k).snapshot_pairs())
    Cz = np.hstack([Cx, np.zeros((1, 1))])
    model = edmd_fit(pairs, dictionary, C=Cz, R=[[r]])
    prior_z = lifted_prior(dictionary, np.zeros(2), np.eye(2))
    out = PairedRMSE(lifted=[], ekf=[])
    for seed in seeds:
        x0 = noise_generator(seed, 0, 3).standard_normal(2)
        traj = simulate(system, T, x0, seed)
        z = prior_z
        x = GaussianBelief(mean=np.zeros(2), cov=Dense(P=np.eye(2)))
        err_z, err_x = [], []
        for t in range(T):
            y = traj.observations[t]
            if t == 0:
                z = lifted_update(z, model, y)
                if relift:
                    z = relift_belief(z, dictionary)
                x, _ = update(x, innovate(x, system, y), system.R)
            else:
                z = lifted_filter_step(z, model, y, relift)
                x, _ = filter_step(x, system, None, y)
            err_z.append(np.sum((z.mean[:2] - traj.states[t]) ** 2))
            err_x.append(np.sum((x.mean - traj.states[t]) ** 2))
        out.lifted.append(float(np.sqrt(np.mean(err_z))))
        out.ekf.append(float(np.sqrt(np.mean(err_x))))
    return out
