"""
State-space systems, augmented parameter-states, observation likelihoods
and seeded synthetic data.
"""
from pathlib import Path
from typing import Callable, Literal
import numpy as np
import numpy.typing as npt
import scipy.linalg as la
from scipy.special import softmax, log_softmax, expit
from scipy.stats import multivariate_normal
from pydantic import BaseModel, ConfigDict, Field
from .errors import Error, ErrorType, KalmanError
from .linalg import (as_matrix, as_vector, jacobian_fd, require_pd,
    require_psd, require_square)

Array = npt.NDArray[np.float64]
MapFn = Callable[[Array, Array, Array], Array]

def frozen(a) -> np.ndarray:
    """
    Return a read-only float copy of an array.
    """
    m = np.array(a, dtype=float)
    m.setflags(write=False)
    return m

class StateSpaceModel(BaseModel):
    """
    A discrete-time system x' = f(x, u; theta) + w, y = h(x, u; theta) + v
    with w ~ N(0, Q) and v ~ N(0, R).

    Maps take (x, u, theta). Analytic Jacobians, when supplied, are taken
    with respect to the stacked vector [x; theta].
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    state_dim: int = Field(ge=0)
    obs_dim: int = Field(gt=0)
    input_dim: int = Field(default=0, ge=0)
    param_dim: int = Field(default=0, ge=0)
    transition: MapFn
    observation: MapFn
    Q: np.ndarray
    R: np.ndarray
    theta: np.ndarray = Field(default_factory=lambda: frozen(np.zeros(0)))
    transition_jacobian: MapFn | None = None
    observation_jacobian: MapFn | None = None
    linear: bool = False

    @property
    def dim(self) -> int:
        return self.state_dim

    @property
    def process_noise(self) -> np.ndarray:
        return self.Q

    @property
    def identity_transition(self) -> bool:
        return False

    @property
    def has_jacobians(self) -> bool:
        return (self.transition_jacobian is not None
            and self.observation_jacobian is not None)

    def input(self, u: Array | None) -> Array:
        if u is None:
            return np.zeros(self.input_dim)
        return as_vector(u, "input")

    def f(self, x: Array, u: Array | None = None) -> Array:
        return np.asarray(self.transition(x, self.input(u), self.theta),
            dtype=float)

    def h(self, x: Array, u: Array | None = None) -> Array:
        return np.atleast_1d(np.asarray(
            self.observation(x, self.input(u), self.theta), dtype=float))

    def F(self, x: Array, u: Array | None = None) -> Array:
        """
        Transition Jacobian with respect to the state.
        """
        u = self.input(u)
        if self.transition_jacobian is not None:
            J = as_matrix(self.transition_jacobian(x, u, self.theta))
            return J[:, :self.state_dim]
        return jacobian_fd(lambda x_: self.f(x_, u), x)

    def H(self, x: Array, u: Array | None = None) -> Array:
        """
        Observation Jacobian with respect to the state.
        """
        u = self.input(u)
        if self.observation_jacobian is not None:
            J = as_matrix(self.observation_jacobian(x, u, self.theta))
            return J[:, :self.state_dim]
        return jacobian_fd(lambda x_: self.h(x_, u), x)

class AugmentedModel(BaseModel):
    """
    A model over z = [x; theta] whose parameter block follows a random walk
    with diffusion Q_theta.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    base: StateSpaceModel
    param_dim: int = Field(ge=0)
    param_diffusion: np.ndarray
    theta0: np.ndarray

    @property
    def dim(self) -> int:
        return self.base.state_dim + self.param_dim

    @property
    def state_dim(self) -> int:
        return self.dim

    @property
    def obs_dim(self) -> int:
        return self.base.obs_dim

    @property
    def R(self) -> np.ndarray:
        return self.base.R

    @property
    def process_noise(self) -> np.ndarray:
        return la.block_diag(self.base.Q, self.param_diffusion)

    @property
    def identity_transition(self) -> bool:
        return self.base.state_dim == 0

    @property
    def has_jacobians(self) -> bool:
        return self.base.has_jacobians

    def input(self, u: Array | None) -> Array:
        return self.base.input(u)

    def initial_mean(self, x0: Array | None = None) -> Array:
        if x0 is None:
            x0 = np.zeros(self.base.state_dim)
        return np.concatenate([as_vector(x0, "x0"), self.theta0])

    def split(self, z: Array) -> tuple[Array, Array]:
        n = self.base.state_dim
        return z[:n], z[n:]

    def f(self, z: Array, u: Array | None = None) -> Array:
        x, th = self.split(z)
        if self.base.state_dim == 0:
            return np.array(z, dtype=float)
        x_next = self.base.transition(x, self.input(u), th)
        return np.concatenate([np.asarray(x_next, dtype=float), th])

    def h(self, z: Array, u: Array | None = None) -> Array:
        x, th = self.split(z)
        return np.atleast_1d(np.asarray(
            self.base.observation(x, self.input(u), th), dtype=float))

    def F(self, z: Array, u: Array | None = None) -> Array:
        """
        Augmented transition Jacobian; the lower-right block is identity.
        """
        n, p = self.base.state_dim, self.param_dim
        u = self.input(u)
        x, th = self.split(z)
        if n == 0:
            return np.eye(p)
        if self.base.transition_jacobian is not None:
            top = as_matrix(self.base.transition_jacobian(x, u, th))
        else:
            top = jacobian_fd(lambda z_: np.asarray(self.base.transition(
                z_[:n], u, z_[n:]), dtype=float), z)
        bottom = np.hstack([np.zeros((p, n)), np.eye(p)])
        return np.vstack([top, bottom])

    def H(self, z: Array, u: Array | None = None) -> Array:
        u = self.input(u)
        x, th = self.split(z)
        if self.base.observation_jacobian is not None:
            return as_matrix(self.base.observation_jacobian(x, u, th))
        return jacobian_fd(lambda z_: self.h(z_, u), z)

Model = StateSpaceModel | AugmentedModel

def _check_noise(Q: Array, R: Array, n: int, m: int) -> tuple[Array, Array]:
    require_square(Q, "Q", n)
    require_square(R, "R", m)
    require_psd(Q, "Q")
    require_pd(R, "R")
    return frozen(Q), frozen(R)

def make_linear_gaussian(A, C, Q, R, B=None) -> StateSpaceModel:
    """
    Build x' = A x (+ B u) + w, y = C x + v with analytic Jacobians.
    """
    A, C = as_matrix(A, "A"), as_matrix(C, "C")
    Q, R = as_matrix(Q, "Q"), as_matrix(R, "R")
    require_square(A, "A")
    n = A.shape[0]
    if C.shape[1] != n:
        raise KalmanError(Error(type=ErrorType.DIMENSION,
            msg=f"C has {C.shape[1]} columns, expected {n}",
            input=list(C.shape),
        ))
    Q, R = _check_noise(Q, R, n, C.shape[0])
    A, C = frozen(A), frozen(C)
    if B is None:
        B = np.zeros((n, 0))
    B = frozen(as_matrix(B, "B") if np.size(B) else np.zeros((n, 0)))
    if B.shape[0] != n:
        raise KalmanError(Error(type=ErrorType.DIMENSION,
            msg=f"B has {B.shape[0]} rows, expected {n}",
            input=list(B.shape),
        ))
    return StateSpaceModel(
        state_dim=n,
        obs_dim=C.shape[0],
        input_dim=B.shape[1],
        transition=lambda x, u, th: A @ x + B @ u,
        observation=lambda x, u, th: C @ x,
        transition_jacobian=lambda x, u, th: A,
        observation_jacobian=lambda x, u, th: C,
        Q=Q,
        R=R,
        linear=True,
    )

def make_nonlinear(transition: MapFn, observation: MapFn, Q, R,
    transition_jacobian: MapFn | None = None,
    observation_jacobian: MapFn | None = None,
    param_dim: int = 0,
    theta=None,
    input_dim: int = 0,
) -> StateSpaceModel:
    """
    Build a model from user maps taking (x, u, theta).
    """
    Q, R = as_matrix(Q, "Q") if np.size(Q) else np.zeros((0, 0)), \
        as_matrix(R, "R")
    n, m = Q.shape[0], R.shape[0]
    Q, R = _check_noise(Q, R, n, m)
    theta = frozen(np.zeros(param_dim) if theta is None
        else as_vector(theta, "theta"))
    if theta.size != param_dim:
        raise KalmanError(Error(type=ErrorType.DIMENSION,
            msg=f"theta has length {theta.size}, expected {param_dim}",
        ))
    return StateSpaceModel(
        state_dim=n,
        obs_dim=m,
        input_dim=input_dim,
        param_dim=param_dim,
        transition=transition,
        observation=observation,
        transition_jacobian=transition_jacobian,
        observation_jacobian=observation_jacobian,
        Q=Q,
        R=R,
        theta=theta,
    )

def augment_parameters(model: StateSpaceModel, theta0,
    Q_theta) -> AugmentedModel:
    """
    Stack the parameters under the state: z = [x; theta] with transition
    [f_theta(x, u); theta] and process noise blockdiag(Q, Q_theta).
    """
    theta0 = as_vector(theta0, "theta0") if np.size(theta0) else np.zeros(0)
    if theta0.size != model.param_dim:
        raise KalmanError(Error(type=ErrorType.DIMENSION,
            msg=f"theta0 has length {theta0.size}, expected "
                f"{model.param_dim}",
        ))
    p = model.param_dim
    Q_theta = np.zeros((p, p)) if np.isscalar(Q_theta) and Q_theta == 0 \
        else as_matrix(Q_theta, "Q_theta")
    require_square(Q_theta, "Q_theta", p)
    require_psd(Q_theta, "Q_theta")
    return AugmentedModel(
        base=model,
        param_dim=p,
        param_diffusion=frozen(Q_theta),
        theta0=frozen(theta0),
    )

def make_regression_model(d: int, link: Literal["linear", "logistic"]
    = "linear", R: float = 1.0, Q_theta: float = 0.0) -> AugmentedModel:
    """
    A pure-parameter model y = g(u . theta) + v, where the datum's features
    arrive as the input u.
    """
    if link == "linear":
        obs = lambda x, u, th: np.array([u @ th])
        jac = lambda x, u, th: u[None, :]
    elif link == "logistic":
        def obs(x, u, th):
            return np.array([expit(u @ th)])
        def jac(x, u, th):
            s = expit(u @ th)
            return (s * (1.0 - s) * u)[None, :]
    else:
        raise KalmanError(Error(type=ErrorType.INVALID_INPUT,
            msg=f"unknown link {link}",
            input=link,
        ))
    base = make_nonlinear(
        transition=lambda x, u, th: x,
        observation=obs,
        Q=np.zeros((0, 0)),
        R=[[R]],
        transition_jacobian=lambda x, u, th: np.zeros((0, d)),
        observation_jacobian=jac,
        param_dim=d,
        input_dim=d,
    )
    return augment_parameters(base, np.zeros(d), Q_theta * np.eye(d))

def quadratic_system(lam: float = 0.9, mu: float = 0.5, c: float = 1.0,
    Q=None, R=None, C=None) -> StateSpaceModel:
    """
    The polynomial benchmark x1' = lam x1, x2' = mu x2 + c x1^2, observed
    linearly through C.
    """
    C = frozen(as_matrix([[1.0, 0.0]] if C is None else C, "C"))
    Q = np.zeros((2, 2)) if Q is None else as_matrix(Q, "Q")
    R = np.eye(C.shape[0]) if R is None else as_matrix(R, "R")
    return make_nonlinear(
        transition=lambda x, u, th: np.array([lam * x[0],
            mu * x[1] + c * x[0] ** 2]),
        observation=lambda x, u, th: C @ x,
        transition_jacobian=lambda x, u, th: np.array([[lam, 0.0],
            [2.0 * c * x[0], mu]]),
        observation_jacobian=lambda x, u, th: C,
        Q=Q,
        R=R,
    )

class GaussianObs(BaseModel):
    """
    Gaussian observations around the predicted mean.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: Literal["gaussian"] = "gaussian"
    R: np.ndarray

    def log_likelihood(self, y: Array, mean: Array) -> float:
        return float(multivariate_normal.logpdf(y, mean=mean, cov=self.R))

class CategoricalSoftmaxObs(BaseModel):
    """
    Categorical observations with probabilities softmax(W h).
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: Literal["categorical"] = "categorical"
    W: np.ndarray

    @property
    def vocab(self) -> int:
        return self.W.shape[0]

    def probabilities(self, h: Array) -> Array:
        return softmax(self.W @ h)

    def log_likelihood(self, token: int, h: Array) -> float:
        return float(log_softmax(self.W @ h)[token])

    def jacobian(self, h: Array) -> Array:
        """
        Jacobian of softmax(W h) with respect to h.
        """
        return softmax_jacobian(self.W @ h) @ self.W

    def innovation(self, token: int, h: Array) -> Array:
        e = np.zeros(self.vocab)
        e[token] = 1.0
        return e - self.probabilities(h)

def softmax_jacobian(logits: Array) -> Array:
    """
    diag(s) - s s^T at s = softmax(logits).
    """
    s = softmax(logits)
    return np.diag(s) - np.outer(s, s)

def observability_matrix(A, C) -> Array:
    """
    Stack C, CA, ..., CA^(n-1).
    """
    A, C = as_matrix(A, "A"), as_matrix(C, "C")
    blocks = [C]
    for _ in range(A.shape[0] - 1):
        blocks.append(blocks[-1] @ A)
    return np.vstack(blocks)

def is_observable(A, C) -> bool:
    A = as_matrix(A, "A")
    return int(np.linalg.matrix_rank(observability_matrix(A, C))) \
        == A.shape[0]

def check_jacobians(model: Model, points: int = 10, seed: int = 0,
    scale: float = 1.0) -> float:
    """
    Maximum relative Frobenius error of the analytic Jacobians against
    central differences at random points.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    if not model.has_jacobians:
        return worst
    for _ in range(points):
        z = scale * rng.standard_normal(model.dim)
        u = rng.standard_normal(model.input(None).size)
        for analytic, fn in ((model.F(z, u), lambda z_: model.f(z_, u)),
            (model.H(z, u), lambda z_: model.h(z_, u))):
            if analytic.size == 0:
                continue
            numeric = jacobian_fd(fn, z)
            err = np.linalg.norm(analytic - numeric) \
                / max(np.linalg.norm(numeric), 1.0)
            worst = max(worst, float(err))
    return worst

class Trajectory(BaseModel):
    """
    A simulated run: states x_0..x_{T-1}, inputs and observations.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    states: np.ndarray
    inputs: np.ndarray
    observations: np.ndarray
    seed: int = Field(ge=0, lt=2**64)

    def __len__(self) -> int:
        return self.states.shape[0]

    def snapshot_pairs(self) -> list[tuple[Array, Array]]:
        return [(self.states[t], self.states[t + 1])
            for t in range(len(self) - 1)]

    def save(self, path: str | Path):
        np.savez(path, states=self.states, inputs=self.inputs,
            observations=self.observations, seed=np.uint64(self.seed))

    @classmethod
    def load(cls, path: str | Path) -> "Trajectory":
        path = Path(path)
        if not path.exists():
            raise KalmanError(Error(type=ErrorType.NOT_FOUND,
                msg=f"trajectory file not found: {path}",
                input=str(path),
            ))
        with np.load(path) as data:
            return cls(
                states=frozen(data["states"]),
                inputs=frozen(data["inputs"]),
                observations=frozen(data["observations"]),
                seed=int(data["seed"]),
            )

def noise_generator(seed: int, step: int, channel: int) -> np.random.Generator:
    """
    A counter-based generator keyed by (seed, step, channel).
    """
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence(seed, spawn_key=(step, channel))))

def sqrt_factor(M: Array) -> Array:
    """
    A factor L with L L^T = M for symmetric PSD M.
    """
    if M.size == 0:
        return M
    lam, V = la.eigh(0.5 * (M + M.T))
    return V * np.sqrt(np.clip(lam, 0.0, None))

def simulate(model: Model, T: int, x0, seed: int, inputs=None,
    observation_noise: bool = True) -> Trajectory:
    """
    Simulate T steps from x0 with noise keyed by (seed, step, channel).
    """
    if T < 1:
        raise KalmanError(Error(type=ErrorType.INVALID_INPUT,
            msg="T must be at least 1",
            input=T,
        ))
    x = as_vector(x0, "x0") if np.size(x0) else np.zeros(0)
    if x.size != model.dim:
        raise KalmanError(Error(type=ErrorType.DIMENSION,
            msg=f"x0 has length {x.size}, expected {model.dim}",
        ))
    k = model.input(None).size
    U = np.zeros((T, k)) if inputs is None else as_matrix(inputs, "inputs")
    if U.shape != (T, k):
        raise KalmanError(Error(type=ErrorType.DIMENSION,
            msg=f"inputs have shape {U.shape}, expected {(T, k)}",
        ))
    LQ = sqrt_factor(model.process_noise)
    LR = sqrt_factor(model.R)
    states = np.zeros((T, model.dim))
    obs = np.zeros((T, model.obs_dim))
    for t in range(T):
        states[t] = x
        y = model.h(x, U[t])
        if observation_noise:
            y = y + LR @ noise_generator(seed, t, 1).standard_normal(
                model.obs_dim)
        obs[t] = y
        if t < T - 1:
            x = model.f(x, U[t])
            if LQ.size:
                x = x + LQ @ noise_generator(seed, t, 0).standard_normal(
                    model.dim)
    return Trajectory(states=frozen(states), inputs=frozen(U),
        observations=frozen(obs), seed=seed)
