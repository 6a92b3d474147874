"""
Activation-level innovation correction on a toy autoregressive decoder.

The decoder's hidden state is treated as the latent state of a nonlinear
state-space model whose observations are the emitted tokens. An EKF with
linearized softmax observations corrects the activations after each token
is seen. Model parameters are never changed.
"""
from typing import Literal, Sequence
import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import log_softmax, softmax
from .config import settings
from .covariance import Dense, floor_dense
from .errors import Error, ErrorType, KalmanError
from .filtering import GaussianBelief, innovate, predict, update
from .geometry import default_regularization, fisher_categorical
from .linalg import (as_matrix, require_pd, spd_solve, spectral_radius,
    symmetrize)
from .logs import get_logger
from .metrics import PairedStats, paired_statistics
from .stability import fit_rate
from .statespace import (CategoricalSoftmaxObs, StateSpaceModel,
    make_nonlinear, noise_generator)

log = get_logger(__name__)

Array = npt.NDArray[np.float64]

# Input tokens with a zero embedding: the start of a stream, and a
# conditioning token dropped from the stream.
NO_TOKEN = -1
DROPPED = -2

class ToyDecoder(BaseModel):
    """
    A single recurrent block h' = act(A h + E[x] + b) with softmax emission
    over W h.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    d: int = Field(gt=0)
    V: int = Field(gt=1)
    A: np.ndarray
    E: np.ndarray
    b: np.ndarray
    W: np.ndarray
    Q: np.ndarray
    activation: Literal["tanh", "linear"] = "tanh"

    @property
    def emission(self) -> CategoricalSoftmaxObs:
        return CategoricalSoftmaxObs(W=self.W)

    def embed(self, token: int) -> Array:
        if token in (NO_TOKEN, DROPPED):
            return np.zeros(self.d)
        return self.E[token]

    def _pre(self, h: Array, token: int) -> Array:
        return self.A @ h + self.embed(token) + self.b

    def transition(self, h: Array, token: int) -> Array:
        pre = self._pre(h, token)
        return np.tanh(pre) if self.activation == "tanh" else pre

    def jacobian(self, h: Array, token: int) -> Array:
        if self.activation == "linear":
            return np.array(self.A, dtype=float)
        t = np.tanh(self._pre(h, token))
        return (1.0 - t * t)[:, None] * self.A

    def probabilities(self, h: Array) -> Array:
        return softmax(self.W @ h)

    def input_noise(self, h: Array, token: int) -> Array:
        """
        Second moment of the next hidden state around the zero-embedding
        transition when the input token is unknown, with the missing token
        drawn from the predictive distribution at h. Zero for known inputs.
        """
        if token != DROPPED:
            return np.zeros((self.d, self.d))
        pre = (self.A @ h + self.b)[None, :] + self.E
        nxt = np.tanh(pre) if self.activation == "tanh" else pre
        D = nxt - self.transition(h, DROPPED)
        return symmetrize((D.T * self.probabilities(h)) @ D)

    def state_space(self, token: int,
        h: Array | None = None) -> StateSpaceModel:
        """
        The hidden-state dynamics for one input token as a state-space
        model with the emission probabilities as its observation map. A
        dropped token adds its input noise at h to the process noise.
        """
        Q = self.Q if h is None else self.Q + self.input_noise(h, token)
        return make_nonlinear(
            transition=lambda x, u, th: self.transition(x, token),
            observation=lambda x, u, th: self.probabilities(x),
            transition_jacobian=lambda x, u, th: self.jacobian(x, token),
            observation_jacobian=lambda x, u, th:
                self.emission.jacobian(x),
            Q=Q,
            R=np.eye(self.V),
        )

def make_toy_decoder(d: int, V: int, seed: int, embed_scale: float = 3.0,
    emission_scale: float = 3.0, radius: float = 0.95, q: float = 1e-3,
    activation: Literal["tanh", "linear"] = "tanh") -> ToyDecoder:
    """
    A random decoder whose recurrent matrix is a scaled orthogonal matrix
    with spectral radius `radius`.
    """
    rng = noise_generator(seed, 0, 5)
    O, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return ToyDecoder(
        d=d,
        V=V,
        A=radius * O,
        E=embed_scale * rng.standard_normal((V, d)) / np.sqrt(d),
        b=np.zeros(d),
        W=emission_scale * rng.standard_normal((V, d)) / np.sqrt(d),
        Q=q * np.eye(d),
        activation=activation,
    )

def lipschitz_estimate(model: ToyDecoder, samples: int = 200, seed: int = 0,
    scale: float = 3.0) -> float:
    """
    The largest transition Jacobian spectral norm over random hidden states
    and input tokens.
    """
    rng = noise_generator(seed, 0, 7)
    worst = 0.0
    for _ in range(samples):
        h = scale * rng.standard_normal(model.d)
        token = int(rng.integers(model.V))
        worst = max(worst, float(np.linalg.norm(model.jacobian(h, token), 2)))
    return worst

class ObserverState(BaseModel):
    """
    A Gaussian belief over the hidden state, with the gain and Jacobian of
    the last correction.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    belief: GaussianBelief
    step: int = Field(default=0, ge=0)
    gain: np.ndarray | None = None
    H: np.ndarray | None = None

def initial_state(model: ToyDecoder, mean=None,
    sigma0_sq: float | None = None) -> ObserverState:
    sigma0_sq = settings.SIGMA0_SQ if sigma0_sq is None else sigma0_sq
    mean = np.zeros(model.d) if mean is None \
        else np.asarray(mean, dtype=float)
    return ObserverState(belief=GaussianBelief(mean=mean,
        cov=floor_dense(Dense(P=sigma0_sq * np.eye(model.d)))))

def decode_step(state: ObserverState, model: ToyDecoder,
    token_in: int) -> tuple[Array, ObserverState]:
    """
    Propagate the belief through the decoder and predict the next token
    probabilities from the predicted mean.
    """
    pred = predict(state.belief,
        model.state_space(token_in, state.belief.mean))
    s = model.probabilities(pred.mean)
    return s, ObserverState(belief=pred, step=state.step + 1)

def _observation_noise(R_obs, s: Array) -> Array:
    if R_obs is None:
        return symmetrize(np.diag(s) - np.outer(s, s)) \
            + 1e-6 * np.eye(s.size)
    if np.isscalar(R_obs):
        return float(R_obs) * np.eye(s.size)
    return as_matrix(R_obs, "R_obs")

def innovation_correct(state: ObserverState, model: ToyDecoder,
    observed_token: int, R_obs=None) -> ObserverState:
    """
    Kalman-correct the predicted hidden state with the observed token:
    mu + K (e_y - s) with H = J_softmax(W mu) W. R_obs defaults to
    diag(s) - s s^T + 1e-6 I.
    """
    if not 0 <= observed_token < model.V:
        raise KalmanError(Error(type=ErrorType.INVALID_INPUT,
            msg=f"token {observed_token} outside vocabulary of {model.V}",
            input=observed_token,
        ))
    R = _observation_noise(R_obs, model.probabilities(state.belief.mean))
    require_pd(R, "R_obs")
    innov = innovate(state.belief, model.emission, observed_token, R=R)
    belief, g = update(state.belief, innov, R)
    belief = belief.model_copy(update={"cov": floor_dense(belief.cov)})
    return ObserverState(belief=belief, step=state.step, gain=g.K,
        H=innov.H)

def observer_stability(model: ToyDecoder, state: ObserverState, K, H,
    token_in: int = NO_TOKEN) -> float:
    """
    rho((I - K H) F') at the current mean.
    """
    K, H = as_matrix(K, "K"), as_matrix(H, "H")
    Fp = model.jacobian(state.belief.mean, token_in)
    return spectral_radius((np.eye(model.d) - K @ H) @ Fp)

def natural_direction(state: ObserverState, model: ToyDecoder, token: int,
    eps: float | None = None) -> Array:
    """
    (F_h + eps I)^-1 W^T (e_y - s) at the current mean.
    """
    s = model.probabilities(state.belief.mean)
    e = np.zeros(model.V)
    e[token] = 1.0
    F = fisher_categorical(model.W, s, regularization=eps)
    eps = default_regularization(F.F) if eps is None else eps
    return spd_solve(F.F + eps * np.eye(model.d), model.W.T @ (e - s), "F_h")

def generate_stream(teacher: ToyDecoder, T: int, seed: int) -> list[int]:
    """
    Sample T tokens from a frozen decoder fed its own samples.
    """
    h = np.zeros(teacher.d)
    token_in = NO_TOKEN
    tokens = []
    for t in range(T):
        h = teacher.transition(h, token_in)
        y = int(noise_generator(seed, t, 6).choice(teacher.V,
            p=teacher.probabilities(h)))
        tokens.append(y)
        token_in = y
    return tokens

def perturb_stream(tokens: Sequence[int], V: int, dropout: float = 0.0,
    substitution: float = 0.0, seed: int = 0) -> list[int]:
    """
    Drop tokens (emitting DROPPED) with probability `dropout` and replace
    them with a uniform random token with probability `substitution`.
    """
    out = []
    for t, tok in enumerate(tokens):
        rng = noise_generator(seed, t, 8)
        u = rng.random()
        if u < dropout:
            out.append(DROPPED)
        elif u < dropout + substitution:
            out.append(int(rng.integers(V)))
        else:
            out.append(int(tok))
    return out

class TokenStream(BaseModel):
    """
    Conditioning inputs and next-token targets.
    """
    inputs: list[int]
    targets: list[int]

def make_streams(teacher: ToyDecoder, T: int, seed: int,
    dropout: float = 0.0, substitution: float = 0.0) -> dict[str, TokenStream]:
    """
    A clean stream and one whose conditioning inputs are perturbed; both
    predict the same clean targets.
    """
    tokens = generate_stream(teacher, T, seed)
    inputs = [NO_TOKEN] + tokens[:-1]
    noisy = [NO_TOKEN] + perturb_stream(tokens[:-1], teacher.V, dropout,
        substitution, seed)
    return {
        "clean": TokenStream(inputs=inputs, targets=tokens),
        "perturbed": TokenStream(inputs=noisy, targets=tokens),
    }

def _stream_prior(model: ToyDecoder, sigma0_sq: float | None) -> float:
    if sigma0_sq is not None:
        return sigma0_sq
    return max(float(np.mean(np.diag(model.Q))), settings.DELTA_FLOOR)

class StreamResult(BaseModel):
    nll: float
    rho: list[float] = Field(default_factory=list)

def decode_stream(model: ToyDecoder, stream: TokenStream,
    with_correction: bool, R_obs=None,
    sigma0_sq: float | None = None) -> StreamResult:
    """
    Average next-token negative log-likelihood along a stream, optionally
    correcting the hidden state after each target is seen.

    Streams start from the zero hidden state, so the prior variance
    defaults to one step of process noise.
    """
    state = initial_state(model, sigma0_sq=_stream_prior(model, sigma0_sq))
    nll, rho = 0.0, []
    for x, y in zip(stream.inputs, stream.targets):
        if with_correction:
            _, state = decode_step(state, model, x)
            nll -= float(log_softmax(model.W @ state.belief.mean)[y])
            state = innovation_correct(state, model, y, R_obs)
            rho.append(observer_stability(model, state, state.gain, state.H,
                x))
        else:
            # Plain decoding: mean propagation only.
            h = model.transition(state.belief.mean, x)
            nll -= float(log_softmax(model.W @ h)[y])
            state = ObserverState(belief=GaussianBelief(mean=h,
                cov=state.belief.cov), step=state.step + 1)
    return StreamResult(nll=nll / max(len(stream.targets), 1), rho=rho)

class ShiftTable(BaseModel):
    nll: dict[str, float]
    with_correction: bool

def shift_robustness_eval(model: ToyDecoder, streams: dict[str, TokenStream],
    with_correction: bool, R_obs=None) -> ShiftTable:
    """
    Per-token NLL of each named stream with or without correction.
    """
    return ShiftTable(with_correction=with_correction, nll={
        name: decode_stream(model, s, with_correction, R_obs).nll
        for name, s in streams.items()})

class CorrectionComparison(BaseModel):
    corrected: list[float]
    uncorrected: list[float]
    stats: PairedStats

def compare_correction(model: ToyDecoder, seeds: Sequence[int], T: int = 100,
    dropout: float = 0.1, substitution: float = 0.0, R_obs=None,
    stream: str = "perturbed") -> CorrectionComparison:
    """
    Corrected against uncorrected NLL on teacher streams, paired by seed.
    """
    corrected, uncorrected = [], []
    for seed in seeds:
        streams = {stream: make_streams(model, T, seed, dropout,
            substitution)[stream]}
        corrected.append(shift_robustness_eval(model, streams, True,
            R_obs).nll[stream])
        uncorrected.append(shift_robustness_eval(model, streams, False,
            R_obs).nll[stream])
    log.info("correction wins on %d of %d seeds",
        sum(a < b for a, b in zip(corrected, uncorrected)), len(seeds))
    return CorrectionComparison(corrected=corrected, uncorrected=uncorrected,
        stats=paired_statistics(corrected, uncorrected))

class ObserverTwinRun(BaseModel):
    distances: list[float]
    rate: float
    r2: float
    max_rho: float

def observer_twin_run(model: ToyDecoder, stream: TokenStream, mean_a,
    mean_b, R_obs=None, sigma0_sq: float | None = None) -> ObserverTwinRun:
    """
    Two corrected observers from different initial means on the same
    stream. Reports the distance between their means, its fitted rate and
    the largest error-dynamics radius seen along the first observer.
    """
    s2 = _stream_prior(model, sigma0_sq)
    a = initial_state(model, mean=mean_a, sigma0_sq=s2)
    b = initial_state(model, mean=mean_b, sigma0_sq=s2)
    distances = [float(np.linalg.norm(a.belief.mean - b.belief.mean))]
    rho = []
    for x, y in zip(stream.inputs, stream.targets):
        _, a = decode_step(a, model, x)
        _, b = decode_step(b, model, x)
        a = innovation_correct(a, model, y, R_obs)
        b = innovation_correct(b, model, y, R_obs)
        rho.append(observer_stability(model, a, a.gain, a.H, x))
        distances.append(float(np.linalg.norm(a.belief.mean - b.belief.mean)))
    rate, r2 = fit_rate(distances)
    return ObserverTwinRun(distances=distances, rate=rate, r2=r2,
        max_rho=max(rho, default=0.0))
