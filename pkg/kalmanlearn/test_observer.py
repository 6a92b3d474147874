import numpy as np
import pytest
from scipy.special import softmax
from .errors import ErrorType, KalmanError
from .linalg import jacobian_fd
from .filtering import innovate
from .observer import (DROPPED, NO_TOKEN, compare_correction, decode_step,
    decode_stream, generate_stream, initial_state, innovation_correct,
    lipschitz_estimate, make_streams, make_toy_decoder, natural_direction,
    observer_stability, observer_twin_run, perturb_stream,
    shift_robustness_eval)

@pytest.fixture
def model():
    return make_toy_decoder(8, 12, seed=0)

def test_emission_jacobian(model):
    """Test the softmax emission Jacobian against finite differences."""
    h = np.random.default_rng(0).standard_normal(8)
    numeric = jacobian_fd(lambda x: softmax(model.W @ x), h)
    assert np.max(np.abs(model.emission.jacobian(h) - numeric)) <= 1e-6

def test_parameters_untouched(model):
    """Test corrections never change decoder parameters."""
    before = {k: np.copy(getattr(model, k)) for k in ("A", "E", "b", "W")}
    state = initial_state(model)
    for t in range(10):
        _, state = decode_step(state, model, t % model.V)
        state = innovation_correct(state, model, (3 * t) % model.V)
    for k, v in before.items():
        assert np.array_equal(v, getattr(model, k))

def test_infinite_noise_is_identity(model):
    """Test huge observation noise leaves the mean unchanged."""
    state = initial_state(model, mean=np.ones(8))
    after = innovation_correct(state, model, 0, R_obs=1e12)
    assert np.allclose(after.belief.mean, state.belief.mean, atol=1e-9)

def test_small_noise_direction(model):
    """Test the correction aligns with the regularized natural direction."""
    h = np.random.default_rng(1).standard_normal(8)
    sigma_sq = 1e4
    state = initial_state(model, mean=h, sigma0_sq=sigma_sq)
    token = int(np.argmin(model.probabilities(h)))
    step = innovation_correct(state, model, token).belief.mean - h
    ref = natural_direction(state, model, token, eps=1.0 / sigma_sq)
    cosine = step @ ref / (np.linalg.norm(step) * np.linalg.norm(ref))
    assert cosine >= 0.99

def test_invalid_token(model):
    """Test out-of-vocabulary tokens are rejected."""
    with pytest.raises(KalmanError) as e:
        innovation_correct(initial_state(model), model, model.V)
    assert e.value.type == ErrorType.INVALID_INPUT

def test_observer_stability(model):
    """Test the error-dynamics radius with and without correction."""
    state = initial_state(model)
    _, state = decode_step(state, model, 0)
    state = innovation_correct(state, model, 1)
    rho = observer_stability(model, state, state.gain, state.H, 0)
    assert np.isfinite(rho) and rho >= 0.0
    # Without a gain the radius is that of the decoder Jacobian.
    assert observer_stability(model, state, np.zeros((8, 12)), state.H,
        0) <= 0.95 + 1e-9
    assert lipschitz_estimate(model, samples=50) <= 0.95 + 1e-12

def test_streams(model):
    """Test stream generation and perturbation."""
    tokens = generate_stream(model, 50, seed=3)
    assert tokens == generate_stream(model, 50, seed=3)
    assert all(0 <= t < model.V for t in tokens)
    assert perturb_stream(tokens, model.V) == tokens
    dropped = perturb_stream(tokens, model.V, dropout=1.0)
    assert all(t == DROPPED for t in dropped)

    streams = make_streams(model, 50, seed=3, dropout=0.2)
    assert streams["clean"].targets == streams["perturbed"].targets
    assert streams["clean"].inputs[0] == NO_TOKEN

def test_correction_flag_off_is_plain_decoding(model):
    """Test uncorrected decoding does not depend on R_obs."""
    s = make_streams(model, 40, seed=1, dropout=0.1)["perturbed"]
    a = decode_stream(model, s, False)
    b = decode_stream(model, s, False, R_obs=5.0)
    assert a.nll == b.nll
    assert a.rho == []

def test_zero_perturbation_parity(model):
    """Test clean and unperturbed streams score the same."""
    streams = make_streams(model, 40, seed=2)
    table = shift_robustness_eval(model, streams, True)
    assert table.nll["clean"] == table.nll["perturbed"]

def test_dropout_robustness(model):
    """Test correction lowers NLL under token dropout on most seeds."""
    cmp = compare_correction(model, range(50), T=100, dropout=0.1)
    assert cmp.stats.win_fraction >= 0.8
    assert cmp.stats.mean_difference < 0

def test_dropped_input_noise(model):
    """Test only dropped inputs widen the predicted covariance."""
    h = np.tanh(np.random.default_rng(4).standard_normal(8))
    assert np.array_equal(model.input_noise(h, 3), np.zeros((8, 8)))
    assert np.array_equal(model.input_noise(h, NO_TOKEN), np.zeros((8, 8)))
    M = model.input_noise(h, DROPPED)
    assert np.allclose(M, M.T)
    assert np.linalg.eigvalsh(M)[-1] > 0.0
    # The second moment of the token-averaged error around the plain step.
    p = model.probabilities(h)
    base = model.transition(h, DROPPED)
    ref = sum(p[k] * np.outer(model.transition(h, k) - base,
        model.transition(h, k) - base) for k in range(model.V))
    assert np.allclose(M, ref, atol=1e-12)

    state = initial_state(model, mean=h, sigma0_sq=1e-3)
    _, kept = decode_step(state, model, 3)
    _, dropped = decode_step(state, model, DROPPED)
    assert np.allclose(kept.belief.mean, model.transition(h, 3))
    assert np.allclose(dropped.belief.mean, base)
    assert np.trace(dropped.belief.cov.P) > np.trace(kept.belief.cov.P)

def test_covariance_floor(model):
    """Test the corrected covariance keeps its eigenvalue floor."""
    state = initial_state(model, sigma0_sq=1e-12)
    assert np.linalg.eigvalsh(state.belief.cov.P)[0] >= 1e-6 - 1e-15
    for t in range(20):
        _, state = decode_step(state, model, t % model.V)
        state = innovation_correct(state, model, (5 * t) % model.V,
            R_obs=1e-8)
        assert np.linalg.eigvalsh(state.belief.cov.P)[0] >= 1e-6 - 1e-12

def test_innovation_zero_mean(model):
    """Test the token innovation has zero mean under the predictive law."""
    h = np.random.default_rng(5).standard_normal(8)
    state = initial_state(model, mean=h)
    s = model.probabilities(h)
    n = 100_000
    counts = np.bincount(np.random.default_rng(6).choice(model.V, size=n,
        p=s), minlength=model.V)
    mean = sum(counts[k] * innovate(state.belief, model.emission,
        k).residual for k in range(model.V)) / n
    assert np.all(np.abs(mean) <= 3.0 / np.sqrt(n))

def test_observer_twin_run(model):
    """Test two observers on one stream contract toward each other."""
    for seed in range(10):
        stream = make_streams(model, 40, seed)["clean"]
        start = np.random.default_rng(seed).uniform(-0.5, 0.5, 8)
        run = observer_twin_run(model, stream, np.zeros(8), start)
        assert run.max_rho < 1.0
        assert run.rate < 1.0
        assert run.distances[-1] < run.distances[0]
