import numpy as np
import pytest
from hypothesis import given, strategies as st
from .covariance import (BlockDiagonal, Dense, KroneckerPair,
    LowRankPlusDiagonal, densify, gain, innovation_covariance,
    kronecker_from_fisher, make_covariance, measurement_update,
    nearest_kronecker, predict_cov, split_gain, truncate_rank)
from .errors import ErrorType, KalmanError

seeds = st.integers(min_value=0, max_value=2**32 - 1)

def spd(rng, d, floor=0.1):
    A = rng.standard_normal((d, d))
    return A @ A.T / d + floor * np.eye(d)

def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)

def structured(rng):
    return [
        LowRankPlusDiagonal(U=rng.standard_normal((6, 6)), delta=0.3),
        BlockDiagonal(blocks=[spd(rng, 1), spd(rng, 2), spd(rng, 3)]),
        KroneckerPair(A=spd(rng, 2), B=spd(rng, 3)),
    ]

@given(seeds)
def test_structured_apply(seed):
    """Test structured products against their dense equivalents."""
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((6, 2))
    for P in structured(rng):
        D = densify(P)
        assert np.allclose(P.apply(V), D @ V)
        assert np.allclose(P.apply(V[:, 0]), D @ V[:, 0])
        assert np.allclose(P.inverse_apply(V), np.linalg.solve(D, V))

@given(seeds)
def test_structured_gain_matches_dense(seed):
    """Test every family's gain against the dense oracle."""
    rng = np.random.default_rng(seed)
    H = rng.standard_normal((3, 6))
    R = spd(rng, 3)
    for P in structured(rng):
        oracle = gain(Dense(P=densify(P)), H, R).K
        assert rel(gain(P, H, R).K, oracle) <= 1e-8

def test_block_gain_jobs():
    """Test concurrent block products keep block order."""
    rng = np.random.default_rng(1)
    P = BlockDiagonal(blocks=[spd(rng, 2) for _ in range(5)])
    H = rng.standard_normal((2, 10))
    R = np.eye(2)
    a = gain(P, H, R, jobs=1)
    b = gain(P, H, R, jobs=4)
    assert np.array_equal(a.K, b.K)
    assert np.array_equal(a.innovation_cov, b.innovation_cov)

def test_gain_validation():
    """Test gain rejects bad observation noise and shapes."""
    P = Dense(P=np.eye(2))
    with pytest.raises(KalmanError) as e:
        gain(P, np.ones((1, 2)), [[0.0]])
    assert e.value.type == ErrorType.NOT_POSITIVE_DEFINITE
    with pytest.raises(KalmanError) as e:
        gain(P, np.ones((1, 3)), [[1.0]])
    assert e.value.type == ErrorType.DIMENSION

def test_gain_edge_cases():
    """Test zero prior and tiny noise limits."""
    H = np.array([[1.0, 0.0], [0.0, 2.0]])
    g = gain(Dense(P=np.zeros((2, 2))), H, np.eye(2))
    assert np.all(g.K == 0.0)
    g = gain(Dense(P=np.eye(2)), H, 1e-10 * np.eye(2))
    assert np.allclose(g.K @ H, np.eye(2), atol=1e-8)

@given(seeds)
def test_measurement_update_in_family(seed):
    """Test updates stay in family and match the dense posterior."""
    rng = np.random.default_rng(seed)
    H = rng.standard_normal((2, 6))
    R = spd(rng, 2)
    for P in structured(rng)[:2]:
        g = gain(P, H, R)
        post = measurement_update(P, g.K, H, R)
        assert type(post) is type(P)
        D = densify(P)
        dense = (np.eye(6) - g.K @ H) @ D
        dense = 0.5 * (dense + dense.T)
        if isinstance(P, BlockDiagonal):
            # Cross-block terms are dropped; the blocks themselves are exact.
            for sl, B in zip(P.slices(), post.blocks):
                assert np.allclose(B, dense[sl, sl], atol=1e-8)
        else:
            assert np.allclose(densify(post), dense, atol=1e-8)

def test_dense_update_psd():
    """Test the Joseph-form update stays symmetric PSD."""
    rng = np.random.default_rng(2)
    P = Dense(P=spd(rng, 4))
    H = rng.standard_normal((4, 4))
    R = 1e-9 * np.eye(4)
    post = measurement_update(P, gain(P, H, R).K, H, R)
    assert np.array_equal(post.P, post.P.T)
    assert np.linalg.eigvalsh(post.P)[0] >= -1e-12

def test_lowrank_update_rank_and_floor():
    """Test low-rank updates keep rank and floor delta."""
    rng = np.random.default_rng(3)
    P = LowRankPlusDiagonal(U=rng.standard_normal((20, 4)), delta=1e-7)
    H = rng.standard_normal((3, 20))
    R = np.eye(3)
    post = measurement_update(P, gain(P, H, R).K, H, R, delta_min=1e-6)
    assert post.rank == 4
    assert post.delta >= 1e-6

def test_truncate_rank():
    """Test best rank-r plus isotropic approximation."""
    lam = np.array([5.0, 3.0, 1.0, 0.5, 0.5])
    V, _ = np.linalg.qr(np.random.default_rng(4).standard_normal((5, 5)))
    P = (V * lam) @ V.T
    T = truncate_rank(P, 2)
    assert T.delta == pytest.approx(2.0 / 3.0)
    assert np.allclose(np.linalg.eigvalsh(densify(T))[::-1][:2], lam[:2])

    T = truncate_rank(np.diag([4.0, 1.0, 0.01]), 1, delta_min=0.01)
    assert T.delta == pytest.approx(0.505)
    assert np.allclose(np.abs(T.U[:, 0]), [np.sqrt(4.0 - 0.505), 0, 0])

    # Full rank is exact up to the delta floor.
    T = truncate_rank(P, 5, delta_min=1e-12)
    assert np.allclose(densify(T), P)

def test_split_gain():
    """Test the decoupled gain is exact when delta vanishes."""
    rng = np.random.default_rng(5)
    U = rng.standard_normal((8, 3))
    H = rng.standard_normal((2, 8))
    R = np.eye(2)
    P = LowRankPlusDiagonal(U=U, delta=1e-12)
    assert np.allclose(split_gain(P, H, R), gain(P, H, R).K, atol=1e-8)
    P = LowRankPlusDiagonal(U=U, delta=1.0)
    assert not np.allclose(split_gain(P, H, R), gain(P, H, R).K)

def test_kronecker():
    """Test Kronecker projection and Fisher factors."""
    rng = np.random.default_rng(6)
    A, B = spd(rng, 2), spd(rng, 3)
    P = nearest_kronecker(np.kron(A, B), 2, 3)
    assert np.allclose(densify(P), np.kron(A, B))
    F = kronecker_from_fisher(A, B)
    assert np.allclose(densify(F), np.linalg.inv(np.kron(A, B)))

def test_predict_cov():
    """Test prediction in each family."""
    rng = np.random.default_rng(7)
    P = LowRankPlusDiagonal(U=rng.standard_normal((5, 2)), delta=0.2)
    pred = predict_cov(P, 0.5 * np.eye(5), 0.1 * np.eye(5))
    assert isinstance(pred, LowRankPlusDiagonal)
    assert np.allclose(densify(pred), 0.25 * densify(P) + 0.1 * np.eye(5))

    B = BlockDiagonal(blocks=[spd(rng, 2), spd(rng, 3)])
    pred = predict_cov(B, None, 0.1)
    assert np.allclose(densify(pred), densify(B) + 0.1 * np.eye(5))
    with pytest.raises(KalmanError) as e:
        predict_cov(B, np.ones((5, 5)), 0.0)
    assert e.value.type == ErrorType.STRUCTURE

    K = KroneckerPair(A=spd(rng, 2), B=spd(rng, 2))
    assert predict_cov(K, None, 0.0) is K

def lowrank_trace(P):
    return float(np.sum(P.U * P.U)) + P.dim * P.delta

def test_lowrank_predict_factored():
    """Test low-rank prediction with a general transition stays factored."""
    rng = np.random.default_rng(11)
    P = LowRankPlusDiagonal(U=rng.standard_normal((5, 4)), delta=0.3)
    A = np.diag(rng.uniform(0.5, 1.0, 5))
    Q = np.diag(rng.uniform(0.01, 0.1, 5))
    pred = predict_cov(P, A, Q)
    assert isinstance(pred, LowRankPlusDiagonal)
    assert pred.rank == 4
    assert np.allclose(densify(pred), A @ densify(P) @ A.T + Q, atol=1e-10)

    P = LowRankPlusDiagonal(U=rng.standard_normal((30, 3)), delta=0.2)
    A = rng.standard_normal((30, 30)) / np.sqrt(30)
    pred = predict_cov(P, A, 0.05)
    exact = A @ densify(P) @ A.T + 0.05 * np.eye(30)
    assert pred.rank == 3
    assert lowrank_trace(pred) == pytest.approx(np.trace(exact), rel=1e-10)

def test_lowrank_predict_large_dimension():
    """Test low-rank prediction above the audit threshold."""
    rng = np.random.default_rng(12)
    d = 3000
    a = rng.uniform(0.5, 1.0, d)
    P = LowRankPlusDiagonal(U=rng.standard_normal((d, 4)), delta=0.1)
    pred = predict_cov(P, np.diag(a), 0.01 * np.eye(d))
    assert isinstance(pred, LowRankPlusDiagonal)
    assert pred.U.shape == (d, 4)
    assert pred.delta > 0.01
    exact = float(np.sum((a[:, None] * P.U) ** 2)) \
        + 0.1 * float(np.sum(a * a)) + 0.01 * d
    assert lowrank_trace(pred) == pytest.approx(exact, rel=1e-10)

def test_audit_threshold():
    """Test densify refuses above the audit threshold."""
    P = LowRankPlusDiagonal(U=np.zeros((100, 2)), delta=1.0)
    with pytest.raises(KalmanError) as e:
        densify(P, threshold=50)
    assert e.value.type == ErrorType.AUDIT_LIMIT

def test_innovation_covariance_symmetric():
    """Test S is symmetric."""
    rng = np.random.default_rng(8)
    _, S = innovation_covariance(Dense(P=spd(rng, 4)),
        rng.standard_normal((3, 4)), spd(rng, 3))
    assert np.array_equal(S, S.T)

def test_make_covariance():
    """Test prior construction per family."""
    for kind in ("dense", "block", "lowrank", "kronecker"):
        P = make_covariance(kind, 6, 2.0, rank=3, blocks=[2, 4],
            kron_shape=(2, 3))
        assert P.dim == 6
        assert np.allclose(densify(P), 2.0 * np.eye(6))
    with pytest.raises(KalmanError) as e:
        make_covariance("block", 6, blocks=[2, 2])
    assert e.value.type == ErrorType.DIMENSION
