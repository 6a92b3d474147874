import numpy as np
import pytest
from .bench import (SGD, Adam, Momentum, RunDirectory, STEP_COLUMNS,
    comparable, continual_eval, export_metrics, gain_scaling,
    generate_task, import_summaries, lr_sensitivity, minimize_quadratic,
    run_config, stream_record, train_baseline, train_filtering, violations)
from .errors import ErrorType, KalmanError
from .models import (AuditSpec, CovarianceSpec, DriftingRegression,
    LearnerSpec, LinearRegression, LogisticRegression, PermutedFeatures,
    RunConfig, RunRecord, StepEntry, TeacherStream)

def test_filtering_matches_ridge():
    """Test Q = 0 filtering ends at the ridge solution."""
    task = LinearRegression(d=4, T=200)
    spec = LearnerSpec(R=0.01, sigma0_sq=1.0)
    record = train_filtering(task, spec, seed=0)
    data = generate_task(task, 0)[0]
    X, y = data.X, data.y
    ridge = np.linalg.solve(X.T @ X + 0.01 * np.eye(4), X.T @ y)
    assert np.max(np.abs(record.beliefs[-1].mean - ridge)) <= 1e-5
    assert len(record.entries) == 200

def test_zero_noise_loss_monotone():
    """Test noiseless evaluation loss does not rise after burn-in."""
    task = LinearRegression(d=4, T=40, noise=0.0, eval_size=100)
    record = train_filtering(task, LearnerSpec(R=1e-6), seed=1)
    losses = np.array([e.loss for e in record.entries])
    assert np.all(np.diff(losses[4:]) <= 1e-8)
    assert losses[-1] <= 1e-8

def test_reproducible():
    """Test the same seed gives the same record."""
    task = LogisticRegression(d=3, T=50)
    a = train_filtering(task, seed=4)
    b = train_filtering(task, seed=4)
    assert comparable(a) == comparable(b)
    assert comparable(a) != comparable(train_filtering(task, seed=5))

def test_structured_filtering_learners():
    """Test low-rank and block learners run on regression tasks."""
    task = LinearRegression(d=6, T=60, eval_size=50)
    for cov in (CovarianceSpec(kind="lowrank", rank=6),
        CovarianceSpec(kind="block", blocks=[3, 3]),
        CovarianceSpec(kind="kronecker", kron_shape=(2, 3))):
        record = train_filtering(task, covariance=cov, seed=0)
        assert record.final["final_loss"] < record.entries[0].loss

def test_config_delta_floor():
    """Test the covariance delta_min setting floors low-rank filtering."""
    task = LinearRegression(d=8, T=100)
    floored = RunConfig(task=task, covariance=CovarianceSpec(kind="lowrank",
        rank=2, delta_min=0.05))
    plain = RunConfig(task=task, covariance=CovarianceSpec(kind="lowrank",
        rank=2))
    assert run_config(floored)[0].beliefs[-1].cov.delta >= 0.05
    assert run_config(plain)[0].beliefs[-1].cov.delta < 0.05

def test_config_audit_settings():
    """Test the audit threshold and Lyapunov flags reach the filter."""
    task = LinearRegression(d=4, T=20)
    full = run_config(RunConfig(task=task,
        audit=AuditSpec(enabled=True)))[0]
    assert all(e.rho is not None and e.lyapunov is not None
        for e in full.entries)
    small = run_config(RunConfig(task=task,
        audit=AuditSpec(enabled=True, threshold=2)))[0]
    assert all(e.rho is None for e in small.entries)
    quiet = run_config(RunConfig(task=task,
        audit=AuditSpec(enabled=True, lyapunov=False)))[0]
    assert all(e.lyapunov is None and e.rho is not None
        for e in quiet.entries)

def test_drifting_regression_tracks():
    """Test parameter diffusion tracks drifting parameters."""
    task = DriftingRegression(d=4, T=400)
    tracking = [train_filtering(task, seed=s).final["theta_error"]
        for s in range(5)]
    static = [train_filtering(task, LearnerSpec(Q_theta=1e-12),
        seed=s).final["theta_error"] for s in range(5)]
    assert np.mean(tracking) < np.mean(static)
    assert max(tracking) < 0.3

def test_baseline_lr_zero():
    """Test a zero learning rate leaves parameters at zero."""
    task = LinearRegression(d=3, T=20)
    theta = generate_task(task, 0)[0].theta_star
    for kind in ("sgd", "momentum", "adam"):
        record = train_baseline(task, LearnerSpec(kind=kind, lr=0.0), seed=0)
        assert record.final["theta_error"] == pytest.approx(
            np.linalg.norm(theta))

def test_quadratic_stability_bound():
    """Test SGD converges below 2/L and diverges above it."""
    H = np.diag([1.0, 4.0])
    ok = minimize_quadratic(H, SGD(0.4), [1.0, 1.0], 200)
    assert "diverged" not in ok.flags
    assert ok.final["final_loss"] < 1e-12
    bad = minimize_quadratic(H, SGD(0.6), [1.0, 1.0], 200)
    assert "diverged" in bad.flags
    assert bad.final["diverged"] == 1.0

def test_optimizer_rules():
    """Test the update rules by hand."""
    g = np.array([0.5, -2.0])
    theta = Adam(0.1).step(np.zeros(2), g)
    assert np.allclose(theta, -0.1 * g / (np.abs(g) + 1e-8), atol=1e-8)

    m = Momentum(0.1, beta=0.5)
    t1 = m.step(np.zeros(2), g)
    t2 = m.step(t1, g)
    assert np.allclose(t1, -0.1 * g)
    assert np.allclose(t2, t1 - 0.1 * 1.5 * g)

def test_continual_edge_cases():
    """Test forgetting on one task and on a frozen learner."""
    res = continual_eval(PermutedFeatures(tasks=1), LearnerSpec(), seed=0)
    assert res.forgetting == 0.0
    res = continual_eval(PermutedFeatures(), LearnerSpec(kind="sgd",
        lr=0.05), seed=0, freeze_after=1)
    assert res.forgetting == 0.0
    assert res.plasticity == 0.0
    assert len(res.curves) == 5

def test_filtering_forgets_less():
    """Test filtering forgets less than SGD on most paired seeds."""
    task = PermutedFeatures()
    wins = 0
    for seed in range(20):
        f = continual_eval(task, LearnerSpec(), seed=seed).forgetting
        s = continual_eval(task, LearnerSpec(kind="sgd", lr=0.05),
            seed=seed).forgetting
        wins += f < s
    assert wins >= 14

def test_export_round_trip(tmp_path):
    """Test metric export and summary import."""
    paths = export_metrics([], tmp_path / "empty")
    assert paths[0].read_text().strip() == ",".join(STEP_COLUMNS)

    records = run_config(RunConfig(task=LinearRegression(T=10),
        seeds=[0, 1]))
    assert records[0].config_hash == records[1].config_hash
    assert records[0].run_id != records[1].run_id
    export_metrics(records, tmp_path)
    lines = (tmp_path / "steps.csv").read_text().splitlines()
    assert len(lines) == 1 + 20
    summaries = import_summaries(tmp_path)
    assert summaries == [r.summary() for r in records]

    with pytest.raises(KalmanError) as e:
        import_summaries(tmp_path / "missing")
    assert e.value.type == ErrorType.NOT_FOUND

def test_run_config_jobs():
    """Test concurrent seeds give the serial result in seed order."""
    cfg = RunConfig(task=LinearRegression(T=15), seeds=[3, 1, 2])
    serial = [comparable(r) for r in run_config(cfg)]
    parallel = [comparable(r) for r in run_config(cfg, jobs=3)]
    assert serial == parallel
    assert [r["seed"] for r in serial] == [3, 1, 2]

def test_run_directory(tmp_path):
    """Test run directories are renamed on exit and never reused."""
    first = RunDirectory(tmp_path, "abcdef0123456789")
    with first as tmp:
        (tmp / "x").write_text("1")
    assert first.path.name.startswith("abcdef012345-")
    assert (first.path / "x").read_text() == "1"
    assert not tmp.exists()

    # A second run claiming the same name gets a suffix.
    second = RunDirectory(tmp_path, "abcdef0123456789")
    second.name = first.path.name
    with second:
        pass
    assert second.path.name == f"{first.path.name}-1"

    failed = RunDirectory(tmp_path, "ffff")
    with pytest.raises(RuntimeError):
        with failed:
            raise RuntimeError("boom")
    assert failed.path is None
    assert failed.tmp.exists()

def test_violations():
    """Test invariant violations are found in records."""
    record = RunRecord(run_id="r")
    record.append(StepEntry(step=1, rho=0.5, nis=1.0))
    assert violations(record) == []
    record.append(StepEntry(step=2, rho=1.5, nis=float("nan")))
    record.flags.append("diverged")
    assert len(violations(record)) == 3

def test_teacher_stream_record():
    """Test teacher-stream runs report clean and perturbed NLL."""
    task = TeacherStream(T=20)
    record = stream_record(task, LearnerSpec(), seed=0)
    assert {"nll_clean", "nll_perturbed"} <= set(record.final)

def test_gain_scaling_and_sensitivity():
    """Test the scaling and sensitivity reports have one value per setting."""
    res = gain_scaling(dims=(100, 200, 400), repeats=2)
    assert len(res.times) == 3
    sens = lr_sensitivity(LinearRegression(T=30), lrs=(0.01, 0.1),
        prior_scales=(1.0,))
    assert set(sens.sgd) == {"0.01", "0.1"}
    assert set(sens.filtering) == {"1"}
