"""
Experiment harness: desk-scale tasks, filtering and first-order learners,
the continual-learning protocol and metric export.
"""
import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Literal, Sequence
import numpy as np
import numpy.typing as npt
import yaml
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit
from .config import settings
from .covariance import LowRankPlusDiagonal, gain, make_covariance
from .errors import Error, ErrorType, KalmanError
from .filtering import GaussianBelief, filter_step
from .linalg import as_matrix, as_vector
from .logs import get_logger
from .metrics import LinearFit, forgetting, linear_fit, plasticity
from .models import (AuditSpec, CovarianceSpec, DriftingRegression,
    LearnerSpec, LinearRegression, LogisticRegression, PermutedFeatures,
    RunConfig, RunRecord, RunSummary, SCHEMA_VERSION, StepEntry, TaskSpec,
    TeacherStream, config_hash)
from .observer import decode_stream, make_streams, make_toy_decoder
from .statespace import make_regression_model, noise_generator

log = get_logger(__name__)

Array = npt.NDArray[np.float64]

STEP_COLUMNS = ["schema_version", "run_id", "step", "loss", "innovation_norm",
    "gain_norm", "rho", "lyapunov", "nis", "loglik", "wall_time"]

DIVERGENCE_FACTOR = 1e6

class TaskData(BaseModel):
    """
    One task's training stream, its true parameters and an evaluation set.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    X: np.ndarray
    y: np.ndarray
    theta_star: np.ndarray
    eval_X: np.ndarray
    eval_y: np.ndarray
    link: Literal["linear", "logistic"] = "linear"

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def T(self) -> int:
        return self.X.shape[0]

def _features(seed: int, channel: int, n: int, d: int) -> Array:
    return noise_generator(seed, channel, 11).standard_normal((n, d))

def generate_task(spec: TaskSpec, seed: int) -> list[TaskData]:
    """
    Draw a task's data from its seed; permuted-feature tasks yield one entry
    per task.
    """
    theta = noise_generator(seed, 0, 10).standard_normal(spec.d)
    match spec:
        case LinearRegression():
            X = _features(seed, 1, spec.T, spec.d)
            Xe = _features(seed, 2, spec.eval_size, spec.d)
            noise = spec.noise * noise_generator(seed, 3, 10) \
                .standard_normal(spec.T)
            return [TaskData(X=X, y=X @ theta + noise, theta_star=theta,
                eval_X=Xe, eval_y=Xe @ theta)]
        case LogisticRegression():
            X = _features(seed, 1, spec.T, spec.d)
            Xe = _features(seed, 2, spec.eval_size, spec.d)
            u = noise_generator(seed, 3, 10).random(spec.T)
            ue = noise_generator(seed, 4, 10).random(spec.eval_size)
            return [TaskData(X=X, y=(u < expit(X @ theta)).astype(float),
                theta_star=theta, eval_X=Xe,
                eval_y=(ue < expit(Xe @ theta)).astype(float),
                link="logistic")]
        case DriftingRegression():
            X = _features(seed, 1, spec.T, spec.d)
            steps = spec.drift_rate * noise_generator(seed, 5, 10) \
                .standard_normal((spec.T, spec.d))
            thetas = theta + np.cumsum(steps, axis=0)
            noise = spec.noise * noise_generator(seed, 3, 10) \
                .standard_normal(spec.T)
            Xe = _features(seed, 2, spec.eval_size, spec.d)
            return [TaskData(X=X, y=np.sum(X * thetas, axis=1) + noise,
                theta_star=thetas, eval_X=Xe, eval_y=Xe @ thetas[-1])]
        case PermutedFeatures():
            out = []
            for k in range(spec.tasks):
                perm = np.arange(spec.d) if k == 0 else \
                    noise_generator(seed, k, 12).permutation(spec.d)
                X = _features(seed, 2 * k + 1, spec.T_per_task, spec.d)
                Xe = _features(seed, 2 * k + 2, spec.eval_size, spec.d)
                noise = spec.noise * noise_generator(seed, k, 13) \
                    .standard_normal(spec.T_per_task)
                # The learner sees the features in permuted order.
                out.append(TaskData(X=X[:, perm], y=X @ theta + noise,
                    theta_star=theta[np.argsort(perm)], eval_X=Xe[:, perm],
                    eval_y=Xe @ theta))
            return out
    raise KalmanError(Error(type=ErrorType.INVALID_CONFIG,
        msg=f"task {spec.kind} has no regression data",
        input=spec.kind,
    ))

def task_loss(theta: Array, X: Array, y: Array,
    link: Literal["linear", "logistic"] = "linear") -> float:
    """
    Mean squared error, or mean cross-entropy for the logistic link.
    """
    if X.shape[0] == 0:
        return 0.0
    z = X @ theta
    if link == "logistic":
        p = np.clip(expit(z), 1e-12, 1 - 1e-12)
        return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
    return float(np.mean((z - y) ** 2))

def loss_gradient(theta: Array, x: Array, y: float,
    link: Literal["linear", "logistic"] = "linear") -> Array:
    z = float(x @ theta)
    if link == "logistic":
        return (expit(z) - y) * x
    return (z - y) * x

class SGD:
    """
    theta <- theta - lr g.
    """
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, theta: Array, grad: Array) -> Array:
        return theta - self.lr * grad

class Momentum:
    """
    Heavy-ball momentum: v <- beta v + g, theta <- theta - lr v.
    """
    def __init__(self, lr: float, beta: float = 0.9):
        self.lr = lr
        self.beta = beta
        self.v = None

    def step(self, theta: Array, grad: Array) -> Array:
        self.v = grad if self.v is None else self.beta * self.v + grad
        return theta - self.lr * self.v

class Adam:
    """
    Adaptive moments with bias correction.
    """
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
        eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, theta: Array, grad: Array) -> Array:
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

Optimizer = SGD | Momentum | Adam

def make_optimizer(spec: LearnerSpec) -> Optimizer:
    match spec.kind:
        case "sgd":
            return SGD(spec.lr)
        case "momentum":
            return Momentum(spec.lr, spec.beta)
        case "adam":
            return Adam(spec.lr, spec.beta1, spec.beta2, spec.eps)
    raise KalmanError(Error(type=ErrorType.INVALID_CONFIG,
        msg=f"{spec.kind} is not a first-order optimizer",
        input=spec.kind,
    ))

class FilteringLearner:
    """
    Training as filtering: the parameters are the state of a
    pure-parameter model and every datum is one filter step.
    """
    def __init__(self, d: int, spec: LearnerSpec,
        covariance: CovarianceSpec | None = None,
        link: Literal["linear", "logistic"] = "linear",
        Q_theta: float | None = None, audit: bool = False,
        audit_spec: AuditSpec | None = None):
        covariance = covariance or CovarianceSpec()
        self.audit_spec = audit_spec or AuditSpec()
        self.delta_min = covariance.delta_min
        q = spec.Q_theta if Q_theta is None else Q_theta
        self.model = make_regression_model(d, link, R=spec.R, Q_theta=q)
        cov = make_covariance(covariance.kind, d, spec.sigma0_sq,
            rank=min(covariance.rank, d), blocks=covariance.blocks,
            kron_shape=covariance.kron_shape)
        self.belief = GaussianBelief(mean=np.zeros(d), cov=cov)
        self.audit = audit
        self.frozen = False

    @property
    def theta(self) -> Array:
        return self.belief.mean

    def step(self, x: Array, y: float,
        reference: Array | None = None) -> StepEntry:
        if self.frozen:
            return StepEntry(step=self.belief.step)
        if not self.audit_spec.lyapunov:
            reference = None
        self.belief, entry = filter_step(self.belief, self.model, x, [y],
            audit=self.audit, reference=reference, delta_min=self.delta_min,
            audit_threshold=self.audit_spec.threshold)
        return entry

class BaselineLearner:
    """
    A first-order learner on the per-datum loss.
    """
    def __init__(self, d: int, spec: LearnerSpec,
        link: Literal["linear", "logistic"] = "linear"):
        self.optimizer = make_optimizer(spec)
        self.link = link
        self.theta = np.zeros(d)
        self.t = 0
        self.frozen = False

    def step(self, x: Array, y: float,
        reference: Array | None = None) -> StepEntry:
        if self.frozen:
            return StepEntry(step=self.t)
        start = time.perf_counter()
        g = loss_gradient(self.theta, x, y, self.link)
        self.theta = self.optimizer.step(self.theta, g)
        self.t += 1
        return StepEntry(step=self.t, gain_norm=float(np.linalg.norm(g)),
            wall_time=time.perf_counter() - start)

Learner = FilteringLearner | BaselineLearner

def make_learner(d: int, spec: LearnerSpec,
    covariance: CovarianceSpec | None = None,
    link: Literal["linear", "logistic"] = "linear",
    Q_theta: float | None = None, audit: bool = False,
    audit_spec: AuditSpec | None = None) -> Learner:
    if spec.kind == "filtering":
        return FilteringLearner(d, spec, covariance, link, Q_theta, audit,
            audit_spec)
    return BaselineLearner(d, spec, link)

def _train(learner: Learner, data: TaskData, steps: int | None,
    record: RunRecord, reference_static: bool) -> RunRecord:
    T = data.T if steps is None else min(steps, data.T)
    has_eval = data.eval_X.shape[0] > 0
    start_loss = None
    for t in range(T):
        ref = None
        if reference_static and data.theta_star.ndim == 1:
            ref = data.theta_star
        entry = learner.step(data.X[t], float(data.y[t]), ref)
        loss = task_loss(learner.theta, data.eval_X, data.eval_y, data.link) \
            if has_eval else task_loss(learner.theta, data.X[t:t + 1],
                data.y[t:t + 1], data.link)
        record.append(entry.model_copy(update={"loss": loss}))
        if start_loss is None:
            start_loss = max(loss, 1e-12)
        if not np.isfinite(loss) or loss > DIVERGENCE_FACTOR * start_loss:
            record.flags.append("diverged")
            log.warning("run %s diverged at step %d", record.run_id, t + 1)
            break
    truth = data.theta_star if data.theta_star.ndim == 1 \
        else data.theta_star[T - 1]
    record.final["final_loss"] = record.entries[-1].loss \
        if record.entries else 0.0
    record.final["theta_error"] = float(np.linalg.norm(learner.theta - truth))
    record.final["diverged"] = float("diverged" in record.flags)
    return record

def _record(run_id: str = "", config_hash: str = "",
    seed: int = 0) -> RunRecord:
    return RunRecord(run_id=run_id, config_hash=config_hash, seed=seed)

def train_filtering(task: TaskSpec, learner: LearnerSpec | None = None,
    covariance: CovarianceSpec | None = None, steps: int | None = None,
    seed: int = 0, audit: bool = False, run_id: str = "",
    config_hash: str = "", audit_spec: AuditSpec | None = None) -> RunRecord:
    """
    One filter step per datum with the pure-parameter regression model.
    """
    learner = learner or LearnerSpec()
    data = generate_task(task, seed)[0]
    q = None
    if isinstance(task, DriftingRegression) and learner.Q_theta == 0:
        q = task.drift_rate ** 2
    model = make_learner(data.d, learner.model_copy(update={"kind":
        "filtering"}), covariance, data.link, q, audit, audit_spec)
    record = _train(model, data, steps, _record(run_id, config_hash, seed),
        reference_static=audit)
    record.final["theta_hat_norm"] = float(np.linalg.norm(model.theta))
    record.beliefs.append(model.belief)
    return record

def train_baseline(task: TaskSpec, learner: LearnerSpec,
    steps: int | None = None, seed: int = 0, run_id: str = "",
    config_hash: str = "") -> RunRecord:
    """
    The same loop with a first-order optimizer.
    """
    data = generate_task(task, seed)[0]
    model = BaselineLearner(data.d, learner, data.link)
    return _train(model, data, steps, _record(run_id, config_hash, seed),
        reference_static=False)

def minimize_quadratic(hessian, optimizer: Optimizer, theta0,
    steps: int) -> RunRecord:
    """
    Run an optimizer on f = theta^T H theta / 2; runs whose iterate grows
    past 1e6 times its start are flagged as diverged.
    """
    Hs = as_matrix(hessian, "hessian")
    theta = as_vector(theta0, "theta0")
    scale = max(float(np.linalg.norm(theta)), 1e-12)
    record = RunRecord()
    for t in range(steps):
        theta = optimizer.step(theta, Hs @ theta)
        loss = float(0.5 * theta @ Hs @ theta)
        record.append(StepEntry(step=t + 1, loss=loss))
        if not np.all(np.isfinite(theta)) or \
            np.linalg.norm(theta) > DIVERGENCE_FACTOR * scale:
            record.flags.append("diverged")
            break
    record.final["final_loss"] = record.entries[-1].loss \
        if record.entries else 0.0
    record.final["diverged"] = float("diverged" in record.flags)
    return record

class ContinualResult(BaseModel):
    """
    losses[j][i] is the loss on task i after training on task j.
    """
    losses: list[list[float]]
    forgetting: float
    plasticity: float
    curves: list[list[float]] = Field(default_factory=list)

def continual_eval(task: PermutedFeatures, learner: LearnerSpec,
    covariance: CovarianceSpec | None = None, seed: int = 0,
    freeze_after: int | None = None) -> ContinualResult:
    """
    Train on the tasks in order and evaluate every task after each one.
    The learner stops updating after `freeze_after` tasks.
    """
    tasks = generate_task(task, seed)
    model = make_learner(task.d, learner, covariance)
    n = len(tasks)
    L = np.zeros((n, n))
    curves = [[] for _ in range(n)]
    for j, data in enumerate(tasks):
        if freeze_after is not None and j >= freeze_after:
            model.frozen = True
        for t in range(data.T):
            model.step(data.X[t], float(data.y[t]))
            curves[j].append(task_loss(model.theta, data.eval_X, data.eval_y))
        for i, other in enumerate(tasks):
            L[j, i] = task_loss(model.theta, other.eval_X, other.eval_y)
    return ContinualResult(losses=L.tolist(), forgetting=forgetting(L),
        plasticity=plasticity(L), curves=curves)

def continual_record(task: PermutedFeatures, learner: LearnerSpec,
    covariance: CovarianceSpec | None, seed: int, run_id: str = "",
    config_hash: str = "") -> RunRecord:
    res = continual_eval(task, learner, covariance, seed)
    record = _record(run_id, config_hash, seed)
    step = 0
    for curve in res.curves:
        for loss in curve:
            step += 1
            record.append(StepEntry(step=step, loss=loss))
    record.final["forgetting"] = res.forgetting
    record.final["plasticity"] = res.plasticity
    record.final["final_loss"] = float(np.mean(res.losses[-1]))
    return record

def stream_record(task: TeacherStream, learner: LearnerSpec, seed: int,
    run_id: str = "", config_hash: str = "") -> RunRecord:
    """
    Teacher-stream NLL; filtering learners correct the hidden state.
    """
    teacher = make_toy_decoder(task.d, task.V, seed,
        embed_scale=task.embed_scale, emission_scale=task.emission_scale,
        radius=task.radius, q=task.observer_q)
    streams = make_streams(teacher, task.T, seed, task.dropout,
        task.substitution)
    correct = learner.kind == "filtering"
    record = _record(run_id, config_hash, seed)
    for name, s in streams.items():
        res = decode_stream(teacher, s, correct)
        record.final[f"nll_{name}"] = res.nll
        if res.rho:
            record.final[f"max_rho_{name}"] = max(res.rho)
    record.append(StepEntry(step=task.T, loss=record.final["nll_perturbed"]))
    return record

def comparable(record: RunRecord) -> dict:
    """
    A record's content without wall-clock timings, for reproducibility
    checks.
    """
    data = record.model_dump(exclude={"beliefs"})
    for e in data["entries"]:
        e.pop("wall_time")
    return data

class ScalingResult(BaseModel):
    dims: list[int]
    times: list[float]
    fit: LinearFit

def gain_scaling(dims: Sequence[int] = (1_000, 10_000, 100_000), r: int = 16,
    m: int = 4, repeats: int = 5, seed: int = 0) -> ScalingResult:
    """
    Median wall time of a low-rank gain per dimension with a linear fit.
    """
    times = []
    for k, d in enumerate(dims):
        rng = noise_generator(seed, k, 14)
        P = LowRankPlusDiagonal(U=rng.standard_normal((d, r)) / np.sqrt(r),
            delta=0.1)
        H = rng.standard_normal((m, d)) / np.sqrt(d)
        R = np.eye(m)
        gain(P, H, R)
        samples = []
        for _ in range(repeats):
            start = time.perf_counter()
            gain(P, H, R)
            samples.append(time.perf_counter() - start)
        times.append(float(np.median(samples)))
    return ScalingResult(dims=list(dims), times=times,
        fit=linear_fit(dims, times))

class Sensitivity(BaseModel):
    sgd: dict[str, float]
    filtering: dict[str, float]

def lr_sensitivity(task: TaskSpec, lrs: Sequence[float] = (1e-3, 1e-2, 1e-1),
    prior_scales: Sequence[float] = (0.1, 1.0, 10.0),
    seed: int = 0) -> Sensitivity:
    """
    Final loss of SGD per learning rate and of filtering per prior variance.
    """
    sgd = {f"{lr:g}": train_baseline(task, LearnerSpec(kind="sgd", lr=lr),
        seed=seed).final["final_loss"] for lr in lrs}
    filt = {f"{s:g}": train_filtering(task, LearnerSpec(sigma0_sq=s),
        seed=seed).final["final_loss"] for s in prior_scales}
    return Sensitivity(sgd=sgd, filtering=filt)

def run_id_for(hash_: str, seed: int) -> str:
    return f"{hash_[:12]}-{seed}"

def run_seed(config: RunConfig, seed: int, audit: bool = False) -> RunRecord:
    """
    Execute one seed of a run configuration.
    """
    h = config_hash(config)
    rid = run_id_for(h, seed)
    task, learner = config.task, config.learner
    audit = audit or config.audit.enabled
    match task:
        case PermutedFeatures():
            return continual_record(task, learner, config.covariance, seed,
                rid, h)
        case TeacherStream():
            return stream_record(task, learner, seed, rid, h)
    if learner.kind == "filtering":
        return train_filtering(task, learner, config.covariance, seed=seed,
            audit=audit, run_id=rid, config_hash=h, audit_spec=config.audit)
    return train_baseline(task, learner, seed=seed, run_id=rid,
        config_hash=h)

def violations(record: RunRecord) -> list[str]:
    """
    Invariant violations found in a record.
    """
    out = []
    if "diverged" in record.flags:
        out.append(f"{record.run_id}: diverged")
    for e in record.entries:
        if e.rho is not None and e.rho > 1.0 + 1e-9:
            out.append(f"{record.run_id}: step {e.step} contraction radius "
                f"{e.rho:.6g} exceeds 1")
        if e.nis is not None and not np.isfinite(e.nis):
            out.append(f"{record.run_id}: step {e.step} non-finite NIS")
    return out

def run_config(config: RunConfig, audit: bool = False,
    jobs: int = 1) -> list[RunRecord]:
    """
    All seeds of a configuration, run concurrently and returned in seed
    order.
    """
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(lambda s: run_seed(config, s, audit),
                config.seeds))
    return [run_seed(config, s, audit) for s in config.seeds]

def _cell(v) -> str:
    return "" if v is None else repr(v) if isinstance(v, float) else str(v)

def export_metrics(records: Sequence[RunRecord], out_dir: str | Path) \
    -> list[Path]:
    """
    Write steps.csv with one row per step and summaries/<run_id>.yaml per
    run.
    """
    out = Path(out_dir)
    (out / "summaries").mkdir(parents=True, exist_ok=True)
    steps = out / "steps.csv"
    with steps.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(STEP_COLUMNS)
        for r in records:
            for e in r.entries:
                row = e.model_dump()
                w.writerow([SCHEMA_VERSION, r.run_id] + [_cell(row[c])
                    for c in STEP_COLUMNS[2:]])
    paths = [steps]
    for r in records:
        p = out / "summaries" / f"{r.run_id or 'run'}.yaml"
        p.write_text(yaml.safe_dump(r.summary().model_dump(),
            sort_keys=True))
        paths.append(p)
    return paths

def import_summaries(out_dir: str | Path) -> list[RunSummary]:
    d = Path(out_dir) / "summaries"
    if not d.is_dir():
        raise KalmanError(Error(type=ErrorType.NOT_FOUND,
            msg=f"no summaries under {out_dir}",
            input=str(out_dir),
        ))
    return [RunSummary.model_validate(yaml.safe_load(p.read_text()))
        for p in sorted(d.glob("*.yaml"))]

class RunDirectory:
    """
    A run directory written under a temporary name and renamed to
    <root>/<hash12>-<timestamp> when the block exits cleanly. Completed
    run directories are never overwritten; a failed block leaves only the
    temporary directory behind.
    """
    def __init__(self, root: str | Path | None, hash_: str):
        self.root = Path(root or settings.OUTPUT_ROOT)
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%f")
        self.name = f"{hash_[:12]}-{stamp}"
        self.tmp = self.root / f".{self.name}.tmp-{os.getpid()}"
        self.path: Path | None = None

    def __enter__(self) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        self.tmp.mkdir()
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            return False
        final, k = self.root / self.name, 0
        while final.exists():
            k += 1
            final = self.root / f"{self.name}-{k}"
        self.tmp.rename(final)
        self.path = final
        log.info("run written to %s", final)
        return False
