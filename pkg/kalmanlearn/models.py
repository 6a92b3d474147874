"""
Run configuration and run record data models.
"""
import hashlib
import json
from pathlib import Path
from typing import Annotated, Literal
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from .errors import Error, ErrorType, KalmanError

SCHEMA_VERSION = 1

class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")

class LinearRegression(Strict):
    """
    y = x^T theta* + v with standard normal features.
    """
    kind: Literal["linear_regression"] = "linear_regression"
    d: int = Field(default=4, gt=0, le=256)
    T: int = Field(default=200, gt=0, le=100_000)
    noise: float = Field(default=0.1, ge=0)
    eval_size: int = Field(default=0, ge=0)

class LogisticRegression(Strict):
    """
    Bernoulli labels with probability expit(x^T theta*).
    """
    kind: Literal["logistic_regression"] = "logistic_regression"
    d: int = Field(default=4, gt=0, le=256)
    T: int = Field(default=400, gt=0, le=100_000)
    eval_size: int = Field(default=0, ge=0)

class DriftingRegression(Strict):
    """
    Linear regression whose true parameters follow a random walk.
    """
    kind: Literal["drifting_regression"] = "drifting_regression"
    d: int = Field(default=4, gt=0, le=256)
    T: int = Field(default=400, gt=0, le=100_000)
    noise: float = Field(default=0.1, ge=0)
    drift_rate: float = Field(default=0.01, ge=0)
    eval_size: int = Field(default=0, ge=0)

class PermutedFeatures(Strict):
    """
    A sequence of regression tasks sharing theta* whose feature order is
    permuted per task.
    """
    kind: Literal["permuted_features"] = "permuted_features"
    d: int = Field(default=8, gt=0, le=256)
    tasks: int = Field(default=5, gt=0, le=50)
    T_per_task: int = Field(default=40, gt=0, le=10_000)
    noise: float = Field(default=0.1, ge=0)
    eval_size: int = Field(default=200, gt=0)

class TeacherStream(Strict):
    """
    Token streams sampled from a frozen toy decoder.
    """
    kind: Literal["teacher_stream"] = "teacher_stream"
    d: int = Field(default=8, gt=0, le=128)
    V: int = Field(default=12, gt=1, le=512)
    T: int = Field(default=100, gt=0, le=10_000)
    dropout: float = Field(default=0.1, ge=0, le=1)
    substitution: float = Field(default=0.0, ge=0, le=1)
    embed_scale: float = Field(default=3.0, gt=0)
    emission_scale: float = Field(default=3.0, gt=0)
    radius: float = Field(default=0.95, gt=0, lt=1)
    observer_q: float = Field(default=1e-3, ge=0)

TaskSpec = Annotated[
    LinearRegression | LogisticRegression | DriftingRegression
    | PermutedFeatures | TeacherStream,
    Field(discriminator="kind"),
]

class LearnerSpec(Strict):
    """
    The learner: a filter or one of the first-order baselines.
    """
    kind: Literal["filtering", "sgd", "momentum", "adam"] = "filtering"
    lr: float = Field(default=0.01, ge=0)
    beta: float = Field(default=0.9, ge=0, lt=1)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    R: float = Field(default=0.01, gt=0)
    Q_theta: float = Field(default=0.0, ge=0)
    sigma0_sq: float | None = Field(default=None, gt=0)

class CovarianceSpec(Strict):
    """
    The covariance family used by a filtering learner.
    """
    kind: Literal["dense", "block", "lowrank", "kronecker"] = "dense"
    rank: int = Field(default=16, gt=0)
    blocks: list[int] | None = None
    kron_shape: tuple[int, int] | None = None
    delta_min: float | None = Field(default=None, gt=0)

class AuditSpec(Strict):
    """
    Dense oracle diagnostics switched on per run.
    """
    enabled: bool = False
    threshold: int | None = Field(default=None, gt=0)
    lyapunov: bool = True

class RunConfig(Strict):
    """
    One experiment: a task, a learner and the seeds to run it with.
    """
    task: TaskSpec = Field(default_factory=LinearRegression)
    learner: LearnerSpec = Field(default_factory=LearnerSpec)
    covariance: CovarianceSpec = Field(default_factory=CovarianceSpec)
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    output_dir: str | None = None
    audit: AuditSpec = Field(default_factory=AuditSpec)

class StepEntry(BaseModel):
    """
    Diagnostics recorded for a single filter or optimizer step.
    """
    step: int
    loss: float | None = None
    innovation_norm: float | None = None
    gain_norm: float | None = None
    rho: float | None = None
    lyapunov: float | None = None
    nis: float | None = None
    loglik: float | None = None
    wall_time: float = 0.0

class RunRecord(BaseModel):
    """
    An append-only record of a run.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    run_id: str = ""
    config_hash: str = ""
    seed: int = 0
    entries: list[StepEntry] = Field(default_factory=list)
    final: dict[str, float] = Field(default_factory=dict)
    flags: list[str] = Field(default_factory=list)
    beliefs: list = Field(default_factory=list, exclude=True)

    def append(self, entry: StepEntry):
        self.entries.append(entry)

    def summary(self) -> "RunSummary":
        return RunSummary(
            run_id=self.run_id,
            config_hash=self.config_hash,
            seed=self.seed,
            steps=len(self.entries),
            final=dict(self.final),
            flags=list(self.flags),
        )

class RunSummary(BaseModel):
    """
    The per-run summary document written next to the step table.
    """
    schema_version: int = SCHEMA_VERSION
    run_id: str
    config_hash: str
    seed: int
    steps: int
    final: dict[str, float] = Field(default_factory=dict)
    flags: list[str] = Field(default_factory=list)

def config_hash(config: RunConfig) -> str:
    """
    SHA-256 of the canonical JSON form, stable under key reordering.
    """
    data = json.dumps(config.model_dump(mode="json"), sort_keys=True,
        separators=(",", ":"))
    return hashlib.sha256(data.encode()).hexdigest()

def load_config(path: str | Path) -> RunConfig:
    """
    Read and validate a YAML run configuration.
    """
    path = Path(path)
    if not path.is_file():
        raise KalmanError(Error(type=ErrorType.NOT_FOUND,
            msg=f"config file not found: {path}",
            input=str(path),
        ))
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise KalmanError(Error(type=ErrorType.INVALID_CONFIG,
            msg=f"config file {path} is not valid YAML: {e}",
            input=str(path),
        ))
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise KalmanError(*[Error(type=ErrorType.INVALID_CONFIG,
            msg=f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}",
            input=str(path),
        ) for err in e.errors()])
