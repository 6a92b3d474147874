"""
Configuration settings management.
"""
import numpy as np
from typing import Annotated, Any
from pydantic import BeforeValidator, computed_field
from pydantic_settings import BaseSettings, SettingsConfigDict

KNOWN_FAULTS = ("skip_symmetrize",)

def parse_faults(v: Any) -> list[str]:
    """
    Parse fault-injection flags from a comma separated string or list.
    """
    if v is None:
        return []
    if isinstance(v, str) and not v.startswith("["):
        return [i.strip() for i in v.split(",") if i.strip()]
    elif isinstance(v, list | tuple):
        return [str(i) for i in v]
    raise ValueError(v)

class Settings(BaseSettings):
    """
    Toolkit configuration settings.
    """
    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="KALMANLEARN_",
        env_ignore_empty=True,
        extra="ignore",
        validate_assignment=True,
    )
    PROJECT_NAME: str = "kalmanlearn"
    PROJECT_DESCRIPTION: str = "Training as recursive Bayesian filtering."
    PROJECT_VERSION: str = "v0.1.0"
    AUDIT_THRESHOLD: int = 2048
    DELTA_FLOOR: float = 1e-6
    SIGMA0_SQ: float = 1.0
    CONDITION_LIMIT: float = 1e12
    PD_TOLERANCE: float = 1e-10
    FD_STEP_SCALE: float = float(np.cbrt(np.finfo(float).eps))
    OUTPUT_ROOT: str = "runs"
    LOG_LEVEL: str = "WARNING"
    FAULTS: Annotated[
        list[str] | str, BeforeValidator(parse_faults)
    ] = []

    @computed_field
    @property
    def skip_symmetrize(self) -> bool:
        return "skip_symmetrize" in self.FAULTS

settings = Settings()
