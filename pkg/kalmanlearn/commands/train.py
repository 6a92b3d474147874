"""
The train command.
"""
from pathlib import Path
from typing import Annotated
import typer
import yaml
from pydantic import ValidationError
from rich.table import Table
from ..bench import RunDirectory, export_metrics, run_config, violations
from ..config import settings
from ..errors import Error, ErrorType, KalmanError
from ..logs import console, get_logger
from ..models import RunConfig, config_hash, load_config
from . import FAILED, abort

log = get_logger(__name__)

def with_seed(config: RunConfig, seed: int | None) -> RunConfig:
    """
    The configuration with its seeds replaced by a single seed.
    """
    if seed is None:
        return config
    try:
        return RunConfig.model_validate({**config.model_dump(),
            "seeds": [seed]})
    except ValidationError as e:
        raise KalmanError(Error(type=ErrorType.INVALID_CONFIG,
            msg=f"invalid seed override {seed}",
            input=seed,
            ctx={"error": str(e)},
        )) from e

def train(
    config: Annotated[Path, typer.Option("--config", "-c",
        help="YAML run configuration.")],
    seed: Annotated[int | None, typer.Option(
        help="Run this seed instead of the configured seeds.")] = None,
    strict: Annotated[bool, typer.Option(
        help="Exit 1 on any invariant violation.")] = False,
    out: Annotated[Path | None, typer.Option(
        help="Output root for the run directory.")] = None,
    audit: Annotated[bool, typer.Option(
        help="Enable dense oracle diagnostics.")] = False,
    jobs: Annotated[int, typer.Option(min=1,
        help="Seeds run concurrently.")] = 1,
):
    """
    Train a learner on a task for every configured seed and write metrics.
    """
    try:
        cfg = with_seed(load_config(config), seed)
        h = config_hash(cfg)
        records = run_config(cfg, audit=audit, jobs=jobs)
        run_dir = RunDirectory(out or cfg.output_dir or settings.OUTPUT_ROOT,
            h)
        with run_dir as tmp:
            export_metrics(records, tmp)
            (tmp / "config.yaml").write_text(yaml.safe_dump(
                cfg.model_dump(mode="json"), sort_keys=True))
    except KalmanError as e:
        raise abort(e) from e

    table = Table(title=f"config {h[:12]}")
    table.add_column("run")
    table.add_column("steps", justify="right")
    table.add_column("final", overflow="fold")
    table.add_column("flags")
    for r in records:
        table.add_row(r.run_id, str(len(r.entries)),
            ", ".join(f"{k}={v:.4g}" for k, v in sorted(r.final.items())),
            ", ".join(r.flags))
    console.print(table)
    console.print(f"metrics written to {run_dir.path}")

    found = [v for r in records for v in violations(r)]
    for v in found:
        log.warning(v)
    if strict and found:
        console.print(f"[bold red]{len(found)} invariant violations[/]")
        raise typer.Exit(code=FAILED)
