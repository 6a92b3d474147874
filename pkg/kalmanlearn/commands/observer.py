"""
The observer-demo command.
"""
from pathlib import Path
from typing import Annotated
import typer
from rich.table import Table
from ..errors import Error, ErrorType, KalmanError
from ..logs import console
from ..models import TeacherStream, load_config
from ..observer import (compare_correction, make_streams, make_toy_decoder,
    shift_robustness_eval)
from . import abort

def load_stream_task(config: Path | None) -> TeacherStream:
    if config is None:
        return TeacherStream()
    task = load_config(config).task
    if not isinstance(task, TeacherStream):
        raise KalmanError(Error(type=ErrorType.INVALID_CONFIG,
            msg=f"observer-demo needs a teacher_stream task, got {task.kind}",
            input=str(config),
        ))
    return task

def observer_demo(
    config: Annotated[Path | None, typer.Option("--config", "-c",
        help="YAML run configuration with a teacher_stream task.")] = None,
    seed: Annotated[int, typer.Option(help="Decoder seed.")] = 0,
    seeds: Annotated[int, typer.Option(min=1,
        help="Streams compared pairwise.")] = 20,
):
    """
    Decode teacher streams with and without activation correction.
    """
    try:
        task = load_stream_task(config)
        model = make_toy_decoder(task.d, task.V, seed,
            embed_scale=task.embed_scale, emission_scale=task.emission_scale,
            radius=task.radius, q=task.observer_q)
        streams = make_streams(model, task.T, seed, task.dropout,
            task.substitution)
        plain = shift_robustness_eval(model, streams, False)
        fixed = shift_robustness_eval(model, streams, True)
        cmp = compare_correction(model, range(seeds), task.T, task.dropout,
            task.substitution)
    except KalmanError as e:
        raise abort(e) from e

    table = Table(title=f"per-token NLL, seed {seed}")
    table.add_column("stream")
    table.add_column("uncorrected", justify="right")
    table.add_column("corrected", justify="right")
    for name in streams:
        table.add_row(name, f"{plain.nll[name]:.4f}",
            f"{fixed.nll[name]:.4f}")
    console.print(table)
    s = cmp.stats
    console.print(f"corrected beats uncorrected on {s.win_fraction:.0%} of "
        f"{s.n} perturbed streams; mean difference {s.mean_difference:.4f}"
        + (f", paired t {s.t_statistic:.3g} (p={s.p_value:.3g})"
            if s.t_statistic is not None else ""))
