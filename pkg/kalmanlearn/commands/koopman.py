"""
The koopman-fit command.
"""
from pathlib import Path
from typing import Annotated
import numpy as np
import typer
import yaml
from rich.table import Table
from ..errors import KalmanError
from ..koopman import edmd_fit, parse_dictionary, spectrum
from ..logs import console
from ..statespace import Trajectory
from . import abort

def koopman_fit(
    trajectory: Annotated[Path, typer.Argument(
        help="Trajectory .npz file.")],
    dictionary: Annotated[str, typer.Option(
        help='"identity", "monomial:DEGREE" or "terms:1,0;0,1;2,0".')]
        = "identity",
    reg: Annotated[float | None, typer.Option(
        help="Tikhonov regularization; default scales with the data.")]
        = None,
    out: Annotated[Path | None, typer.Option(
        help="Write the fitted model as YAML.")] = None,
):
    """
    Fit a lifted linear model to a trajectory's snapshot pairs.
    """
    try:
        traj = Trajectory.load(trajectory)
        d = parse_dictionary(dictionary, traj.states.shape[1])
        # Without coordinate observables every lifted feature is observed.
        C = d.coordinate_projection()
        model = edmd_fit(traj.snapshot_pairs(), d, reg=reg,
            C=np.eye(d.dim) if C is None else C)
    except KalmanError as e:
        raise abort(e) from e

    spec = spectrum(model)
    table = Table(title=f"K over {', '.join(d.names)}")
    for name in d.names:
        table.add_column(name, justify="right")
    for row in model.K:
        table.add_row(*[f"{v:.6g}" for v in row])
    console.print(table)
    console.print(f"relative residual {model.residual:.3g}, spectral radius "
        f"{spec.radius:.6g}{'' if spec.stable else ' (unstable)'}")
    if out is not None:
        out.write_text(yaml.safe_dump({
            "dictionary": d.names,
            "K": model.K.tolist(),
            "C": model.C.tolist(),
            "Q_lift": model.Q_lift.tolist(),
            "R": model.R.tolist(),
            "residual": model.residual,
        }, sort_keys=False))
