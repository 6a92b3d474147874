"""
The verify command.
"""
from typing import Annotated
import typer
from rich.markup import escape
from rich.table import Table
from ..config import KNOWN_FAULTS, settings
from ..errors import Error, ErrorType, KalmanError
from ..logs import console
from ..suites import SUITE_NAMES, run_suite
from . import FAILED, abort

def verify(
    suite: Annotated[str, typer.Argument(
        help=f"One of {', '.join(SUITE_NAMES)}.")] = "all",
    fault: Annotated[list[str] | None, typer.Option(
        help="Inject a fault while the suite runs.")] = None,
):
    """
    Run property suites and report pass or fail per criterion.
    """
    fault = fault or []
    try:
        if suite not in SUITE_NAMES:
            raise KalmanError(Error(type=ErrorType.INVALID_INPUT,
                msg=f"unknown suite {suite!r}; choose from "
                    f"{', '.join(SUITE_NAMES)}",
                input=suite,
            ))
        unknown = [f for f in fault if f not in KNOWN_FAULTS]
        if unknown:
            raise KalmanError(Error(type=ErrorType.INVALID_INPUT,
                msg=f"unknown fault {unknown[0]!r}; choose from "
                    f"{', '.join(KNOWN_FAULTS)}",
                input=unknown,
            ))
    except KalmanError as e:
        raise abort(e) from e

    saved = list(settings.FAULTS)
    settings.FAULTS = saved + fault
    try:
        results = run_suite(suite)
    finally:
        settings.FAULTS = saved

    table = Table(title=f"verify {suite}")
    table.add_column("suite")
    table.add_column("criterion")
    table.add_column("result")
    table.add_column("detail", overflow="fold")
    table.add_column("s", justify="right")
    for r in results:
        table.add_row(r.suite, r.name,
            "[green]PASS[/]" if r.passed else "[red]FAIL[/]",
            escape(r.detail),
            f"{r.seconds:.1f}")
    console.print(table)
    if not all(r.passed for r in results):
        raise typer.Exit(code=FAILED)
