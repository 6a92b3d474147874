"""
Command line commands and their shared exit handling.
"""
import typer
from rich.markup import escape
from ..errors import ErrorType, KalmanError
from ..logs import console

# Exit codes.
OK = 0
FAILED = 1
USAGE = 2

def exit_code(e: KalmanError) -> int:
    """
    Configuration and missing-file errors are usage errors; everything else
    is a failure.
    """
    if e.type in (ErrorType.INVALID_CONFIG, ErrorType.NOT_FOUND,
        ErrorType.INVALID_INPUT):
        return USAGE
    return FAILED

def abort(e: KalmanError) -> typer.Exit:
    """
    Print every error detail and build the matching exit.
    """
    for d in e.detail:
        kind = d.type.value if d.type else "error"
        console.print(f"[bold red]{kind}[/]: {escape(d.msg)}",
            highlight=False)
    return typer.Exit(code=exit_code(e))
