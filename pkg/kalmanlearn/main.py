"""
Training as recursive Bayesian filtering.
"""
from typing import Annotated
import typer
from .commands import koopman, observer, train, verify
from .config import settings
from .logs import console

app = typer.Typer(
    name=settings.PROJECT_NAME,
    help=settings.PROJECT_DESCRIPTION,
    no_args_is_help=True,
    add_completion=False,
)

def show_version(value: bool):
    if value:
        console.print(f"{settings.PROJECT_NAME} {settings.PROJECT_VERSION}")
        raise typer.Exit()

@app.callback()
def main(
    version: Annotated[bool, typer.Option("--version", callback=show_version,
        is_eager=True, help="Show the version and exit.")] = False,
):
    pass

app.command("train")(train.train)
app.command("verify")(verify.verify)
app.command("koopman-fit")(koopman.koopman_fit)
app.command("observer-demo")(observer.observer_demo)
