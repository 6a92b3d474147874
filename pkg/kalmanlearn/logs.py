"""
Logging setup.
"""
import logging
from rich.console import Console
from rich.logging import RichHandler
from .config import settings

console = Console()

_handler = RichHandler(console=Console(stderr=True), show_path=False,
    rich_tracebacks=True)

def get_logger(name: str) -> logging.Logger:
    """
    Get a logger writing through the shared rich handler.
    """
    root = logging.getLogger("kalmanlearn")
    if _handler not in root.handlers:
        root.addHandler(_handler)
        root.propagate = False
    root.setLevel(settings.LOG_LEVEL.upper())
    return logging.getLogger(name)
