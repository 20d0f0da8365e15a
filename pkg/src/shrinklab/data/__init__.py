"""Bundled reference data: published measurement tables and a toy corpus."""
from importlib.resources import files
from pathlib import Path


def path(name: str) -> Path:
    """Filesystem path of a bundled data file."""
    return Path(str(files(__package__).joinpath(name)))
