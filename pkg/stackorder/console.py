"""Verbosity-aware console output.

Output goes through click, anomalies through warnings and long loops through tqdm. The verbosity level comes from
the STACKORDER_VERBOSITY environment variable: 0 is quiet, 1 is the default and 2 adds detail lines.
"""

import os
import warnings
from collections.abc import Iterable, Iterator
from typing import TypeVar

import click
from tqdm import tqdm

from stackorder.constants import VERBOSITY_ENV_VAR

T = TypeVar("T")


def verbosity() -> int:
    """Current verbosity level; malformed values fall back to 1."""
    raw = os.getenv(VERBOSITY_ENV_VAR, "1")
    try:
        return int(raw)
    except ValueError:
        warnings.warn(f"ignoring malformed {VERBOSITY_ENV_VAR}={raw!r}")
        return 1


def echo(message: str, *, err: bool = False) -> None:
    """Print a result line; shown at every verbosity level."""
    click.echo(message, err=err)


def detail(message: str) -> None:
    """Print a diagnostic line, only at verbosity 2 or above."""
    if verbosity() >= 2:
        click.echo(message, err=True)


def progress(items: Iterable[T], desc: str, total: int | None = None) -> Iterator[T]:
    """Wrap an iterable in a tqdm progress bar, disabled when quiet."""
    return iter(tqdm(items, desc=desc, total=total, disable=verbosity() < 1, leave=False))
