"""Run manifests: what a CLI command was asked to do and which files it wrote."""

from datetime import datetime
from pathlib import Path
from typing import Any

from attrs import field, frozen
from dummio import orjson as json_io

import stackorder

MANIFEST_FILE = "manifest.json"


def now() -> str:
    """Local timestamp with second resolution."""
    return datetime.now().isoformat(timespec="seconds")


@frozen
class RunManifest:
    """Record of one command invocation.

    Attributes:
        command: CLI command name
        config: Every parameter of the run, enough to repeat it
        seed: Root seed, None for commands without randomness
        started: Start timestamp
        finished: End timestamp
        files: Output files, relative to the manifest's directory
        version: Package version that produced the run
    """

    command: str
    config: dict[str, Any]
    seed: int | None
    started: str
    finished: str
    files: tuple[str, ...] = field(converter=tuple)
    version: str = stackorder.__version__

    def as_dict(self) -> dict[str, Any]:
        """JSON-ready representation."""
        return {
            "command": self.command,
            "version": self.version,
            "seed": self.seed,
            "started": self.started,
            "finished": self.finished,
            "config": self.config,
            "files": list(self.files),
        }

    def save(self, directory: Path) -> Path:
        """Write manifest.json into the run directory."""
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / MANIFEST_FILE
        json_io.save(self.as_dict(), filepath=path)
        return path


def record(
    directory: Path,
    command: str,
    config: dict[str, Any],
    started: str,
    files: list[Path],
    seed: int | None = None,
) -> Path:
    """Write the manifest of a finished command; files are listed relative to `directory`."""
    relative = [
        path.relative_to(directory).as_posix() if path.is_relative_to(directory) else str(path) for path in files
    ]
    manifest = RunManifest(
        command=command,
        config=config,
        seed=seed,
        started=started,
        finished=now(),
        files=sorted(relative),
    )
    return manifest.save(directory)
