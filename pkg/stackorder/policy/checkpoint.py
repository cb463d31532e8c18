"""Versioned binary checkpoints of approximator parameters.

Layout: the magic bytes b"STKO", the header length as a little-endian uint32, the header as JSON with sorted keys,
then every parameter array flattened in header order as little-endian float64.
"""

import struct
from pathlib import Path
from typing import Any

import numpy as np
import orjson
from attrs import frozen

from stackorder.errors import ParseError, ValidationError
from stackorder.policy.approximators import APPROXIMATORS, Approximator

MAGIC = b"STKO"
FORMAT_VERSION = 1
PAYLOAD_DTYPE = np.dtype("<f8")


@frozen
class CheckpointHeader:
    """Everything needed to rebuild an approximator from the payload."""

    kind: str
    shapes: tuple[tuple[str, tuple[int, ...]], ...]
    seed: int
    format_version: int = FORMAT_VERSION

    def as_dict(self) -> dict[str, Any]:
        """JSON-ready representation."""
        return {
            "format_version": self.format_version,
            "kind": self.kind,
            "seed": self.seed,
            "shapes": [[name, list(shape)] for name, shape in self.shapes],
        }


def save_checkpoint(approximator: Approximator, path: Path, seed: int) -> CheckpointHeader:
    """Write an approximator to disk."""
    header = CheckpointHeader(
        kind=approximator.kind,
        shapes=tuple((name, tuple(shape)) for name, shape in approximator.shapes.items()),
        seed=seed,
    )
    encoded = orjson.dumps(header.as_dict(), option=orjson.OPT_SORT_KEYS)
    payload = b"".join(
        np.ascontiguousarray(value, dtype=PAYLOAD_DTYPE).tobytes() for value in approximator.params.values()
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(MAGIC + struct.pack("<I", len(encoded)) + encoded + payload)
    return header


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _parse_header(path: Path, data: Any) -> CheckpointHeader:
    if not isinstance(data, dict):
        raise ParseError(f"{path}: checkpoint header is not a JSON object")
    if data.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint format version {data.get('format_version')}")
    if not isinstance(data.get("kind"), str) or data["kind"] not in APPROXIMATORS:
        raise ParseError(f"{path}: unknown approximator kind {data.get('kind')!r}")
    if not _is_int(data.get("seed")):
        raise ParseError(f"{path}: checkpoint seed must be an integer, got {data.get('seed')!r}")
    shapes = data.get("shapes")
    valid = isinstance(shapes, list) and all(
        isinstance(entry, list)
        and len(entry) == 2
        and isinstance(entry[0], str)
        and isinstance(entry[1], list)
        and all(_is_int(dim) and dim >= 0 for dim in entry[1])
        for entry in shapes
    )
    if not valid:
        raise ParseError(f"{path}: checkpoint shapes must be [name, [dims...]] pairs, got {shapes!r}")
    return CheckpointHeader(
        kind=data["kind"],
        shapes=tuple((name, tuple(shape)) for name, shape in shapes),
        seed=data["seed"],
    )


def load_checkpoint(path: Path) -> tuple[CheckpointHeader, Approximator]:
    """Read an approximator from disk.

    Raises:
        ParseError: If the file is not a checkpoint of a known format version or its header is malformed
    """
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC or len(raw) < len(MAGIC) + 4:
        raise ParseError(f"{path}: not a checkpoint file")
    (size,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    try:
        data = orjson.loads(raw[start : start + size])
    except orjson.JSONDecodeError as err:
        raise ParseError(f"{path}: corrupt checkpoint header ({err})") from err
    header = _parse_header(path, data)
    expected = sum(int(np.prod(shape)) for _, shape in header.shapes)
    body = raw[start + size :]
    if len(body) != expected * PAYLOAD_DTYPE.itemsize:
        raise ParseError(f"{path}: payload holds {len(body)} bytes, the header describes {expected} values")
    payload = np.frombuffer(body, dtype=PAYLOAD_DTYPE)
    params = {}
    offset = 0
    for name, shape in header.shapes:
        count = int(np.prod(shape))
        params[name] = payload[offset : offset + count].astype(float).reshape(shape)
        offset += count
    return header, APPROXIMATORS[header.kind](params=params)


def check_compatible(approximator: Approximator, expected: Approximator, role: str) -> None:
    """Raise a ValidationError if a loaded approximator does not fit the slot it is loaded into."""
    if approximator.kind != expected.kind or approximator.shapes != expected.shapes:
        raise ValidationError(
            f"checkpoint: {role} has kind {approximator.kind} with shapes {approximator.shapes}, "
            f"the environment needs {expected.kind} with shapes {expected.shapes}"
        )
