"""Tools to read and write game files.

A game file is JSON. A matrix game has the fields {"name", "players", "actions", "shared", "payoffs"}, with payoff
tensors nested row-major and listed player by player (a single tensor when shared). A quadratic game has the fields
{"name", "players", "A", "b", "c"}.
"""

from pathlib import Path
from typing import Any

import orjson
from dummio import orjson as json_io

from stackorder.errors import ParseError, ValidationError
from stackorder.games import Game, MatrixGame, QuadraticGame

MATRIX_FIELDS = {"name", "players", "actions", "shared", "payoffs"}
QUADRATIC_FIELDS = {"name", "players", "A", "b", "c"}


def _require(data: dict[str, Any], fields: set[str]) -> None:
    missing = sorted(fields - set(data))
    if missing:
        raise ValidationError(f"{missing[0]}: missing field")
    extra = sorted(set(data) - fields)
    if extra:
        raise ValidationError(f"{extra[0]}: unknown field")


def from_dict(data: dict[str, Any]) -> Game:
    """Build and validate a game from its JSON representation."""
    if not isinstance(data, dict):
        raise ValidationError("game: expected a JSON object")
    if "A" in data:
        _require(data, QUADRATIC_FIELDS)
        game = QuadraticGame(name=data["name"], A=data["A"], b=data["b"], c=data["c"])
    else:
        _require(data, MATRIX_FIELDS)
        try:
            game = MatrixGame(
                name=data["name"],
                actions=data["actions"],
                payoffs=data["payoffs"],
                shared=bool(data["shared"]),
            )
        except (TypeError, ValueError) as err:
            if isinstance(err, ValidationError):
                raise
            raise ValidationError(f"payoffs: malformed tensor ({err})") from err
    if data["players"] != game.players:
        raise ValidationError(f"players: declared {data['players']}, the payoffs describe {game.players}")
    return game


def to_dict(game: Game) -> dict[str, Any]:
    """JSON representation of a game."""
    if isinstance(game, QuadraticGame):
        return {
            "name": game.name,
            "players": game.players,
            "A": [matrix.tolist() for matrix in game.A],
            "b": [vector.tolist() for vector in game.b],
            "c": list(game.c),
        }
    return {
        "name": game.name,
        "players": game.players,
        "actions": list(game.actions),
        "shared": game.shared,
        "payoffs": [tensor.tolist() for tensor in game.payoffs],
    }


def load_game(path: Path) -> Game:
    """Load and validate a game file.

    Raises:
        ParseError: If the file is not valid JSON
        ValidationError: If a field is missing or inconsistent; the message starts with the field name
    """
    try:
        data = json_io.load(path)
    except orjson.JSONDecodeError as err:
        raise ParseError(f"{path}: not a valid JSON game file ({err})") from err
    return from_dict(data)


def save_game(game: Game, path: Path) -> None:
    """Write a game file."""
    json_io.save(to_dict(game), filepath=path)
