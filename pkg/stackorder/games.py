"""Core game data model: finite and quadratic games, orderings and group schemes."""

import itertools
import math
from collections.abc import Sequence

import numpy as np
from attrs import evolve, field, frozen

from stackorder.constants import MAX_GROUPS, SYMMETRY_TOL
from stackorder.errors import ValidationError

JointAction = tuple[int, ...]


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def _as_tensors(values: Sequence) -> tuple[np.ndarray, ...]:
    return tuple(_readonly(np.array(item, dtype=float)) for item in values)


@frozen(eq=False)
class MatrixGame:
    """A finite n-player normal-form game.

    Attributes:
        name: Display name of the game
        actions: Number of actions of each player
        payoffs: One payoff tensor per player, or a single tensor when `shared` is set
        shared: Whether all players receive the same payoff
    """

    name: str
    actions: tuple[int, ...] = field(converter=lambda values: tuple(int(v) for v in values))
    payoffs: tuple[np.ndarray, ...] = field(converter=_as_tensors)
    shared: bool = False

    def __attrs_post_init__(self) -> None:
        """Check shapes, counts and finiteness."""
        if not self.actions:
            raise ValidationError("players: a game needs at least one player")
        for i, count in enumerate(self.actions):
            if count < 1:
                raise ValidationError(f"actions[{i}]: every player needs at least one action, got {count}")
        expected = 1 if self.shared else len(self.actions)
        if len(self.payoffs) != expected:
            raise ValidationError(f"payoffs: expected {expected} tensor(s), got {len(self.payoffs)}")
        for i, tensor in enumerate(self.payoffs):
            if tensor.shape != self.actions:
                raise ValidationError(f"payoffs[{i}]: expected shape {self.actions}, got {tensor.shape}")
            if not np.isfinite(tensor).all():
                raise ValidationError(f"payoffs[{i}]: all payoff entries must be finite")

    @property
    def players(self) -> int:
        """Number of players."""
        return len(self.actions)

    @property
    def tensors(self) -> tuple[np.ndarray, ...]:
        """Per-player payoff tensors; a shared tensor is repeated once per player."""
        if self.shared:
            return self.payoffs * self.players
        return self.payoffs

    def relabel(self, perm: Sequence[int]) -> "MatrixGame":
        """Game in which new player j is old player perm[j].

        A joint action `a` of the old game corresponds to `[a[p] for p in perm]` in the new one.
        """
        perm = tuple(perm)
        if sorted(perm) != list(range(self.players)):
            raise ValidationError(f"perm: {perm} is not a permutation of the players")
        payoffs = [np.transpose(tensor, perm) for tensor in self.payoffs]
        if not self.shared:
            payoffs = [payoffs[p] for p in perm]
        return MatrixGame(
            name=f"{self.name}[{','.join(map(str, perm))}]",
            actions=tuple(self.actions[p] for p in perm),
            payoffs=payoffs,
            shared=self.shared,
        )


@frozen(eq=False)
class QuadraticGame:
    """A continuous game with one scalar strategy per player.

    Player i receives Q_i(pi) = pi^T A_i pi + b_i^T pi + c_i.
    """

    name: str
    A: tuple[np.ndarray, ...] = field(converter=_as_tensors)
    b: tuple[np.ndarray, ...] = field(converter=_as_tensors)
    c: tuple[float, ...] = field(converter=lambda values: tuple(float(v) for v in values))

    def __attrs_post_init__(self) -> None:
        """Check shapes, symmetry and own-variable concavity."""
        n = len(self.A)
        if n < 1:
            raise ValidationError("players: a game needs at least one player")
        if len(self.b) != n or len(self.c) != n:
            raise ValidationError(f"b, c: expected {n} entries each, got {len(self.b)} and {len(self.c)}")
        for i, (matrix, vector) in enumerate(zip(self.A, self.b)):
            if matrix.shape != (n, n):
                raise ValidationError(f"A[{i}]: expected shape {(n, n)}, got {matrix.shape}")
            if vector.shape != (n,):
                raise ValidationError(f"b[{i}]: expected shape {(n,)}, got {vector.shape}")
            if not (np.isfinite(matrix).all() and np.isfinite(vector).all() and math.isfinite(self.c[i])):
                raise ValidationError(f"A[{i}], b[{i}], c[{i}]: entries must be finite")
            if np.abs(matrix - matrix.T).max() > SYMMETRY_TOL:
                raise ValidationError(f"A[{i}]: matrix is not symmetric")
            if matrix[i, i] >= 0:
                raise ValidationError(f"A[{i}]: non-concave in own variable, (A_{i})_{i}{i} = {matrix[i, i]}")

    @property
    def players(self) -> int:
        """Number of players."""
        return len(self.A)

    def value(self, pi: np.ndarray) -> np.ndarray:
        """Payoff of every player at strategy vector pi."""
        pi = np.asarray(pi, dtype=float)
        return np.array([pi @ A @ pi + b @ pi + c for A, b, c in zip(self.A, self.b, self.c)])

    def gradient(self, player: int, pi: np.ndarray) -> np.ndarray:
        """Partial derivatives of Q_player with respect to every strategy."""
        return 2.0 * self.A[player] @ np.asarray(pi, dtype=float) + self.b[player]


Game = MatrixGame | QuadraticGame


@frozen
class Ordering:
    """A priority permutation of agent groups; position 0 moves first."""

    perm: tuple[int, ...] = field(converter=lambda values: tuple(int(v) for v in values))

    def __attrs_post_init__(self) -> None:
        """Require a bijection on 0..g-1."""
        if sorted(self.perm) != list(range(len(self.perm))):
            raise ValidationError(f"ordering: {list(self.perm)} is not a permutation of 0..{len(self.perm) - 1}")

    def __str__(self) -> str:
        """Comma separated group indices, e.g. '1,0,2'."""
        return ",".join(str(g) for g in self.perm)

    def __len__(self) -> int:
        """Number of groups."""
        return len(self.perm)

    @classmethod
    def parse(cls, text: str) -> "Ordering":
        """Parse a comma separated permutation such as '0,1'."""
        try:
            perm = [int(part) for part in text.split(",")]
        except ValueError as err:
            raise ValidationError(f"ordering: cannot parse '{text}'") from err
        return cls(perm)

    @classmethod
    def identity(cls, size: int) -> "Ordering":
        """The native order 0..size-1."""
        return cls(range(size))

    @property
    def label(self) -> str:
        """Compact label used in column names, e.g. '1>0>2'."""
        return ">".join(str(g) for g in self.perm)

    def position(self, group: int) -> int:
        """Position at which a group moves."""
        return self.perm.index(group)


def _as_blocks(values: Sequence[Sequence[int]]) -> tuple[tuple[int, ...], ...]:
    return tuple(tuple(int(agent) for agent in block) for block in values)


@frozen
class GroupScheme:
    """A partition of the agents 0..n-1 into groups that move as one level."""

    groups: tuple[tuple[int, ...], ...] = field(converter=_as_blocks)

    def __attrs_post_init__(self) -> None:
        """Require non-empty, disjoint, covering blocks."""
        if not self.groups:
            raise ValidationError("groups: need at least one group")
        members = [agent for block in self.groups for agent in block]
        if any(not block for block in self.groups):
            raise ValidationError("groups: empty group")
        if sorted(members) != list(range(len(members))):
            raise ValidationError(f"groups: {self} must partition agents 0..{len(members) - 1}")

    def __str__(self) -> str:
        """Semicolon separated blocks, e.g. '0,1;2'."""
        return ";".join(",".join(str(a) for a in block) for block in self.groups)

    def __len__(self) -> int:
        """Number of groups."""
        return len(self.groups)

    @property
    def agents(self) -> int:
        """Total number of agents."""
        return sum(len(block) for block in self.groups)

    @classmethod
    def singletons(cls, agents: int) -> "GroupScheme":
        """One group per agent."""
        return cls([[a] for a in range(agents)])

    @classmethod
    def even(cls, groups: int, size: int) -> "GroupScheme":
        """Contiguous blocks, `groups` x `size` agents (e.g. 3x2)."""
        return cls([list(range(g * size, (g + 1) * size)) for g in range(groups)])

    @classmethod
    def parse(cls, text: str, agents: int | None = None) -> "GroupScheme":
        """Parse '0,1;2,3' block lists or 'GxS' even grouping.

        Args:
            text: The group spec; an empty string means one group per agent
            agents: Number of agents, required for the empty spec
        """
        text = text.strip()
        if not text:
            if agents is None:
                raise ValidationError("groups: the number of agents is needed for a default scheme")
            return cls.singletons(agents)
        try:
            if "x" in text:
                groups, size = (int(part) for part in text.split("x"))
                scheme = cls.even(groups, size)
            else:
                scheme = cls([[int(a) for a in block.split(",")] for block in text.split(";")])
        except ValueError as err:
            if isinstance(err, ValidationError):
                raise
            raise ValidationError(f"groups: cannot parse '{text}'") from err
        if agents is not None and scheme.agents != agents:
            raise ValidationError(f"groups: scheme covers {scheme.agents} agents, the game has {agents}")
        return scheme

    def agent_order(self, ordering: Ordering) -> tuple[int, ...]:
        """Flattened execution sequence: groups in priority order, native agent order within a group."""
        if len(ordering) != len(self):
            raise ValidationError(f"ordering: {ordering} has {len(ordering)} groups, the scheme has {len(self)}")
        return tuple(agent for group in ordering.perm for agent in self.groups[group])


def enumerate_orderings(scheme: GroupScheme) -> list[Ordering]:
    """All g! orderings of the scheme's groups, in lexicographic order."""
    g = len(scheme)
    if g > MAX_GROUPS:
        raise ValidationError(
            f"groups: {g} groups give {math.factorial(g)} orderings, the limit is {MAX_GROUPS} groups"
        )
    return [Ordering(perm) for perm in itertools.permutations(range(g))]


def payoff(game: MatrixGame, joint_action: Sequence[int]) -> np.ndarray:
    """Per-player payoffs of a joint action."""
    joint_action = tuple(int(a) for a in joint_action)
    if len(joint_action) != game.players:
        raise ValidationError(f"joint_action: expected {game.players} actions, got {len(joint_action)}")
    for i, (action, count) in enumerate(zip(joint_action, game.actions)):
        if not 0 <= action < count:
            raise ValidationError(f"joint_action[{i}]: action {action} out of range 0..{count - 1}")
    return np.array([tensor[joint_action] for tensor in game.tensors])


def coordination() -> MatrixGame:
    """Shared-payoff 3x3 game with three pure Nash points and one Stackelberg point."""
    return MatrixGame(
        name="coordination",
        actions=(3, 3),
        payoffs=[[[-10, 0, 10], [0, 2, 0], [8, 0, -10]]],
        shared=True,
    )


def commitment() -> MatrixGame:
    """3x3 bimatrix game whose Stackelberg point Pareto-dominates its only Nash point."""
    return MatrixGame(
        name="commitment",
        actions=(3, 3),
        payoffs=[
            [[0, -10, -8], [-5, -5, -15], [5, -10, -10]],
            [[5, -5, 4], [-10, 0, -5], [0, -5, 5]],
        ],
    )


def leader_shift() -> MatrixGame:
    """2x2 game whose Stackelberg point depends on which player leads."""
    return MatrixGame(
        name="leader_shift",
        actions=(2, 2),
        payoffs=[
            [[40, 0], [80, 20]],
            [[40, 0], [0, 20]],
        ],
    )


BUILTIN_GAMES = {
    "fig1_left": coordination,
    "fig1_right": commitment,
    "fig2": leader_shift,
}
# descriptive names accepted wherever a registry name is
GAME_ALIASES = {
    "coordination": "fig1_left",
    "commitment": "fig1_right",
    "leader_shift": "fig2",
}


def builtin_name(name: str) -> str | None:
    """Registry name of a built-in game given either its registry name or an alias; None if neither."""
    name = GAME_ALIASES.get(name, name)
    return name if name in BUILTIN_GAMES else None


def builtin(name: str) -> MatrixGame:
    """Construct a registered built-in game, named by its registry name."""
    key = builtin_name(name)
    if key is None:
        known = sorted(BUILTIN_GAMES) + sorted(GAME_ALIASES)
        raise ValidationError(f"game: unknown built-in '{name}', expected one of {known}")
    return evolve(BUILTIN_GAMES[key](), name=key)
