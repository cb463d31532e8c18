"""Built-in environments with exact Stackelberg oracles.

An iterated matrix environment repeats one normal-form game for H steps. The switching-leader environment alternates
between leader_shift and its role-swapped mirror, one state per window, so the ordering that reaches the better
Stackelberg point depends on the state.
"""

from collections.abc import Sequence
from pathlib import Path

import numpy as np
from attrs import define, field

from stackorder import gamefile
from stackorder.equilibrium import se_backward_induction
from stackorder.errors import EpisodeFinishedError, ValidationError
from stackorder.games import BUILTIN_GAMES, GroupScheme, MatrixGame, Ordering, builtin, builtin_name, leader_shift
from stackorder.smg import EnvSpec

DEFAULT_HORIZON = 8
DEFAULT_WINDOW = 2
ITERATED_PREFIX = "iterated_"


def swap_roles(game: MatrixGame) -> MatrixGame:
    """Two-player game with the players' roles exchanged: the bimatrix transposed, payoff pairs swapped."""
    if game.players != 2:
        raise ValidationError(f"game: role swap needs 2 players, {game.name} has {game.players}")
    return game.relabel((1, 0))


def reward_normalizer(*games: MatrixGame) -> float:
    """Largest magnitude of the players' mean payoff over all cells; 1 for an all-zero game.

    For leader_shift this is 40, so the Stackelberg point (40, 40) pays a team reward of 2 per step.
    """
    largest = max(float(np.abs(np.mean(game.tensors, axis=0)).max()) for game in games)
    return largest or 1.0


def _matrix_game(game: object, source: str) -> MatrixGame:
    if not isinstance(game, MatrixGame):
        raise ValidationError(f"env: {source} is not a matrix game")
    return game


@define
class IteratedMatrixEnv:
    """One matrix game played H times; rewards are payoffs divided by `reward_normalizer`."""

    game: MatrixGame
    horizon: int = DEFAULT_HORIZON
    name: str = ""
    t: int = field(default=0, init=False)
    state: int = field(default=0, init=False)

    @property
    def spec(self) -> EnvSpec:
        """Static descriptor."""
        return EnvSpec(
            name=self.name or f"{ITERATED_PREFIX}{self.game.name}",
            states=1,
            actions=self.game.actions,
            horizon=self.horizon,
            normalizer=reward_normalizer(self.game),
        )

    @property
    def done(self) -> bool:
        """Whether the episode is over."""
        return self.t >= self.horizon

    def games(self) -> tuple[MatrixGame, ...]:
        """Game played in each state."""
        return (self.game,)

    def reset(self) -> int:
        """Start an episode."""
        self.t = 0
        self.state = 0
        return self.state

    def step(self, joint_action: Sequence[int]) -> tuple[int, np.ndarray, bool]:
        """Play the game once."""
        if self.done:
            raise EpisodeFinishedError("episode finished")
        spec = self.spec
        joint_action = spec.check_action(joint_action)
        rewards = np.array([tensor[joint_action] for tensor in self.game.tensors]) / spec.normalizer
        self.t += 1
        return self.state, rewards, self.done


@define
class SwitchingLeaderEnv:
    """Two states that alternate every `window` steps: state = (t // window) mod 2.

    State 0 plays `matrices[0]`, state 1 plays `matrices[1]`; by default leader_shift and its mirror.
    """

    matrices: tuple[MatrixGame, MatrixGame] = field(factory=lambda: (leader_shift(), swap_roles(leader_shift())))
    window: int = DEFAULT_WINDOW
    horizon: int = DEFAULT_HORIZON
    normalizer: float = 40.0
    name: str = "switching_leader"
    t: int = field(default=0, init=False)
    state: int = field(default=0, init=False)

    def __attrs_post_init__(self) -> None:
        """Both states must share the action counts."""
        if self.matrices[0].actions != self.matrices[1].actions:
            raise ValidationError("matrices: both states need the same action counts")
        if self.window < 1:
            raise ValidationError(f"window: must be at least 1, got {self.window}")

    @property
    def spec(self) -> EnvSpec:
        """Static descriptor."""
        return EnvSpec(
            name=self.name,
            states=2,
            actions=self.matrices[0].actions,
            horizon=self.horizon,
            normalizer=self.normalizer,
        )

    @property
    def done(self) -> bool:
        """Whether the episode is over."""
        return self.t >= self.horizon

    def games(self) -> tuple[MatrixGame, ...]:
        """Game played in each state."""
        return self.matrices

    def reset(self) -> int:
        """Start an episode in state 0."""
        self.t = 0
        self.state = 0
        return self.state

    def step(self, joint_action: Sequence[int]) -> tuple[int, np.ndarray, bool]:
        """Play the current state's game, then move the clock."""
        if self.done:
            raise EpisodeFinishedError("episode finished")
        joint_action = self.spec.check_action(joint_action)
        game = self.matrices[self.state]
        rewards = np.array([tensor[joint_action] for tensor in game.tensors]) / self.normalizer
        self.t += 1
        self.state = (self.t // self.window) % 2
        return self.state, rewards, self.done


MatrixEnv = IteratedMatrixEnv | SwitchingLeaderEnv


def canonical_env_name(name: str) -> str:
    """Replace a game alias in "iterated_<game>" by the game's registry name; other names pass through."""
    if name.startswith(ITERATED_PREFIX):
        key = builtin_name(name[len(ITERATED_PREFIX) :])
        if key is not None:
            return f"{ITERATED_PREFIX}{key}"
    return name


def make_builtin(name: str, horizon: int = DEFAULT_HORIZON, window: int = DEFAULT_WINDOW) -> MatrixEnv:
    """Construct an environment by registry name.

    Args:
        name: "iterated_<builtin game>", "switching_leader", "iterated:<game file>" or
            "switching:<game file 0>,<game file 1>"
        horizon: Episode length H
        window: State-switching period of switching environments
    """
    if horizon < 1:
        raise ValidationError(f"horizon: must be at least 1, got {horizon}")
    if name == "switching_leader":
        return SwitchingLeaderEnv(window=window, horizon=horizon)
    name = canonical_env_name(name)
    if name.startswith(ITERATED_PREFIX) and name[len(ITERATED_PREFIX) :] in BUILTIN_GAMES:
        return IteratedMatrixEnv(game=builtin(name[len(ITERATED_PREFIX) :]), horizon=horizon, name=name)
    if name.startswith("iterated:"):
        path = name.partition(":")[2]
        return IteratedMatrixEnv(game=_matrix_game(gamefile.load_game(Path(path)), path), horizon=horizon, name=name)
    if name.startswith("switching:"):
        paths = name.partition(":")[2].split(",")
        if len(paths) != 2:
            raise ValidationError(f"env: '{name}' needs exactly two game files")
        loaded = tuple(_matrix_game(gamefile.load_game(Path(p)), p) for p in paths)
        normalizer = reward_normalizer(*loaded)
        return SwitchingLeaderEnv(
            matrices=(loaded[0], loaded[1]), window=window, horizon=horizon, normalizer=normalizer, name=name
        )
    known = sorted([f"{ITERATED_PREFIX}{g}" for g in BUILTIN_GAMES] + ["switching_leader"])
    raise ValidationError(f"env: unknown environment '{name}', expected one of {known} or a file form")


def oracle(env: MatrixEnv, ordering: Ordering, scheme: GroupScheme | None = None, k: int = 1) -> np.ndarray:
    """Team return of a k-step window spent at the Stackelberg point, for every state.

    Returns:
        One value per state: sum of the SE payoffs / normalizer * k
    """
    spec = env.spec
    scheme = scheme or GroupScheme.singletons(spec.agents)
    return np.array(
        [se_backward_induction(game, ordering, scheme).payoffs.sum() / spec.normalizer * k for game in env.games()]
    )
