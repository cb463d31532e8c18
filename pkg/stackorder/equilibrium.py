"""Pure Nash enumeration and N-level Stackelberg backward induction on finite games."""

import enum
import itertools
from collections.abc import Sequence

import numpy as np
import pandas as pd
from attrs import frozen
from pandahandler.indexes import Index
from tqdm.contrib.concurrent import thread_map

from stackorder import console
from stackorder.errors import ValidationError
from stackorder.games import GroupScheme, JointAction, MatrixGame, Ordering, enumerate_orderings, payoff

SCAN_INDEX = Index(names=["ordering"])


class Pareto(enum.Enum):
    """Pareto relation of one payoff vector to another."""

    DOMINATES = "dominates"
    DOMINATED = "dominated"
    INCOMPARABLE = "incomparable"
    EQUAL = "equal"


@frozen(eq=False)
class StackelbergSolution:
    """Outcome of backward induction under one ordering.

    Attributes:
        ordering: Priority order of the groups
        joint_action: Equilibrium action of every player, in native player indexing
        payoffs: Payoff of every player at the joint action
        leader_action: Composite action chosen by the first level
        reactions: For levels 1..L-1, the composite action chosen for every prefix of earlier composite actions
        level_sizes: Number of composite actions of each level
    """

    ordering: Ordering
    joint_action: JointAction
    payoffs: np.ndarray
    leader_action: int
    reactions: tuple[np.ndarray, ...]
    level_sizes: tuple[int, ...]

    def replay(self) -> tuple[int, ...]:
        """Composite actions of every level, reproduced from the leader's choice and the reaction tables."""
        return _replay(self.leader_action, self.reactions)


@frozen(eq=False)
class OrderScanReport:
    """Stackelberg solutions for every ordering, next to the pure Nash set."""

    solutions: tuple[StackelbergSolution, ...]
    nash: tuple[JointAction, ...]

    @property
    def se_shift(self) -> bool:
        """Whether any two orderings disagree on the joint action or the payoffs."""
        return any(
            a.joint_action != b.joint_action or not np.array_equal(a.payoffs, b.payoffs)
            for a, b in itertools.combinations(self.solutions, 2)
        )

    @property
    def payoff_shift(self) -> bool:
        """Whether any two orderings disagree on the payoffs."""
        return any(not np.array_equal(a.payoffs, b.payoffs) for a, b in itertools.combinations(self.solutions, 2))


def _replay(leader_action: int, reactions: Sequence[np.ndarray]) -> tuple[int, ...]:
    chosen = [leader_action]
    for table in reactions:
        chosen.append(int(table[tuple(chosen)]))
    return tuple(chosen)


def pure_nash(game: MatrixGame) -> list[JointAction]:
    """Joint actions where no player has a strictly better unilateral deviation, in row-major order."""
    stable = np.ones(game.actions, dtype=bool)
    for player, tensor in enumerate(game.tensors):
        stable &= tensor >= tensor.max(axis=player, keepdims=True)
    return [tuple(int(a) for a in cell) for cell in np.argwhere(stable)]


def se_backward_induction(game: MatrixGame, ordering: Ordering, scheme: GroupScheme) -> StackelbergSolution:
    """Stackelberg equilibrium under an ordering of the scheme's groups.

    Each group moves as one composite player whose actions are the product of its members' actions (row-major in
    native member order) and who maximizes the payoff of the group's first member. The last level best-responds to
    every prefix, each earlier level anticipates those responses. Ties go to the lowest composite action index.
    """
    if scheme.agents != game.players:
        raise ValidationError(f"groups: scheme covers {scheme.agents} agents, the game has {game.players}")
    agent_order = scheme.agent_order(ordering)
    levels = [scheme.groups[g] for g in ordering.perm]
    level_sizes = tuple(int(np.prod([game.actions[a] for a in group])) for group in levels)
    maximizers = [group[0] for group in levels]

    values = [np.transpose(tensor, agent_order).reshape(level_sizes) for tensor in game.tensors]
    choices: list[np.ndarray] = []
    for level in reversed(range(len(levels))):
        choice = np.argmax(values[maximizers[level]], axis=level)
        choices.append(choice)
        index = np.expand_dims(choice, axis=level)
        values = [np.take_along_axis(value, index, axis=level).squeeze(axis=level) for value in values]
    choices.reverse()

    leader_action = int(choices[0])
    reactions = tuple(choices[1:])
    joint = [0] * game.players
    for group, composite in zip(levels, _replay(leader_action, reactions)):
        members = np.unravel_index(composite, [game.actions[a] for a in group])
        for agent, action in zip(group, members):
            joint[agent] = int(action)
    return StackelbergSolution(
        ordering=ordering,
        joint_action=tuple(joint),
        payoffs=payoff(game, joint),
        leader_action=leader_action,
        reactions=reactions,
        level_sizes=level_sizes,
    )


def order_scan(game: MatrixGame, scheme: GroupScheme, workers: int = 1) -> OrderScanReport:
    """Solve every ordering of the scheme; results come back in lexicographic ordering order."""
    orderings = enumerate_orderings(scheme)

    def solve(ordering: Ordering) -> StackelbergSolution:
        return se_backward_induction(game, ordering, scheme)

    if workers > 1:
        solutions = thread_map(
            solve, orderings, max_workers=workers, desc="Scanning orderings", disable=console.verbosity() < 1
        )
    else:
        solutions = [solve(ordering) for ordering in console.progress(orderings, desc="Scanning orderings")]
    return OrderScanReport(solutions=tuple(solutions), nash=tuple(pure_nash(game)))


def order_scan_frame(report: OrderScanReport) -> pd.DataFrame:
    """One row per ordering: joint action, payoffs, welfare and whether the point is a pure Nash point."""
    nash = set(report.nash)
    rows = []
    for solution in report.solutions:
        row: dict[str, object] = {
            "ordering": str(solution.ordering),
            "joint_action": ",".join(str(a) for a in solution.joint_action),
        }
        for i, value in enumerate(solution.payoffs):
            row[f"payoff_{i + 1}"] = float(value)
        row["welfare"] = float(solution.payoffs.sum())
        row["is_pure_nash"] = solution.joint_action in nash
        rows.append(row)
    return SCAN_INDEX(pd.DataFrame(rows))


def pareto_compare(x: Sequence[float], y: Sequence[float]) -> Pareto:
    """Pareto relation of payoff vector x to payoff vector y."""
    x_arr = np.asarray(x, dtype=float)
    y_arr = np.asarray(y, dtype=float)
    if x_arr.shape != y_arr.shape:
        raise ValidationError(f"payoffs: cannot compare vectors of lengths {x_arr.size} and {y_arr.size}")
    if np.array_equal(x_arr, y_arr):
        return Pareto.EQUAL
    if (x_arr >= y_arr).all():
        return Pareto.DOMINATES
    if (x_arr <= y_arr).all():
        return Pareto.DOMINATED
    return Pareto.INCOMPARABLE
