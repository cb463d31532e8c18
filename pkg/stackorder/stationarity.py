"""First-order conditions of continuous Stackelberg games and the solvability of two orderings at once.

For a quadratic game every reaction function is affine, so backward induction reduces to substituting affine maps
from the last level up to the first. Stacking the stationarity conditions of two orderings gives an overdetermined
system J(pi) = (F(pi); F'(pi)) = 0 whose solvability is tested either by comparing ranks (linear mode) or by
minimizing ||J(pi)||^2 with Levenberg-Marquardt (nonlinear mode).
"""

import enum
from collections.abc import Callable

import numpy as np
from attrs import field, frozen

from stackorder import constants
from stackorder.errors import NumericalError, ValidationError
from stackorder.games import Ordering, QuadraticGame

Residual = Callable[[np.ndarray], np.ndarray]


class Verdict(enum.Enum):
    """Whether a common solution exists."""

    SOLVABLE = "solvable"
    UNSOLVABLE = "unsolvable"


@frozen(eq=False)
class ReactionModel:
    """Affine reaction functions pi_j = alpha_j + sum_k beta[j, k] pi_k along the equilibrium path.

    Attributes:
        ordering: Order in which the players move
        alpha: Constant term of each player's reaction function (the first mover's strategy for the leader)
        beta: beta[j, k] is the partial derivative of player j's reaction with respect to an earlier player k
        total: total[j, i] is the total derivative d pi_j / d pi_i; 1 on the diagonal, 0 unless j moves after i
    """

    ordering: Ordering
    alpha: np.ndarray
    beta: np.ndarray
    total: np.ndarray

    def chain_residual(self) -> float:
        """Largest violation of the chain rule d pi_j/d pi_i = sum_k (d pi_j/d pi_k)(d pi_k/d pi_i)."""
        worst = 0.0
        perm = self.ordering.perm
        for i_pos, i in enumerate(perm):
            for j_pos in range(i_pos + 1, len(perm)):
                j = perm[j_pos]
                expanded = sum(self.beta[j, perm[k_pos]] * self.total[perm[k_pos], i] for k_pos in range(i_pos, j_pos))
                worst = max(worst, abs(self.total[j, i] - expanded))
        return worst

    def respond(self, prefix: dict[int, float]) -> np.ndarray:
        """Strategies of all players when the players in `prefix` are fixed and everyone later reacts."""
        pi = np.zeros(len(self.alpha))
        for player in self.ordering.perm:
            if player in prefix:
                pi[player] = prefix[player]
            else:
                pi[player] = self.alpha[player] + self.beta[player] @ pi
        return pi


class Mode(enum.Enum):
    """How a joint system is represented."""

    LINEAR = "linear"
    NONLINEAR = "nonlinear"


@frozen(eq=False)
class JointSystem:
    """Stationarity conditions of two orderings stacked by rows.

    In linear mode the system is A pi = b with A of shape (2n, n); in nonlinear mode only the residual evaluator is
    available.
    """

    mode: Mode
    ord1: Ordering
    ord2: Ordering
    residual: Residual
    A: np.ndarray | None = None
    b: np.ndarray | None = None

    @property
    def players(self) -> int:
        """Number of strategy variables."""
        return len(self.ord1)

    @classmethod
    def nonlinear(cls, game: QuadraticGame, ord1: Ordering, ord2: Ordering) -> "JointSystem":
        """The stacked conditions exposed only through the residual evaluator J(pi) = (F(pi); F'(pi))."""
        _check_pair(game, ord1, ord2)
        _, model1 = continuous_se(game, ord1)
        _, model2 = continuous_se(game, ord2)

        def residual(pi: np.ndarray) -> np.ndarray:
            return np.concatenate([_residual(game, model1, pi), _residual(game, model2, pi)])

        return cls(mode=Mode.NONLINEAR, ord1=ord1, ord2=ord2, residual=residual)

    def jacobian(self, pi: np.ndarray) -> np.ndarray:
        """Jacobian of the residual: exact in linear mode, forward differences otherwise."""
        if self.mode is Mode.LINEAR:
            assert self.A is not None
            return self.A
        base = self.residual(pi)
        columns = []
        for i in range(len(pi)):
            shifted = pi.copy()
            shifted[i] += constants.FD_STEP
            columns.append((self.residual(shifted) - base) / constants.FD_STEP)
        return np.column_stack(columns)


@frozen(eq=False)
class SolvabilityReport:
    """Outcome of a solvability test.

    Attributes:
        verdict: Whether a strategy satisfying both orderings' conditions exists
        method: "rank" or "lm"
        solution: Least-squares candidate pi*
        residual: ||J(pi*)||^2
        tolerance: Rank tolerance (rank) or error threshold epsilon (lm)
        rank_a: Numerical rank of A (rank method only)
        rank_ab: Numerical rank of [A | b] (rank method only)
        iterations: Accepted LM steps (lm method only)
        converged: Whether LM stopped before max_iter (lm method only)
        trace: ||J||^2 after every accepted LM step, starting at pi0
    """

    verdict: Verdict
    method: str
    solution: np.ndarray
    residual: float
    tolerance: float
    rank_a: int | None = None
    rank_ab: int | None = None
    iterations: int = 0
    converged: bool = True
    trace: tuple[float, ...] = field(factory=tuple)

    def as_dict(self) -> dict:
        """JSON-ready representation."""
        return {
            "verdict": self.verdict.value,
            "method": self.method,
            "solution": self.solution.tolist(),
            "residual": self.residual,
            "tolerance": self.tolerance,
            "rank_a": self.rank_a,
            "rank_ab": self.rank_ab,
            "iterations": self.iterations,
            "converged": self.converged,
            "trace": list(self.trace),
        }


def _check_ordering(game: QuadraticGame, ordering: Ordering) -> None:
    if len(ordering) != game.players:
        raise ValidationError(f"ordering: {ordering} has {len(ordering)} entries, the game has {game.players} players")


def continuous_se(game: QuadraticGame, ordering: Ordering) -> tuple[np.ndarray, ReactionModel]:
    """Stackelberg strategies of a quadratic game by backward affine substitution.

    Raises:
        NumericalError: If some level's substituted objective is not strictly concave in its own strategy
    """
    _check_ordering(game, ordering)
    n = game.players
    perm = ordering.perm

    # pi = M z + m, where z holds the strategies of the players at positions 0..level (in move order)
    M = np.zeros((n, n))
    M[list(perm), list(range(n))] = 1.0
    m = np.zeros(n)
    alpha = np.zeros(n)
    beta = np.zeros((n, n))
    for level in reversed(range(n)):
        player = perm[level]
        H = M.T @ game.A[player] @ M
        g = M.T @ (2.0 * game.A[player] @ m + game.b[player])
        curvature = H[level, level]
        if not curvature < 0:
            raise NumericalError(
                f"level {level} (player {player}): substituted objective is not strictly concave ({curvature:.3g})"
            )
        a = -g[level] / (2.0 * curvature)
        coefficients = -H[level, :level] / curvature
        alpha[player] = a
        beta[player, list(perm[:level])] = coefficients
        m = m + M[:, level] * a
        M = M[:, :level] + np.outer(M[:, level], coefficients)

    strategy = m
    if not np.isfinite(strategy).all():
        raise NumericalError(f"ordering {ordering}: non-finite equilibrium strategy")
    return strategy, ReactionModel(ordering=ordering, alpha=alpha, beta=beta, total=_total_derivatives(perm, beta))


def _total_derivatives(perm: tuple[int, ...], beta: np.ndarray) -> np.ndarray:
    n = len(perm)
    total = np.zeros((n, n))
    for i_pos, i in enumerate(perm):
        total[i, i] = 1.0
        for j_pos in range(i_pos + 1, n):
            j = perm[j_pos]
            total[j, i] = sum(beta[j, perm[k_pos]] * total[perm[k_pos], i] for k_pos in range(i_pos, j_pos))
    return total


def stationarity_residual(game: QuadraticGame, ordering: Ordering, pi: np.ndarray) -> np.ndarray:
    """F_i(pi) = dQ_i/dpi_i + sum over later j of dQ_i/dpi_j * dpi_j/dpi_i, for every player i."""
    _, model = continuous_se(game, ordering)
    return _residual(game, model, np.asarray(pi, dtype=float))


def _residual(game: QuadraticGame, model: ReactionModel, pi: np.ndarray) -> np.ndarray:
    return np.array([game.gradient(i, pi) @ model.total[:, i] for i in range(game.players)])


def _rows(game: QuadraticGame, model: ReactionModel) -> tuple[np.ndarray, np.ndarray]:
    # F_i is affine: F_i(pi) = (2 A_i d_i) . pi + b_i . d_i with d_i = total[:, i]
    rows = np.array([2.0 * game.A[i] @ model.total[:, i] for i in range(game.players)])
    constant = np.array([game.b[i] @ model.total[:, i] for i in range(game.players)])
    return rows, -constant


def _check_pair(game: QuadraticGame, ord1: Ordering, ord2: Ordering) -> None:
    if game.players < 2:
        raise ValidationError("ord2: a single-player game has only one ordering")
    _check_ordering(game, ord1)
    _check_ordering(game, ord2)
    if ord1 == ord2:
        raise ValidationError(f"ord2: must differ from ord1 ({ord1}); at least two players have to switch places")


def stack_joint_system(game: QuadraticGame, ord1: Ordering, ord2: Ordering) -> JointSystem:
    """Linear system A pi = b whose rows 1..n come from ord1 and rows n+1..2n from ord2."""
    _check_pair(game, ord1, ord2)
    _, model1 = continuous_se(game, ord1)
    _, model2 = continuous_se(game, ord2)
    rows1, rhs1 = _rows(game, model1)
    rows2, rhs2 = _rows(game, model2)
    A = np.vstack([rows1, rows2])
    b = np.concatenate([rhs1, rhs2])
    return JointSystem(mode=Mode.LINEAR, ord1=ord1, ord2=ord2, residual=lambda pi: A @ pi - b, A=A, b=b)


def numerical_rank(matrix: np.ndarray, tol: float) -> int:
    """Number of singular values above tol * sigma_max."""
    singular = np.linalg.svd(matrix, compute_uv=False)
    if singular.size == 0 or singular[0] == 0.0:
        return 0
    return int((singular > tol * singular[0]).sum())


def rank_test(system: JointSystem, tol: float = constants.RANK_TOL) -> SolvabilityReport:
    """Solvable iff rank(A) = rank(A | b); also returns the least-squares candidate."""
    if system.mode is not Mode.LINEAR or system.A is None or system.b is None:
        raise ValidationError("system: the rank test needs a linear system")
    rank_a = numerical_rank(system.A, tol)
    rank_ab = numerical_rank(np.column_stack([system.A, system.b]), tol)
    solution = np.linalg.lstsq(system.A, system.b, rcond=None)[0]
    error = system.A @ solution - system.b
    return SolvabilityReport(
        verdict=Verdict.SOLVABLE if rank_a == rank_ab else Verdict.UNSOLVABLE,
        method="rank",
        solution=solution,
        residual=float(error @ error),
        tolerance=tol,
        rank_a=rank_a,
        rank_ab=rank_ab,
    )


def _energy(system: JointSystem, pi: np.ndarray) -> tuple[np.ndarray, float]:
    residual = system.residual(pi)
    if not np.isfinite(residual).all():
        raise NumericalError(f"residual is not finite at pi = {pi.tolist()}")
    return residual, float(residual @ residual)


def lm_minimize(
    system: JointSystem,
    pi0: np.ndarray,
    eps: float = constants.LM_EPS,
    max_iter: int = constants.LM_MAX_ITER,
) -> SolvabilityReport:
    """Minimize E(pi) = ||J(pi)||^2 by damped least squares; solvable iff the final E is below eps.

    The damping starts at 1e-3, shrinks tenfold after an accepted step and grows tenfold after a rejected one.
    Running out of iterations is reported through `converged`, not raised.
    """
    pi = np.array(pi0, dtype=float)
    residual, energy = _energy(system, pi)
    damping = constants.LM_INITIAL_DAMPING
    trace = [energy]
    accepted = 0
    converged = False
    for _ in range(max_iter):
        if energy == 0.0:
            converged = True
            break
        jacobian = system.jacobian(pi)
        gradient = jacobian.T @ residual
        if np.abs(gradient).max() <= 1e-15 * max(1.0, energy):
            converged = True
            break
        normal = jacobian.T @ jacobian
        step = np.linalg.solve(normal + damping * np.eye(len(pi)), -gradient)
        candidate = pi + step
        candidate_residual, candidate_energy = _energy(system, candidate)
        if candidate_energy < energy:
            pi, residual, energy = candidate, candidate_residual, candidate_energy
            damping /= constants.LM_DAMPING_FACTOR
            accepted += 1
            trace.append(energy)
            if np.linalg.norm(step) <= 1e-14 * (np.linalg.norm(pi) + 1e-14):
                converged = True
                break
        else:
            damping *= constants.LM_DAMPING_FACTOR
            if damping > 1e16:
                converged = True
                break
    return SolvabilityReport(
        verdict=Verdict.SOLVABLE if energy < eps else Verdict.UNSOLVABLE,
        method="lm",
        solution=pi,
        residual=energy,
        tolerance=eps,
        iterations=accepted,
        converged=converged,
        trace=tuple(trace),
    )
