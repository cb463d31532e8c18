"""Human-readable summaries printed by the CLI.

Actions are printed 1-based, so (1,1) is every player's first action; machine-readable files keep 0-based indices.
"""

import textwrap
from collections.abc import Sequence

import numpy as np
import pandas as pd
from sigfig import round as sround

from stackorder import console
from stackorder.equilibrium import OrderScanReport, Pareto, StackelbergSolution
from stackorder.games import JointAction, MatrixGame, Ordering
from stackorder.stationarity import SolvabilityReport, Verdict

PARETO_PHRASES = {
    Pareto.DOMINATES: "SE Pareto-dominates NE {nash}",
    Pareto.DOMINATED: "SE is Pareto-dominated by NE {nash}",
    Pareto.EQUAL: "SE and NE {nash} pay the same",
    Pareto.INCOMPARABLE: "SE and NE {nash} are Pareto-incomparable",
}


def _soft_sigfig_fmt(num: float | int, sigfigs: int = 4) -> str:
    """Format a number with a given number of significant figures.

    Rounding applies only to decimal digits, never to the integer part; integral values print without decimals.
    """
    if float(num).is_integer():
        return str(int(num))
    num_str = str(num)
    num_nondecimal_digits = len(num_str.split(".")[0].lstrip("-"))
    ndigits = max(sigfigs, num_nondecimal_digits)
    return str(sround(num_str, sigfigs=ndigits, spacer=","))


def _format_table(df: pd.DataFrame) -> str:
    df = df.copy()
    for col in df.select_dtypes(include=["float64", "int64"]).columns:
        df[col] = [_soft_sigfig_fmt(item) for item in df[col]]
    return textwrap.indent(str(df), "    ")


def action_label(joint_action: JointAction) -> str:
    """1-based joint action, e.g. (1,3)."""
    return "(" + ",".join(str(a + 1) for a in joint_action) + ")"


def vector_label(values: Sequence[float] | np.ndarray) -> str:
    """Payoff or strategy vector, e.g. (40,40) or (0.5,0.25)."""
    return "(" + ",".join(_soft_sigfig_fmt(float(v)) for v in values) + ")"


def summarize_solve(
    game: MatrixGame,
    nash: Sequence[JointAction] | None,
    solutions: Sequence[StackelbergSolution],
    relations: Sequence[tuple[StackelbergSolution, JointAction, Pareto]],
) -> None:
    """Print the Nash set, the Stackelberg points and their Pareto relations."""
    shape = "x".join(str(m) for m in game.actions)
    console.echo(f"Game {game.name}: {game.players} players, actions {shape}")
    if nash is not None:
        console.echo(f"NE {{{', '.join(action_label(a) for a in nash)}}}")
        for joint in nash:
            console.echo(f"    NE {action_label(joint)} payoffs {vector_label([t[joint] for t in game.tensors])}")
    for solution in solutions:
        console.echo(
            f"SE under ordering {solution.ordering}: {action_label(solution.joint_action)} "
            f"payoffs {vector_label(solution.payoffs)}"
        )
    for solution, joint, relation in relations:
        phrase = PARETO_PHRASES[relation].format(nash=action_label(joint))
        console.echo(f"{phrase} (ordering {solution.ordering})")


def summarize_scan(frame: pd.DataFrame, report: OrderScanReport) -> None:
    """Print the order-scan table and the shift verdict."""
    console.echo(f"\nStackelberg points over {len(report.solutions)} orderings:")
    console.echo(_format_table(frame))
    console.echo(f"SE-SHIFT: {'yes' if report.se_shift else 'no'}")


def verdict_line(report: SolvabilityReport) -> str:
    """One-line verdict, e.g. 'solvable (rank 2 = 2)'."""
    if report.method == "rank":
        relation = "=" if report.rank_a == report.rank_ab else "<"
        return f"{report.verdict.value} (rank {report.rank_a} {relation} {report.rank_ab})"
    state = "" if report.converged else ", iteration limit reached"
    return f"{report.verdict.value} (residual {report.residual:.3g} after {report.iterations} steps{state})"


def summarize_stationarity(
    points: dict[Ordering, np.ndarray],
    reports: Sequence[SolvabilityReport],
) -> None:
    """Print the per-ordering equilibria and the solvability verdicts."""
    for ordering, strategy in points.items():
        console.echo(f"SE under ordering {ordering}: pi = {vector_label(strategy)}")
    for report in reports:
        label = "rank test" if report.method == "rank" else "LM"
        console.echo(f"{label}: {verdict_line(report)}")
        if report.verdict is Verdict.SOLVABLE:
            console.echo(f"    common solution pi* = {vector_label(report.solution)}")


def summarize_training(metrics: pd.DataFrame, tail: int = 50) -> None:
    """Print the mean of the last episodes' metrics."""
    if metrics.empty:
        console.echo("No training episodes were run.")
        return
    recent = metrics.tail(tail)
    columns = ["mean_team_return", "upper_entropy"] + [c for c in metrics.columns if c.startswith("freq_")]
    console.echo(f"\nMean over the last {len(recent)} of {len(metrics)} episodes:")
    console.echo(_format_table(recent[columns].mean().to_frame("mean")))


def summarize_eval(summary: dict) -> None:
    """Print a greedy evaluation summary as produced by EvalReport.as_dict."""
    console.echo(f"Greedy mean per-step team return: {_soft_sigfig_fmt(summary['mean_team_return'])}")
    console.echo(f"Boundaries on a state-matched ordering: {_soft_sigfig_fmt(summary['matched_fraction'])}")
    rows = []
    for entry in summary["states"]:
        for label, prob in entry["option_probs"].items():
            rows.append(
                {
                    "state": entry["state"],
                    "ordering": label,
                    "option_prob": prob,
                    "greedy_count": entry["greedy_counts"][label],
                    "best": label in entry["best_options"],
                }
            )
    console.echo("\nOption choice per state:")
    console.echo(_format_table(pd.DataFrame(rows).set_index(["state", "ordering"])))
