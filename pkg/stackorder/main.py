"""Main entry point for the stackorder package."""

from pathlib import Path

import click
import numpy as np
from attrs import evolve
from dummio import orjson as json_io

import stackorder
from stackorder import constants, manifest, report
from stackorder.envs import make_builtin
from stackorder.equilibrium import order_scan, order_scan_frame, pareto_compare, pure_nash, se_backward_induction
from stackorder.errors import NumericalError, ValidationError
from stackorder.gamefile import load_game, to_dict
from stackorder.games import (
    BUILTIN_GAMES,
    GAME_ALIASES,
    Game,
    GroupScheme,
    MatrixGame,
    Ordering,
    QuadraticGame,
    builtin,
    builtin_name,
    enumerate_orderings,
    payoff,
)
from stackorder.hpa import trainer
from stackorder.hpa.config import HpaConfig, load_config, preset
from stackorder.plot import training_curves
from stackorder.smg import trajectory_frame
from stackorder.stationarity import continuous_se, lm_minimize, rank_test, stack_joint_system

REPORT_FILE = "report.json"
ORDER_SCAN_FILE = "order_scan.csv"
CURVES_FILE = "curves.svg"
TRAJECTORY_FILE = "trajectories.csv"
DEFAULT_ENV = "switching_leader"


class StackorderGroup(click.Group):
    """Command group that turns package errors into exit codes."""

    def invoke(self, ctx: click.Context):
        """Run the selected command; validation errors exit with 2, runtime and numerical errors with 3."""
        try:
            return super().invoke(ctx)
        except (click.exceptions.Exit, click.exceptions.Abort):
            raise
        except ValidationError as err:
            click.echo(f"Error: {err}", err=True)
            ctx.exit(constants.EXIT_VALIDATION)
        except (NumericalError, RuntimeError, OSError) as err:
            click.echo(f"Error: {err}", err=True)
            ctx.exit(constants.EXIT_RUNTIME)


def resolve_game(text: str) -> Game:
    """Load a game file, or construct a built-in game by name."""
    path = Path(text)
    if path.is_file():
        return load_game(path)
    if builtin_name(text) is not None:
        return builtin(text)
    known = sorted(BUILTIN_GAMES) + sorted(GAME_ALIASES)
    raise ValidationError(f"game: '{text}' is neither a game file nor one of {known}")


def _matrix(game: Game) -> MatrixGame:
    if not isinstance(game, MatrixGame):
        raise ValidationError(f"game: {game.name} is a quadratic game, this command needs a matrix game")
    return game


def _out_dir(out: Path | None, command: str) -> Path:
    directory = out if out is not None else constants.DEFAULT_OUTPUT_DIR / command
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def _save_report(data: dict, directory: Path) -> Path:
    path = directory / REPORT_FILE
    json_io.save(data, filepath=path)
    return path


def _parse_vector(text: str, size: int, name: str) -> np.ndarray:
    try:
        values = np.array([float(part) for part in text.split(",")])
    except ValueError as err:
        raise ValidationError(f"{name}: cannot parse '{text}'") from err
    if values.size != size:
        raise ValidationError(f"{name}: expected {size} values, got {values.size}")
    return values


@click.group(cls=StackorderGroup)
@click.version_option(version=stackorder.__version__, prog_name="stackorder")
def main() -> None:
    """Equilibria under execution orders, order-shift analysis and hierarchical priority training."""


@main.command()
@click.argument("game")
@click.option("--ne", "want_ne", is_flag=True, help="Enumerate pure Nash equilibria.")
@click.option("--se", "want_se", is_flag=True, help="Solve Stackelberg equilibria.")
@click.option("--ordering", "orderings", multiple=True, help="Group ordering such as 1,0; repeatable.")
@click.option("--groups", default="", help="Group scheme such as '0,1;2' or 2x2; one group per player by default.")
@click.option("--out", type=click.Path(path_type=Path), default=None)
def solve(game: str, want_ne: bool, want_se: bool, orderings: tuple[str, ...], groups: str, out: Path | None) -> None:
    """Nash and Stackelberg points of a matrix game (file or built-in name) and their Pareto relations.

    Without --ne and --se both are computed; without --ordering every ordering is solved.
    """
    started = manifest.now()
    matrix = _matrix(resolve_game(game))
    scheme = GroupScheme.parse(groups, agents=matrix.players)
    if not (want_ne or want_se):
        want_ne = want_se = True
    parsed = [Ordering.parse(text) for text in orderings]

    nash = pure_nash(matrix) if want_ne else None
    solutions = []
    if want_se:
        for ordering in parsed or enumerate_orderings(scheme):
            solutions.append(se_backward_induction(matrix, ordering, scheme))
    relations = [
        (solution, joint, pareto_compare(solution.payoffs, payoff(matrix, joint)))
        for solution in solutions
        for joint in nash or []
    ]
    report.summarize_solve(matrix, nash, solutions, relations)

    directory = _out_dir(out, "solve")
    data = {
        "game": to_dict(matrix),
        "groups": str(scheme),
        "nash": None
        if nash is None
        else [{"joint_action": list(joint), "payoffs": payoff(matrix, joint).tolist()} for joint in nash],
        "stackelberg": [
            {
                "ordering": list(s.ordering.perm),
                "joint_action": list(s.joint_action),
                "payoffs": s.payoffs.tolist(),
                "leader_action": s.leader_action,
            }
            for s in solutions
        ],
        "pareto": [
            {"ordering": list(s.ordering.perm), "nash": list(joint), "relation": relation.value}
            for s, joint, relation in relations
        ],
    }
    files = [_save_report(data, directory)]
    config = {"game": game, "ne": want_ne, "se": want_se, "orderings": list(orderings), "groups": groups}
    manifest.record(directory, "solve", config, started, files)
    click.echo(f"\nSee {files[0]} for detailed results.")


@main.command("order-scan")
@click.argument("game")
@click.option("--groups", default="", help="Group scheme such as '0,1;2' or 2x2; one group per player by default.")
@click.option("--workers", type=int, default=1, help="Threads used to solve orderings concurrently.")
@click.option("--out", type=click.Path(path_type=Path), default=None)
def order_scan_command(game: str, groups: str, workers: int, out: Path | None) -> None:
    """Stackelberg point of a matrix game under every ordering of its groups."""
    started = manifest.now()
    if workers < 1:
        raise ValidationError(f"workers: must be at least 1, got {workers}")
    matrix = _matrix(resolve_game(game))
    scheme = GroupScheme.parse(groups, agents=matrix.players)
    scan = order_scan(matrix, scheme, workers=workers)
    frame = order_scan_frame(scan)
    report.summarize_scan(frame, scan)

    directory = _out_dir(out, "order-scan")
    path = directory / ORDER_SCAN_FILE
    frame.to_csv(path)
    manifest.record(directory, "order-scan", {"game": game, "groups": groups, "workers": workers}, started, [path])
    click.echo(f"\nSee {path} for detailed results.")


@main.command()
@click.argument("game")
@click.option("--ord1", required=True, help="First ordering, e.g. 0,1.")
@click.option("--ord2", required=True, help="Second ordering, e.g. 1,0.")
@click.option("--eps", type=float, default=constants.LM_EPS, show_default=True, help="LM solvability threshold.")
@click.option("--max-iter", type=int, default=constants.LM_MAX_ITER, show_default=True)
@click.option("--start", default=None, help="LM starting point, comma separated; zeros by default.")
@click.option("--out", type=click.Path(path_type=Path), default=None)
def stationarity(
    game: str, ord1: str, ord2: str, eps: float, max_iter: int, start: str | None, out: Path | None
) -> None:
    """Whether one strategy satisfies the Stackelberg conditions of a quadratic game under two orderings."""
    started = manifest.now()
    loaded = resolve_game(game)
    if not isinstance(loaded, QuadraticGame):
        raise ValidationError(f"game: {loaded.name} is a matrix game, this command needs a quadratic game")
    if eps <= 0:
        raise ValidationError(f"eps: must be positive, got {eps}")
    if max_iter < 0:
        raise ValidationError(f"max_iter: must be non-negative, got {max_iter}")
    first, second = Ordering.parse(ord1), Ordering.parse(ord2)
    system = stack_joint_system(loaded, first, second)
    points = {ordering: continuous_se(loaded, ordering)[0] for ordering in (first, second)}
    pi0 = np.zeros(loaded.players) if start is None else _parse_vector(start, loaded.players, "start")
    results = [rank_test(system), lm_minimize(system, pi0, eps=eps, max_iter=max_iter)]
    report.summarize_stationarity(points, results)

    directory = _out_dir(out, "stationarity")
    data = {
        "game": to_dict(loaded),
        "ord1": list(first.perm),
        "ord2": list(second.perm),
        "se_points": {str(ordering): strategy.tolist() for ordering, strategy in points.items()},
        "rank": results[0].as_dict(),
        "lm": results[1].as_dict(),
    }
    files = [_save_report(data, directory)]
    config = {"game": game, "ord1": ord1, "ord2": ord2, "eps": eps, "max_iter": max_iter, "start": start}
    manifest.record(directory, "stationarity", config, started, files)


@main.command()
@click.option("--env", "env_name", default=DEFAULT_ENV, show_default=True, help="Environment name.")
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--seed", type=int, default=None, help="Overrides the seed of the config.")
@click.option("--groups", default="", help="Group scheme; one group per agent by default.")
@click.option("--ordering", "orderings", multiple=True, help="Restrict the options to this ordering; repeatable.")
@click.option("--out", type=click.Path(path_type=Path), default=None)
def train(
    env_name: str, config_path: Path | None, seed: int | None, groups: str, orderings: tuple[str, ...], out: Path | None
) -> None:
    """Train the upper ordering policy and the lower agents on an environment."""
    started = manifest.now()
    config = preset(env_name)
    if config_path is not None:
        config = load_config(config_path, base=config)
    if seed is not None:
        config = evolve(config, seed=seed)
    env = make_builtin(env_name, horizon=config.horizon, window=config.k)
    scheme = GroupScheme.parse(groups, agents=env.spec.agents)
    parsed = [Ordering.parse(text) for text in orderings] or None

    directory = _out_dir(out, "train")
    artifacts = trainer.train(env, scheme, config, out_dir=directory, orderings=parsed)
    curves = training_curves(artifacts.metrics, directory / CURVES_FILE)
    report.summarize_training(artifacts.metrics)

    files = [*artifacts.files, curves]
    options = [str(ordering) for ordering in artifacts.upper.options]
    run_config = {"env": env_name, "groups": str(scheme), "options": options, "hpa": config.to_dict()}
    manifest.record(directory, "train", run_config, started, files, seed=config.seed)
    click.echo(f"\nSee {directory / trainer.METRICS_FILE} for detailed results.")


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--env", "env_name", default=None, help="Environment name; the training environment by default.")
@click.option("--episodes", type=int, default=1, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=None)
def eval_command(checkpoint: Path, env_name: str | None, episodes: int, out: Path | None) -> None:
    """Greedy evaluation of a trained run: mean team return and option choices per state."""
    started = manifest.now()
    saved = trainer.read_manifest(checkpoint)
    trained = HpaConfig.from_dict(saved["config"])
    env_name = env_name or saved["env"]
    env = make_builtin(env_name, horizon=trained.horizon, window=trained.k)
    upper, lowers, config = trainer.load_artifacts(checkpoint, env)
    evaluation = trainer.evaluate(env, upper, lowers, config.k, episodes=episodes)
    summary = evaluation.as_dict(upper)
    report.summarize_eval(summary)

    directory = _out_dir(out, "eval")
    trajectories = directory / TRAJECTORY_FILE
    trajectory_frame(evaluation.trajectories).to_csv(trajectories)
    files = [_save_report({"env": env_name, "checkpoint": str(checkpoint), **summary}, directory), trajectories]
    run_config = {"checkpoint": str(checkpoint), "env": env_name, "episodes": episodes}
    manifest.record(directory, "eval", run_config, started, files, seed=config.seed)


if __name__ == "__main__":
    main()
