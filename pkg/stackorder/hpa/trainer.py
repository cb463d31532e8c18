"""The hierarchical priority adjustment training loop, greedy evaluation and run artifacts.

One episode: the upper level picks (or keeps) an ordering at every k-step boundary, the lower agents act in that
ordering, and each closed window lands in the upper buffer while its steps land in the lower buffer. After the
episode every window's option advantage A_Omega = Q_Omega - V_Omega is spread over its steps as intrinsic reward, then
Q_U, the termination function, the option policy and critic, and finally the lower agents are updated.
"""

from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np
import orjson
import pandas as pd
from attrs import evolve, field, frozen
from dummio import orjson as json_io
from pandahandler.indexes import Index

from stackorder import console, seeding
from stackorder.envs import MatrixEnv, oracle
from stackorder.errors import ParseError, ValidationError
from stackorder.games import GroupScheme, Ordering
from stackorder.hpa.config import HpaConfig
from stackorder.hpa.lower import LowerAgent, lower_policy_update
from stackorder.hpa.upper import (
    UpperState,
    intrinsic_rewards,
    option_advantage,
    q_omega_all,
    select_option,
    td_update_qu,
    termination_step,
    upper_entropy,
    upper_policy_update,
)
from stackorder.policy.approximators import Approximator, TabularApproximator
from stackorder.policy.checkpoint import check_compatible, load_checkpoint, save_checkpoint
from stackorder.smg import LowerTransition, ReplayBuffers, UpperTransition, rollout_window

METRICS_INDEX = Index(names=["episode"])
METRICS_FILE = "metrics.csv"
CHECKPOINT_DIR = "checkpoints"
CHECKPOINT_MANIFEST = "manifest.json"


@frozen(eq=False)
class EpisodeRecord:
    """What one training episode produced, handed to the `on_episode` callback.

    Attributes:
        episode: 1-based episode number
        lower: Lower transitions with the intrinsic reward merged in
        upper: Windows of the episode
        advantages: Option advantage A_Omega of every window, computed before any update
    """

    episode: int
    lower: tuple[LowerTransition, ...]
    upper: tuple[UpperTransition, ...]
    advantages: tuple[float, ...]


@frozen(eq=False)
class TrainedArtifacts:
    """Result of a training run."""

    upper: UpperState
    lowers: tuple[LowerAgent, ...]
    metrics: pd.DataFrame
    files: tuple[Path, ...] = field(factory=tuple)


def build_agents(
    env: MatrixEnv, scheme: GroupScheme, config: HpaConfig, orderings: Sequence[Ordering] | None = None
) -> tuple[UpperState, tuple[LowerAgent, ...]]:
    """Freshly initialized upper level and lower agents, all drawn from the `init` stream."""
    rng = seeding.stream(config.seed, "init")
    spec = env.spec
    upper = UpperState.initialize(spec, scheme, config, rng, orderings)
    lowers = tuple(LowerAgent.initialize(spec, agent, config, rng) for agent in range(spec.agents))
    return upper, lowers


def run_episode(
    env: MatrixEnv,
    upper: UpperState,
    lowers: Sequence[LowerAgent],
    k: int,
    upper_rng: np.random.Generator | None,
    lower_rng: np.random.Generator | None,
) -> ReplayBuffers:
    """Collect one episode window by window; None streams make the respective level greedy."""
    buffers = ReplayBuffers()
    state = env.reset()
    previous = None
    while not env.done:
        choice = select_option(upper, state, previous, upper_rng)
        steps, window = rollout_window(env, upper.options[choice.option], upper.scheme, lowers, k, lower_rng)
        window = evolve(window, option=choice.option, log_prob=choice.log_prob, sampled=choice.sampled)
        buffers.add_window(steps, window)
        previous = choice.option
        state = window.end_state
    return buffers


def merge_intrinsic(buffers: ReplayBuffers, advantages: Sequence[float], k: int) -> None:
    """Replace the lower buffer by copies carrying the intrinsic reward of their window."""
    merged: list[LowerTransition] = []
    offset = 0
    for window, advantage in zip(buffers.upper, advantages):
        rewards = intrinsic_rewards(advantage, k, window.length)
        for step, reward in zip(buffers.lower[offset : offset + window.length], rewards):
            merged.append(evolve(step, intrinsic=float(reward)))
        offset += window.length
    buffers.lower[:] = merged


def update(
    upper: UpperState,
    lowers: Sequence[LowerAgent],
    buffers: ReplayBuffers,
    config: HpaConfig,
) -> tuple[list[float], dict[str, float]]:
    """All updates that follow one episode.

    Returns:
        The option advantage of every window and the losses of the episode
    """
    advantages = [option_advantage(upper, w.start_state, w.option, lowers) for w in buffers.upper]
    merge_intrinsic(buffers, advantages, config.k)

    termination_losses = []
    for window in buffers.upper:
        td_update_qu(upper, window, config.lr_q, config.gamma_upper, lowers)
        if not window.done:
            q_next = q_omega_all(upper, window.end_state, lowers)
            termination_losses.append(
                termination_step(
                    upper,
                    window.start_state,
                    window.option,
                    window.end_state,
                    q_next,
                    config.termination_reg,
                    config.lr_termination,
                )
            )
    upper_losses = upper_policy_update(upper, buffers.upper, config)
    order = upper.scheme.agent_order(buffers.upper[-1].ordering)
    lower_losses = lower_policy_update(lowers, buffers.lower, order, config)

    losses = {
        "loss_upper_policy": upper_losses["policy"],
        "loss_critic": upper_losses["critic"],
        "loss_termination": float(np.mean(termination_losses)) if termination_losses else 0.0,
    }
    for agent in range(len(lowers)):
        losses[f"loss_lower_{agent + 1}"] = lower_losses[agent]
    return advantages, losses


def metric_columns(upper: UpperState) -> list[str]:
    """Column order of metrics.csv."""
    columns = ["episode", "env_steps", "windows", "mean_team_return", "upper_entropy"]
    columns += [f"freq_{ordering.label}" for ordering in upper.options]
    columns += ["mean_a_h", "loss_upper_policy", "loss_critic", "loss_termination"]
    columns += [f"loss_lower_{agent + 1}" for agent in range(upper.spec.agents)]
    return columns


def train(
    env: MatrixEnv,
    scheme: GroupScheme,
    config: HpaConfig,
    out_dir: Path | None = None,
    on_episode: Callable[[EpisodeRecord], None] | None = None,
    orderings: Sequence[Ordering] | None = None,
) -> TrainedArtifacts:
    """Train the upper level and the lower agents.

    Args:
        env: Environment; its horizon must match `config.horizon`
        scheme: Agent grouping; by default its orderings are the options
        config: Hyperparameters and seed
        out_dir: Where metrics.csv and the checkpoints go; nothing is written when None
        on_episode: Called after every episode's updates
        orderings: Restricts the options to these orderings; all orderings of the scheme when None
    """
    if env.spec.horizon != config.horizon:
        raise ValidationError(f"horizon: config says {config.horizon}, the environment runs {env.spec.horizon} steps")
    upper, lowers = build_agents(env, scheme, config, orderings)
    upper_rng = seeding.stream(config.seed, "upper")
    lower_rng = seeding.stream(config.seed, "lower")

    rows = []
    for episode in console.progress(range(1, config.episodes + 1), desc="Training", total=config.episodes):
        buffers = run_episode(env, upper, lowers, config.k, upper_rng, lower_rng)
        upper.windows += len(buffers.upper)
        upper.steps += len(buffers.lower)
        team_return = sum(step.team_reward for step in buffers.lower)
        entropy = upper_entropy(upper, [window.start_state for window in buffers.upper])
        counts = np.bincount([window.option for window in buffers.upper], minlength=len(upper.options))
        advantages, losses = update(upper, lowers, buffers, config)

        row: dict[str, float | int] = {
            "episode": episode,
            "env_steps": upper.steps,
            "windows": len(buffers.upper),
            "mean_team_return": team_return / len(buffers.lower),
            "upper_entropy": entropy,
        }
        for ordering, count in zip(upper.options, counts):
            row[f"freq_{ordering.label}"] = count / len(buffers.upper)
        row["mean_a_h"] = float(np.mean(advantages))
        row.update(losses)
        rows.append(row)
        console.detail(f"episode {episode}: team return {row['mean_team_return']:.4f}, mean A_h {row['mean_a_h']:.4f}")
        if on_episode is not None:
            on_episode(
                EpisodeRecord(
                    episode=episode,
                    lower=tuple(buffers.lower),
                    upper=tuple(buffers.upper),
                    advantages=tuple(advantages),
                )
            )

    metrics = METRICS_INDEX(pd.DataFrame(rows, columns=metric_columns(upper)))
    files: tuple[Path, ...] = ()
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics.to_csv(out_dir / METRICS_FILE)
        files = (out_dir / METRICS_FILE, *save_artifacts(out_dir / CHECKPOINT_DIR, upper, lowers, config))
    return TrainedArtifacts(upper=upper, lowers=lowers, metrics=metrics, files=files)


def save_artifacts(
    directory: Path, upper: UpperState, lowers: Sequence[LowerAgent], config: HpaConfig
) -> tuple[Path, ...]:
    """Write one checkpoint per component plus a manifest describing them."""
    spec = upper.spec
    q_table = TabularApproximator(params={"table": upper.q_u.reshape(spec.states * len(upper.options), -1)})
    components = {
        "upper_policy": upper.policy,
        "upper_critic": upper.critic,
        "upper_termination": upper.termination,
        "upper_q_u": q_table,
    }
    for agent in lowers:
        components[f"lower_{agent.agent + 1}_policy"] = agent.policy
        components[f"lower_{agent.agent + 1}_critic"] = agent.critic

    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, approximator in components.items():
        path = directory / f"{name}.ckpt"
        save_checkpoint(approximator, path, seed=config.seed)
        paths.append(path)
    manifest = {
        "env": spec.name,
        "states": spec.states,
        "actions": list(spec.actions),
        "horizon": spec.horizon,
        "groups": str(upper.scheme),
        "options": [str(ordering) for ordering in upper.options],
        "config": config.to_dict(),
        "components": {name: f"{name}.ckpt" for name in components},
    }
    json_io.save(manifest, filepath=directory / CHECKPOINT_MANIFEST)
    return (*paths, directory / CHECKPOINT_MANIFEST)


def resolve_checkpoint_dir(path: Path) -> Path:
    """Accept either a run directory or its checkpoints directory."""
    if (path / CHECKPOINT_DIR / CHECKPOINT_MANIFEST).exists():
        return path / CHECKPOINT_DIR
    if (path / CHECKPOINT_MANIFEST).exists():
        return path
    raise ValidationError(f"checkpoint: no {CHECKPOINT_MANIFEST} under {path}")


MANIFEST_FIELDS: dict[str, type] = {
    "env": str,
    "states": int,
    "actions": list,
    "horizon": int,
    "groups": str,
    "options": list,
    "config": dict,
    "components": dict,
}


def read_manifest(path: Path) -> dict:
    """Checkpoint manifest of a run directory or checkpoints directory.

    Raises:
        ParseError: If the manifest is not valid JSON or lacks a field of the expected type
    """
    filepath = resolve_checkpoint_dir(path) / CHECKPOINT_MANIFEST
    try:
        manifest = json_io.load(filepath)
    except orjson.JSONDecodeError as err:
        raise ParseError(f"{filepath}: not a valid JSON manifest ({err})") from err
    if not isinstance(manifest, dict):
        raise ParseError(f"{filepath}: manifest must be a JSON object")
    for name, kind in MANIFEST_FIELDS.items():
        value = manifest.get(name)
        if not isinstance(value, kind) or isinstance(value, bool):
            raise ParseError(f"{filepath}: manifest field '{name}' must be a {kind.__name__}, got {value!r}")
    if not all(isinstance(a, int) and not isinstance(a, bool) for a in manifest["actions"]):
        raise ParseError(f"{filepath}: manifest field 'actions' must list integers, got {manifest['actions']!r}")
    if not all(isinstance(c, str) for c in manifest["components"].values()):
        raise ParseError(f"{filepath}: manifest components must map names to file names")
    if not manifest["options"] or not all(isinstance(o, str) for o in manifest["options"]):
        raise ParseError(f"{filepath}: manifest field 'options' must list orderings, got {manifest['options']!r}")
    return manifest


def load_artifacts(path: Path, env: MatrixEnv) -> tuple[UpperState, tuple[LowerAgent, ...], HpaConfig]:
    """Rebuild a trained upper level and lower agents for an environment.

    Raises:
        ValidationError: If the checkpoint was trained for a different environment shape or grouping
    """
    directory = resolve_checkpoint_dir(path)
    manifest = read_manifest(directory)
    spec = env.spec
    if manifest["states"] != spec.states or tuple(manifest["actions"]) != spec.actions:
        raise ValidationError(
            f"checkpoint: trained on {manifest['env']} with {manifest['states']} states and actions "
            f"{manifest['actions']}, got {spec.name} with {spec.states} states and actions {list(spec.actions)}"
        )
    config = HpaConfig.from_dict(manifest["config"])
    scheme = GroupScheme.parse(manifest["groups"], agents=spec.agents)
    orderings = [Ordering.parse(text) for text in manifest["options"]]
    upper, lowers = build_agents(env, scheme, config, orderings)

    def restore(name: str, expected: Approximator) -> Approximator:
        if name not in manifest["components"]:
            raise ParseError(f"{directory / CHECKPOINT_MANIFEST}: manifest lists no component '{name}'")
        _, approximator = load_checkpoint(directory / manifest["components"][name])
        check_compatible(approximator, expected, name)
        return approximator

    upper.policy = restore("upper_policy", upper.policy)
    upper.critic = restore("upper_critic", upper.critic)
    upper.termination = restore("upper_termination", upper.termination)
    q_expected = TabularApproximator(params={"table": upper.q_u.reshape(spec.states * len(upper.options), -1)})
    upper.q_u = restore("upper_q_u", q_expected).params["table"].reshape(upper.q_u.shape)
    for agent in lowers:
        agent.policy = restore(f"lower_{agent.agent + 1}_policy", agent.policy)
        agent.critic = restore(f"lower_{agent.agent + 1}_critic", agent.critic)
    return upper, lowers, config


@frozen(eq=False)
class EvalReport:
    """Greedy evaluation of a trained run.

    Attributes:
        episodes: Evaluated episodes
        mean_team_return: Mean per-step team reward
        option_probs: Mean option-policy probabilities at the boundaries visited in each state (states x options)
        greedy_counts: Options chosen greedily at the boundaries of each state (states x options)
        best_options: Options reaching the best Stackelberg team return in each state
        matched_fraction: Share of boundaries whose greedy option is among the state's best options
        trajectories: Lower transitions of every evaluated episode
    """

    episodes: int
    mean_team_return: float
    option_probs: np.ndarray
    greedy_counts: np.ndarray
    best_options: tuple[tuple[int, ...], ...]
    matched_fraction: float
    trajectories: tuple[tuple[LowerTransition, ...], ...]

    def as_dict(self, upper: UpperState) -> dict:
        """JSON-ready summary with options labelled by their orderings."""
        labels = [str(ordering) for ordering in upper.options]
        return {
            "episodes": self.episodes,
            "mean_team_return": self.mean_team_return,
            "matched_fraction": self.matched_fraction,
            "states": [
                {
                    "state": state,
                    "option_probs": dict(zip(labels, self.option_probs[state].tolist())),
                    "greedy_counts": dict(zip(labels, self.greedy_counts[state].astype(int).tolist())),
                    "best_options": [labels[option] for option in self.best_options[state]],
                }
                for state in range(self.option_probs.shape[0])
            ],
        }


def evaluate(
    env: MatrixEnv, upper: UpperState, lowers: Sequence[LowerAgent], k: int, episodes: int = 1
) -> EvalReport:
    """Run greedy episodes: terminate iff beta >= 0.5, most likely option, most likely actions."""
    if episodes < 1:
        raise ValidationError(f"episodes: must be at least 1, got {episodes}")
    spec = env.spec
    values = np.array([oracle(env, ordering, upper.scheme) for ordering in upper.options])
    best = tuple(tuple(int(o) for o in np.flatnonzero(np.isclose(column, column.max()))) for column in values.T)

    prob_sums = np.zeros((spec.states, len(upper.options)))
    counts = np.zeros((spec.states, len(upper.options)))
    team = 0.0
    steps = 0
    trajectories = []
    for _ in range(episodes):
        buffers = run_episode(env, upper, lowers, k, None, None)
        for window in buffers.upper:
            prob_sums[window.start_state] += upper.option_probs(window.start_state)
            counts[window.start_state, window.option] += 1
        team += sum(step.team_reward for step in buffers.lower)
        steps += len(buffers.lower)
        trajectories.append(tuple(buffers.lower))
    visits = counts.sum(axis=1, keepdims=True)
    matched = sum(counts[state, option] for state in range(spec.states) for option in best[state])
    return EvalReport(
        episodes=episodes,
        mean_team_return=team / steps,
        option_probs=np.divide(prob_sums, visits, out=np.zeros_like(prob_sums), where=visits > 0),
        greedy_counts=counts,
        best_options=best,
        matched_fraction=float(matched / counts.sum()),
        trajectories=tuple(trajectories),
    )
