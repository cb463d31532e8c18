"""Sequential Markov game simulation.

Within one environment step the agents act one after another in the order given by the active option: groups in
priority order, members of a group in native order. Every agent conditions on the base state and on the actions of
the agents that acted before it in the same step (its subgame state). Steps are grouped into windows of k steps; the
upper level picks an ordering per window.
"""

import itertools
from collections.abc import Sequence
from typing import Protocol

import numpy as np
import pandas as pd
from attrs import define, field, frozen
from pandahandler.indexes import Index

from stackorder.errors import ValidationError
from stackorder.games import GroupScheme, JointAction, Ordering
from stackorder.policy.distributions import ActionDistribution

TRAJECTORY_INDEX = Index(names=["episode", "t"])


@frozen
class EnvSpec:
    """Static description of an environment.

    Attributes:
        name: Registry name of the environment
        states: Number of discrete states
        actions: Number of actions of each agent
        horizon: Episode length H
        gamma: Discount of the per-step return
        normalizer: Payoffs are divided by this value to give rewards
    """

    name: str
    states: int
    actions: tuple[int, ...] = field(converter=lambda values: tuple(int(v) for v in values))
    horizon: int
    gamma: float = 0.99
    normalizer: float = 1.0

    def __attrs_post_init__(self) -> None:
        """Validate the descriptor."""
        if self.horizon < 1:
            raise ValidationError(f"horizon: must be at least 1, got {self.horizon}")
        if self.states < 1:
            raise ValidationError(f"states: must be at least 1, got {self.states}")
        if not 0 < self.gamma <= 1:
            raise ValidationError(f"gamma: must lie in (0, 1], got {self.gamma}")
        if self.normalizer <= 0:
            raise ValidationError(f"normalizer: must be positive, got {self.normalizer}")

    @property
    def agents(self) -> int:
        """Number of agents."""
        return len(self.actions)

    @property
    def joint_actions(self) -> int:
        """Number of joint actions."""
        return int(np.prod(self.actions))

    def check_action(self, joint_action: Sequence[int]) -> JointAction:
        """Validate a joint action against the action counts."""
        joint_action = tuple(int(a) for a in joint_action)
        if len(joint_action) != self.agents:
            raise ValidationError(f"joint_action: expected {self.agents} actions, got {len(joint_action)}")
        for i, (action, count) in enumerate(zip(joint_action, self.actions)):
            if not 0 <= action < count:
                raise ValidationError(f"joint_action[{i}]: action {action} out of range 0..{count - 1}")
        return joint_action

    def joint_index(self, joint_action: Sequence[int]) -> int:
        """Row-major index of a joint action."""
        return int(np.ravel_multi_index(tuple(joint_action), self.actions))


class Env(Protocol):
    """What the simulator needs from an environment."""

    spec: EnvSpec
    t: int
    state: int

    @property
    def done(self) -> bool:
        """Whether the episode is over."""
        ...

    def reset(self) -> int:
        """Start an episode and return the initial state."""
        ...

    def step(self, joint_action: Sequence[int]) -> tuple[int, np.ndarray, bool]:
        """Apply a joint action and return (next state, per-agent rewards, done)."""
        ...


@frozen
class SubgameState:
    """What one agent observes: the base state and the actions already taken in this step.

    Attributes:
        state: Base state s_t
        agent: The observing agent
        predecessors: (agent, action) pairs of the agents that acted earlier in this step, in execution order
    """

    state: int
    agent: int
    predecessors: tuple[tuple[int, int], ...] = ()


class LowerPolicy(Protocol):
    """Anything that maps a subgame state to an action distribution."""

    def distribution(self, subgame: SubgameState) -> ActionDistribution:
        """Action distribution of the agent at a subgame state."""
        ...


@frozen
class SubgameEncoder:
    """Encodings of one agent's subgame states.

    The tabular index is a mixed-radix number over (state, action of every other agent), where an agent that has not
    acted yet contributes 0 and action a contributes a + 1. The feature vector concatenates the one-hot state with one
    one-hot block of the same (not acted, action 0, ...) slots per other agent.
    """

    states: int
    actions: tuple[int, ...]
    agent: int

    @property
    def others(self) -> tuple[int, ...]:
        """Agents whose actions can appear in this agent's subgame state."""
        return tuple(j for j in range(len(self.actions)) if j != self.agent)

    @property
    def radix(self) -> tuple[int, ...]:
        """Radix of every digit of the tabular index."""
        return (self.states, *(self.actions[j] + 1 for j in self.others))

    @property
    def size(self) -> int:
        """Number of distinct tabular indices."""
        return int(np.prod(self.radix))

    @property
    def features(self) -> int:
        """Length of the feature vector."""
        return int(sum(self.radix))

    def _digits(self, subgame: SubgameState) -> tuple[int, ...]:
        if subgame.agent != self.agent:
            raise ValidationError(f"subgame: encoder of agent {self.agent} got a state of agent {subgame.agent}")
        acted = dict(subgame.predecessors)
        return (subgame.state, *(acted.get(j, -1) + 1 for j in self.others))

    def index(self, subgame: SubgameState) -> int:
        """Tabular index of a subgame state."""
        return int(np.ravel_multi_index(self._digits(subgame), self.radix))

    def one_hot(self, subgame: SubgameState) -> np.ndarray:
        """Feature vector of a subgame state."""
        vector = np.zeros(self.features)
        offset = 0
        for digit, width in zip(self._digits(subgame), self.radix):
            vector[offset + digit] = 1.0
            offset += width
        return vector


@frozen(eq=False)
class LowerTransition:
    """One environment step as stored in the lower buffer.

    Attributes:
        t: Step index within the episode
        state: State before the step
        joint_action: Action of every agent, native indexing
        rewards: External reward of every agent
        next_state: State after the step
        log_probs: Log-probability of each agent's action under the acting policy, stored at collection time
        ordering: Ordering active during the step
        done: Whether the episode ended with this step
        subgames: Subgame state observed by every agent, native indexing
        intrinsic: Intrinsic reward merged in after the window is closed
    """

    t: int
    state: int
    joint_action: JointAction
    rewards: np.ndarray
    next_state: int
    log_probs: np.ndarray
    ordering: Ordering
    done: bool
    subgames: tuple[SubgameState, ...]
    intrinsic: float = 0.0

    @property
    def team_reward(self) -> float:
        """Sum of the agents' external rewards."""
        return float(self.rewards.sum())


@frozen(eq=False)
class UpperTransition:
    """One window as stored in the upper buffer.

    Attributes:
        start_state: State at the window boundary s_T
        ordering: Option active during the window
        window_return: Sum of the team rewards of the window's steps
        end_state: State after the window s_{T+1}
        done: Whether the episode ended inside the window
        length: Number of steps in the window
        first_action: Joint action of the window's first step, the composite action indexing Q_U
        option: Index of the ordering in the option set, filled in by the trainer
        log_prob: Log-probability of the option under the option policy when it was sampled
        sampled: Whether the option was freshly sampled at this boundary (false when it was continued)
    """

    start_state: int
    ordering: Ordering
    window_return: float
    end_state: int
    done: bool
    length: int
    first_action: JointAction
    option: int = -1
    log_prob: float = 0.0
    sampled: bool = True


@define
class ReplayBuffers:
    """The lower buffer D_l (one entry per step) and the upper buffer D_u (one entry per window)."""

    lower: list[LowerTransition] = field(factory=list)
    upper: list[UpperTransition] = field(factory=list)

    def add_window(self, steps: Sequence[LowerTransition], window: UpperTransition) -> None:
        """Store a closed window."""
        self.lower.extend(steps)
        self.upper.append(window)

    def clear(self) -> None:
        """Empty both buffers."""
        self.lower.clear()
        self.upper.clear()


def act(
    state: int,
    agent_order: Sequence[int],
    policies: Sequence[LowerPolicy],
    rng: np.random.Generator | None,
) -> tuple[list[int], np.ndarray, tuple[SubgameState, ...]]:
    """Let the agents act one by one; a missing rng means greedy actions.

    Returns:
        The joint action, each agent's log-probability of its action and each agent's subgame state
    """
    n = len(policies)
    joint = [0] * n
    log_probs = np.zeros(n)
    subgames: list[SubgameState | None] = [None] * n
    predecessors: list[tuple[int, int]] = []
    for agent in agent_order:
        subgame = SubgameState(state=state, agent=agent, predecessors=tuple(predecessors))
        dist = policies[agent].distribution(subgame)
        action = dist.mode() if rng is None else dist.sample(rng)
        joint[agent] = action
        log_probs[agent] = dist.log_prob(action)
        subgames[agent] = subgame
        predecessors.append((agent, action))
    return joint, log_probs, tuple(s for s in subgames if s is not None)


def rollout_window(
    env: Env,
    ordering: Ordering,
    scheme: GroupScheme,
    policies: Sequence[LowerPolicy],
    k: int,
    rng: np.random.Generator | None,
) -> tuple[list[LowerTransition], UpperTransition]:
    """Run min(k, remaining) steps under one ordering.

    Args:
        env: Environment positioned at a window boundary
        ordering: Priority order of the scheme's groups for this window
        scheme: Agent grouping
        policies: One lower policy per agent, native indexing
        k: Window length
        rng: Action sampling stream; None selects every agent's most likely action
    """
    if k < 1:
        raise ValidationError(f"k: window length must be at least 1, got {k}")
    if env.done:
        raise ValidationError("env: cannot start a window in a finished episode")
    if len(policies) != env.spec.agents:
        raise ValidationError(f"policies: expected {env.spec.agents}, got {len(policies)}")
    agent_order = scheme.agent_order(ordering)
    start_state = env.state
    steps: list[LowerTransition] = []
    for _ in range(min(k, env.spec.horizon - env.t)):
        t, state = env.t, env.state
        joint, log_probs, subgames = act(state, agent_order, policies, rng)
        next_state, rewards, done = env.step(joint)
        steps.append(
            LowerTransition(
                t=t,
                state=state,
                joint_action=tuple(joint),
                rewards=np.asarray(rewards, dtype=float),
                next_state=next_state,
                log_probs=log_probs,
                ordering=ordering,
                done=done,
                subgames=subgames,
            )
        )
        if done:
            break
    window = UpperTransition(
        start_state=start_state,
        ordering=ordering,
        window_return=float(sum(step.team_reward for step in steps)),
        end_state=steps[-1].next_state,
        done=steps[-1].done,
        length=len(steps),
        first_action=steps[0].joint_action,
    )
    return steps, window


def discounted_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    """R_t = sum over u >= t of gamma^(u - t) r_u."""
    rewards = np.asarray(rewards, dtype=float)
    returns = np.zeros_like(rewards)
    running = 0.0
    for t in reversed(range(rewards.size)):
        running = rewards[t] + gamma * running
        returns[t] = running
    return returns


def joint_action_distribution(
    state: int,
    ordering: Ordering,
    scheme: GroupScheme,
    policies: Sequence[LowerPolicy],
    actions: Sequence[int],
) -> np.ndarray:
    """Probability of every joint action when the agents act in sequence under an ordering.

    Returns:
        Array of shape `actions` holding the product of each agent's conditional probabilities
    """
    agent_order = scheme.agent_order(ordering)
    probs = np.zeros(tuple(actions))
    for ordered in itertools.product(*(range(actions[a]) for a in agent_order)):
        p = 1.0
        predecessors: list[tuple[int, int]] = []
        for agent, action in zip(agent_order, ordered):
            p *= policies[agent].distribution(SubgameState(state, agent, tuple(predecessors))).probs[action]
            if p == 0.0:
                break
            predecessors.append((agent, action))
        joint = [0] * len(actions)
        for agent, action in zip(agent_order, ordered):
            joint[agent] = action
        probs[tuple(joint)] = p
    return probs


def trajectory_frame(episodes: Sequence[Sequence[LowerTransition]]) -> pd.DataFrame:
    """Trajectory dump: one row per step with state, actions, rewards, ordering and done flag."""
    rows = []
    for episode, steps in enumerate(episodes):
        for step in steps:
            row: dict[str, object] = {"episode": episode, "t": step.t, "state": step.state}
            for i, action in enumerate(step.joint_action):
                row[f"a_{i + 1}"] = action
            for i, reward in enumerate(step.rewards):
                row[f"r_{i + 1}"] = float(reward)
            row["ordering"] = str(step.ordering)
            row["done"] = step.done
            rows.append(row)
    return TRAJECTORY_INDEX(pd.DataFrame(rows))
