"""Lower-level agents: one policy and one critic per agent over its subgame states."""

from collections.abc import Sequence

import numpy as np
from attrs import define

from stackorder.errors import ValidationError
from stackorder.hpa.config import HpaConfig
from stackorder.policy import losses
from stackorder.policy.approximators import Approximator, forward_policy, gradient, make_approximator
from stackorder.policy.distributions import ActionDistribution
from stackorder.policy.optim import Optimizer
from stackorder.smg import EnvSpec, LowerTransition, SubgameEncoder, SubgameState


@define
class LowerAgent:
    """Policy and critic of one agent.

    Both see the agent's subgame state: the global base state plus the actions already taken in the current step.
    """

    agent: int
    encoder: SubgameEncoder
    kind: str
    policy: Approximator
    critic: Approximator
    policy_optimizer: Optimizer
    critic_optimizer: Optimizer

    @classmethod
    def initialize(cls, spec: EnvSpec, agent: int, config: HpaConfig, rng: np.random.Generator) -> "LowerAgent":
        """Fresh agent: uniform policy and zero critic (tabular, linear) or small random mlp weights."""
        encoder = SubgameEncoder(states=spec.states, actions=spec.actions, agent=agent)
        inputs = encoder.size if config.lower_kind == "tabular" else encoder.features
        return cls(
            agent=agent,
            encoder=encoder,
            kind=config.lower_kind,
            policy=make_approximator(config.lower_kind, inputs, spec.actions[agent], rng, hidden=config.hidden),
            critic=make_approximator(config.lower_kind, inputs, 1, rng, hidden=config.hidden),
            policy_optimizer=Optimizer(lr=config.lr_policy, adam=config.adam),
            critic_optimizer=Optimizer(lr=config.lr_critic, adam=config.adam),
        )

    def encode(self, subgames: Sequence[SubgameState]) -> np.ndarray:
        """Approximator input for a batch of subgame states."""
        if self.kind == "tabular":
            return np.array([self.encoder.index(s) for s in subgames], dtype=int)
        return np.array([self.encoder.one_hot(s) for s in subgames])

    def distribution(self, subgame: SubgameState) -> ActionDistribution:
        """Action distribution at a subgame state."""
        return forward_policy(self.policy, self.encode([subgame])[0])


def merged_rewards(steps: Sequence[LowerTransition], agent: int) -> np.ndarray:
    """r = r^e_agent + r^i per step."""
    return np.array([step.rewards[agent] + step.intrinsic for step in steps])


def lower_policy_update(
    agents: Sequence[LowerAgent],
    steps: Sequence[LowerTransition],
    order: Sequence[int],
    config: HpaConfig,
) -> dict[int, float]:
    """Clipped-surrogate and critic updates of every agent from one episode of transitions.

    Args:
        agents: Lower agents, native indexing
        steps: Consecutive transitions of one episode with intrinsic rewards already merged in
        order: Sequence in which the agents are updated (the active execution order)
        config: Trainer configuration

    Returns:
        Last-epoch policy loss of every agent
    """
    if not steps:
        raise ValidationError("steps: the lower update needs at least one transition")
    if sorted(order) != list(range(len(agents))):
        raise ValidationError(f"order: {list(order)} is not a permutation of the agents")
    dones = np.array([step.done for step in steps], dtype=float)
    results = {}
    for agent_index in order:
        agent = agents[agent_index]
        inputs = agent.encode([step.subgames[agent_index] for step in steps])
        actions = np.array([step.joint_action[agent_index] for step in steps], dtype=int)
        old_log_probs = np.array([step.log_probs[agent_index] for step in steps])
        old_values = agent.critic.forward(inputs)[:, 0]
        last = steps[-1]
        bootstrap = 0.0
        if not last.done:
            bootstrap = float(agent.critic.forward(agent.encode([SubgameState(last.next_state, agent_index)]))[0, 0])
        rewards = merged_rewards(steps, agent_index)
        advantages = losses.gae_advantages(
            rewards, np.append(old_values, bootstrap), config.gamma, config.gae_lambda, dones=dones
        )
        returns = advantages + old_values

        def surrogate(logits: np.ndarray) -> tuple[float, np.ndarray]:
            return losses.ppo_policy_loss(
                logits, actions, old_log_probs, advantages, config.clip_eps, config.entropy_coef
            )

        def fit(values: np.ndarray) -> tuple[float, np.ndarray]:
            return losses.value_loss(values, old_values, returns, config.clip_eps)

        policy_loss = 0.0
        for _ in range(config.epochs):
            policy_loss, grads = gradient(agent.policy, inputs, surrogate)
            agent.policy_optimizer.step(agent.policy, grads)
            _, grads = gradient(agent.critic, inputs, fit)
            agent.critic_optimizer.step(agent.critic, grads)
        results[agent_index] = policy_loss
    return results
