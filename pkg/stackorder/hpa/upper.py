"""The upper level: an option-critic over agent orderings.

Every option is an ordering of the agent groups. At a window boundary the current option is terminated with
probability beta_option(s); after a termination, and at the first boundary of an episode, a fresh option is drawn from
the categorical option policy. Q_U(s, option, a) is a tabular window-level action value whose expectation under the
lower policies gives Q_Omega(s, option).
"""

from collections.abc import Sequence

import numpy as np
from attrs import define

from stackorder.errors import NumericalError, ValidationError
from stackorder.games import GroupScheme, Ordering, enumerate_orderings
from stackorder.hpa.config import HpaConfig
from stackorder.policy import losses
from stackorder.policy.approximators import Approximator, LossFn, gradient, make_approximator
from stackorder.policy.distributions import entropy, softmax
from stackorder.policy.optim import Optimizer
from stackorder.smg import EnvSpec, LowerPolicy, UpperTransition, joint_action_distribution


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function."""
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def restrict_options(scheme: GroupScheme, orderings: Sequence[Ordering]) -> tuple[Ordering, ...]:
    """Distinct orderings of the scheme's groups, lexicographic; at least one is required."""
    if not orderings:
        raise ValidationError("ordering: at least one ordering is required")
    for ordering in orderings:
        scheme.agent_order(ordering)
    return tuple(sorted(set(orderings), key=lambda ordering: ordering.perm))


@define
class UpperState:
    """Parameters and counters of the upper level.

    Attributes:
        spec: Environment descriptor
        scheme: Agent grouping
        options: Orderings of the scheme's groups to choose from (all of them unless restricted), lexicographic
        kind: Approximator kind of the policy, critic and termination function
        policy: State -> logits over options
        critic: State -> V_Omega(s)
        termination: State -> termination logits, one per option
        q_u: Table of shape (states, options, joint actions)
        visited: Which Q_U entries have received an update
        policy_optimizer: Optimizer of the option policy
        critic_optimizer: Optimizer of the critic
        windows: Boundaries seen so far (T)
        steps: Environment steps seen so far (t)
    """

    spec: EnvSpec
    scheme: GroupScheme
    options: tuple[Ordering, ...]
    kind: str
    policy: Approximator
    critic: Approximator
    termination: Approximator
    q_u: np.ndarray
    visited: np.ndarray
    policy_optimizer: Optimizer
    critic_optimizer: Optimizer
    windows: int = 0
    steps: int = 0

    @classmethod
    def initialize(
        cls,
        spec: EnvSpec,
        scheme: GroupScheme,
        config: HpaConfig,
        rng: np.random.Generator,
        orderings: Sequence[Ordering] | None = None,
    ) -> "UpperState":
        """Fresh upper level: uniform option policy, zero critic, beta = 0.5 everywhere, zero Q_U.

        Args:
            spec: Environment descriptor
            scheme: Agent grouping
            config: Approximator kinds and step sizes
            rng: Initialization stream
            orderings: Restricts the options to these orderings (lexicographic); all orderings when None
        """
        if scheme.agents != spec.agents:
            raise ValidationError(f"groups: scheme covers {scheme.agents} agents, the environment has {spec.agents}")
        options = tuple(enumerate_orderings(scheme)) if orderings is None else restrict_options(scheme, orderings)
        inputs = spec.states
        shape = (spec.states, len(options), spec.joint_actions)

        def build(outputs: int) -> Approximator:
            return make_approximator(config.upper_kind, inputs, outputs, rng, hidden=config.hidden)

        return cls(
            spec=spec,
            scheme=scheme,
            options=options,
            kind=config.upper_kind,
            policy=build(len(options)),
            critic=build(1),
            termination=build(len(options)),
            q_u=np.zeros(shape),
            visited=np.zeros(shape, dtype=bool),
            policy_optimizer=Optimizer(lr=config.lr_policy, adam=config.adam),
            critic_optimizer=Optimizer(lr=config.lr_critic, adam=config.adam),
        )

    def encode(self, states: Sequence[int]) -> np.ndarray:
        """Approximator input for a batch of states: indices for tabular, one-hot rows otherwise."""
        states = np.asarray(states, dtype=int)
        if self.kind == "tabular":
            return states
        return np.eye(self.spec.states)[states]

    def option_probs(self, state: int) -> np.ndarray:
        """pi_Omega(. | s)."""
        return softmax(self.policy.forward(self.encode([state]))[0])

    def beta(self, state: int) -> np.ndarray:
        """Termination probability of every option at a state."""
        return sigmoid(self.termination.forward(self.encode([state]))[0])

    def value(self, state: int) -> float:
        """V_Omega(s)."""
        return float(self.critic.forward(self.encode([state]))[0, 0])


@define
class OptionChoice:
    """Outcome of a boundary decision."""

    option: int
    log_prob: float
    sampled: bool


def select_option(
    upper: UpperState,
    state: int,
    previous: int | None,
    rng: np.random.Generator | None,
) -> OptionChoice:
    """Keep the previous option or terminate it and draw a new one.

    Args:
        upper: Upper level
        state: State at the boundary
        previous: Option of the previous window, None at the first boundary
        rng: Sampling stream; None makes the decision greedy (terminate iff beta >= 0.5, most likely option)
    """
    probs = upper.option_probs(state)
    if not (np.isfinite(probs).all() and abs(probs.sum() - 1.0) < 1e-9):
        raise NumericalError(f"option policy: invalid probabilities at state {state}")
    if previous is not None:
        beta = float(upper.beta(state)[previous])
        if not 0.0 <= beta <= 1.0:
            raise NumericalError(f"termination: beta = {beta} outside [0, 1]")
        terminate = beta >= 0.5 if rng is None else bool(rng.random() < beta)
        if not terminate:
            return OptionChoice(option=previous, log_prob=float(np.log(probs[previous])), sampled=False)
    option = int(np.argmax(probs)) if rng is None else int(rng.choice(probs.size, p=probs))
    return OptionChoice(option=option, log_prob=float(np.log(probs[option])), sampled=True)


def q_omega_all(upper: UpperState, state: int, lowers: Sequence[LowerPolicy]) -> np.ndarray:
    """Q_Omega(s, option) for every option: the lower policies' expectation of Q_U(s, option, .).

    Entries of Q_U that were never updated count as 0.
    """
    return np.array([q_omega(upper, state, option, lowers) for option in range(len(upper.options))])


def q_omega(upper: UpperState, state: int, option: int, lowers: Sequence[LowerPolicy]) -> float:
    """Q_Omega(s, option) = sum over a of pi(a | s) Q_U(s, option, a)."""
    ordering = upper.options[option]
    dist = joint_action_distribution(state, ordering, upper.scheme, lowers, upper.spec.actions)
    return float(dist.ravel() @ upper.q_u[state, option])


def option_utility(beta: float, q_value: float, state_value: float) -> float:
    """U = (1 - beta) Q_Omega(s', option) + beta V_Omega(s')."""
    if not 0.0 <= beta <= 1.0:
        raise ValidationError(f"beta: {beta} outside [0, 1]")
    return (1.0 - beta) * q_value + beta * state_value


def u_target(upper: UpperState, option: int, next_state: int, lowers: Sequence[LowerPolicy]) -> float:
    """Value of arriving in s' with an option still active."""
    beta = float(upper.beta(next_state)[option])
    return option_utility(beta, q_omega(upper, next_state, option, lowers), upper.value(next_state))


def td_update_qu(
    upper: UpperState,
    window: UpperTransition,
    alpha: float,
    gamma_upper: float,
    lowers: Sequence[LowerPolicy],
) -> float:
    """One temporal-difference step on Q_U(s_T, option, a) with the window's first joint action as a.

    delta = R - Q_U + gamma ((1 - beta(s')) Q_Omega(s', option) + beta(s') max Q_Omega(s', .)); terminal windows keep
    only the reward term.

    Returns:
        The TD error delta
    """
    action = upper.spec.joint_index(window.first_action)
    cell = (window.start_state, window.option, action)
    delta = window.window_return - upper.q_u[cell]
    if not window.done:
        q_next = q_omega_all(upper, window.end_state, lowers)
        beta = float(upper.beta(window.end_state)[window.option])
        delta += gamma_upper * ((1.0 - beta) * q_next[window.option] + beta * q_next.max())
    upper.q_u[cell] += alpha * delta
    upper.visited[cell] = True
    return float(delta)


def termination_loss(
    upper: UpperState,
    start_state: int,
    option: int,
    q_next: np.ndarray,
    psi: float,
) -> LossFn:
    """Termination loss of one window as a function of the termination outputs at s'.

    The loss is c * beta_option(s') with c = pi_Omega(option | s_T) (Q_Omega(s', option) - max Q_Omega(s') + psi), so
    a descent step lowers beta where the option is within psi of the best option at s' and raises it otherwise.
    """
    weight = float(upper.option_probs(start_state)[option])
    c = weight * float(q_next[option] - q_next.max() + psi)

    def loss(outputs: np.ndarray) -> tuple[float, np.ndarray]:
        beta = sigmoid(outputs[0, option])
        d_outputs = np.zeros_like(outputs)
        d_outputs[0, option] = c * beta * (1.0 - beta)
        return c * float(beta), d_outputs

    return loss


def termination_step(
    upper: UpperState,
    start_state: int,
    option: int,
    next_state: int,
    q_next: np.ndarray,
    psi: float,
    lr: float,
) -> float:
    """Plain gradient step v <- v - lr * d loss / d v on the termination parameters.

    Returns:
        The termination loss before the step
    """
    loss = termination_loss(upper, start_state, option, q_next, psi)
    value, grads = gradient(upper.termination, upper.encode([next_state]), loss)
    Optimizer(lr=lr, adam=False).step(upper.termination, grads)
    return value


def upper_advantage(upper: UpperState, window: UpperTransition, gamma_upper: float) -> float:
    """A_h = R_T + gamma_u V_Omega(s_{T+1}) (1 - done) - V_Omega(s_T)."""
    bootstrap = 0.0 if window.done else gamma_upper * upper.value(window.end_state)
    return window.window_return + bootstrap - upper.value(window.start_state)


def option_advantage(upper: UpperState, state: int, option: int, lowers: Sequence[LowerPolicy]) -> float:
    """A_Omega(s, option) = Q_Omega(s, option) - V_Omega(s).

    Both terms are expectations under the current policies, so the value does not depend on the joint action the
    lower agents happened to play in the window.
    """
    return q_omega(upper, state, option, lowers) - upper.value(state)


def intrinsic_rewards(advantage: float, k: int, length: int | None = None) -> np.ndarray:
    """Per-step intrinsic reward A_h / k; a truncated window of `length` < k steps keeps the divisor k."""
    if k < 1:
        raise ValidationError(f"k: must be at least 1, got {k}")
    return np.full(k if length is None else length, advantage / k)


def upper_entropy(upper: UpperState, states: Sequence[int]) -> float:
    """Mean entropy of the option policy over the given states."""
    if not states:
        return 0.0
    logits = upper.policy.forward(upper.encode(states))
    return float(entropy(softmax(logits)).mean())


def upper_policy_update(upper: UpperState, batch: Sequence[UpperTransition], config: HpaConfig) -> dict[str, float]:
    """Clipped-surrogate update of the option policy and clipped value update of the critic.

    The critic target is the bootstrapped window return R_T + gamma_u V_old(s_{T+1}) (1 - done) and the advantage is
    that target minus V_old(s_T). Only windows whose option was freshly sampled enter the policy loss.

    Returns:
        Last-epoch policy and critic losses
    """
    if not batch:
        raise ValidationError("batch: the upper update needs at least one window")
    starts = upper.encode([w.start_state for w in batch])
    old_values = upper.critic.forward(starts)[:, 0]
    targets = np.array(
        [w.window_return + (0.0 if w.done else config.gamma_upper * upper.value(w.end_state)) for w in batch]
    )
    advantages = targets - old_values

    sampled = np.array([w.sampled for w in batch])
    policy_inputs = starts[sampled]
    actions = np.array([w.option for w in batch], dtype=int)[sampled]
    old_log_probs = np.array([w.log_prob for w in batch])[sampled]
    policy_advantages = advantages[sampled]

    policy_loss = 0.0
    critic_loss = 0.0
    for _ in range(config.epochs):
        if actions.size:

            def surrogate(logits: np.ndarray) -> tuple[float, np.ndarray]:
                return losses.ppo_policy_loss(
                    logits, actions, old_log_probs, policy_advantages, config.clip_eps, config.entropy_coef
                )

            policy_loss, grads = gradient(upper.policy, policy_inputs, surrogate)
            upper.policy_optimizer.step(upper.policy, grads)

        def fit(values: np.ndarray) -> tuple[float, np.ndarray]:
            return losses.value_loss(values, old_values, targets, config.clip_eps)

        critic_loss, grads = gradient(upper.critic, starts, fit)
        upper.critic_optimizer.step(upper.critic, grads)
    return {"policy": policy_loss, "critic": critic_loss}
