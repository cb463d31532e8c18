"""Clipped-surrogate policy loss, clipped value loss and generalized advantage estimation.

The composed losses return the loss value together with its gradient with respect to the approximator outputs, so they
plug directly into `approximators.gradient`. Losses are minimized: the surrogate and the entropy bonus enter with a
negative sign.
"""

import numpy as np

from stackorder.errors import NumericalError, ValidationError
from stackorder.policy.distributions import entropy, entropy_logit_gradient, softmax


def ppo_clip_term(ratio: float, advantage: float, clip_eps: float) -> float:
    """min(r A, clip(r, 1 - eps, 1 + eps) A), the quantity to maximize."""
    if not ratio > 0:
        raise NumericalError(f"ratio: must be positive, got {ratio}")
    clipped = min(max(ratio, 1.0 - clip_eps), 1.0 + clip_eps)
    return min(ratio * advantage, clipped * advantage)


def value_clip_loss(v_new: float, v_old: float, target: float, clip_eps: float) -> float:
    """max((v_new - target)^2, (clip(v_new, v_old - eps, v_old + eps) - target)^2)."""
    clipped = min(max(v_new, v_old - clip_eps), v_old + clip_eps)
    return max((v_new - target) ** 2, (clipped - target) ** 2)


def gae_advantages(
    rewards: np.ndarray,
    values: np.ndarray,
    gamma: float,
    lam: float,
    dones: np.ndarray | None = None,
) -> np.ndarray:
    """Generalized advantage estimates.

    Args:
        rewards: r_0..r_{T-1}
        values: V(s_0)..V(s_T); the last slot is the bootstrap value, 0 at a terminal state
        gamma: Discount
        lam: Trace decay; 0 gives one-step TD errors
        dones: Optional episode-end flags; a done step neither bootstraps nor propagates

    Returns:
        A_t = sum over l >= 0 of (gamma lam)^l delta_{t+l}, with delta_t = r_t + gamma V(s_{t+1}) - V(s_t)
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.shape != (rewards.size + 1,):
        raise ValidationError(f"values: expected {rewards.size + 1} entries (one bootstrap slot), got {values.size}")
    alive = np.ones_like(rewards) if dones is None else 1.0 - np.asarray(dones, dtype=float)
    advantages = np.zeros_like(rewards)
    running = 0.0
    for t in reversed(range(rewards.size)):
        delta = rewards[t] + gamma * values[t + 1] * alive[t] - values[t]
        running = delta + gamma * lam * alive[t] * running
        advantages[t] = running
    return advantages


def ppo_policy_loss(
    logits: np.ndarray,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    clip_eps: float,
    entropy_coef: float,
) -> tuple[float, np.ndarray]:
    """Negative mean clipped surrogate minus the entropy bonus, and its gradient with respect to the logits."""
    batch = logits.shape[0]
    rows = np.arange(batch)
    probs = softmax(logits)
    ratio = np.exp(np.log(probs[rows, actions]) - old_log_probs)
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    surrogate = np.minimum(ratio * advantages, clipped * advantages)
    # the gradient flows only through the unclipped branch when that branch is the minimum
    active = ratio * advantages <= clipped * advantages
    one_hot = np.zeros_like(probs)
    one_hot[rows, actions] = 1.0
    d_surrogate = np.where(active, ratio * advantages, 0.0)[:, None] * (one_hot - probs)
    loss = -surrogate.mean() - entropy_coef * entropy(probs).mean()
    d_logits = -(d_surrogate + entropy_coef * entropy_logit_gradient(probs)) / batch
    return float(loss), d_logits


def value_loss(
    values: np.ndarray,
    old_values: np.ndarray,
    targets: np.ndarray,
    clip_eps: float,
) -> tuple[float, np.ndarray]:
    """Mean clipped value loss over a batch of critic outputs of shape (batch, 1), and its gradient."""
    v = values[:, 0]
    clipped = np.clip(v, old_values - clip_eps, old_values + clip_eps)
    plain_sq = (v - targets) ** 2
    clipped_sq = (clipped - targets) ** 2
    inside = (v >= old_values - clip_eps) & (v <= old_values + clip_eps)
    d_v = np.where(plain_sq >= clipped_sq, 2.0 * (v - targets), np.where(inside, 2.0 * (clipped - targets), 0.0))
    batch = v.size
    return float(np.maximum(plain_sq, clipped_sq).mean()), (d_v / batch)[:, None]
