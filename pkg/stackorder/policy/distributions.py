"""Categorical action distributions."""

import numpy as np
from attrs import field, frozen

from stackorder.errors import NumericalError

PROBABILITY_TOL = 1e-9


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, shifted by the row maximum."""
    logits = np.asarray(logits, dtype=float)
    if not np.isfinite(logits).all():
        raise NumericalError("logits: non-finite policy output")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy -sum p ln p over the last axis, with 0 ln 0 = 0."""
    probs = np.asarray(probs, dtype=float)
    logs = np.log(np.where(probs > 0, probs, 1.0))
    return -(probs * logs).sum(axis=-1)


def entropy_logit_gradient(probs: np.ndarray) -> np.ndarray:
    """d entropy / d logits = -p (ln p + H)."""
    probs = np.asarray(probs, dtype=float)
    logs = np.log(np.where(probs > 0, probs, 1.0))
    return -probs * (logs + entropy(probs)[..., None])


@frozen(eq=False)
class ActionDistribution:
    """Probabilities over a finite action set."""

    probs: np.ndarray = field(converter=lambda p: np.asarray(p, dtype=float))

    def __attrs_post_init__(self) -> None:
        """Require a valid probability vector."""
        if self.probs.ndim != 1 or self.probs.size == 0:
            raise NumericalError(f"probs: expected a non-empty vector, got shape {self.probs.shape}")
        if not np.isfinite(self.probs).all() or (self.probs < 0).any():
            raise NumericalError(f"probs: invalid probabilities {self.probs.tolist()}")
        if abs(self.probs.sum() - 1.0) > PROBABILITY_TOL:
            raise NumericalError(f"probs: sum to {self.probs.sum()}, not 1")

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "ActionDistribution":
        """Softmax distribution of a logit vector."""
        return cls(softmax(logits))

    def __len__(self) -> int:
        """Number of actions."""
        return self.probs.size

    def entropy(self) -> float:
        """Shannon entropy in nats."""
        return float(entropy(self.probs))

    def log_prob(self, action: int) -> float:
        """Log-probability of one action."""
        return float(np.log(self.probs[action]))

    def mode(self) -> int:
        """Most likely action, lowest index on ties."""
        return int(np.argmax(self.probs))

    def sample(self, rng: np.random.Generator) -> int:
        """Draw one action."""
        return int(rng.choice(self.probs.size, p=self.probs))
