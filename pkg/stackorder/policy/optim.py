"""Gradient-descent optimizer with optional Adam moments."""

import numpy as np
from attrs import define, field

from stackorder.errors import NumericalError, ValidationError
from stackorder.policy.approximators import Approximator, Params


@define
class Optimizer:
    """Applies descent steps to an approximator's parameters.

    With `adam` off this is plain gradient descent with step size `lr`; with it on, the step uses bias-corrected
    first and second moment estimates.
    """

    lr: float
    adam: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 0
    first: Params = field(factory=dict)
    second: Params = field(factory=dict)

    def __attrs_post_init__(self) -> None:
        """Validate the step size."""
        if not self.lr > 0:
            raise ValidationError(f"lr: must be positive, got {self.lr}")

    def step(self, approximator: Approximator, grads: Params) -> None:
        """Move the parameters against the gradient.

        The step is all or nothing: parameters, moments and the step counter are only written once every updated
        array is known to be finite.

        Raises:
            NumericalError: If a gradient or an updated parameter is not finite
        """
        steps = self.steps + 1
        updates: Params = {}
        moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for name, grad in grads.items():
            if not np.isfinite(grad).all():
                raise NumericalError(f"{approximator.kind}.{name}: non-finite gradient")
            direction = grad
            if self.adam:
                m = self.beta1 * self.first.get(name, np.zeros_like(grad)) + (1.0 - self.beta1) * grad
                v = self.beta2 * self.second.get(name, np.zeros_like(grad)) + (1.0 - self.beta2) * grad**2
                m_hat = m / (1.0 - self.beta1**steps)
                v_hat = v / (1.0 - self.beta2**steps)
                direction = m_hat / (np.sqrt(v_hat) + self.eps)
                moments[name] = (m, v)
            updates[name] = approximator.params[name] - self.lr * direction
            if not np.isfinite(updates[name]).all():
                raise NumericalError(f"{approximator.kind}.{name}: step leaves non-finite parameters")
        self.steps = steps
        for name, (m, v) in moments.items():
            self.first[name] = m
            self.second[name] = v
        approximator.params.update(updates)
