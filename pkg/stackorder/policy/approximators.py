"""Function approximators with exact backward passes.

Three kinds share one interface: `forward` maps a batch of inputs to a batch of outputs and `backward` maps the
gradient of a loss with respect to those outputs to the gradient with respect to every parameter. Tabular
approximators take integer indices; linear and mlp approximators take feature vectors.
"""

from collections.abc import Callable
from typing import ClassVar

import numpy as np
from attrs import define, field

from stackorder.errors import NumericalError, ValidationError
from stackorder.policy.distributions import ActionDistribution

KINDS: tuple[str, ...] = ("tabular", "linear", "mlp")
Params = dict[str, np.ndarray]


@define
class Approximator:
    """Base class: named parameter arrays plus a forward and backward pass."""

    params: Params = field(factory=dict)
    kind: ClassVar[str] = ""

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Shape of every parameter array, in storage order."""
        return {name: value.shape for name, value in self.params.items()}

    @property
    def outputs(self) -> int:
        """Output dimension."""
        raise NotImplementedError

    def forward(self, inputs: np.ndarray) -> np.ndarray:
        """Outputs of shape (batch, outputs)."""
        raise NotImplementedError

    def backward(self, inputs: np.ndarray, d_outputs: np.ndarray) -> Params:
        """Parameter gradients given d loss / d outputs."""
        raise NotImplementedError

    def copy(self) -> "Approximator":
        """Independent copy with the same parameter values."""
        return type(self)(params={name: value.copy() for name, value in self.params.items()})


@define
class TabularApproximator(Approximator):
    """One row of outputs per input index."""

    kind: ClassVar[str] = "tabular"

    @classmethod
    def zeros(cls, size: int, outputs: int) -> "TabularApproximator":
        """Zero table, so a policy starts uniform and a critic starts at 0."""
        return cls(params={"table": np.zeros((size, outputs))})

    @property
    def outputs(self) -> int:
        """Output dimension."""
        return self.params["table"].shape[1]

    def forward(self, inputs: np.ndarray) -> np.ndarray:
        """Rows of the table at the given indices."""
        return self.params["table"][np.asarray(inputs, dtype=int)]

    def backward(self, inputs: np.ndarray, d_outputs: np.ndarray) -> Params:
        """Scatter-add of the output gradients into the visited rows."""
        grad = np.zeros_like(self.params["table"])
        np.add.at(grad, np.asarray(inputs, dtype=int), d_outputs)
        return {"table": grad}


@define
class LinearApproximator(Approximator):
    """outputs = x W + b."""

    kind: ClassVar[str] = "linear"

    @classmethod
    def zeros(cls, features: int, outputs: int) -> "LinearApproximator":
        """Zero weights and bias."""
        return cls(params={"W": np.zeros((features, outputs)), "b": np.zeros(outputs)})

    @property
    def outputs(self) -> int:
        """Output dimension."""
        return self.params["b"].shape[0]

    def forward(self, inputs: np.ndarray) -> np.ndarray:
        """Affine map of the feature batch."""
        return np.asarray(inputs, dtype=float) @ self.params["W"] + self.params["b"]

    def backward(self, inputs: np.ndarray, d_outputs: np.ndarray) -> Params:
        """Gradients of W and b."""
        inputs = np.asarray(inputs, dtype=float)
        return {"W": inputs.T @ d_outputs, "b": d_outputs.sum(axis=0)}


@define
class MlpApproximator(Approximator):
    """One tanh hidden layer: outputs = tanh(x W1 + b1) W2 + b2."""

    kind: ClassVar[str] = "mlp"

    @classmethod
    def initialize(cls, features: int, hidden: int, outputs: int, rng: np.random.Generator) -> "MlpApproximator":
        """Weights uniform in +-1/sqrt(fan_in), biases zero."""
        return cls(
            params={
                "W1": rng.uniform(-1.0, 1.0, size=(features, hidden)) / np.sqrt(features),
                "b1": np.zeros(hidden),
                "W2": rng.uniform(-1.0, 1.0, size=(hidden, outputs)) / np.sqrt(hidden),
                "b2": np.zeros(outputs),
            }
        )

    @property
    def outputs(self) -> int:
        """Output dimension."""
        return self.params["b2"].shape[0]

    def _hidden(self, inputs: np.ndarray) -> np.ndarray:
        return np.tanh(inputs @ self.params["W1"] + self.params["b1"])

    def forward(self, inputs: np.ndarray) -> np.ndarray:
        """Two-layer forward pass."""
        return self._hidden(np.asarray(inputs, dtype=float)) @ self.params["W2"] + self.params["b2"]

    def backward(self, inputs: np.ndarray, d_outputs: np.ndarray) -> Params:
        """Backpropagation through both layers."""
        inputs = np.asarray(inputs, dtype=float)
        hidden = self._hidden(inputs)
        d_pre = (d_outputs @ self.params["W2"].T) * (1.0 - hidden**2)
        return {
            "W1": inputs.T @ d_pre,
            "b1": d_pre.sum(axis=0),
            "W2": hidden.T @ d_outputs,
            "b2": d_outputs.sum(axis=0),
        }


APPROXIMATORS: dict[str, type[Approximator]] = {
    "tabular": TabularApproximator,
    "linear": LinearApproximator,
    "mlp": MlpApproximator,
}


def make_approximator(
    kind: str,
    inputs: int,
    outputs: int,
    rng: np.random.Generator,
    hidden: int = 64,
) -> Approximator:
    """Build an approximator.

    Args:
        kind: "tabular", "linear" or "mlp"
        inputs: Number of table rows (tabular) or feature length (linear, mlp)
        outputs: Output dimension; the action count for policies, 1 for critics
        rng: Initialization stream, only consumed by mlp
        hidden: Hidden width of the mlp
    """
    if kind == "tabular":
        return TabularApproximator.zeros(inputs, outputs)
    if kind == "linear":
        return LinearApproximator.zeros(inputs, outputs)
    if kind == "mlp":
        return MlpApproximator.initialize(inputs, hidden, outputs, rng)
    raise ValidationError(f"kind: unknown approximator '{kind}', expected one of {list(KINDS)}")


def forward_policy(approximator: Approximator, single_input: int | np.ndarray) -> ActionDistribution:
    """Softmax distribution of the logits for one input (an index or a feature vector)."""
    logits = approximator.forward(np.asarray([single_input]))[0]
    return ActionDistribution.from_logits(logits)


LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def gradient(approximator: Approximator, inputs: np.ndarray, loss: LossFn) -> tuple[float, Params]:
    """Loss value and its analytic gradient with respect to every parameter.

    Args:
        approximator: The approximator being differentiated
        inputs: Input batch
        loss: Maps the output batch to (loss value, d loss / d outputs)

    Raises:
        NumericalError: If the loss or any gradient entry is not finite
    """
    value, d_outputs = loss(approximator.forward(inputs))
    grads = approximator.backward(inputs, d_outputs)
    if not np.isfinite(value) or not all(np.isfinite(g).all() for g in grads.values()):
        raise NumericalError(f"{approximator.kind}: non-finite loss or gradient")
    return float(value), grads
