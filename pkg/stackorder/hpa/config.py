"""Trainer configuration, JSON loading and per-environment presets."""

from pathlib import Path
from typing import Any

import orjson
from attrs import asdict, evolve, fields, frozen
from dummio import orjson as json_io

from stackorder.envs import canonical_env_name
from stackorder.errors import ParseError, ValidationError
from stackorder.policy.approximators import KINDS


@frozen
class HpaConfig:
    """Hyperparameters of one training run.

    Attributes:
        k: Window length; the upper level acts once every k steps
        gamma: Discount of the lower level, per step
        gamma_upper: Discount of the upper level, per window
        clip_eps: Clipping range of the surrogate and value losses
        entropy_coef: Entropy bonus eta
        termination_reg: Termination regularizer psi
        lr_q: Step size of the Q_U temporal-difference update
        lr_termination: Step size of the termination update
        lr_policy: Step size of the option policy and the lower policies
        lr_critic: Step size of all critics
        gae_lambda: Trace decay of the lower advantages
        epochs: Passes over each batch per update
        episodes: Training episodes
        horizon: Episode length H
        seed: Root of every random stream
        lower_kind: Approximator of the lower policies and critics
        upper_kind: Approximator of the option policy, critic and termination function
        hidden: Hidden width of mlp approximators
        adam: Whether policy and critic steps use Adam moments
    """

    k: int = 2
    gamma: float = 0.99
    gamma_upper: float = 0.99
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    termination_reg: float = 0.01
    lr_q: float = 0.1
    lr_termination: float = 0.05
    lr_policy: float = 0.02
    lr_critic: float = 0.05
    gae_lambda: float = 0.95
    epochs: int = 4
    episodes: int = 500
    horizon: int = 8
    seed: int = 0
    lower_kind: str = "tabular"
    upper_kind: str = "tabular"
    hidden: int = 64
    adam: bool = True

    def __attrs_post_init__(self) -> None:
        """Check ranges; the error names the first offending field."""
        checks = {
            "k": self.k >= 1,
            "gamma": 0 < self.gamma <= 1,
            "gamma_upper": 0 < self.gamma_upper <= 1,
            "clip_eps": 0 < self.clip_eps < 1,
            "entropy_coef": self.entropy_coef >= 0,
            "lr_q": self.lr_q > 0,
            "lr_termination": self.lr_termination > 0,
            "lr_policy": self.lr_policy > 0,
            "lr_critic": self.lr_critic > 0,
            "gae_lambda": 0 <= self.gae_lambda <= 1,
            "epochs": self.epochs >= 1,
            "episodes": self.episodes >= 0,
            "horizon": self.horizon >= 1,
            "lower_kind": self.lower_kind in KINDS,
            "upper_kind": self.upper_kind in KINDS,
            "hidden": self.hidden >= 1,
        }
        for name, ok in checks.items():
            if not ok:
                raise ValidationError(f"{name}: invalid value {getattr(self, name)!r}")

    @classmethod
    def from_dict(cls, data: dict[str, Any], base: "HpaConfig | None" = None) -> "HpaConfig":
        """Override the fields of `base` (or the defaults) with the given values."""
        if not isinstance(data, dict):
            raise ValidationError("config: expected a JSON object")
        known = {f.name: f.type for f in fields(cls)}
        values = {}
        for key, value in data.items():
            if key not in known:
                raise ValidationError(f"{key}: unknown config field")
            expected = known[key]
            number = isinstance(value, (int, float)) and not isinstance(value, bool)
            if expected is bool:
                ok = isinstance(value, bool)
            elif expected is int:
                ok = number and float(value).is_integer()
                value = int(value) if ok else value
            elif expected is float:
                ok = number
                value = float(value) if ok else value
            else:
                ok = isinstance(value, str)
            if not ok:
                raise ValidationError(f"{key}: invalid value {value!r}")
            values[key] = value
        return evolve(base or cls(), **values)

    def to_dict(self) -> dict[str, Any]:
        """Every field, for the run manifest."""
        return asdict(self)


# the "default config" of each built-in environment
PRESETS: dict[str, dict[str, Any]] = {
    "switching_leader": {"episodes": 6000, "gamma": 0.5},
    "iterated_fig2": {"episodes": 2500, "gamma": 0.5},
}


def preset(env_name: str) -> HpaConfig:
    """Default configuration for an environment; game aliases resolve to the registry name."""
    return HpaConfig.from_dict(PRESETS.get(canonical_env_name(env_name), {}))


def load_config(path: Path, base: HpaConfig | None = None) -> HpaConfig:
    """Read a JSON config file whose keys mirror the HpaConfig fields.

    Raises:
        ParseError: If the file is not valid JSON
        ValidationError: If a key is unknown or a value is out of range
    """
    try:
        data = json_io.load(path)
    except orjson.JSONDecodeError as err:
        raise ParseError(f"{path}: not a valid JSON config ({err})") from err
    return HpaConfig.from_dict(data, base=base)
