import struct

import numpy as np
import pytest

from stackorder.errors import NumericalError, ParseError, ValidationError
from stackorder.policy.approximators import (
    KINDS,
    Approximator,
    LinearApproximator,
    forward_policy,
    gradient,
    make_approximator,
)
from stackorder.policy.checkpoint import check_compatible, load_checkpoint, save_checkpoint
from stackorder.policy.distributions import ActionDistribution, entropy, entropy_logit_gradient, softmax
from stackorder.policy.losses import (
    gae_advantages,
    ppo_clip_term,
    ppo_policy_loss,
    value_clip_loss,
    value_loss,
)
from stackorder.policy.optim import Optimizer

INPUTS = 4
ACTIONS = 3
BATCH = 6


def random_approximator(kind: str, outputs: int, rng: np.random.Generator) -> Approximator:
    approximator = make_approximator(kind, INPUTS, outputs, rng, hidden=5)
    for name, value in approximator.params.items():
        approximator.params[name] = rng.normal(size=value.shape)
    return approximator


def random_inputs(kind: str, rng: np.random.Generator) -> np.ndarray:
    if kind == "tabular":
        return rng.integers(0, INPUTS, size=BATCH)
    return rng.normal(size=(BATCH, INPUTS))


def assert_matches_finite_differences(approximator, inputs, loss, step=1e-6):
    _, grads = gradient(approximator, inputs, loss)
    for name, value in approximator.params.items():
        for idx in np.ndindex(value.shape):
            original = value[idx]
            value[idx] = original + step
            upper = loss(approximator.forward(inputs))[0]
            value[idx] = original - step
            lower = loss(approximator.forward(inputs))[0]
            value[idx] = original
            numeric = (upper - lower) / (2 * step)
            analytic = grads[name][idx]
            assert abs(analytic - numeric) <= 1e-4 * max(1.0, abs(analytic), abs(numeric)), (name, idx)


def test_ppo_clip_term():
    assert ppo_clip_term(1.0, 2.0, 0.2) == 2.0
    assert ppo_clip_term(2.0, 0.5, 0.2) == pytest.approx(0.6)
    assert ppo_clip_term(0.5, -1.0, 0.2) == pytest.approx(-0.8)
    with pytest.raises(NumericalError, match="^ratio"):
        ppo_clip_term(0.0, 1.0, 0.2)


def test_value_clip_loss():
    assert value_clip_loss(0.1, 0.0, 1.0, 0.05) == pytest.approx(0.9025)
    assert value_clip_loss(0.5, 0.5, 1.0, 0.05) == pytest.approx(0.25)
    # the clipped branch dominates with the new value outside the band, so nothing flows back
    loss, d_values = value_loss(np.array([[0.1]]), np.array([0.0]), np.array([1.0]), 0.05)
    assert loss == pytest.approx(0.9025)
    assert d_values.tolist() == [[0.0]]


def test_gae_matches_direct_sum():
    rng = np.random.default_rng(0)
    gamma, lam = 0.9, 0.8
    for _ in range(20):
        size = int(rng.integers(1, 10))
        rewards = rng.normal(size=size)
        values = rng.normal(size=size + 1)
        dones = rng.random(size) < 0.3
        alive = 1.0 - dones
        deltas = rewards + gamma * values[1:] * alive - values[:-1]
        expected = np.zeros(size)
        for t in range(size):
            coef = 1.0
            for u in range(t, size):
                expected[t] += coef * deltas[u]
                if dones[u]:
                    break
                coef *= gamma * lam
        np.testing.assert_allclose(gae_advantages(rewards, values, gamma, lam, dones), expected, atol=1e-12)
        np.testing.assert_allclose(gae_advantages(rewards, values, gamma, 0.0, dones), deltas, atol=1e-12)


def test_gae_shape_check():
    with pytest.raises(ValidationError, match="^values"):
        gae_advantages(np.ones(3), np.ones(3), 0.9, 0.9)


@pytest.mark.parametrize("kind", KINDS)
def test_policy_loss_gradient(kind):
    for seed in range(50):
        rng = np.random.default_rng(seed)
        approximator = random_approximator(kind, ACTIONS, rng)
        inputs = random_inputs(kind, rng)
        actions = rng.integers(0, ACTIONS, size=BATCH)
        probs = softmax(approximator.forward(inputs))
        old_log_probs = np.log(probs[np.arange(BATCH), actions]) + rng.uniform(-0.05, 0.05, size=BATCH)
        advantages = rng.normal(size=BATCH)

        def loss(logits):
            return ppo_policy_loss(logits, actions, old_log_probs, advantages, clip_eps=0.2, entropy_coef=0.01)

        assert_matches_finite_differences(approximator, inputs, loss)


@pytest.mark.parametrize("kind", KINDS)
def test_value_loss_gradient(kind):
    for seed in range(50):
        rng = np.random.default_rng(100 + seed)
        approximator = random_approximator(kind, 1, rng)
        inputs = random_inputs(kind, rng)
        old_values = approximator.forward(inputs)[:, 0] + rng.uniform(-0.01, 0.01, size=BATCH)
        targets = rng.normal(size=BATCH)

        def loss(values):
            return value_loss(values, old_values, targets, clip_eps=0.2)

        assert_matches_finite_differences(approximator, inputs, loss)


def test_gradient_rejects_non_finite_loss():
    approximator = LinearApproximator.zeros(2, 1)

    def loss(outputs):
        return float("nan"), np.zeros_like(outputs)

    with pytest.raises(NumericalError, match="^linear"):
        gradient(approximator, np.ones((1, 2)), loss)


def test_softmax_and_entropy():
    np.testing.assert_allclose(softmax(np.array([0.0, np.log(3.0)])), [0.25, 0.75])
    np.testing.assert_allclose(softmax(np.array([1000.0, 1000.0])), [0.5, 0.5])
    assert entropy(np.array([0.5, 0.5])) == pytest.approx(np.log(2.0))
    assert entropy(np.array([1.0, 0.0])) == 0.0
    with pytest.raises(NumericalError, match="^logits"):
        softmax(np.array([np.nan, 0.0]))


def test_entropy_logit_gradient():
    logits = np.array([0.3, -1.2, 0.8])
    step = 1e-6
    numeric = []
    for i in range(3):
        shift = np.eye(3)[i] * step
        numeric.append((entropy(softmax(logits + shift)) - entropy(softmax(logits - shift))) / (2 * step))
    np.testing.assert_allclose(entropy_logit_gradient(softmax(logits)), numeric, atol=1e-8)


def test_action_distribution():
    dist = ActionDistribution([0.5, 0.5])
    assert len(dist) == 2
    assert dist.mode() == 0
    assert dist.log_prob(1) == pytest.approx(np.log(0.5))
    assert dist.entropy() == pytest.approx(np.log(2.0))
    with pytest.raises(NumericalError, match="^probs"):
        ActionDistribution([0.5, 0.6])
    with pytest.raises(NumericalError, match="^probs"):
        ActionDistribution([1.5, -0.5])


def test_forward_policy_starts_uniform():
    approximator = make_approximator("tabular", INPUTS, ACTIONS, np.random.default_rng(0))
    np.testing.assert_allclose(forward_policy(approximator, 2).probs, np.full(ACTIONS, 1.0 / ACTIONS))
    with pytest.raises(ValidationError, match="^kind"):
        make_approximator("tree", INPUTS, ACTIONS, np.random.default_rng(0))


def test_optimizer_steps():
    sgd = Optimizer(lr=0.1, adam=False)
    approximator = LinearApproximator(params={"W": np.ones((1, 1)), "b": np.zeros(1)})
    sgd.step(approximator, {"W": np.full((1, 1), 2.0), "b": np.zeros(1)})
    assert approximator.params["W"][0, 0] == pytest.approx(0.8)
    adam = Optimizer(lr=0.1)
    approximator = LinearApproximator(params={"W": np.ones((1, 1)), "b": np.zeros(1)})
    adam.step(approximator, {"W": np.full((1, 1), 2.0), "b": np.full(1, -3.0)})
    assert approximator.params["W"][0, 0] == pytest.approx(0.9)
    assert approximator.params["b"][0] == pytest.approx(0.1)
    assert adam.steps == 1
    with pytest.raises(ValidationError, match="^lr"):
        Optimizer(lr=0.0)


@pytest.mark.parametrize("adam", [False, True])
def test_failed_step_leaves_parameters_untouched(adam):
    optimizer = Optimizer(lr=1.0, adam=adam)
    approximator = LinearApproximator(params={"W": np.ones((1, 1)), "b": np.zeros(1)})
    optimizer.step(approximator, {"W": np.full((1, 1), 0.5), "b": np.zeros(1)})
    params = {name: value.copy() for name, value in approximator.params.items()}
    moments = {name: value.copy() for name, value in optimizer.first.items()}
    with pytest.raises(NumericalError, match="^linear.b: non-finite gradient"):
        optimizer.step(approximator, {"W": np.full((1, 1), 1.0), "b": np.full(1, np.nan)})
    for name, value in params.items():
        np.testing.assert_array_equal(approximator.params[name], value)
    for name, value in moments.items():
        np.testing.assert_array_equal(optimizer.first[name], value)
    assert optimizer.steps == 1


def test_overflowing_step_is_rejected():
    optimizer = Optimizer(lr=1.0, adam=False)
    approximator = LinearApproximator(params={"W": np.full((1, 1), -1e308), "b": np.zeros(1)})
    with pytest.raises(NumericalError, match="^linear.W: step leaves non-finite"):
        optimizer.step(approximator, {"W": np.full((1, 1), 1e308), "b": np.ones(1)})
    assert approximator.params["W"][0, 0] == -1e308
    assert approximator.params["b"][0] == 0.0
    assert optimizer.steps == 0


def test_copy_is_independent():
    approximator = make_approximator("mlp", INPUTS, ACTIONS, np.random.default_rng(1))
    clone = approximator.copy()
    clone.params["W1"][0, 0] += 1.0
    assert clone.params["W1"][0, 0] != approximator.params["W1"][0, 0]
    assert clone.kind == "mlp"


@pytest.mark.parametrize("kind", KINDS)
def test_checkpoint_round_trip(tmp_path, kind):
    approximator = random_approximator(kind, ACTIONS, np.random.default_rng(2))
    path = tmp_path / "policy.ckpt"
    saved = save_checkpoint(approximator, path, seed=7)
    header, loaded = load_checkpoint(path)
    assert header == saved
    assert header.seed == 7
    assert loaded.kind == kind
    assert loaded.shapes == approximator.shapes
    for name, value in approximator.params.items():
        np.testing.assert_array_equal(loaded.params[name], value)
    check_compatible(loaded, approximator, "agent 0")


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "policy.ckpt"
    save_checkpoint(LinearApproximator.zeros(2, 3), path, seed=0)
    raw = path.read_bytes()

    broken = tmp_path / "magic.ckpt"
    broken.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ParseError, match="not a checkpoint"):
        load_checkpoint(broken)

    for cut in (8, 3):
        broken = tmp_path / f"truncated_{cut}.ckpt"
        broken.write_bytes(raw[:-cut])
        with pytest.raises(ParseError, match="payload"):
            load_checkpoint(broken)

    broken = tmp_path / "version.ckpt"
    broken.write_bytes(raw.replace(b'"format_version":1', b'"format_version":9'))
    with pytest.raises(ParseError, match="format version 9"):
        load_checkpoint(broken)


@pytest.mark.parametrize(
    ("header", "message"),
    [
        (b"[1]", "not a JSON object"),
        (b'{"format_version":1,"kind":"linear","shapes":[["W",[1,1]]]}', "seed"),
        (b'{"format_version":1,"kind":"linear","seed":"0","shapes":[]}', "seed"),
        (b'{"format_version":1,"kind":"linear","seed":0}', "shapes"),
        (b'{"format_version":1,"kind":"linear","seed":0,"shapes":[["W",[1,-1]]]}', "shapes"),
        (b'{"format_version":1,"kind":"linear","seed":0,"shapes":[["W"]]}', "shapes"),
        (b'{"format_version":1,"kind":["linear"],"seed":0,"shapes":[]}', "kind"),
    ],
)
def test_checkpoint_malformed_header(tmp_path, header, message):
    path = tmp_path / "header.ckpt"
    path.write_bytes(b"STKO" + struct.pack("<I", len(header)) + header)
    with pytest.raises(ParseError, match=message):
        load_checkpoint(path)


def test_check_compatible():
    with pytest.raises(ValidationError, match="^checkpoint: critic"):
        check_compatible(LinearApproximator.zeros(2, 1), LinearApproximator.zeros(3, 1), "critic")
