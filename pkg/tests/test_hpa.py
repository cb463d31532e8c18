from pathlib import Path

import numpy as np
import orjson
import pytest

from stackorder.envs import make_builtin
from stackorder.errors import NumericalError, ParseError, ValidationError
from stackorder.games import GroupScheme, Ordering
from stackorder.hpa.config import PRESETS, HpaConfig, load_config, preset
from stackorder.hpa.lower import lower_policy_update
from stackorder.hpa.trainer import (
    CHECKPOINT_DIR,
    METRICS_FILE,
    EpisodeRecord,
    build_agents,
    evaluate,
    load_artifacts,
    metric_columns,
    read_manifest,
    run_episode,
    train,
)
from stackorder.hpa.upper import (
    UpperState,
    intrinsic_rewards,
    option_advantage,
    option_utility,
    q_omega,
    select_option,
    td_update_qu,
    restrict_options,
    termination_step,
    u_target,
    upper_advantage,
    upper_policy_update,
)
from stackorder.policy.distributions import ActionDistribution
from stackorder.smg import EnvSpec, SubgameState, UpperTransition

CONFIGS_DIR = Path(__file__).parent.parent / "configs"
SINGLETONS = GroupScheme.singletons(2)
FIRST = Ordering((0, 1))


class FixedPolicy:
    def __init__(self, action: int):
        self.action = action

    def distribution(self, subgame: SubgameState) -> ActionDistribution:
        return ActionDistribution(np.eye(2)[self.action])


class UniformPolicy:
    def distribution(self, subgame: SubgameState) -> ActionDistribution:
        return ActionDistribution([0.5, 0.5])


class ScriptedPolicy:
    """Plays `lead` when acting first, otherwise responds to the first mover's action through `follow`."""

    def __init__(self, lead: int, follow: dict[int, int]):
        self.lead = lead
        self.follow = follow

    def distribution(self, subgame: SubgameState) -> ActionDistribution:
        action = self.follow[subgame.predecessors[0][1]] if subgame.predecessors else self.lead
        return ActionDistribution(np.eye(2)[action])


def se_policies() -> list[ScriptedPolicy]:
    """Stackelberg play in leader_shift: either leader's choice is answered by the follower's best response."""
    return [ScriptedPolicy(lead=0, follow={0: 1, 1: 1}), ScriptedPolicy(lead=1, follow={0: 0, 1: 1})]


def upper_for(spec: EnvSpec, scheme: GroupScheme = SINGLETONS, **overrides) -> UpperState:
    return UpperState.initialize(spec, scheme, HpaConfig(**overrides), np.random.default_rng(0))


def window(**overrides) -> UpperTransition:
    values = dict(
        start_state=0,
        ordering=Ordering((0, 1)),
        window_return=1.0,
        end_state=0,
        done=False,
        length=2,
        first_action=(0, 0),
        option=0,
    )
    return UpperTransition(**(values | overrides))


SPEC = EnvSpec(name="test", states=2, actions=(2, 2), horizon=8)


def test_config_defaults_and_overrides():
    config = HpaConfig()
    assert (config.k, config.horizon, config.lower_kind) == (2, 8, "tabular")
    updated = HpaConfig.from_dict({"k": 4.0, "adam": False, "gamma": 1})
    assert updated.k == 4 and isinstance(updated.k, int)
    assert updated.adam is False
    assert updated.gamma == 1.0
    assert HpaConfig.from_dict(config.to_dict()) == config


@pytest.mark.parametrize(
    ("data", "message"),
    [
        ({"bogus": 1}, "^bogus: unknown config field"),
        ({"k": 0}, "^k: invalid value 0"),
        ({"k": 2.5}, "^k: invalid value 2.5"),
        ({"adam": 1}, "^adam: invalid value"),
        ({"gamma": "high"}, "^gamma: invalid value"),
        ({"lower_kind": "tree"}, "^lower_kind: invalid value"),
        ({"clip_eps": 1.0}, "^clip_eps: invalid value"),
        ({"episodes": True}, "^episodes: invalid value"),
    ],
)
def test_config_rejects(data, message):
    with pytest.raises(ValidationError, match=message):
        HpaConfig.from_dict(data)


def test_config_rejects_non_object():
    with pytest.raises(ValidationError, match="^config"):
        HpaConfig.from_dict([1, 2])


def test_presets_and_files(tmp_path):
    assert preset("switching_leader").episodes == PRESETS["switching_leader"]["episodes"]
    assert preset("switching_leader").gamma == 0.5
    assert preset("iterated_leader_shift") == preset("iterated_fig2")
    assert preset("iterated:some/file.json") == HpaConfig()
    loaded = load_config(CONFIGS_DIR / "switching_leader.json")
    assert (loaded.k, loaded.episodes, loaded.seed, loaded.gamma) == (2, 6000, 1, 0.5)
    layered = load_config(CONFIGS_DIR / "k_ablation.json", base=HpaConfig(seed=9))
    assert (layered.k, layered.seed) == (4, 9)
    broken = tmp_path / "broken.json"
    broken.write_text("{k: 2")
    with pytest.raises(ParseError):
        load_config(broken)


def test_select_option_sampling():
    upper = upper_for(SPEC)
    rng = np.random.default_rng(0)
    draws = [select_option(upper, 0, 0, rng) for _ in range(20000)]
    assert np.mean([d.sampled for d in draws]) == pytest.approx(0.5, abs=0.02)
    assert np.mean([d.option == 0 for d in draws]) == pytest.approx(0.75, abs=0.02)
    first = select_option(upper, 0, None, rng)
    assert first.sampled
    assert first.log_prob == pytest.approx(np.log(0.5))


def test_select_option_greedy():
    upper = upper_for(SPEC)
    # beta = 0.5 terminates, then the tie picks the lowest option
    choice = select_option(upper, 0, 1, None)
    assert (choice.option, choice.sampled) == (0, True)
    upper.termination.params["table"][0, 1] = -1.0
    choice = select_option(upper, 0, 1, None)
    assert (choice.option, choice.sampled) == (1, False)


def test_q_omega_expectation():
    upper = upper_for(SPEC)
    upper.q_u[0, 1] = [4.0, 4.0, 0.0, 0.0]
    assert q_omega(upper, 0, 1, [UniformPolicy(), UniformPolicy()]) == pytest.approx(2.0)
    # option 1 is the ordering (1, 0): agent 1 leads with action 0
    assert q_omega(upper, 0, 1, [FixedPolicy(0), FixedPolicy(0)]) == pytest.approx(4.0)
    assert q_omega(upper, 0, 1, [FixedPolicy(1), FixedPolicy(0)]) == pytest.approx(0.0)


def test_u_target():
    upper = upper_for(SPEC)
    upper.termination.params["table"][1, 0] = -np.log(3.0)
    upper.q_u[1, 0] = 4.0
    assert u_target(upper, 0, 1, [UniformPolicy(), UniformPolicy()]) == pytest.approx(3.0)
    assert option_utility(0.0, 4.0, 1.0) == 4.0
    assert option_utility(1.0, 4.0, 1.0) == 1.0
    with pytest.raises(ValidationError, match="^beta"):
        option_utility(1.5, 4.0, 1.0)


def test_td_update_on_terminal_window():
    upper = upper_for(SPEC)
    delta = td_update_qu(upper, window(window_return=2.0, done=True, first_action=(1, 0)), 0.5, 0.9, [])
    assert delta == 2.0
    assert upper.q_u[0, 0, 2] == 1.0
    assert upper.visited.sum() == 1


def test_td_update_reaches_fixed_point():
    spec = EnvSpec(name="one", states=1, actions=(2, 2), horizon=100)
    upper = upper_for(spec, scheme=GroupScheme.parse("0,1"))
    assert len(upper.options) == 1
    lowers = [FixedPolicy(0), FixedPolicy(0)]
    transition = window(ordering=upper.options[0], length=1)
    for _ in range(2000):
        td_update_qu(upper, transition, 0.1, 0.81, lowers)
    assert upper.q_u[0, 0, 0] == pytest.approx(1.0 / (1.0 - 0.81), rel=1e-6)


def test_termination_step_direction():
    q_next = np.array([1.0, 0.0])
    upper = upper_for(SPEC)
    # the best option becomes stickier
    loss = termination_step(upper, 0, 0, 1, q_next, psi=0.01, lr=1.0)
    assert loss == pytest.approx(0.5 * 0.01 * 0.5)
    assert upper.beta(1)[0] < 0.5
    # a clearly worse option terminates more often
    termination_step(upper, 0, 1, 1, q_next, psi=0.01, lr=1.0)
    assert upper.beta(1)[1] > 0.5
    # no margin on the best option leaves beta alone
    before = upper.beta(0).copy()
    termination_step(upper, 0, 0, 0, q_next, psi=0.0, lr=1.0)
    np.testing.assert_array_equal(upper.beta(0), before)


def test_upper_advantage():
    upper = upper_for(SPEC)
    upper.critic.params["table"][:, 0] = [0.5, 2.0]
    assert upper_advantage(upper, window(end_state=1), 0.9) == pytest.approx(1.0 + 1.8 - 0.5)
    assert upper_advantage(upper, window(end_state=1, done=True), 0.9) == pytest.approx(0.5)


def test_option_advantage():
    upper = upper_for(SPEC)
    upper.critic.params["table"][:, 0] = [0.5, 2.0]
    upper.q_u[0, 1] = [4.0, 4.0, 0.0, 0.0]
    assert option_advantage(upper, 0, 1, [UniformPolicy(), UniformPolicy()]) == pytest.approx(1.5)
    assert option_advantage(upper, 0, 1, [FixedPolicy(1), FixedPolicy(0)]) == pytest.approx(-0.5)
    assert option_advantage(upper, 1, 0, [UniformPolicy(), UniformPolicy()]) == pytest.approx(-2.0)


def test_window_credit_does_not_depend_on_the_played_actions():
    env = make_builtin("switching_leader", horizon=8, window=2)
    records: list[EpisodeRecord] = []
    train(env, SINGLETONS, HpaConfig(episodes=20, seed=3), on_episode=records.append)
    for record in records:
        credit: dict[tuple[int, int], float] = {}
        for transition, advantage in zip(record.upper, record.advantages):
            key = (transition.start_state, transition.option)
            assert credit.setdefault(key, advantage) == pytest.approx(advantage, abs=1e-12)


def test_intrinsic_rewards():
    np.testing.assert_allclose(intrinsic_rewards(3.0, 2), [1.5, 1.5])
    np.testing.assert_allclose(intrinsic_rewards(3.0, 2, length=1), [1.5])
    with pytest.raises(ValidationError, match="^k"):
        intrinsic_rewards(1.0, 0)


def test_option_policy_learns_the_better_ordering():
    env = make_builtin("iterated_fig2", horizon=2)
    config = HpaConfig(k=2, horizon=2)
    upper = UpperState.initialize(env.spec, SINGLETONS, config, np.random.default_rng(0))
    lowers = se_policies()
    rng = np.random.default_rng(1)
    for _ in range(2000):
        buffers = run_episode(env, upper, lowers, config.k, rng, None)
        upper_policy_update(upper, buffers.upper, config)
    assert upper.option_probs(0)[0] > 0.95


def test_scripted_policies_reach_stackelberg_points():
    env = make_builtin("iterated_fig2", horizon=2)
    upper = UpperState.initialize(env.spec, SINGLETONS, HpaConfig(horizon=2), np.random.default_rng(0))
    returns = {}
    for option in range(2):
        upper.policy.params["table"][0] = [10.0, 0.0] if option == 0 else [0.0, 10.0]
        buffers = run_episode(env, upper, se_policies(), 2, None, None)
        returns[option] = buffers.upper[0].window_return
    assert returns == {0: pytest.approx(4.0), 1: pytest.approx(2.0)}


def test_intrinsic_reward_is_conserved():
    env = make_builtin("switching_leader", horizon=8, window=2)
    records: list[EpisodeRecord] = []
    train(env, SINGLETONS, HpaConfig(episodes=5, seed=2), on_episode=records.append)
    assert [r.episode for r in records] == [1, 2, 3, 4, 5]
    for record in records:
        offset = 0
        for transition, advantage in zip(record.upper, record.advantages):
            steps = record.lower[offset : offset + transition.length]
            assert abs(sum(step.intrinsic for step in steps) - advantage) < 1e-9
            offset += transition.length
        assert offset == len(record.lower) == 8


def test_training_is_deterministic(tmp_path):
    env = make_builtin("switching_leader", horizon=8, window=2)
    config = HpaConfig(episodes=4, seed=5)
    first = train(env, SINGLETONS, config, out_dir=tmp_path / "a")
    second = train(env, SINGLETONS, config, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / METRICS_FILE).read_bytes() == (tmp_path / "b" / METRICS_FILE).read_bytes()
    for path_a, path_b in zip(first.files, second.files):
        assert path_a.name == path_b.name
        assert path_a.read_bytes() == path_b.read_bytes()
    assert list(first.metrics.columns) == metric_columns(first.upper)[1:]
    assert first.metrics.index.name == "episode"
    assert first.metrics["env_steps"].tolist() == [8, 16, 24, 32]


@pytest.mark.parametrize("k", [1, 2, 4, 8])
def test_window_lengths(k):
    env = make_builtin("switching_leader", horizon=8, window=k)
    result = train(env, SINGLETONS, HpaConfig(k=k, episodes=2, seed=1))
    assert result.metrics["windows"].tolist() == [8 // k, 8 // k]
    assert result.upper.windows == 2 * (8 // k)


@pytest.mark.slow
@pytest.mark.parametrize("k", [1, 2, 4, 8])
def test_k_ablation_runs_clean(k):
    config = HpaConfig.from_dict({"k": k, "episodes": 300}, base=preset("switching_leader"))
    env = make_builtin("switching_leader", horizon=config.horizon, window=k)
    records: list[EpisodeRecord] = []
    result = train(env, SINGLETONS, config, on_episode=records.append)
    assert np.isfinite(result.metrics.to_numpy(dtype=float)).all()
    assert (result.metrics["windows"] == 8 // k).all()
    assert result.metrics["env_steps"].iloc[-1] == 300 * 8
    for record in records:
        offset = 0
        for transition, advantage in zip(record.upper, record.advantages):
            steps = record.lower[offset : offset + transition.length]
            assert abs(sum(step.intrinsic for step in steps) - advantage) < 1e-9
            offset += transition.length
    for agent in result.lowers:
        assert np.isfinite(agent.policy.params["table"]).all()
    assert np.isfinite(result.upper.q_u).all()


def test_zero_episodes(tmp_path):
    env = make_builtin("iterated_fig2")
    result = train(env, SINGLETONS, HpaConfig(episodes=0), out_dir=tmp_path)
    assert result.metrics.empty
    assert (tmp_path / METRICS_FILE).exists()
    assert (tmp_path / CHECKPOINT_DIR / "manifest.json").exists()


def test_horizon_must_match():
    with pytest.raises(ValidationError, match="^horizon"):
        train(make_builtin("iterated_fig2", horizon=4), SINGLETONS, HpaConfig(episodes=1))


def test_untrained_evaluation():
    env = make_builtin("switching_leader", horizon=8, window=2)
    upper, lowers = build_agents(env, SINGLETONS, HpaConfig())
    report = evaluate(env, upper, lowers, k=2)
    np.testing.assert_allclose(report.option_probs, 0.5)
    assert report.greedy_counts.tolist() == [[2, 0], [2, 0]]
    assert report.best_options == ((0,), (1,))
    assert report.matched_fraction == 0.5
    assert report.mean_team_return == pytest.approx(2.0)
    summary = report.as_dict(upper)
    assert summary["states"][1]["best_options"] == ["1,0"]
    assert summary["states"][0]["greedy_counts"] == {"0,1": 2, "1,0": 0}
    with pytest.raises(ValidationError, match="^episodes"):
        evaluate(env, upper, lowers, k=2, episodes=0)


def test_artifacts_round_trip(tmp_path):
    env = make_builtin("switching_leader", horizon=8, window=2)
    config = HpaConfig(episodes=3, seed=4)
    trained = train(env, SINGLETONS, config, out_dir=tmp_path)
    upper, lowers, loaded_config = load_artifacts(tmp_path, env)
    assert loaded_config == config
    np.testing.assert_array_equal(upper.q_u, trained.upper.q_u)
    np.testing.assert_array_equal(upper.policy.params["table"], trained.upper.policy.params["table"])
    for loaded, original in zip(lowers, trained.lowers):
        np.testing.assert_array_equal(loaded.policy.params["table"], original.policy.params["table"])
    before = evaluate(env, trained.upper, trained.lowers, k=2)
    after = evaluate(env, upper, lowers, k=2)
    assert after.mean_team_return == before.mean_team_return
    np.testing.assert_array_equal(after.greedy_counts, before.greedy_counts)
    with pytest.raises(ValidationError, match="^checkpoint"):
        load_artifacts(tmp_path, make_builtin("iterated_fig2"))
    with pytest.raises(ValidationError, match="^checkpoint"):
        load_artifacts(tmp_path / "missing", env)


def test_lower_update_checks():
    env = make_builtin("iterated_fig2")
    config = HpaConfig()
    upper, lowers = build_agents(env, SINGLETONS, config)
    buffers = run_episode(env, upper, lowers, 2, None, None)
    with pytest.raises(ValidationError, match="^order"):
        lower_policy_update(lowers, buffers.lower, (0, 0), config)
    with pytest.raises(ValidationError, match="^steps"):
        lower_policy_update(lowers, [], (0, 1), config)
    results = lower_policy_update(lowers, buffers.lower, (1, 0), config)
    assert sorted(results) == [0, 1]


def test_evaluation_leaves_counters_alone():
    env = make_builtin("switching_leader", horizon=8, window=2)
    result = train(env, SINGLETONS, HpaConfig(episodes=3, seed=1))
    assert (result.upper.steps, result.upper.windows) == (24, 12)
    evaluate(env, result.upper, result.lowers, k=2, episodes=5)
    assert (result.upper.steps, result.upper.windows) == (24, 12)


def test_upper_update_rejects_non_finite_returns():
    upper = upper_for(SPEC)
    policy = upper.policy.params["table"].copy()
    critic = upper.critic.params["table"].copy()
    broken = window(window_return=float("nan"), log_prob=float(np.log(0.5)))
    with pytest.raises(NumericalError, match="^tabular: non-finite"):
        upper_policy_update(upper, [broken], HpaConfig())
    np.testing.assert_array_equal(upper.policy.params["table"], policy)
    np.testing.assert_array_equal(upper.critic.params["table"], critic)


@pytest.mark.parametrize(
    ("manifest", "message"),
    [
        (b"{not json", "not a valid JSON manifest"),
        (b"[1, 2]", "must be a JSON object"),
        (b'{"env": "switching_leader"}', "field 'states'"),
    ],
)
def test_malformed_manifest(tmp_path, manifest, message):
    (tmp_path / "manifest.json").write_bytes(manifest)
    with pytest.raises(ParseError, match=message):
        read_manifest(tmp_path)


def test_manifest_field_types(tmp_path):
    env = make_builtin("switching_leader", horizon=8, window=2)
    train(env, SINGLETONS, HpaConfig(episodes=1), out_dir=tmp_path)
    path = tmp_path / CHECKPOINT_DIR / "manifest.json"
    manifest = orjson.loads(path.read_bytes())
    for name, value in [("states", "2"), ("actions", [2, "2"]), ("components", {"upper_policy": 3})]:
        path.write_bytes(orjson.dumps(manifest | {name: value}))
        with pytest.raises(ParseError, match="manifest"):
            load_artifacts(tmp_path, env)
    components = {k: v for k, v in manifest["components"].items() if k != "upper_critic"}
    path.write_bytes(orjson.dumps(manifest | {"components": components}))
    with pytest.raises(ParseError, match="no component 'upper_critic'"):
        load_artifacts(tmp_path, env)


def greedy_joint_actions(env, upper, lowers, k: int) -> set[tuple[int, ...]]:
    report = evaluate(env, upper, lowers, k=k)
    return {tuple(step.joint_action) for step in report.trajectories[0]}


@pytest.mark.slow
def test_fixed_ordering_reaches_the_stackelberg_point():
    config = preset("iterated_fig2")
    assert config.episodes * config.horizon <= 20_000
    env = make_builtin("iterated_fig2", horizon=config.horizon)
    passed = 0
    for seed in (1, 2, 3):
        seeded = HpaConfig.from_dict({"seed": seed}, base=config)
        result = train(env, SINGLETONS, seeded, orderings=[FIRST])
        assert result.upper.options == (FIRST,)
        passed += greedy_joint_actions(env, result.upper, result.lowers, config.k) == {(0, 0)}
    assert passed >= 2


@pytest.mark.slow
def test_switching_leader_matches_the_state():
    config = preset("switching_leader")
    assert config.episodes * config.horizon <= 50_000
    env = make_builtin("switching_leader", horizon=config.horizon, window=config.k)
    passed = 0
    for seed in (1, 2, 3):
        seeded = HpaConfig.from_dict({"seed": seed}, base=config)
        upper, lowers = build_agents(env, SINGLETONS, seeded)
        assert evaluate(env, upper, lowers, k=config.k).matched_fraction < 0.9
        result = train(env, SINGLETONS, seeded)
        report = evaluate(env, result.upper, result.lowers, k=config.k)
        passed += report.matched_fraction >= 0.9 and report.mean_team_return >= 1.9
    assert passed >= 2


def test_restricted_options():
    assert restrict_options(SINGLETONS, [Ordering((1, 0)), FIRST, FIRST]) == (FIRST, Ordering((1, 0)))
    with pytest.raises(ValidationError, match="^ordering"):
        restrict_options(SINGLETONS, [])
    with pytest.raises(ValidationError, match="^ordering"):
        restrict_options(SINGLETONS, [Ordering((0, 1, 2))])


def test_restricted_options_round_trip(tmp_path):
    env = make_builtin("iterated_fig2")
    trained = train(env, SINGLETONS, HpaConfig(episodes=2), out_dir=tmp_path, orderings=[FIRST])
    assert trained.upper.options == (FIRST,)
    assert trained.upper.q_u.shape == (1, 1, 4)
    buffers = run_episode(env, trained.upper, trained.lowers, 2, None, None)
    assert {window.ordering for window in buffers.upper} == {FIRST}
    upper, _, _ = load_artifacts(tmp_path, env)
    assert upper.options == (FIRST,)
