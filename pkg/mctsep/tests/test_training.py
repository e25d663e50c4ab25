import math
from dataclasses import replace

import numpy as np
import pytest

from mctsep.agents import HeuristicCritic, PolicyParams
from mctsep.agents.softmax import greedy_action, log_prob
from mctsep.dataset import PreferencePair, Trajectory, expert_trajectory
from mctsep.environments import make_suite
from mctsep.environments.core import Action, Family, Observation
from mctsep.environments.gridhouse import make_task
from mctsep.exceptions import ConfigValidationError, ContractError, DataError, TrainingDivergedError
from mctsep.prompt_builder import init_state
from mctsep.search import SearchConfig
from mctsep.tests.conftest import make_wrapped_env, xs_plan
from mctsep.training import (
    Buffers,
    ReferencePolicy,
    TrainConfig,
    _dpo_terms,
    _sft_terms,
    collect_from_suite,
    compile_pairs,
    compile_trajectories,
    dpo_grad,
    dpo_loss,
    load_checkpoint,
    run_iteration,
    save_checkpoint,
    sft_grad,
    sft_loss,
    train_phase,
    warmup_expert,
)
from mctsep.utils import write_json

DIM = 32
CANDIDATES = ("go to countertop 1", "go to table 1", "examine countertop 1")


def xs_suite(seeds=range(4)):
    return [make_task(Family.PICK_PLACE, seed, "house_xs") for seed in seeds]


def experts(env, seeds=range(4)):
    return [expert_trajectory(env, spec, xs_plan(spec)) for spec in xs_suite(seeds)]


def preference(xs_task, winner, loser):
    state = init_state(xs_task.instruction, Observation("You are in the middle of a room."))
    return PreferencePair("ctx", state.to_dict(), CANDIDATES, winner, loser, 0.9, 0.1, 3, 3, xs_task.task_id)


@pytest.fixture
def pairs(xs_task):
    return [
        preference(xs_task, "go to countertop 1", "go to table 1"),
        preference(xs_task, "go to countertop 1", "examine countertop 1"),
        preference(xs_task, "go to table 1", "examine countertop 1"),
    ]


def random_params(seed=0, dim=DIM, scale=0.3):
    return PolicyParams(np.random.default_rng(seed).normal(0.0, scale, dim))


def central_difference(loss, params, eps=1e-5):
    grad = np.zeros(params.dim)
    for i in range(params.dim):
        step = np.zeros(params.dim)
        step[i] = eps
        grad[i] = (loss(PolicyParams(params.weights + step)) - loss(PolicyParams(params.weights - step))) / (2 * eps)
    return grad


def test_sft_gradient_matches_finite_differences(env):
    data = experts(env, seeds=range(2))
    params = random_params()
    numeric = central_difference(lambda p: sft_loss(p, data), params)
    np.testing.assert_allclose(sft_grad(params, data), numeric, atol=1e-6)


def test_dpo_gradient_matches_finite_differences(pairs):
    params = random_params(1)
    reference = ReferencePolicy(random_params(2))
    numeric = central_difference(lambda p: dpo_loss(p, reference, pairs, 0.5), params)
    np.testing.assert_allclose(dpo_grad(params, reference, pairs, 0.5), numeric, atol=1e-6)


GRADIENT_DRAWS = 100


@pytest.fixture(scope="module")
def expert_pool():
    return experts(make_wrapped_env(), seeds=range(8))


def weight_difference(loss, weights, eps=1e-5):
    grad = np.zeros_like(weights)
    for i in range(weights.shape[0]):
        step = np.zeros_like(weights)
        step[i] = eps
        grad[i] = (loss(weights + step) - loss(weights - step)) / (2 * eps)
    return grad


def assert_relative_close(analytic, numeric, rtol=1e-5):
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    assert np.linalg.norm(analytic - numeric) <= rtol * scale + 1e-8


def random_pairs(rng, pool, count):
    steps = [(trajectory, step) for trajectory in pool for step in trajectory.steps if len(step.candidates) > 1]
    drawn = []
    for index in rng.choice(len(steps), size=count):
        trajectory, step = steps[index]
        winner, loser = rng.choice(len(step.candidates), size=2, replace=False)
        drawn.append(
            PreferencePair(
                step.context,
                step.state,
                step.candidates,
                step.candidates[winner],
                step.candidates[loser],
                0.9,
                0.1,
                3,
                3,
                trajectory.task.task_id,
            )
        )
    return drawn


def test_sft_gradient_over_random_draws(expert_pool):
    for draw in range(GRADIENT_DRAWS):
        rng = np.random.default_rng(draw)
        params = PolicyParams(rng.normal(0.0, rng.uniform(0.1, 1.0), DIM))
        subset = [expert_pool[i] for i in rng.choice(len(expert_pool), size=rng.integers(1, 4), replace=False)]
        compiled = compile_trajectories(subset, DIM)
        numeric = weight_difference(lambda w: _sft_terms(w, compiled, with_grad=False)[0] / len(subset), params.weights)
        assert_relative_close(sft_grad(params, subset), numeric)


def test_dpo_gradient_over_random_draws(expert_pool):
    for draw in range(GRADIENT_DRAWS):
        rng = np.random.default_rng(1000 + draw)
        params = PolicyParams(rng.normal(0.0, rng.uniform(0.1, 1.0), DIM))
        reference = ReferencePolicy(PolicyParams(rng.normal(0.0, 0.5, DIM)))
        beta = float(rng.uniform(0.1, 2.0))
        drawn = random_pairs(rng, expert_pool, int(rng.integers(1, 6)))
        compiled = compile_pairs(drawn, reference, DIM)
        numeric = weight_difference(
            lambda w: _dpo_terms(w, compiled, beta, with_grad=False)[0] / len(drawn), params.weights
        )
        assert_relative_close(dpo_grad(params, reference, drawn, beta), numeric)


def test_sft_loss_of_a_uniform_policy(env):
    data = experts(env, seeds=[0])
    expected = sum(math.log(len(step.candidates)) for step in data[0].steps)
    assert sft_loss(PolicyParams.zeros(DIM), data) == pytest.approx(expected)


def test_dpo_loss_at_the_reference_is_log_two(pairs):
    params = random_params(3)
    assert dpo_loss(params, ReferencePolicy(params), pairs, 0.5) == pytest.approx(math.log(2.0))
    assert dpo_loss(params, ReferencePolicy(params), pairs, 4.0) == pytest.approx(math.log(2.0))


def test_dpo_loss_for_a_unit_margin(pairs):
    params = random_params(4)
    pair = pairs[0]
    state, candidates = pair.agent_state(), pair.candidate_actions()
    margin = log_prob(params, state, Action.parse(pair.winner), candidates) - log_prob(
        params, state, Action.parse(pair.loser), candidates
    )
    assert abs(margin) > 1e-6
    # The reference is uniform, so beta * margin = 1 and the loss is -log sigmoid(1).
    loss = dpo_loss(params, ReferencePolicy(PolicyParams.zeros(DIM)), [pair], 1.0 / margin)
    assert loss == pytest.approx(0.3133, abs=1e-4)


def test_reference_policy_is_frozen():
    params = random_params(5)
    reference = ReferencePolicy(params)
    params.weights[0] += 1.0
    assert reference.weights[0] == pytest.approx(params.weights[0] - 1.0)
    with pytest.raises(ValueError):
        reference.weights[0] = 0.0


def test_sft_memorises_expert_plans(env):
    data = experts(env)
    config = TrainConfig(learning_rate=1.0, batch_size=1, epochs_sft=50)
    params, curve = train_phase(PolicyParams.zeros(), data, config, "sft")
    assert len(curve) == 50
    assert curve[-1] < curve[0] / 4
    for trajectory in data:
        for step in trajectory.steps:
            assert greedy_action(params, step.agent_state(), step.candidate_actions()) == Action.parse(step.action)


def test_dpo_prefers_winners(pairs):
    config = TrainConfig(epochs_dpo=20)
    start = PolicyParams.zeros()
    params, curve = train_phase(start, pairs, config, "dpo")
    assert curve[0] == pytest.approx(math.log(2.0))
    assert curve[-1] < curve[0]
    pair = pairs[0]
    state, candidates = pair.agent_state(), pair.candidate_actions()
    assert log_prob(params, state, Action.parse(pair.winner), candidates) > log_prob(
        params, state, Action.parse(pair.loser), candidates
    )
    assert np.all(start.weights == 0.0)


def test_training_is_seeded(env):
    data = experts(env)
    config = TrainConfig(batch_size=2, epochs_sft=3, seed=9)
    first, _ = train_phase(PolicyParams.zeros(DIM), data, config, "sft")
    second, _ = train_phase(PolicyParams.zeros(DIM), data, config, "sft")
    np.testing.assert_array_equal(first.weights, second.weights)


def test_non_finite_losses_stop_training(env):
    data = experts(env, seeds=[0])
    with np.errstate(all="ignore"):
        with pytest.raises(TrainingDivergedError) as info:
            train_phase(PolicyParams(np.full(DIM, 1e308)), data, TrainConfig(epochs_sft=2), "sft")
    assert info.value.report["epoch"] == 0
    assert info.value.report["kind"] == "sft"


def test_bad_training_inputs(env, pairs):
    data = experts(env, seeds=[0])
    steps = list(data[0].steps)
    steps[0] = replace(steps[0], action="go to fridge 1")
    with pytest.raises(DataError):
        sft_loss(PolicyParams.zeros(DIM), [Trajectory(data[0].task, tuple(steps), 1.0)])
    with pytest.raises(ContractError):
        train_phase(PolicyParams.zeros(DIM), [], TrainConfig(), "sft")
    with pytest.raises(ContractError):
        train_phase(PolicyParams.zeros(DIM), pairs, TrainConfig(), "ppo")
    with pytest.raises(ConfigValidationError) as info:
        TrainConfig(learning_rate=0.0)
    assert info.value.field == "train.learning_rate"


def test_warmup_uses_only_expert_data(env):
    params = PolicyParams.zeros(DIM)
    searched = [replace(t, source="search") for t in experts(env, seeds=[0])]
    assert warmup_expert(params, searched, TrainConfig()) is params
    warmed = warmup_expert(params, experts(env, seeds=[0]), TrainConfig(epochs_sft=2))
    assert not np.array_equal(warmed.weights, params.weights)


def test_checkpoint_round_trip(tmp_path):
    params = random_params(6)
    path = tmp_path / "checkpoints" / "sft.json"
    save_checkpoint(path, params, TrainConfig(), config_hash="abc", iteration=2, phase="sft")
    loaded, meta = load_checkpoint(path)
    np.testing.assert_array_equal(loaded.weights, params.weights)
    assert meta["config_hash"] == "abc"
    assert meta["iteration"] == 2
    assert meta["train_config_hash"] == TrainConfig().hash

    write_json(path, {"version": 9, "params": params.to_dict()})
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_iteration_without_data_is_a_noop(env):
    params = PolicyParams.zeros(DIM)
    config = SearchConfig(budget=1, d_max=1)
    new_params, report, buffers = run_iteration(
        params, xs_suite([0]), config, TrainConfig(), env, HeuristicCritic(config.d_max)
    )
    assert report.noop
    assert (report.sft_loss, report.dpo_loss) == (None, None)
    np.testing.assert_array_equal(new_params.weights, params.weights)
    assert buffers.trajectories == [] and buffers.pairs == []


def test_iteration_trains_on_what_search_finds(env):
    suite = xs_suite([0, 1])
    warmup = TrainConfig(learning_rate=1.0, batch_size=1, epochs_sft=20)
    params = warmup_expert(PolicyParams.zeros(), experts(env), warmup)
    config = SearchConfig(budget=30)
    earlier = Buffers(experts(env, seeds=[3]))
    params, report, buffers = run_iteration(
        params,
        suite,
        config,
        TrainConfig(epochs_sft=2, epochs_dpo=2),
        env,
        HeuristicCritic(config.d_max),
        eval_suite=suite,
        buffers=earlier,
        iteration=1,
    )
    assert not report.noop
    assert report.new_trajectories >= 2
    assert report.trajectories == len(buffers.trajectories) == report.new_trajectories + 1
    assert buffers.trajectories[-1].source == "expert"
    assert report.sft_loss is not None
    assert 0.0 <= report.success_rate <= 1.0
    with pytest.raises(ContractError):
        run_iteration(params, [], config, TrainConfig(), env, HeuristicCritic(config.d_max))


@pytest.mark.slow
def test_zero_weight_search_finds_successes_on_most_tasks(env):
    suite = make_suite([Family.PICK_PLACE], range(20), ["house_s"])
    config = SearchConfig(budget=200)
    trajectories, _, _ = collect_from_suite(PolicyParams.zeros(), suite, config, env, HeuristicCritic(config.d_max))
    solved = {trajectory.task.task_id for trajectory in trajectories}
    assert len(suite) == 20
    assert len(solved) >= len(suite) // 2
