import pytest

from mctsep.agents import CriticScore, HeuristicCritic, PolicyParams, ScriptedPolicy
from mctsep.environments.core import Family
from mctsep.environments.gridhouse import make_task
from mctsep.evaluator import (
    ActorFactory,
    EpisodeResult,
    EvalReport,
    EvaluatorManager,
    PolicyActor,
    RandomActor,
    ScriptedActor,
    SearchActor,
    evaluate_actor,
    read_report,
    run_episode,
    summarize_episodes,
    write_report,
)
from mctsep.exceptions import ConfigurationError, ContractError
from mctsep.search import SearchConfig
from mctsep.tests.conftest import make_wrapped_env, xs_plan
from mctsep.utils import write_json


def xs_suite(seeds=range(4)):
    return [make_task(Family.PICK_PLACE, seed, "house_xs") for seed in seeds]


class ZeroCritic:
    def score(self, state):
        return CriticScore(0.0)


def test_scripted_actor_solves_every_task(env):
    suite = xs_suite() + [make_task(Family.LOOK_IN_LIGHT, seed, "house_lamp") for seed in range(2)]
    report = evaluate_actor(env, suite, ScriptedActor())
    assert report.success_rate == 1.0
    assert report.episodes == 6
    assert list(report.families) == ["PickPlace", "LookInLight"]
    assert report.families["PickPlace"].mean_steps == 4.0
    assert report.mean_loss == 0.0


def test_random_actor_is_seeded_and_capped(env):
    suite = [make_task(Family.PICK_PLACE, seed, "house_s") for seed in range(3)]
    first = [run_episode(env, spec, RandomActor(seed=3), i) for i, spec in enumerate(suite)]
    second = [run_episode(env, spec, RandomActor(seed=3), i) for i, spec in enumerate(suite)]
    assert first == second
    for result in first:
        assert 1 <= result.steps <= 30
        assert result.reward in (0.0, 0.5, 1.0)
        assert len(result.actions) == result.steps


def test_search_actor_plays_the_most_visited_action(env, xs_task):
    search_env = make_wrapped_env()
    actor = SearchActor(ScriptedPolicy(xs_plan(xs_task)), HeuristicCritic(10), SearchConfig(budget=12), search_env)
    result = run_episode(env, xs_task, actor)
    assert result.success
    assert result.actions == tuple(a.text for a in xs_plan(xs_task))
    assert actor.searches == 4


def test_search_actor_falls_back_to_greedy(env, xs_task):
    actor = SearchActor(ScriptedPolicy(xs_plan(xs_task)), ZeroCritic(), SearchConfig(budget=5), make_wrapped_env())
    result = run_episode(env, xs_task, actor)
    assert result.success
    assert result.steps == 4


def test_summary_statistics_and_notes():
    results = [
        EpisodeResult(0, "house_xs/PickPlace/0", "PickPlace", "completed", 1.0, 4),
        EpisodeResult(1, "house_xs/PickPlace/1", "PickPlace", "partial", 0.5, 30),
    ]
    report = summarize_episodes(results, families=["PickPlace", "CleanPlace"], actor="scripted")
    assert report.success_rate == 0.5
    assert report.standard_error == pytest.approx(0.5 / 2**0.5)
    assert report.mean_steps == 17.0
    assert report.mean_loss == 0.25
    assert report.notes == ("CleanPlace has no episodes and is omitted",)
    assert list(report.families) == ["PickPlace"]


def test_report_file_round_trip(tmp_path):
    report = summarize_episodes(
        [EpisodeResult(0, "house_xs/PickPlace/0", "PickPlace", "completed", 1.0, 4)], config_hash="abc"
    )
    path = tmp_path / "report.json"
    write_report(path, report)
    assert read_report(path) == report
    write_json(path, {**report.to_dict(), "version": 0})
    with pytest.raises(ContractError):
        read_report(path)
    assert isinstance(report, EvalReport)


def test_actor_factory(compose_config):
    assert isinstance(ActorFactory(compose_config("eval.actor=greedy")).create_actor(), PolicyActor)
    assert isinstance(ActorFactory(compose_config("eval.actor=scripted")).create_actor(), ScriptedActor)
    assert isinstance(ActorFactory(compose_config("eval.actor=random")).create_actor(), RandomActor)
    searcher = ActorFactory(compose_config("eval.actor=search"), PolicyParams.zeros(64)).create_actor()
    assert isinstance(searcher, SearchActor)
    assert searcher.policy.params.dim == 64
    with pytest.raises(ConfigurationError):
        ActorFactory(compose_config("eval.actor=psychic")).create_actor()


def test_parallel_results_match_sequential(compose_config, tmp_path):
    suite = xs_suite() + [make_task(Family.PICK_PLACE, seed, "house_s") for seed in range(2)]
    sequential = EvaluatorManager(compose_config("eval.actor=random"), suite).run(
        ActorFactory(compose_config("eval.actor=random"))
    )
    config = compose_config("eval.actor=random", "eval.num_workers=2")
    parallel = EvaluatorManager(config, suite, tmp_path / "eval").run(ActorFactory(config))
    assert parallel == sequential
    assert [r.index for r in parallel] == list(range(len(suite)))
    assert len(list((tmp_path / "eval" / "episodes").glob("*.json"))) == len(suite)
