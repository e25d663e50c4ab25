import logging
import multiprocessing
import traceback
from collections import OrderedDict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from tqdm import tqdm

from mctsep.agents import PolicyFactory, ScriptedPolicy, UniformPolicy
from mctsep.environments import make_env
from mctsep.environments.core import Family, OutcomeStatus, outcome_reward
from mctsep.environments.gridhouse import layout_registry
from mctsep.exceptions import ConfigurationError, ContractError
from mctsep.prompt_builder import advance, identity_summarizer, init_state
from mctsep.search import SearchConfig, best_root_action, run_search
from mctsep.utils import derive_seed, mean_and_standard_error, read_json, write_json

logger = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EpisodeResult:
    index: int
    task_id: str
    family: str
    status: str
    reward: float
    steps: int
    actions: Tuple[str, ...] = ()

    @property
    def success(self):
        return self.status == OutcomeStatus.COMPLETED.value

    def to_dict(self):
        return {
            "index": self.index,
            "task_id": self.task_id,
            "family": self.family,
            "status": self.status,
            "reward": self.reward,
            "steps": self.steps,
            "actions": list(self.actions),
        }


@dataclass(frozen=True)
class FamilyReport:
    success_rate: float
    standard_error: float
    mean_steps: float
    episodes: int

    def to_dict(self):
        return {
            "success_rate": self.success_rate,
            "standard_error": self.standard_error,
            "mean_steps": self.mean_steps,
            "episodes": self.episodes,
        }


@dataclass(frozen=True)
class EvalReport:
    families: Dict[str, FamilyReport]
    success_rate: float
    standard_error: float
    mean_steps: float
    episodes: int
    mean_loss: float = 0.0
    notes: Tuple[str, ...] = ()
    actor: str = ""
    config_hash: str = None
    version: int = REPORT_FORMAT_VERSION

    def to_dict(self):
        return {
            "version": self.version,
            "actor": self.actor,
            "config_hash": self.config_hash,
            "success_rate": self.success_rate,
            "standard_error": self.standard_error,
            "mean_steps": self.mean_steps,
            "mean_loss": self.mean_loss,
            "episodes": self.episodes,
            "families": {name: report.to_dict() for name, report in self.families.items()},
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("version") != REPORT_FORMAT_VERSION:
            raise ContractError(f"report version {data.get('version')} is not {REPORT_FORMAT_VERSION}")
        return cls(
            families=OrderedDict((name, FamilyReport(**values)) for name, values in data["families"].items()),
            success_rate=data["success_rate"],
            standard_error=data["standard_error"],
            mean_steps=data["mean_steps"],
            episodes=data["episodes"],
            mean_loss=data["mean_loss"],
            notes=tuple(data["notes"]),
            actor=data["actor"],
            config_hash=data["config_hash"],
            version=data["version"],
        )


def write_report(path, report):
    write_json(path, report.to_dict())


def read_report(path):
    return EvalReport.from_dict(read_json(path))


def summarize_episodes(results, families=None, actor="", config_hash=None):
    """Fold episode results into an EvalReport; families are listed in `Family` order.

    Args:
        results (list[EpisodeResult]): Episodes in task order.
        families (list[str], optional): Families that were requested; those without episodes get a note.
    """
    by_family = {}
    for result in results:
        by_family.setdefault(result.family, []).append(result)

    reports = OrderedDict()
    notes = []
    requested = [Family(f).value for f in families] if families is not None else [f.value for f in Family]
    for family in [f.value for f in Family]:
        episodes = by_family.get(family, [])
        if not episodes:
            if families is not None and family in requested:
                notes.append(f"{family} has no episodes and is omitted")
            continue
        rate, error = mean_and_standard_error([1.0 if e.success else 0.0 for e in episodes])
        steps, _ = mean_and_standard_error([e.steps for e in episodes])
        reports[family] = FamilyReport(rate, error, steps, len(episodes))

    rate, error = mean_and_standard_error([1.0 if r.success else 0.0 for r in results])
    steps, _ = mean_and_standard_error([r.steps for r in results])
    loss, _ = mean_and_standard_error([1.0 - r.reward for r in results])
    return EvalReport(reports, rate, error, steps, len(results), loss, tuple(notes), actor, config_hash)


class PolicyActor:
    """Plays a policy's greedy (or seeded sampled) choice at every step."""

    def __init__(self, policy, mode="greedy", seed=0):
        self.policy = policy
        self.mode = mode
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def reset(self, spec):
        self.policy.reset()
        self.rng = np.random.default_rng(derive_seed(self.seed, spec.task_id))

    def act(self, env, state, candidates):
        if self.mode == "sample":
            return self.policy.sample(state, candidates, self.rng), None
        return self.policy.act(state, candidates)


class RandomActor(PolicyActor):
    def __init__(self, seed=0):
        super().__init__(UniformPolicy(), mode="sample", seed=seed)


class ScriptedActor(PolicyActor):
    """Follows the oracle's shortest plan for each task."""

    def __init__(self, registry=None):
        super().__init__(ScriptedPolicy(()))
        self.registry = registry

    def reset(self, spec):
        from mctsep.oracle import bfs_solution

        self.policy = ScriptedPolicy(bfs_solution(spec, registry=self.registry) or ())


class SearchActor:
    """Searches from the current state at every real step and plays the most visited root action.

    The search runs on its own environment handle restored to the real env's
    snapshot. When the root cannot be expanded the policy's greedy action is played.
    """

    def __init__(self, policy, critic, search_config, search_env, summarizer=identity_summarizer):
        self.policy = policy
        self.critic = critic
        self.search_config = search_config
        self.search_env = search_env
        self.summarizer = summarizer
        self.spec = None
        self.searches = 0

    def reset(self, spec):
        self.policy.reset()
        self.spec = spec
        self.searches = 0

    def act(self, env, state, candidates):
        config = replace(self.search_config, seed=derive_seed(self.search_config.seed, self.spec.task_id, state.depth))
        root = (state, env.snapshot(), tuple(candidates))
        tree = run_search(self.spec, self.policy, self.critic, self.search_env, config, self.summarizer, root=root)
        self.searches += 1
        if not tree.root.edges:
            logger.debug(f"Search at depth {state.depth} could not expand; playing the greedy action")
            return self.policy.greedy(state, candidates), None
        return best_root_action(tree), None


def run_episode(env, spec, actor, index=0, summarizer=identity_summarizer):
    """Play one episode to termination (completion or the env's step cap).

    Returns:
        EpisodeResult: Outcome, discounted-free reward and the env steps used (no-ops included).
    """
    observation, candidates, _ = env.reset(spec)
    state = init_state(spec.instruction, observation)
    actor.reset(spec)
    actions = []
    while True:
        action, summary = actor.act(env, state, candidates)
        result = env.step(action)
        actions.append(action.text)
        state = advance(state, action, result.observation, summarizer, summary)
        if result.terminal:
            outcome = result.outcome
            break
        candidates = result.candidates
    return EpisodeResult(
        index,
        spec.task_id,
        spec.family.value,
        outcome.status.value,
        outcome_reward(outcome),
        outcome.steps_used,
        tuple(actions),
    )


def evaluate_actor(env, suite, actor, families=None, progress=False):
    """Sequentially evaluate `actor` on every task of `suite` with one env handle."""
    results = [
        run_episode(env, spec, actor, index)
        for index, spec in enumerate(tqdm(suite, desc="Evaluating Episodes", disable=not progress, leave=False))
    ]
    return summarize_episodes(results, families)


class ActorFactory:
    """Builds the actor named by `config.eval.actor` (greedy, search, scripted or random)."""

    def __init__(self, config, params=None):
        self.config = config
        self.params = params

    def create_actor(self):
        kind = self.config.eval.actor
        if kind == "greedy":
            return PolicyActor(PolicyFactory(self.config).create_policy(self.params))
        elif kind == "search":
            factory = PolicyFactory(self.config)
            search_env = make_env(self.config.env.name, self.config)
            return SearchActor(
                factory.create_policy(self.params),
                factory.create_critic(),
                SearchConfig.from_config(self.config.search),
                search_env,
            )
        elif kind == "scripted":
            return ScriptedActor(layout_registry(self.config))
        elif kind == "random":
            return RandomActor(seed=self.config.run.seed)
        raise ConfigurationError(f"Unknown actor: {kind}")


class EvaluatorManager:
    """Runs evaluation episodes over a task suite, sequentially or with a pool of workers.

    Results are merged by task index, so reports do not depend on the worker count.
    """

    def __init__(self, config, suite, output_dir=None):
        """Initialize the EvaluatorManager.

        Args:
            config (omegaconf.DictConfig): Configuration with `env` and `eval` sections.
            suite (list[TaskSpec]): Held-out tasks.
            output_dir (str, optional): Directory for per-episode JSON logs.
        """
        self.config = config
        self.tasks = list(enumerate(suite))
        self.output_dir = output_dir
        self.num_workers = config.eval.num_workers

    def run(self, actor_factory):
        """Run the evaluation using the specified actor factory.

        Returns:
            list[EpisodeResult]: Results in task order.
        """
        if self.num_workers > 1 and len(self.tasks) > 1:
            results = self._run_parallel(actor_factory)
        else:
            results = self._run_sequential(actor_factory)
        results.sort(key=lambda r: r.index)
        if self.output_dir is not None:
            for result in results:
                name = result.task_id.replace("/", "_")
                write_json(Path(self.output_dir) / "episodes" / f"{result.index:04d}_{name}.json", result.to_dict())
        return results

    def _run_sequential(self, actor_factory):
        env = make_env(self.config.env.name, self.config)
        actor = actor_factory.create_actor()
        results = []
        with tqdm(total=len(self.tasks), desc="Evaluating Episodes", position=0) as pbar:
            for index, spec in self.tasks:
                results.append(self._episode(env, spec, actor, index))
                pbar.update(1)
        return results

    def _episode(self, env, spec, actor, index):
        if self.config.env.name == "external":
            env = make_env(self.config.env.name, self.config, spec)
        return run_episode(env, spec, actor, index)

    def _run_parallel(self, actor_factory):
        ctx = multiprocessing.get_context("fork")
        task_queue = ctx.Queue()
        results_queue = ctx.Queue()

        # Initially fill the task queue with tasks up to the number of workers
        for item in self.tasks[: self.num_workers]:
            task_queue.put(item)

        pbar = tqdm(total=len(self.tasks), position=0, leave=True)
        processes = []
        for position in range(self.num_workers):
            p = ctx.Process(target=self._worker, args=(task_queue, results_queue, actor_factory, position))
            processes.append(p)
            p.start()

        results: List[EpisodeResult] = []
        errors = []
        tasks_completed = 0
        tasks_queued = self.num_workers
        total_tasks = len(self.tasks)
        while tasks_completed < total_tasks:
            result = results_queue.get()
            if isinstance(result, dict):
                logger.error(f"Error in task {result['task']} processed by {result['process_num']}: {result['error']}")
                logger.error(f"Traceback:\n{result['traceback']}")
                errors.append(result)
            else:
                results.append(result)
            tasks_completed += 1
            pbar.update(1)

            # Queue another task if there are any left
            if tasks_queued < total_tasks:
                task_queue.put(self.tasks[tasks_queued])
                tasks_queued += 1

        # Signal workers to stop
        for _ in range(self.num_workers):
            task_queue.put(None)
        for p in processes:
            p.join()
        pbar.close()

        if errors:
            raise RuntimeError(f"{len(errors)} evaluation episodes failed; first error: {errors[0]['error']}")
        return results

    def _worker(self, task_queue, results_queue, actor_factory, position):
        env = make_env(self.config.env.name, self.config)
        actor = actor_factory.create_actor()
        process_num = multiprocessing.current_process().name
        while True:
            item = task_queue.get()
            if item is None:
                break
            index, spec = item
            try:
                results_queue.put(self._episode(env, spec, actor, index))
            except Exception as e:
                tb = traceback.format_exc()
                logger.error(f"Error in worker processing task {spec.task_id}: {e}\n{tb}")
                results_queue.put({"task": spec.task_id, "error": str(e), "traceback": tb, "process_num": process_num})
