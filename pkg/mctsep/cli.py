"""Command surface: `mctsep command=<name> [dotted.overrides ...]`.

Every command reads the composed Hydra config, validates it into a RunConfig,
writes its artifacts under `run.output_dir` and returns a process exit code.
"""

import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Tuple

import hydra
from omegaconf import DictConfig, OmegaConf

from mctsep.agents import PolicyFactory, PolicyParams, SoftmaxPolicy
from mctsep.dataset import (
    expert_trajectory,
    manifest_path,
    merge_buffers,
    read_jsonl,
    read_manifest,
    tree_fingerprint,
    write_jsonl,
)
from mctsep.environments import make_env, make_suite, parse_task_id
from mctsep.environments.core import Family, OutcomeStatus
from mctsep.environments.gridhouse import layout_registry
from mctsep.evaluator import (
    ActorFactory,
    EvaluatorManager,
    PolicyActor,
    evaluate_actor,
    summarize_episodes,
    write_report,
)
from mctsep.exceptions import ConfigValidationError, MctsepError
from mctsep.oracle import bfs_solution
from mctsep.search import SearchConfig, best_root_action, run_search
from mctsep.training import (
    Buffers,
    IterationReport,
    TrainConfig,
    collect_from_suite,
    load_checkpoint,
    run_iteration,
    save_checkpoint,
    train_phase,
    warmup_expert,
)
from mctsep.utils import (
    atomic_write_text,
    canonical_json,
    check_hashes,
    config_hash,
    created_at,
    print_summary_table,
    read_json,
    setup_logging,
    sha256_hex,
    write_json,
)

logger = logging.getLogger(__name__)

ACTORS = ("greedy", "search", "scripted", "random")
FILE_ERROR_EXIT_CODE = 3


def _seed_range(config, field):
    value = OmegaConf.select(config, f"suite.{field}")
    if value is None or len(value) != 2 or not 0 <= int(value[0]) < int(value[1]):
        raise ConfigValidationError(f"suite.{field}", f"must be [start, stop) with 0 <= start < stop (got {value})")
    return int(value[0]), int(value[1])


@dataclass(frozen=True)
class RunConfig:
    """Validated view of the whole run configuration."""

    env_name: str
    max_steps: int
    search: SearchConfig
    train: TrainConfig
    layouts: Tuple[str, ...]
    families: Tuple[str, ...]
    train_seeds: Tuple[int, int]
    eval_seeds: Tuple[int, int]
    policy_endpoint: str
    output_dir: str
    seed: int
    config_hash: str

    @property
    def out(self):
        return Path(self.output_dir)

    @classmethod
    def from_config(cls, config):
        """Validate `config`; every failure names the offending dotted field."""
        if config.env.name not in ("gridhouse", "external"):
            raise ConfigValidationError("env.name", f"must be 'gridhouse' or 'external' (got {config.env.name!r})")
        if int(config.env.max_steps) < 1:
            raise ConfigValidationError("env.max_steps", "must be at least 1")
        if int(config.run.seed) < 0:
            raise ConfigValidationError("run.seed", "must be unsigned")
        for family in config.suite.families:
            if family not in {f.value for f in Family}:
                raise ConfigValidationError("suite.families", f"unknown family {family!r}")
        if config.env.name == "gridhouse":
            registry = layout_registry(config)
            for layout_id in config.suite.layouts:
                if layout_id not in registry:
                    raise ConfigValidationError("suite.layouts", f"unknown layout {layout_id!r}")
        train_seeds, eval_seeds = _seed_range(config, "train_seeds"), _seed_range(config, "eval_seeds")
        if train_seeds[0] < eval_seeds[1] and eval_seeds[0] < train_seeds[1]:
            raise ConfigValidationError("suite.eval_seeds", "held-out seeds overlap the training seeds")
        if config.datasets.epsilon < 0:
            raise ConfigValidationError("datasets.epsilon", "must be non-negative")
        if config.datasets.n_min < 0:
            raise ConfigValidationError("datasets.n_min", "must be non-negative")
        if config.loop.iterations < 1:
            raise ConfigValidationError("loop.iterations", "must be at least 1")
        if config.eval.num_workers < 1:
            raise ConfigValidationError("eval.num_workers", "must be at least 1")
        if config.eval.actor not in ACTORS:
            raise ConfigValidationError("eval.actor", f"must be one of {ACTORS} (got {config.eval.actor!r})")
        return cls(
            env_name=config.env.name,
            max_steps=int(config.env.max_steps),
            search=SearchConfig.from_config(config.search),
            train=TrainConfig.from_config(config.train),
            layouts=tuple(config.suite.layouts),
            families=tuple(config.suite.families),
            train_seeds=train_seeds,
            eval_seeds=eval_seeds,
            policy_endpoint=config.client.get("endpoint"),
            output_dir=str(config.run.output_dir),
            seed=int(config.run.seed),
            config_hash=config_hash(config),
        )


def _registry(config):
    return layout_registry(config) if config.env.name == "gridhouse" else None


def training_suite(config, rc):
    return make_suite(rc.families, range(*rc.train_seeds), rc.layouts, registry=_registry(config))


def eval_suite(config, rc):
    return make_suite(rc.families, range(*rc.eval_seeds), rc.layouts, registry=_registry(config))


def _load_params(config, path=None):
    """(params, config hash recorded with them) from a checkpoint, or zero weights."""
    path = path or config.policy.get("checkpoint")
    if not path:
        return PolicyParams.zeros(config.policy.feature_dim), None
    params, meta = load_checkpoint(path)
    logger.info(f"Loaded policy checkpoint {path}")
    return params, meta.get("config_hash")


def _write_artifact(path, obj, rc, kind, timestamp):
    """JSON artifact plus a manifest carrying its digest and the run-config hash."""
    text = canonical_json(obj) + "\n"
    atomic_write_text(path, text)
    write_json(
        manifest_path(path),
        {"kind": kind, "sha256": sha256_hex(text), "config_hash": rc.config_hash, "created_at": timestamp},
    )


def _recorded_hash(path):
    """Config hash from the manifest next to `path`; None for hand-made files without one."""
    if not manifest_path(path).exists():
        logger.warning(f"{path} has no manifest; skipping its config-hash check")
        return None
    return read_manifest(path).config_hash


def _dataset_paths(config, rc):
    root = rc.out / "datasets"
    return (
        Path(config.datasets.trajectories or root / "trajectories.jsonl"),
        Path(config.datasets.pairs or root / "pairs.jsonl"),
        Path(config.datasets.expert or root / "expert.jsonl"),
    )


def cmd_search(config, rc, task_id=None):
    """Search one task and write its tree dump."""
    spec = parse_task_id(task_id or config.suite.task_id, registry=_registry(config))
    params, _ = _load_params(config)
    factory = PolicyFactory(config)
    env = make_env(rc.env_name, config, spec)
    tree = run_search(spec, factory.create_policy(params), factory.create_critic(), env, rc.search)
    path = rc.out / "trees" / f"{spec.task_id.replace('/', '_')}.json"
    _write_artifact(path, {**tree.to_dict(), "config_hash": rc.config_hash}, rc, "tree", created_at(config))
    completed = sum(1 for node in tree.nodes if node.terminal and node.outcome.status == OutcomeStatus.COMPLETED)
    best = best_root_action(tree).text if tree.root.edges else None
    print(f"Searched {spec.task_id}: {len(tree.nodes)} nodes, {completed} completed leaves, best root action: {best}")
    return path


def cmd_collect(config, rc):
    """Search the training suite and write the success and preference datasets."""
    suite = training_suite(config, rc)
    params, _ = _load_params(config)
    env = make_env(rc.env_name, config, suite[0])
    critic = PolicyFactory(config).create_critic()
    trajectories, pairs, trees = collect_from_suite(
        params,
        suite,
        rc.search,
        env,
        critic,
        0,
        config.datasets.epsilon,
        config.datasets.n_min,
        config.datasets.per_node_cap,
    )
    if not trajectories:
        logger.warning(f"No successful trajectories across {len(suite)} tasks")
    trajectories = merge_buffers([], trajectories, config.loop.buffer_cap)
    pairs = merge_buffers([], pairs, config.loop.pair_cap)
    tree_ids = [tree_fingerprint(tree) for tree in trees]
    trajectories_path, pairs_path, _ = _dataset_paths(config, rc)
    stamp = created_at(config)
    write_jsonl(trajectories, trajectories_path, "trajectory", rc.config_hash, tree_ids, stamp)
    write_jsonl(pairs, pairs_path, "pair", rc.config_hash, tree_ids, stamp)
    print(f"Collected {len(trajectories)} trajectories and {len(pairs)} preference pairs from {len(suite)} tasks")
    return trajectories_path, pairs_path


def expert_dataset(config, rc, path):
    """Read the expert file, generating oracle solutions for it first when it does not exist."""
    if path.exists():
        return read_jsonl(path)
    registry = _registry(config)
    env = make_env("gridhouse", config)
    experts = []
    # Seed-major order spreads the experts over every layout and family.
    for spec in sorted(training_suite(config, rc), key=lambda s: s.seed):
        if len(experts) >= config.loop.expert_count:
            break
        plan = bfs_solution(spec, registry=registry)
        if plan is None or len(plan) > rc.max_steps:
            continue
        experts.append(expert_trajectory(env, spec, plan))
    write_jsonl(experts, path, "trajectory", rc.config_hash, (), created_at(config))
    return experts


def cmd_warmup(config, rc):
    params, params_hash = _load_params(config)
    _, _, expert_path = _dataset_paths(config, rc)
    experts = expert_dataset(config, rc, expert_path)
    check_hashes({"policy checkpoint": params_hash, "expert data": _recorded_hash(expert_path)})
    params = warmup_expert(params, experts, rc.train)
    path = rc.out / "checkpoints" / "warmup.json"
    save_checkpoint(path, params, rc.train, rc.config_hash, phase="warmup")
    return path


def cmd_train(config, rc, phase):
    """Run one SFT or DPO phase over the collected datasets."""
    params, params_hash = _load_params(config)
    trajectories_path, pairs_path, _ = _dataset_paths(config, rc)
    data_path = trajectories_path if phase == "sft" else pairs_path
    data = read_jsonl(data_path)
    check_hashes({"policy checkpoint": params_hash, "dataset": _recorded_hash(data_path)})
    if data:
        params, curve = train_phase(params, data, rc.train, phase, progress=True)
        if curve:
            logger.info(f"{phase} over {len(data)} records: loss {curve[0]:.4f} -> {curve[-1]:.4f}")
    else:
        logger.warning(f"{data_path} is empty; parameters unchanged")
    path = rc.out / "checkpoints" / f"{phase}.json"
    save_checkpoint(path, params, rc.train, rc.config_hash, phase=phase)
    return path


def _loop_paths(rc):
    root = rc.out / "loop"
    return root / "state.json", root / "trajectories.jsonl", root / "pairs.jsonl", root / "reports.jsonl"


def cmd_loop(config, rc):
    """Iterate search, SFT and DPO, checkpointing after every iteration.

    With `run.resume` the loop continues after the last completed iteration,
    reloading its checkpoint and buffers.
    """
    state_path, trajectories_path, pairs_path, reports_path = _loop_paths(rc)
    suite, held_out = training_suite(config, rc), eval_suite(config, rc)
    env = make_env(rc.env_name, config, suite[0])
    critic = PolicyFactory(config).create_critic()
    loop_options = OmegaConf.to_container(config.loop, resolve=True)
    dataset_options = OmegaConf.to_container(config.datasets, resolve=True)

    if config.run.resume and state_path.exists():
        state = read_json(state_path)
        check_hashes({"loop state": state["config_hash"], "current config": rc.config_hash})
        params, _ = load_checkpoint(state["checkpoint"])
        buffers = Buffers(read_jsonl(trajectories_path), read_jsonl(pairs_path))
        reports = [IterationReport.from_dict(r) for r in state["reports"]]
        start = state["completed"]
        logger.info(f"Resuming loop after iteration {start - 1}")
    else:
        params, _ = _load_params(config)
        if config.loop.warmup:
            _, _, expert_path = _dataset_paths(config, rc)
            params = warmup_expert(params, expert_dataset(config, rc, expert_path), rc.train)
            save_checkpoint(rc.out / "checkpoints" / "warmup.json", params, rc.train, rc.config_hash, phase="warmup")
        baseline = evaluate_actor(env, held_out, PolicyActor(SoftmaxPolicy(params)), rc.families)
        write_report(rc.out / "reports" / "baseline.json", replace(baseline, actor="greedy", config_hash=rc.config_hash))
        buffers, reports, start = Buffers(), [], 0

    for iteration in range(start, config.loop.iterations):
        params, report, buffers = run_iteration(
            params,
            suite,
            rc.search,
            rc.train,
            env,
            critic,
            held_out,
            buffers,
            iteration,
            loop_options,
            dataset_options,
        )
        reports.append(report)
        checkpoint = rc.out / "checkpoints" / f"iteration_{iteration:03d}.json"
        save_checkpoint(checkpoint, params, rc.train, rc.config_hash, iteration=iteration, phase="loop")
        stamp = created_at(config)
        write_jsonl(buffers.trajectories, trajectories_path, "trajectory", rc.config_hash, timestamp=stamp)
        write_jsonl(buffers.pairs, pairs_path, "pair", rc.config_hash, timestamp=stamp)
        atomic_write_text(reports_path, "".join(canonical_json(r.to_dict()) + "\n" for r in reports))
        write_json(
            state_path,
            {
                "completed": iteration + 1,
                "checkpoint": str(checkpoint),
                "config_hash": rc.config_hash,
                "reports": [r.to_dict() for r in reports],
            },
        )
    final = rc.out / "checkpoints" / "final.json"
    save_checkpoint(final, params, rc.train, rc.config_hash, iteration=config.loop.iterations - 1, phase="loop")
    for report in reports:
        print(
            f"Iteration {report.iteration}: |B|={report.trajectories} |P|={report.pairs} "
            f"success={report.success_rate:.3f} steps={report.mean_steps:.2f}"
        )
    return final, reports


def cmd_eval(config, rc):
    """Evaluate the configured actor on the held-out seeds."""
    params, _ = _load_params(config, config.eval.get("checkpoint"))
    suite = eval_suite(config, rc)
    manager = EvaluatorManager(config, suite, output_dir=rc.out / "eval")
    results = manager.run(ActorFactory(config, params))
    report = summarize_episodes(results, rc.families, config.eval.actor, rc.config_hash)
    write_report(rc.out / "eval" / "report.json", report)
    print_summary_table(report)
    return report


def cmd_dump_config(config, rc):
    print(OmegaConf.to_yaml(config, resolve=True))
    print(f"# config hash: {rc.config_hash}")
    return rc.config_hash


def cmd_serve_env(config, rc):
    """Serve GridHouse over the NDJSON protocol until interrupted."""
    from mctsep.environments.external import serve_env

    host, port = config.env.serve_host, int(config.env.serve_port)
    logger.info(f"Serving GridHouse on {host}:{port}")
    return serve_env(host, port, lambda: make_env("gridhouse", config))


COMMANDS = {
    "search": cmd_search,
    "collect": cmd_collect,
    "warmup": cmd_warmup,
    "train-sft": lambda config, rc: cmd_train(config, rc, "sft"),
    "train-dpo": lambda config, rc: cmd_train(config, rc, "dpo"),
    "loop": cmd_loop,
    "eval": cmd_eval,
    "dump-config": cmd_dump_config,
    "serve-env": cmd_serve_env,
}


def run(config, configure_logging=True):
    """Validate the config, run `config.command` and return the process exit code."""
    try:
        if configure_logging:
            setup_logging(config.run.output_dir)
        command = COMMANDS.get(config.command)
        if command is None:
            raise ConfigValidationError("command", f"unknown command {config.command!r}; choose from {sorted(COMMANDS)}")
        rc = RunConfig.from_config(config)
        command(config, rc)
        return 0
    except MctsepError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return FILE_ERROR_EXIT_CODE
    except Exception:
        logger.exception("Unexpected error")
        return 1


@hydra.main(config_path="config", config_name="config", version_base=None)
def entry(config: DictConfig):
    sys.exit(run(config))
