import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

from mctsep.environments.core import Action, OutcomeStatus, TaskSpec, outcome_reward
from mctsep.exceptions import DataError, DatasetFormatError, DatasetParseError, ReplayDivergenceError
from mctsep.prompt_builder import AgentState, PromptTemplate, advance, identity_summarizer, init_state, render_context
from mctsep.utils import atomic_write_text, canonical_json, created_at, read_json, sha256_hex, write_json

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
REWARDS = (0.0, 0.5, 1.0)


def default_template():
    return PromptTemplate.builtin("text_only")


@dataclass(frozen=True)
class TrajectoryStep:
    """One decision: the rendered context, the state it came from and the action taken."""

    context: str
    state: dict
    candidates: Tuple[str, ...]
    action: str
    summary: str
    observation: str

    def agent_state(self):
        return AgentState.from_dict(self.state)

    def candidate_actions(self):
        return tuple(Action.parse(text) for text in self.candidates)

    def to_dict(self):
        return {
            "context": self.context,
            "state": self.state,
            "candidates": list(self.candidates),
            "action": self.action,
            "summary": self.summary,
            "observation": self.observation,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            data["context"],
            data["state"],
            tuple(data["candidates"]),
            data["action"],
            data["summary"],
            data["observation"],
        )


@dataclass(frozen=True)
class Trajectory:
    task: TaskSpec
    steps: Tuple[TrajectoryStep, ...]
    reward: float
    source: str = "search"
    tree_id: Optional[str] = None

    def __post_init__(self):
        if self.reward not in REWARDS:
            raise DatasetFormatError(f"trajectory reward {self.reward} is not one of {REWARDS}")
        if not self.steps:
            raise DatasetFormatError(f"trajectory for {self.task.task_id} has no steps")
        if self.source not in ("expert", "search"):
            raise DatasetFormatError(f"unknown trajectory source {self.source!r}")

    @property
    def instruction(self):
        return self.task.instruction

    @property
    def actions(self):
        return tuple(step.action for step in self.steps)

    @property
    def dedup_key(self):
        return sha256_hex(canonical_json([self.task.task_id, list(self.actions)]))

    def to_dict(self):
        return {
            "version": DATASET_FORMAT_VERSION,
            "kind": "trajectory",
            "task": self.task.to_dict(),
            "instruction": self.instruction,
            "steps": [step.to_dict() for step in self.steps],
            "reward": self.reward,
            "source": self.source,
            "ids": {"task": self.task.task_id, "tree": self.tree_id},
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            TaskSpec.from_dict(data["task"]),
            tuple(TrajectoryStep.from_dict(step) for step in data["steps"]),
            float(data["reward"]),
            data["source"],
            data.get("ids", {}).get("tree"),
        )


@dataclass(frozen=True)
class PreferencePair:
    context: str
    state: dict
    candidates: Tuple[str, ...]
    winner: str
    loser: str
    q_w: float
    q_l: float
    n_w: int
    n_l: int
    task_id: str = ""
    tree_id: Optional[str] = None

    def __post_init__(self):
        if self.winner == self.loser:
            raise DatasetFormatError(f"preference pair compares {self.winner!r} with itself")

    def agent_state(self):
        return AgentState.from_dict(self.state)

    def candidate_actions(self):
        return tuple(Action.parse(text) for text in self.candidates)

    @property
    def dedup_key(self):
        return sha256_hex(canonical_json([self.task_id, self.context, self.winner, self.loser]))

    def to_dict(self):
        return {
            "version": DATASET_FORMAT_VERSION,
            "kind": "pair",
            "context": self.context,
            "state": self.state,
            "candidates": list(self.candidates),
            "winner": self.winner,
            "loser": self.loser,
            "q_w": self.q_w,
            "q_l": self.q_l,
            "n_w": self.n_w,
            "n_l": self.n_l,
            "ids": {"task": self.task_id, "tree": self.tree_id},
        }

    @classmethod
    def from_dict(cls, data):
        ids = data.get("ids", {})
        return cls(
            data["context"],
            data["state"],
            tuple(data["candidates"]),
            data["winner"],
            data["loser"],
            float(data["q_w"]),
            float(data["q_l"]),
            int(data["n_w"]),
            int(data["n_l"]),
            ids.get("task", ""),
            ids.get("tree"),
        )


@dataclass(frozen=True)
class DatasetManifest:
    kind: str
    count: int
    sha256: str
    config_hash: Optional[str] = None
    tree_ids: Tuple[str, ...] = field(default=())
    created_at: str = ""
    version: int = DATASET_FORMAT_VERSION

    def to_dict(self):
        return {
            "kind": self.kind,
            "count": self.count,
            "sha256": self.sha256,
            "config_hash": self.config_hash,
            "tree_ids": list(self.tree_ids),
            "created_at": self.created_at,
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("version") != DATASET_FORMAT_VERSION:
            raise DatasetFormatError(f"manifest version {data.get('version')} is not {DATASET_FORMAT_VERSION}")
        return cls(
            data["kind"],
            int(data["count"]),
            data["sha256"],
            data.get("config_hash"),
            tuple(data.get("tree_ids", ())),
            data.get("created_at", ""),
            data["version"],
        )


_KINDS = {"trajectory": Trajectory, "pair": PreferencePair}


def tree_fingerprint(tree):
    return sha256_hex(canonical_json(tree.to_dict()))[:16]


def _step(node, edge, template):
    child = edge.child
    summary = child.state.history[-1][1] if child is not None else identity_summarizer(node.state.current_observation)
    return TrajectoryStep(
        context=render_context(node.state, template, node.candidates),
        state=node.state.to_dict(),
        candidates=tuple(a.text for a in node.candidates),
        action=edge.action.text,
        summary=summary,
        observation=node.state.current_observation.text,
    )


def extract_success(tree, template=None):
    """One trajectory per distinct root-to-terminal path ending in a completed outcome.

    Args:
        tree (SearchTree): A finished (or reloaded) search tree.
        template (PromptTemplate, optional): Template used to render step contexts.

    Returns:
        list[Trajectory]: In depth-first, left-to-right path order.
    """
    template = template or default_template()
    tree_id = tree_fingerprint(tree)
    trajectories, seen = [], set()
    for path, leaf in tree.iter_paths():
        if not path or not leaf.terminal or leaf.outcome is None:
            continue
        if leaf.outcome.status != OutcomeStatus.COMPLETED:
            continue
        actions = tuple(edge.action.text for _, edge in path)
        if actions in seen:
            continue
        seen.add(actions)
        steps = tuple(_step(node, edge, template) for node, edge in path)
        trajectories.append(Trajectory(tree.task, steps, 1.0, "search", tree_id))
    return trajectories


def extract_preferences(tree, epsilon=0.1, n_min=2, per_node_cap=6, template=None):
    """Ordered (winner, loser) pairs from every branch node of the tree.

    A pair qualifies when q_w - q_l > epsilon and both edges have at least
    `n_min` visits. At most `per_node_cap` pairs are kept per node, largest
    margins first; `None` keeps them all.
    """
    template = template or default_template()
    tree_id = tree_fingerprint(tree)
    pairs = []
    for node in tree.nodes:
        edges = node.edges
        if len(edges) < 2:
            continue
        qualifying = []
        for i, winner in enumerate(edges):
            for j, loser in enumerate(edges):
                if i == j or winner.visit_count < n_min or loser.visit_count < n_min:
                    continue
                if winner.q_value - loser.q_value > epsilon:
                    qualifying.append((winner.q_value - loser.q_value, i, j))
        qualifying.sort(key=lambda item: (-item[0], item[1], item[2]))
        if per_node_cap is not None:
            qualifying = qualifying[:per_node_cap]
        if not qualifying:
            continue
        context = render_context(node.state, template, node.candidates)
        state = node.state.to_dict()
        candidates = tuple(a.text for a in node.candidates)
        for _, i, j in qualifying:
            winner, loser = edges[i], edges[j]
            pairs.append(
                PreferencePair(
                    context,
                    state,
                    candidates,
                    winner.action.text,
                    loser.action.text,
                    winner.q_value,
                    loser.q_value,
                    winner.visit_count,
                    loser.visit_count,
                    tree.task.task_id,
                    tree_id,
                )
            )
    return pairs


def manifest_path(path):
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def write_jsonl(items, path, kind=None, config_hash=None, tree_ids=(), timestamp=None):
    """Write items one canonical JSON object per line and a manifest next to them.

    Returns:
        DatasetManifest: The manifest that was written.
    """
    items = list(items)
    if kind is None:
        kind = items[0].to_dict()["kind"] if items else "trajectory"
    text = "".join(canonical_json(item.to_dict()) + "\n" for item in items)
    atomic_write_text(path, text)
    manifest = DatasetManifest(
        kind=kind,
        count=len(items),
        sha256=sha256_hex(text),
        config_hash=config_hash,
        tree_ids=tuple(sorted(set(tree_ids))),
        created_at=timestamp or created_at(),
    )
    write_json(manifest_path(path), manifest.to_dict())
    logger.info(f"Wrote {len(items)} {kind} records to {path}")
    return manifest


def read_jsonl(path):
    """Read a dataset file written by `write_jsonl`.

    Raises:
        DatasetParseError: A line is not valid JSON (including a truncated final line).
        DatasetFormatError: A record has the wrong format version or kind.
    """
    items = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetParseError(path, line_number, f"malformed JSON ({e.msg})") from e
            if not isinstance(data, dict):
                raise DatasetParseError(path, line_number, "record is not a JSON object")
            if data.get("version") != DATASET_FORMAT_VERSION:
                raise DatasetFormatError(
                    f"{path}:{line_number}: format version {data.get('version')} is not {DATASET_FORMAT_VERSION}"
                )
            kind = _KINDS.get(data.get("kind"))
            if kind is None:
                raise DatasetFormatError(f"{path}:{line_number}: unknown record kind {data.get('kind')!r}")
            try:
                items.append(kind.from_dict(data))
            except (KeyError, TypeError, ValueError) as e:
                if isinstance(e, DataError):
                    raise
                raise DatasetParseError(path, line_number, f"incomplete record ({e})") from e
    return items


def read_manifest(path):
    return DatasetManifest.from_dict(read_json(manifest_path(path)))


def merge_buffers(existing, new, cap=None):
    """Deduplicate by action-sequence hash, newest first, keeping at most `cap` items."""
    merged, seen = [], set()
    for item in list(new) + list(existing):
        key = item.dedup_key
        if key in seen:
            continue
        seen.add(key)
        merged.append(item)
    return merged if cap is None else merged[:cap]


def replay_trajectory(env, trajectory, summarizer=identity_summarizer):
    """Replay a trajectory's actions from reset and return the final Outcome.

    Raises:
        DataError: A recorded action is not among the env's candidates at that step.
        ReplayDivergenceError: An observation differs from the recorded one.
    """
    observation, candidates, _ = env.reset(trajectory.task)
    state = init_state(trajectory.instruction, observation)
    result = None
    for index, step in enumerate(trajectory.steps):
        if observation.text != step.observation:
            raise ReplayDivergenceError(index, step.observation, observation.text)
        action = Action.parse(step.action)
        if action not in candidates:
            raise DataError(f"step {index}: action {step.action!r} is not a candidate")
        result = env.step(action)
        state = advance(state, action, result.observation, summarizer)
        if state.history[-1][1] != step.summary:
            raise ReplayDivergenceError(index, step.summary, state.history[-1][1])
        observation, candidates = result.observation, result.candidates
        if result.terminal and index < len(trajectory.steps) - 1:
            raise DataError(f"step {index}: episode terminated before the trajectory ended")
    if result is not None and result.terminal:
        return result.outcome
    return env.current_outcome()


def expert_trajectory(env, spec, plan, template=None, summarizer=identity_summarizer):
    """Play a fixed plan in the env and record it as an expert trajectory."""
    template = template or default_template()
    observation, candidates, _ = env.reset(spec)
    state = init_state(spec.instruction, observation)
    steps, outcome = [], None
    for action in plan:
        if action not in candidates:
            raise DataError(f"expert plan action {action.text!r} is not a candidate for {spec.task_id}")
        result = env.step(action)
        successor = advance(state, action, result.observation, summarizer)
        steps.append(
            TrajectoryStep(
                context=render_context(state, template, candidates),
                state=state.to_dict(),
                candidates=tuple(a.text for a in candidates),
                action=action.text,
                summary=successor.history[-1][1],
                observation=state.current_observation.text,
            )
        )
        state, candidates = successor, result.candidates
        if result.terminal:
            outcome = result.outcome
            break
    if outcome is None:
        outcome = env.current_outcome()
    return Trajectory(spec, tuple(steps), outcome_reward(outcome), "expert")
