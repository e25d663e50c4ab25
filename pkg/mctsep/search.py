"""Monte-Carlo tree search over environment episodes.

Each pass selects a leaf with PUCT, asks the critic whether the leaf is worth
expanding, expands the top policy actions, rolls out from every new child and
backs the discounted outcome reward up the selected path.
"""

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Tuple

import numpy as np

from mctsep.environments.core import Action, Outcome, TaskSpec, outcome_reward
from mctsep.exceptions import AdapterError, ConfigValidationError, ContractError, DatasetFormatError, ReplayDivergenceError
from mctsep.prompt_builder import AgentState, advance, identity_summarizer, init_state

logger = logging.getLogger(__name__)

TREE_FORMAT_VERSION = 1
TIE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class SearchConfig:
    c_puct: float = 1.25
    width: int = 3
    d_max: int = 10
    simulations: int = 3
    budget: int = 200
    gamma: float = 0.95
    tau_expand: float = 0.5
    expansion_mode: str = "topk"
    rollout_mode: str = "greedy"
    seed: int = 0

    def __post_init__(self):
        checks = [
            ("c_puct", self.c_puct >= 0, "must be non-negative"),
            ("width", self.width >= 1, "must be at least 1"),
            ("d_max", self.d_max >= 1, "must be at least 1"),
            ("simulations", self.simulations >= 1, "must be at least 1"),
            ("gamma", 0.0 < self.gamma <= 1.0, "must lie in (0, 1]"),
            ("tau_expand", 0.0 <= self.tau_expand <= 1.0, "must lie in [0, 1]"),
            ("expansion_mode", self.expansion_mode in ("topk", "sample"), "must be 'topk' or 'sample'"),
            ("rollout_mode", self.rollout_mode in ("greedy", "sample"), "must be 'greedy' or 'sample'"),
            ("seed", self.seed >= 0, "must be unsigned"),
        ]
        for name, ok, message in checks:
            if not ok:
                raise ConfigValidationError(f"search.{name}", f"{message} (got {getattr(self, name)!r})")

    @classmethod
    def from_config(cls, section):
        """Build from the `search` config section; a budget below 1 is rejected here."""
        names = {f.name for f in fields(cls)}
        config = cls(**{key: section[key] for key in section if key in names})
        if config.budget < 1:
            raise ConfigValidationError("search.budget", f"must be at least 1 (got {config.budget})")
        return config

    def to_dict(self):
        return asdict(self)


@dataclass(eq=False)
class SearchEdge:
    action: Action
    prior: float
    q_value: float = 0.0
    visit_count: int = 0
    child: Optional["SearchNode"] = None


@dataclass(eq=False)
class SearchNode:
    node_id: int
    state: AgentState
    snapshot: object
    candidates: Tuple[Action, ...] = ()
    visit_count: int = 0
    value: float = 0.0
    edges: List[SearchEdge] = field(default_factory=list)
    terminal: bool = False
    outcome: Optional[Outcome] = None
    suppressed: bool = False
    capped: bool = False
    critic_score: Optional[float] = None
    diagnostic: Optional[str] = None
    rollout_return: Optional[float] = None

    @property
    def depth(self):
        return self.state.depth

    @property
    def is_leaf(self):
        return not self.edges

    def to_dict(self):
        return {
            "id": self.node_id,
            "key": self.state.key,
            "depth": self.depth,
            "state": self.state.to_dict(),
            "candidates": [a.text for a in self.candidates],
            "N": self.visit_count,
            "V": self.value,
            "terminal": self.terminal,
            "outcome": self.outcome.to_dict() if self.outcome is not None else None,
            "suppressed": self.suppressed,
            "capped": self.capped,
            "critic_score": self.critic_score,
            "diagnostic": self.diagnostic,
            "edges": [
                {
                    "action": e.action.text,
                    "prior": e.prior,
                    "Q": e.q_value,
                    "N": e.visit_count,
                    "child": e.child.node_id if e.child is not None else None,
                }
                for e in self.edges
            ],
        }


@dataclass(eq=False)
class SearchTree:
    task: TaskSpec
    root: SearchNode
    config: SearchConfig
    seed: int
    stats: Counter = field(default_factory=Counter)
    nodes: List[SearchNode] = field(default_factory=list)

    @property
    def root_depth(self):
        return self.root.depth

    def iter_paths(self):
        """Yield every root-to-leaf list of (node, edge) pairs with its leaf."""
        stack = [(self.root, [])]
        while stack:
            node, path = stack.pop()
            if node.is_leaf:
                yield path, node
                continue
            for edge in reversed(node.edges):
                if edge.child is not None:
                    stack.append((edge.child, path + [(node, edge)]))

    def to_dict(self):
        return {
            "version": TREE_FORMAT_VERSION,
            "task": self.task.to_dict(),
            "config": self.config.to_dict(),
            "seed": self.seed,
            "stats": dict(sorted(self.stats.items())),
            "nodes": [node.to_dict() for node in self.nodes],
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("version") != TREE_FORMAT_VERSION:
            raise DatasetFormatError(f"tree dump version {data.get('version')} is not {TREE_FORMAT_VERSION}")
        nodes = []
        for raw in data["nodes"]:
            nodes.append(
                SearchNode(
                    node_id=raw["id"],
                    state=AgentState.from_dict(raw["state"]),
                    snapshot=None,
                    candidates=tuple(Action.parse(text) for text in raw["candidates"]),
                    visit_count=raw["N"],
                    value=raw["V"],
                    terminal=raw["terminal"],
                    outcome=Outcome.from_dict(raw["outcome"]) if raw["outcome"] else None,
                    suppressed=raw["suppressed"],
                    capped=raw["capped"],
                    critic_score=raw["critic_score"],
                    diagnostic=raw["diagnostic"],
                )
            )
        by_id = {node.node_id: node for node in nodes}
        for raw, node in zip(data["nodes"], nodes):
            node.edges = [
                SearchEdge(
                    Action.parse(e["action"]),
                    e["prior"],
                    e["Q"],
                    e["N"],
                    by_id[e["child"]] if e["child"] is not None else None,
                )
                for e in raw["edges"]
            ]
        return cls(
            TaskSpec.from_dict(data["task"]),
            nodes[0],
            SearchConfig(**data["config"]),
            data["seed"],
            Counter(data["stats"]),
            nodes,
        )


def puct_score(node, edge, c_puct):
    return edge.q_value + c_puct * edge.prior * math.sqrt(node.visit_count) / (1 + edge.visit_count)


def puct_select(node, c_puct):
    """Index of the edge maximising Q + c·P·√N(s)/(1+N(s,a)); lowest index wins ties."""
    if not node.edges:
        raise ContractError("puct_select needs a node with at least one edge")
    best_index, best_score = 0, puct_score(node, node.edges[0], c_puct)
    for index in range(1, len(node.edges)):
        score = puct_score(node, node.edges[index], c_puct)
        if score > best_score:
            best_index, best_score = index, score
    return best_index


def backup(path, leaf_return, gamma):
    """Propagate a rollout return from the leaf to the root.

    `leaf_return` is the return seen from the leaf (the child of the last
    edge). Each edge's Q is the running mean of the returns seen from its
    child; the return is discounted once per edge on the way up.
    """
    if not path:
        raise ContractError("backup needs a non-empty path")
    G = leaf_return
    leaf = path[-1][1].child
    if leaf is not None:
        leaf.visit_count += 1
        leaf.value += (G - leaf.value) / leaf.visit_count
    for node, edge in reversed(path):
        edge.visit_count += 1
        edge.q_value += (G - edge.q_value) / edge.visit_count
        G = gamma * G
        node.visit_count += 1
        node.value += (G - node.value) / node.visit_count


def best_root_action(tree):
    """Most visited root action; ties go to higher Q, then the lower edge index."""
    edges = tree.root.edges
    if not edges:
        raise ContractError("the root has no edges")
    best = max(range(len(edges)), key=lambda i: (edges[i].visit_count, edges[i].q_value, -i))
    return edges[best].action


def tied_maxima(probabilities):
    """Indices whose probability equals the maximum up to float noise."""
    probabilities = np.asarray(probabilities)
    return np.flatnonzero(probabilities >= probabilities.max() - TIE_TOLERANCE)


def select_actions(distribution, width, mode, rng):
    """Candidate indices to expand: top-`width` by probability, or a seeded draw without replacement.

    Equal probabilities in topk mode are ordered by a seeded permutation so a
    flat policy does not always expand the first candidates it lists.
    """
    probabilities = np.asarray(distribution.probabilities)
    n = len(probabilities)
    k = min(width, n)
    if mode == "sample":
        with np.errstate(divide="ignore"):
            keys = np.log(probabilities) + rng.gumbel(size=n)
        order = sorted(range(n), key=lambda i: (-keys[i], i))
    else:
        rank = rng.permutation(n)
        rounded = np.round(probabilities, 12)
        order = sorted(range(n), key=lambda i: (-rounded[i], rank[i]))
    return sorted(order[:k])


class TreeSearch:
    """Runs search passes for one task against one environment handle."""

    def __init__(self, policy, critic, env, config, summarizer=identity_summarizer):
        self.policy = policy
        self.critic = critic
        self.env = env
        self.config = config
        self.summarizer = summarizer
        self.rng = np.random.default_rng(config.seed)
        self.tree = None

    def _new_node(self, state, snapshot, candidates, terminal=False, outcome=None):
        node = SearchNode(len(self.tree.nodes), state, snapshot, tuple(candidates), terminal=terminal, outcome=outcome)
        self.tree.nodes.append(node)
        return node

    def start(self, spec, root=None):
        """Create the tree at the initial state of `spec`, or at `root` = (state, snapshot, candidates)."""
        if root is None:
            observation, candidates, snapshot = self.env.reset(spec)
            root = (init_state(spec.instruction, observation), snapshot, candidates)
        self.tree = SearchTree(spec, None, self.config, self.config.seed)
        root = self._new_node(*root)
        # One visit on creation so the priors drive the first selection.
        root.visit_count = 1
        self.tree.root = root
        return self.tree

    def gate(self, node):
        try:
            value = self.critic.score(node.state).value
        except AdapterError as e:
            logger.warning(f"Critic failed on node {node.node_id}, treating its score as 0: {e}")
            self.tree.stats["critic_failures"] += 1
            value = 0.0
        node.critic_score = value
        return value

    def expand(self, node):
        """Create up to `width` edges under `node`, stepping a restored env for each child."""
        if node.terminal or not node.is_leaf:
            raise ContractError("expand needs a non-terminal leaf")
        distribution = self.policy.distribution(node.state, node.candidates)
        chosen = select_actions(distribution, self.config.width, self.config.expansion_mode, self.rng)
        total = float(sum(distribution.probabilities[i] for i in chosen))
        edges = []
        try:
            for i in chosen:
                action = distribution.actions[i]
                self.env.restore(node.snapshot)
                result = self.env.step(action)
                child_state = advance(node.state, action, result.observation, self.summarizer)
                child = self._new_node(
                    child_state,
                    self.env.snapshot(),
                    result.candidates,
                    terminal=result.terminal,
                    outcome=result.outcome,
                )
                prior = float(distribution.probabilities[i]) / total if total > 0 else 1.0 / len(chosen)
                edges.append(SearchEdge(action, prior, child=child))
        except ReplayDivergenceError as e:
            logger.error(f"Aborting expansion of node {node.node_id}: {e}")
            node.diagnostic = str(e)
            node.suppressed = True
            self.tree.stats["divergences"] += 1
            return []
        node.edges = edges
        self.tree.stats["expansions"] += 1
        return edges

    def simulate(self, node):
        """Discounted outcome reward of a rollout from `node` to a terminal state or d_max."""
        if node.terminal:
            return outcome_reward(node.outcome)
        greedy = self.config.rollout_mode == "greedy"
        if greedy and node.rollout_return is not None:
            self.tree.stats["rollout_cache_hits"] += 1
            return node.rollout_return
        self.tree.stats["rollouts"] += 1
        self.env.restore(node.snapshot)
        state, candidates, k = node.state, node.candidates, 0
        reward = None
        tie_broken = False
        while state.depth - self.tree.root_depth < self.config.d_max:
            if greedy:
                distribution = self.policy.distribution(state, candidates)
                best = tied_maxima(distribution.probabilities)
                if len(best) > 1:
                    tie_broken = True
                    action = distribution.actions[int(self.rng.choice(best))]
                else:
                    action = distribution.actions[int(best[0])]
            else:
                action = self.policy.sample(state, candidates, self.rng)
            result = self.env.step(action)
            state = advance(state, action, result.observation, self.summarizer)
            k += 1
            if result.terminal:
                reward = outcome_reward(result.outcome)
                break
            candidates = result.candidates
        if reward is None:
            reward = outcome_reward(self.env.current_outcome())
        G = self.config.gamma**k * reward
        # Cached only when every step was a strict argmax.
        if greedy and not tie_broken:
            node.rollout_return = G
        return G

    def run_pass(self):
        """One selection/expansion/simulation/backup pass; False when the root cannot grow."""
        node, path = self.tree.root, []
        while not node.is_leaf:
            edge = node.edges[puct_select(node, self.config.c_puct)]
            path.append((node, edge))
            node = edge.child

        if node.terminal:
            self.tree.stats["terminal_hits"] += 1
            if not path:
                return False
            backup(path, outcome_reward(node.outcome), self.config.gamma)
            return True

        if node.diagnostic is None and not node.suppressed and not node.capped:
            if node.depth - self.tree.root_depth >= self.config.d_max:
                node.capped = True
            elif self.gate(node) <= self.config.tau_expand:
                node.suppressed = True
                self.tree.stats["suppressed"] += 1
            else:
                edges = self.expand(node)
                for edge in edges:
                    if edge.child.terminal:
                        self.tree.stats["terminal_hits"] += 1
                    for _ in range(self.config.simulations):
                        backup(path + [(node, edge)], self.simulate(edge.child), self.config.gamma)
                if edges:
                    return True

        if not path:
            logger.warning("The root cannot be expanded; stopping the search early")
            return False
        leaf_return = 0.0 if node.diagnostic is not None else self.simulate(node)
        backup(path, leaf_return, self.config.gamma)
        return True


def run_search(spec, policy, critic, env, config, summarizer=identity_summarizer, root=None):
    """Run up to `config.budget` search passes from the initial state of `spec`.

    Args:
        spec (TaskSpec): The task to search.
        policy: Provider of action priors and rollout actions.
        critic: Scorer gating expansion.
        env: Environment handle with the reset/step/snapshot/restore contract.
        config (SearchConfig): Search hyper-parameters; `config.seed` drives sampling modes.
        root (tuple, optional): (AgentState, EnvSnapshot, candidates) of an interior state to search from.

    Returns:
        SearchTree: The finished tree.
    """
    if config.budget < 1:
        raise ContractError(f"search budget must be at least 1, got {config.budget}")
    search = TreeSearch(policy, critic, env, config, summarizer)
    tree = search.start(spec, root)
    for _ in range(config.budget):
        tree.stats["passes"] += 1
        if not search.run_pass():
            break
    logger.info(
        f"Search on {spec.task_id}: {len(tree.nodes)} nodes, {tree.stats['expansions']} expansions, "
        f"{tree.stats['terminal_hits']} terminal hits"
    )
    return tree
