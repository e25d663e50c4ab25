"""Exhaustive ground truth over GridHouse tasks.

The state graph is explored through the environment's own snapshot/restore
contract, and every expansion is cross-checked against a legal-move generator
and goal predicate written independently of the engine.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from mctsep.environments.core import Action, EnvSnapshot, Family, Observation, OutcomeStatus, Verb, object_type, parse_goal
from mctsep.environments.gridhouse import GridHouseEnv, WorldState, default_registry
from mctsep.exceptions import ContractError, GraphSizeError
from mctsep.prompt_builder import advance, identity_summarizer, init_state
from mctsep.utils import canonical_json

logger = logging.getLogger(__name__)

DEFAULT_NODE_CAP = 100_000
_UNBOUNDED_STEPS = 10**9

_TREAT = {"sinkbasin": (Verb.CLEAN, "clean"), "microwave": (Verb.HEAT, "hot"), "fridge": (Verb.COOL, "cold")}
_AFFORD = {"sinkbasin": "clean", "microwave": "heat", "fridge": "cool"}
_REWARD = {OutcomeStatus.COMPLETED: 1.0, OutcomeStatus.PARTIAL: 0.5, OutcomeStatus.INCOMPLETE: 0.0}


def reference_moves(layout, world):
    """Legal actions derived directly from the task rules, as a set."""
    moves = set()
    for receptacle in layout.receptacles:
        if receptacle.id != world.agent:
            moves.add(Action(Verb.GOTO, receptacle.id))
    if world.agent is None:
        return moves
    here = layout.receptacle_map[world.agent]
    moves.add(Action(Verb.EXAMINE, here.id))
    is_open = here.id in world.opened
    if here.openable:
        moves.add(Action(Verb.CLOSE, here.id) if is_open else Action(Verb.OPEN, here.id))
    reachable = is_open or not here.openable
    if reachable and world.held is None:
        moves.update(Action(Verb.TAKE, obj, here.id) for obj, where in world.locations if where == here.id)
    if reachable and world.held is not None:
        moves.add(Action(Verb.PUT, world.held, here.id))
    if reachable:
        moves.update(
            Action(Verb.USE, o.id) for o in layout.objects if o.lamp and o.spawn[0] == here.id and o.id not in world.lamps_on
        )
    kind = object_type(here.id)
    if kind in _TREAT and world.held is not None:
        verb, attribute = _TREAT[kind]
        if _AFFORD[kind] in layout.object_map[world.held].affords and (world.held, attribute) not in world.attributes:
            moves.add(Action(verb, world.held, here.id))
    return moves


def reference_status(layout, world, goal):
    """Goal predicate evaluated from the task rules."""
    targets = {o.id for o in layout.objects if o.portable and object_type(o.id) == goal.target}
    if goal.family == Family.LOOK_IN_LIGHT:
        lamps_here = [
            o
            for o in layout.objects
            if o.lamp and object_type(o.id) == goal.receptacle and o.spawn[0] == world.agent and o.id in world.lamps_on
        ]
        if world.held in targets:
            return OutcomeStatus.COMPLETED if lamps_here else OutcomeStatus.PARTIAL
        return OutcomeStatus.INCOMPLETE
    attribute = goal.attribute
    treated = {obj for obj in targets if attribute is None or (obj, attribute) in world.attributes}
    placed = sum(1 for obj, where in world.locations if obj in treated and object_type(where) == goal.receptacle)
    needed = 2 if goal.family == Family.PICK_TWO_PLACE else 1
    if placed >= needed:
        return OutcomeStatus.COMPLETED
    if needed == 2:
        return OutcomeStatus.PARTIAL if placed == 1 else OutcomeStatus.INCOMPLETE
    if world.held in targets or (attribute is not None and treated):
        return OutcomeStatus.PARTIAL
    return OutcomeStatus.INCOMPLETE


def canonical_key(world):
    return canonical_json(world.to_dict())


@dataclass(eq=False)
class GraphNode:
    key: str
    world: WorldState
    status: OutcomeStatus
    # (action, next key, observation) sorted by action text
    edges: List[Tuple[Action, str, Observation]] = field(default_factory=list)

    @property
    def terminal(self):
        return self.status == OutcomeStatus.COMPLETED

    def transition(self, action):
        for edge_action, target, observation in self.edges:
            if edge_action == action:
                return target, observation
        raise ContractError(f"{action.text!r} is not an out-edge of this state")


@dataclass(eq=False)
class StateGraph:
    spec: object
    root: str
    root_observation: Observation
    nodes: Dict[str, GraphNode]

    @property
    def terminals(self):
        return [key for key, node in self.nodes.items() if node.terminal]

    def to_dict(self):
        return {
            "task": self.spec.to_dict(),
            "root": self.root,
            "nodes": [
                {
                    "key": key,
                    "status": self.nodes[key].status.value,
                    "edges": [[a.text, target] for a, target, _ in self.nodes[key].edges],
                }
                for key in sorted(self.nodes)
            ],
        }

    def export(self):
        return canonical_json(self.to_dict())


def build_graph(spec, node_cap=DEFAULT_NODE_CAP, registry=None):
    """Breadth-first closure of the world states reachable in `spec`'s task.

    Completed states are terminal and not expanded. The step counter is not
    part of the state, so the graph ignores episode truncation.

    Raises:
        GraphSizeError: More than `node_cap` states are reachable.
        ContractError: The engine and the reference rules disagree on a state.
    """
    env = GridHouseEnv(registry=registry or default_registry(), max_steps=_UNBOUNDED_STEPS)
    observation, _ = env.reset(options={"task": spec})
    base = env.snapshot().payload
    layout, goal = env.layout, parse_goal(spec.instruction, spec.family)

    def snapshot_of(world):
        return EnvSnapshot(spec.layout_id, {**base, "world": world.to_dict(), "step_count": 0, "terminal": False})

    root = canonical_key(env.world)
    nodes = {root: GraphNode(root, env.world, reference_status(layout, env.world, goal))}
    frontier = deque([root])
    while frontier:
        node = nodes[frontier.popleft()]
        if node.terminal:
            continue
        env.restore(snapshot_of(node.world))
        candidates = env.candidates()
        if set(candidates) != reference_moves(layout, node.world):
            raise ContractError(f"engine candidates disagree with the reference rules at {node.key}")
        for action in candidates:
            env.restore(snapshot_of(node.world))
            obs, _, terminated, _, _ = env.step(action)
            key = canonical_key(env.world)
            if key not in nodes:
                status = reference_status(layout, env.world, goal)
                if terminated != (status == OutcomeStatus.COMPLETED):
                    raise ContractError(f"engine termination disagrees with the reference predicate at {key}")
                nodes[key] = GraphNode(key, env.world, status)
                frontier.append(key)
                if len(nodes) > node_cap:
                    raise GraphSizeError(node_cap, len(frontier))
            node.edges.append((action, key, obs))
    logger.debug(f"State graph for {spec.task_id}: {len(nodes)} nodes")
    return StateGraph(spec, root, observation, nodes)


def value_iteration(graph, gamma, stop_values=False, tol=1e-12):
    """Synchronous value iteration.

    Completed states are worth 1. With `stop_values` every other state may also
    end the episode and collect its own outcome reward.

    Returns:
        tuple[dict, list]: State values and the max residual of every sweep.
    """
    values = {key: 1.0 if node.terminal else 0.0 for key, node in graph.nodes.items()}
    if stop_values:
        values = {key: _REWARD[node.status] for key, node in graph.nodes.items()}
    residuals = []
    for _ in range(10 * len(graph.nodes) + 10):
        updated = {}
        for key, node in graph.nodes.items():
            if node.terminal:
                updated[key] = 1.0
                continue
            best = max((gamma * values[target] for _, target, _ in node.edges), default=0.0)
            if stop_values:
                best = max(best, _REWARD[node.status])
            updated[key] = best
        residual = max(abs(updated[key] - values[key]) for key in values)
        residuals.append(residual)
        values = updated
        if residual <= tol:
            break
    return values, residuals


def _greedy_path(graph, values, gamma, stop_values):
    plan, key = [], graph.root
    while not graph.nodes[key].terminal and len(plan) <= len(graph.nodes):
        node = graph.nodes[key]
        best = max((gamma * values[target] for _, target, _ in node.edges), default=0.0)
        if best <= 0.0 or (stop_values and _REWARD[node.status] >= best):
            break
        action, key = next((a, target) for a, target, _ in node.edges if gamma * values[target] == best)
        plan.append(action)
    return plan


def optimal_plan(graph, gamma):
    """Highest discounted-outcome plan from the root.

    When a completed state is reachable the plan is a shortest path to one and
    the value is gamma**len(plan). Otherwise the plan stops at the best
    reachable partial state.

    Returns:
        tuple[list[Action], float]: The plan and its value.
    """
    values, _ = value_iteration(graph, gamma)
    if values[graph.root] > 0.0:
        return _greedy_path(graph, values, gamma, False), values[graph.root]
    values, _ = value_iteration(graph, gamma, stop_values=True)
    return _greedy_path(graph, values, gamma, True), values[graph.root]


def optimal_first_actions(graph, gamma, tol=1e-12):
    """Every root action whose value is within `tol` of the optimum."""
    values, _ = value_iteration(graph, gamma)
    stop = values[graph.root] <= 0.0
    if stop:
        values, _ = value_iteration(graph, gamma, stop_values=True)
    root = graph.nodes[graph.root]
    best = max(gamma * values[target] for _, target, _ in root.edges)
    return {a for a, target, _ in root.edges if gamma * values[target] >= best - tol}


def evaluate_policy(graph, policy, gamma, horizon, max_branches=1_000_000, summarizer=identity_summarizer):
    """Exact expected discounted outcome reward of `policy` from the root.

    The policy sees the whole action history, so the expectation runs over
    action histories (branches with zero probability are pruned). An episode
    ends on a completed state or after `horizon` steps, where it collects the
    reward of its current outcome, as the environment's truncation does.
    """
    branches = 0

    def expected(key, state, remaining, discount):
        nonlocal branches
        branches += 1
        if branches > max_branches:
            raise GraphSizeError(max_branches, branches)
        node = graph.nodes[key]
        if node.terminal:
            return discount
        if remaining == 0:
            return discount * _REWARD[node.status]
        candidates = tuple(action for action, _, _ in node.edges)
        distribution = policy.distribution(state, candidates)
        total = 0.0
        for action, probability in zip(distribution.actions, distribution.probabilities):
            if probability == 0.0:
                continue
            target, observation = node.transition(action)
            child = advance(state, action, observation, summarizer)
            total += float(probability) * expected(target, child, remaining - 1, discount * gamma)
        return total

    start = init_state(graph.spec.instruction, graph.root_observation)
    return expected(graph.root, start, horizon, 1.0)


def bfs_solution(spec, node_cap=DEFAULT_NODE_CAP, registry=None, graph=None) -> Optional[List[Action]]:
    """Shortest plan reaching a completed state, or None when none is reachable."""
    graph = graph or build_graph(spec, node_cap=node_cap, registry=registry)
    parents = {graph.root: None}
    queue = deque([graph.root])
    while queue:
        key = queue.popleft()
        if graph.nodes[key].terminal:
            plan = []
            while parents[key] is not None:
                key, action = parents[key]
                plan.append(action)
            return plan[::-1]
        for action, target, _ in graph.nodes[key].edges:
            if target not in parents:
                parents[target] = (key, action)
                queue.append(target)
    return None
