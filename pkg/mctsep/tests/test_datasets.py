import itertools
import json

import numpy as np
import pytest

from mctsep.agents import HeuristicCritic, PolicyParams, ScriptedPolicy, SoftmaxPolicy
from mctsep.dataset import (
    PreferencePair,
    Trajectory,
    expert_trajectory,
    extract_preferences,
    extract_success,
    manifest_path,
    merge_buffers,
    read_jsonl,
    read_manifest,
    replay_trajectory,
    tree_fingerprint,
    write_jsonl,
)
from mctsep.environments.core import Action, Family, Observation, OutcomeStatus, Verb
from mctsep.environments.gridhouse import make_task
from mctsep.exceptions import DataError, DatasetFormatError, DatasetParseError, ReplayDivergenceError
from mctsep.prompt_builder import init_state
from mctsep.search import SearchConfig, SearchEdge, SearchNode, SearchTree, run_search
from mctsep.tests.conftest import xs_plan
from mctsep.utils import sha256_hex

CANDIDATES = (
    Action(Verb.GOTO, "countertop 1"),
    Action(Verb.GOTO, "table 1"),
    Action(Verb.EXAMINE, "countertop 1"),
)


@pytest.fixture
def scripted_tree(env, xs_task):
    config = SearchConfig(budget=10, width=1)
    return run_search(xs_task, ScriptedPolicy(xs_plan(xs_task)), HeuristicCritic(config.d_max), env, config)


def branch_tree(xs_task, stats):
    """A root with one edge per candidate and hand-set (Q, N) statistics."""
    root = SearchNode(0, init_state(xs_task.instruction, Observation("You are in the middle of a room.")), None)
    root.candidates = CANDIDATES
    root.edges = [SearchEdge(action, 1 / 3, q, n) for action, (q, n) in zip(CANDIDATES, stats)]
    return SearchTree(xs_task, root, SearchConfig(), 0, nodes=[root])


def pair(context, winner="go to table 1", loser="examine countertop 1", task_id="t"):
    return PreferencePair(context, {}, ("go to table 1", "examine countertop 1"), winner, loser, 0.9, 0.1, 3, 3, task_id)


def test_success_paths_match_the_expert_recording(scripted_tree, env, xs_task):
    trajectories = extract_success(scripted_tree)
    assert len(trajectories) == 1
    found = trajectories[0]
    assert found.actions == tuple(a.text for a in xs_plan(xs_task))
    assert found.reward == 1.0
    assert found.tree_id == tree_fingerprint(scripted_tree)
    assert found.steps == expert_trajectory(env, xs_task, xs_plan(xs_task)).steps
    assert replay_trajectory(env, found).status == OutcomeStatus.COMPLETED


def test_reloaded_tree_gives_the_same_dataset(scripted_tree):
    reloaded = SearchTree.from_dict(scripted_tree.to_dict())
    assert [t.to_dict() for t in extract_success(reloaded)] == [t.to_dict() for t in extract_success(scripted_tree)]


def test_preferences_need_margin_and_visits(xs_task):
    tree = branch_tree(xs_task, [(0.9, 3), (0.5, 3), (0.45, 1)])
    pairs = extract_preferences(tree, epsilon=0.1, n_min=2)
    assert [(p.winner, p.loser) for p in pairs] == [("go to countertop 1", "go to table 1")]
    assert (pairs[0].q_w, pairs[0].q_l, pairs[0].n_w, pairs[0].n_l) == (0.9, 0.5, 3, 3)
    assert pairs[0].task_id == xs_task.task_id
    assert "- go to countertop 1" in pairs[0].context

    # 0.9 - 0.45 beats 0.9 - 0.5; 0.5 - 0.45 stays under epsilon.
    pairs = extract_preferences(tree, epsilon=0.1, n_min=1)
    assert [(p.winner, p.loser) for p in pairs] == [
        ("go to countertop 1", "examine countertop 1"),
        ("go to countertop 1", "go to table 1"),
    ]
    capped = extract_preferences(tree, epsilon=0.1, n_min=1, per_node_cap=1)
    assert [(p.winner, p.loser) for p in capped] == [("go to countertop 1", "examine countertop 1")]


def test_equal_values_give_no_pairs(xs_task):
    assert extract_preferences(branch_tree(xs_task, [(0.5, 4), (0.5, 4), (0.5, 4)])) == []


Q_GRID = [0.0, 0.25, 0.5, 0.6, 0.9025, 1.0]
ACTIONS = [Action(Verb.GOTO, f"table {i}") for i in range(1, 7)]


def random_tree(rng, xs_task):
    """Two levels of random branching with Q drawn from a coarse grid so margins tie."""
    state = init_state(xs_task.instruction, Observation("You are in the middle of a room."))
    nodes = []

    def grow(depth):
        node = SearchNode(len(nodes), state, None)
        nodes.append(node)
        if depth < 2 and rng.random() < 0.8:
            actions = [ACTIONS[i] for i in sorted(rng.choice(len(ACTIONS), size=rng.integers(1, 6), replace=False))]
            node.candidates = tuple(actions)
            for action in actions:
                q = float(rng.choice(Q_GRID)) if rng.random() < 0.7 else float(rng.random())
                node.edges.append(SearchEdge(action, 1 / len(actions), q, int(rng.integers(0, 5)), grow(depth + 1)))
        return node

    root = grow(0)
    return SearchTree(xs_task, root, SearchConfig(), 0, nodes=nodes)


def qualifying_pairs(node, epsilon, n_min):
    return {
        (w.action.text, l.action.text): w.q_value - l.q_value
        for w, l in itertools.permutations(node.edges, 2)
        if w.visit_count >= n_min and l.visit_count >= n_min and w.q_value - l.q_value > epsilon
    }


def test_preferences_agree_with_a_scan_of_every_edge_pair(xs_task):
    for seed in range(100):
        rng = np.random.default_rng(seed)
        tree = random_tree(rng, xs_task)
        epsilon, n_min = float(rng.choice([0.0, 0.1, 0.3])), int(rng.integers(0, 4))
        cap = [None, 1, 2, 6][seed % 4]
        pairs = extract_preferences(tree, epsilon, n_min, per_node_cap=cap)
        offset = 0
        for node in tree.nodes:
            expected = qualifying_pairs(node, epsilon, n_min) if len(node.edges) >= 2 else {}
            kept = min(len(expected), cap) if cap is not None else len(expected)
            found = pairs[offset : offset + kept]
            offset += kept
            assert len({(p.winner, p.loser) for p in found}) == kept
            for p in found:
                assert expected[(p.winner, p.loser)] == p.q_w - p.q_l
                assert min(p.n_w, p.n_l) >= n_min
            dropped = set(expected) - {(p.winner, p.loser) for p in found}
            if found and dropped:
                assert min(p.q_w - p.q_l for p in found) >= max(expected[key] for key in dropped)
        assert offset == len(pairs)


def test_every_trajectory_search_finds_replays(env):
    policy = SoftmaxPolicy(PolicyParams.zeros())
    found = []
    for seed in range(5):
        spec = make_task(Family.PICK_PLACE, seed, "house_xs")
        config = SearchConfig(budget=50, seed=seed)
        found.extend(extract_success(run_search(spec, policy, HeuristicCritic(config.d_max), env, config)))
    assert found
    for trajectory in found:
        assert replay_trajectory(env, trajectory).status == OutcomeStatus.COMPLETED


def test_write_and_read_with_manifest(tmp_path, xs_task):
    pairs = extract_preferences(branch_tree(xs_task, [(0.9, 3), (0.5, 3), (0.1, 3)]))
    path = tmp_path / "pairs.jsonl"
    manifest = write_jsonl(pairs, path, config_hash="abc", tree_ids=["t2", "t1", "t2"], timestamp="2024-01-01T00:00:00Z")
    assert manifest.kind == "pair"
    assert manifest.count == len(pairs) == 3
    assert manifest.tree_ids == ("t1", "t2")
    assert manifest.sha256 == sha256_hex(path.read_text(encoding="utf-8"))
    assert read_manifest(path) == manifest
    assert [p.to_dict() for p in read_jsonl(path)] == [p.to_dict() for p in pairs]


def test_truncated_line_is_reported_with_its_number(tmp_path):
    path = tmp_path / "pairs.jsonl"
    write_jsonl([pair("a"), pair("b")], path)
    text = path.read_text(encoding="utf-8")
    path.write_text(text[: len(text) - 20], encoding="utf-8")
    with pytest.raises(DatasetParseError) as info:
        read_jsonl(path)
    assert info.value.line_number == 2


@pytest.mark.parametrize("change", [{"version": 7}, {"kind": "tree"}])
def test_foreign_records_are_format_errors(tmp_path, change):
    path = tmp_path / "pairs.jsonl"
    path.write_text(json.dumps({**pair("a").to_dict(), **change}) + "\n", encoding="utf-8")
    with pytest.raises(DatasetFormatError):
        read_jsonl(path)


def test_incomplete_record_is_a_parse_error(tmp_path):
    path = tmp_path / "pairs.jsonl"
    record = pair("a").to_dict()
    del record["winner"]
    path.write_text(json.dumps(record) + "\n", encoding="utf-8")
    with pytest.raises(DatasetParseError):
        read_jsonl(path)


def test_manifest_version_is_checked(tmp_path):
    path = tmp_path / "pairs.jsonl"
    write_jsonl([pair("a")], path)
    data = json.loads(manifest_path(path).read_text(encoding="utf-8"))
    manifest_path(path).write_text(json.dumps({**data, "version": 0}), encoding="utf-8")
    with pytest.raises(DatasetFormatError):
        read_manifest(path)


def test_merge_buffers_keeps_newest_first():
    old = [pair("a"), pair("b")]
    new = [pair("c"), pair("a")]
    merged = merge_buffers(old, new)
    assert [p.context for p in merged] == ["c", "a", "b"]
    assert [p.context for p in merge_buffers(old, new, cap=2)] == ["c", "a"]


def test_records_validate_themselves(xs_task):
    with pytest.raises(DatasetFormatError):
        pair("a", winner="examine countertop 1", loser="examine countertop 1")
    with pytest.raises(DatasetFormatError):
        Trajectory(xs_task, (), 1.0)


def test_expert_and_replay_checks(env, xs_task):
    plan = xs_plan(xs_task)
    partial = expert_trajectory(env, xs_task, plan[:2])
    assert partial.reward == 0.5
    assert partial.source == "expert"
    with pytest.raises(DatasetFormatError):
        Trajectory(xs_task, partial.steps, 0.3)
    with pytest.raises(DataError):
        expert_trajectory(env, xs_task, [plan[1]])

    full = expert_trajectory(env, xs_task, plan)
    steps = list(full.steps)
    steps[1] = type(steps[1])(**{**steps[1].to_dict(), "candidates": steps[1].candidates, "observation": "elsewhere"})
    with pytest.raises(ReplayDivergenceError):
        replay_trajectory(env, Trajectory(xs_task, tuple(steps), 1.0))
    steps = list(full.steps)
    steps[0] = type(steps[0])(**{**steps[0].to_dict(), "candidates": steps[0].candidates, "action": "go to fridge 1"})
    with pytest.raises(DataError):
        replay_trajectory(env, Trajectory(xs_task, tuple(steps), 1.0))
