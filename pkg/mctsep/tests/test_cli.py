import copy
from pathlib import Path

import pytest
from omegaconf import OmegaConf

import mctsep.cli as cli
from mctsep.cli import RunConfig, run
from mctsep.dataset import manifest_path, read_jsonl, read_manifest
from mctsep.evaluator import read_report
from mctsep.exceptions import ConfigValidationError, ProtocolError
from mctsep.utils import config_hash, read_json

SMALL = [
    "suite.layouts=[house_xs]",
    "suite.families=[PickPlace]",
    "suite.train_seeds=[0,2]",
    "suite.eval_seeds=[100,102]",
    "suite.task_id=house_xs/PickPlace/0",
    "search.budget=20",
    "loop.iterations=2",
    "loop.expert_count=2",
    "train.epochs_sft=2",
    "train.epochs_dpo=2",
]


@pytest.fixture
def small_config(compose_config):
    def _small(*overrides):
        return compose_config(*SMALL, *overrides)

    return _small


def out(config):
    return Path(config.run.output_dir)


def test_search_writes_a_reproducible_tree(small_config, capsys):
    config = small_config("command=search")
    assert run(config, configure_logging=False) == 0
    path = out(config) / "trees" / "house_xs_PickPlace_0.json"
    first = path.read_bytes()
    dump = read_json(path)
    assert dump["config_hash"] == config_hash(config)
    assert dump["task"]["layout_id"] == "house_xs"
    assert read_json(manifest_path(path))["created_at"] == "2024-01-01T00:00:00Z"
    assert "Searched house_xs/PickPlace/0" in capsys.readouterr().out

    assert run(config, configure_logging=False) == 0
    assert path.read_bytes() == first


@pytest.mark.parametrize(
    "key,value",
    [
        ("search.gamma", 1.5),
        ("command", "fly"),
        ("suite.eval_seeds", [1, 3]),
        ("suite.layouts", ["castle"]),
        ("suite.task_id", "castle/PickPlace/0"),
    ],
)
def test_invalid_configs_exit_with_two(small_config, key, value):
    config = small_config("command=search")
    OmegaConf.update(config, key, value)
    assert run(config, configure_logging=False) == 2


@pytest.mark.parametrize(
    "key,value",
    [
        ("search.gamma", 1.5),
        ("search.budget", 0),
        ("train.batch_size", 0),
        ("env.max_steps", 0),
        ("suite.families", ["Dance"]),
        ("suite.train_seeds", [5, 5]),
        ("suite.eval_seeds", [1, 3]),
        ("loop.iterations", 0),
        ("eval.num_workers", 0),
        ("eval.actor", "psychic"),
    ],
)
def test_validation_names_the_field(small_config, key, value):
    config = small_config()
    OmegaConf.update(config, key, value)
    with pytest.raises(ConfigValidationError) as info:
        RunConfig.from_config(config)
    assert info.value.field == key


def test_config_hash_ignores_locations(small_config):
    config = small_config()
    moved = copy.deepcopy(config)
    OmegaConf.update(moved, "run.output_dir", "/elsewhere")
    OmegaConf.update(moved, "policy.checkpoint", "/elsewhere/sft.json")
    assert config_hash(moved) == config_hash(config)
    OmegaConf.update(moved, "search.gamma", 0.9)
    assert config_hash(moved) != config_hash(config)


def test_dump_config_prints_the_hash(small_config, capsys):
    config = small_config("command=dump-config")
    assert run(config, configure_logging=False) == 0
    printed = capsys.readouterr().out
    assert "house_xs" in printed
    assert f"# config hash: {config_hash(config)}" in printed


def test_collect_then_train(small_config):
    config = small_config("command=collect")
    assert run(config, configure_logging=False) == 0
    datasets = out(config) / "datasets"
    for name in ("trajectories.jsonl", "pairs.jsonl"):
        manifest = read_manifest(datasets / name)
        assert manifest.count == len(read_jsonl(datasets / name))
        assert manifest.config_hash == config_hash(config)
        assert len(manifest.tree_ids) == 2

    assert run(small_config("command=train-sft"), configure_logging=False) == 0
    sft = out(config) / "checkpoints" / "sft.json"
    assert read_json(sft)["phase"] == "sft"
    assert run(small_config("command=train-dpo", f"policy.checkpoint='{sft}'"), configure_logging=False) == 0
    assert read_json(out(config) / "checkpoints" / "dpo.json")["config_hash"] == config_hash(config)

    # A checkpoint trained under other search settings does not go with the collected pairs.
    assert run(small_config("command=train-sft", "search.gamma=0.9"), configure_logging=False) == 0
    mismatched = small_config("command=train-dpo", f"policy.checkpoint='{sft}'")
    assert run(mismatched, configure_logging=False) == 3


def test_missing_inputs_exit_with_three(small_config, tmp_path):
    assert run(small_config("command=train-sft"), configure_logging=False) == 3
    missing = tmp_path / "nowhere.json"
    assert run(small_config("command=search", f"policy.checkpoint='{missing}'"), configure_logging=False) == 3


def test_warmup_generates_expert_solutions(small_config):
    config = small_config("command=warmup")
    assert run(config, configure_logging=False) == 0
    expert = out(config) / "datasets" / "expert.jsonl"
    experts = read_jsonl(expert)
    assert len(experts) == 2
    assert {t.source for t in experts} == {"expert"}
    assert all(t.reward == 1.0 for t in experts)
    checkpoint = read_json(out(config) / "checkpoints" / "warmup.json")
    assert checkpoint["phase"] == "warmup"

    # A second run reads the existing file instead of regenerating it.
    before = expert.read_bytes()
    assert run(config, configure_logging=False) == 0
    assert expert.read_bytes() == before


def test_eval_writes_a_report(small_config, capsys):
    config = small_config("command=eval", "eval.actor=scripted")
    assert run(config, configure_logging=False) == 0
    report = read_report(out(config) / "eval" / "report.json")
    assert report.success_rate == 1.0
    assert report.episodes == 2
    assert report.actor == "scripted"
    assert report.config_hash == config_hash(config)
    assert "Overall Success Rate: 100.00%" in capsys.readouterr().out


def test_loop_resumes_where_it_stopped(small_config, tmp_path, monkeypatch):
    reference = small_config("command=loop")
    OmegaConf.update(reference, "run.output_dir", str(tmp_path / "uninterrupted"))
    assert run(reference, configure_logging=False) == 0
    assert (out(reference) / "reports" / "baseline.json").exists()
    assert len(read_json(out(reference) / "loop" / "state.json")["reports"]) == 2

    original = cli.run_iteration

    def fail_second_iteration(*args, **kwargs):
        if args[8] == 1:
            raise ProtocolError("interrupted")
        return original(*args, **kwargs)

    config = small_config("command=loop")
    monkeypatch.setattr(cli, "run_iteration", fail_second_iteration)
    assert run(config, configure_logging=False) == 4
    assert read_json(out(config) / "loop" / "state.json")["completed"] == 1

    monkeypatch.setattr(cli, "run_iteration", original)
    assert run(small_config("command=loop", "run.resume=true"), configure_logging=False) == 0
    state = read_json(out(config) / "loop" / "state.json")
    assert state["completed"] == 2
    assert read_json(out(config) / "checkpoints" / "final.json") == read_json(
        out(reference) / "checkpoints" / "final.json"
    )
    assert (out(config) / "loop" / "reports.jsonl").read_text() == (
        out(reference) / "loop" / "reports.jsonl"
    ).read_text()


def test_resume_refuses_a_changed_config(small_config):
    config = small_config("command=loop")
    OmegaConf.update(config, "loop.iterations", 1)
    assert run(config, configure_logging=False) == 0
    changed = small_config("command=loop", "search.gamma=0.9", "run.resume=true")
    OmegaConf.update(changed, "loop.iterations", 1)
    assert run(changed, configure_logging=False) == 3
