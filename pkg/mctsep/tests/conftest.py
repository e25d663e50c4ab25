import pytest
from hydra import compose, initialize
from hydra.core.global_hydra import GlobalHydra

from mctsep.environments import EnvWrapper
from mctsep.environments.core import Action, Family, Verb, parse_goal
from mctsep.environments.gridhouse import GridHouseEnv, make_task


def make_wrapped_env(max_steps=30):
    return EnvWrapper(GridHouseEnv(max_steps=max_steps), "gridhouse")


def xs_plan(spec):
    """Shortest plan for a house_xs PickPlace task."""
    target = parse_goal(spec.instruction).target
    return [
        Action(Verb.GOTO, "countertop 1"),
        Action(Verb.TAKE, f"{target} 1", "countertop 1"),
        Action(Verb.GOTO, "table 1"),
        Action(Verb.PUT, f"{target} 1", "table 1"),
    ]


@pytest.fixture
def env():
    return make_wrapped_env()


@pytest.fixture
def xs_task():
    return make_task(Family.PICK_PLACE, 0, "house_xs")


@pytest.fixture
def compose_config(tmp_path):
    """Compose the packaged config with overrides; output goes to a temporary directory."""

    def _compose(*overrides):
        GlobalHydra.instance().clear()
        with initialize(config_path="../config", version_base=None):
            return compose(
                config_name="config",
                overrides=[f"run.output_dir='{tmp_path / 'out'}'", "run.created_at='2024-01-01T00:00:00Z'", *overrides],
            )

    yield _compose
    GlobalHydra.instance().clear()
