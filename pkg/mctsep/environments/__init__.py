import logging

from mctsep.environments.core import Family, TaskSpec
from mctsep.environments.env_wrapper import EnvWrapper
from mctsep.exceptions import ConfigurationError

logger = logging.getLogger(__name__)


def make_env(env_name, config, spec=None, render_mode=None):
    """Create an environment instance with the appropriate wrapper based on the environment name.

    Args:
        env_name (str): The name of the environment to create ("gridhouse" or "external").
        config (omegaconf.DictConfig): Configuration holding the `env` section.
        spec (TaskSpec, optional): Task an external session is opened for.
        render_mode (str, optional): Rendering mode for the environment. Defaults to None.

    Returns:
        An object honouring the reset/step/snapshot/restore contract.

    Raises:
        ConfigurationError: If the environment name is not recognized.
    """
    if env_name == "gridhouse":
        from mctsep.environments.gridhouse import make_gridhouse_env

        return EnvWrapper(make_gridhouse_env(config, render_mode=render_mode), env_name)
    elif env_name == "external":
        from mctsep.environments.external import external_env_session

        if not config.env.get("endpoint"):
            raise ConfigurationError("env.endpoint must be set for external environments")
        return external_env_session(
            config.env.endpoint, spec, max_steps=config.env.max_steps, timeout=config.env.get("timeout", 30.0)
        )
    raise ConfigurationError(f"Unknown environment: {env_name}")


def parse_task_id(task_id, registry=None):
    """'house_s/CleanPlace/3' -> TaskSpec."""
    from mctsep.environments.gridhouse import make_task

    parts = task_id.split("/")
    if len(parts) != 3 or not parts[2].isdigit():
        raise ConfigurationError(f"task id {task_id!r} is not of the form layout/family/seed")
    layout_id, family, seed = parts
    try:
        family = Family(family)
    except ValueError as e:
        raise ConfigurationError(f"unknown task family {family!r}") from e
    return make_task(family, int(seed), layout_id, registry=registry)


def make_suite(families, seeds, layouts, registry=None):
    """Enumerate a task suite in (layout, family, seed) order.

    Families a layout does not support are skipped.
    """
    from mctsep.environments.gridhouse import default_registry, make_task

    registry = registry or default_registry()
    suite = []
    for layout_id in layouts:
        layout = registry.get(layout_id)
        for family in families:
            family = Family(family)
            if family.value not in layout.families:
                logger.debug(f"Layout {layout_id} has no {family.value} tasks; skipping")
                continue
            for seed in seeds:
                suite.append(make_task(family, int(seed), layout_id, registry=registry))
    if not suite:
        raise ConfigurationError(f"task suite is empty for families {list(families)} on layouts {list(layouts)}")
    return suite


__all__ = ["EnvWrapper", "TaskSpec", "make_env", "make_suite", "parse_task_id"]
