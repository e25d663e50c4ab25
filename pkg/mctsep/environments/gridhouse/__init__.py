from .base import (
    GridHouseEnv,
    Layout,
    LayoutRegistry,
    WorldState,
    default_registry,
    goal_status,
    initial_world,
    legal_actions,
    make_task,
)


def layout_registry(config):
    """Registry named by `env.layouts_path`, else the packaged layouts."""
    path = config.env.get("layouts_path")
    return LayoutRegistry.load(path) if path else default_registry()


def make_gridhouse_env(config, render_mode=None):
    return GridHouseEnv(registry=layout_registry(config), max_steps=config.env.max_steps, render_mode=render_mode)
