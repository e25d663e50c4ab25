import functools
import importlib.resources
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import gymnasium as gym
import numpy as np
from gymnasium import spaces

from mctsep.environments.core import (
    FAMILY_ATTRIBUTE,
    Action,
    EnvSnapshot,
    FeedbackCode,
    Family,
    Observation,
    Outcome,
    OutcomeStatus,
    TaskSpec,
    Verb,
    instruction_for,
    object_type,
    outcome_reward,
    parse_goal,
)
from mctsep.exceptions import ConfigurationError, ContractError, ProtocolError

logger = logging.getLogger(__name__)

LAYOUT_FORMAT_VERSION = 1

# Receptacle type -> (verb, attribute it sets, attribute it clears)
TREATMENTS = {
    "sinkbasin": (Verb.CLEAN, "clean", None),
    "microwave": (Verb.HEAT, "hot", "cold"),
    "fridge": (Verb.COOL, "cold", "hot"),
}
VERB_AFFORDANCE = {Verb.CLEAN: "clean", Verb.HEAT: "heat", Verb.COOL: "cool"}


@dataclass(frozen=True)
class Receptacle:
    id: str
    openable: bool = False

    @property
    def type(self):
        return object_type(self.id)


@dataclass(frozen=True)
class HouseObject:
    id: str
    spawn: Tuple[str, ...]
    portable: bool = False
    affords: Tuple[str, ...] = ()
    lamp: bool = False

    @property
    def type(self):
        return object_type(self.id)


@dataclass(frozen=True)
class Layout:
    layout_id: str
    receptacles: Tuple[Receptacle, ...]
    objects: Tuple[HouseObject, ...]
    families: Dict[str, dict] = field(default_factory=dict, hash=False, compare=False)

    @functools.cached_property
    def receptacle_map(self):
        return {r.id: r for r in self.receptacles}

    @functools.cached_property
    def object_map(self):
        return {o.id: o for o in self.objects}

    @property
    def portable_objects(self):
        return tuple(o for o in self.objects if o.portable)

    @classmethod
    def from_dict(cls, layout_id, data):
        receptacles = tuple(
            sorted((Receptacle(r["id"], bool(r.get("openable", False))) for r in data["receptacles"]), key=lambda r: r.id)
        )
        objects = tuple(
            sorted(
                (
                    HouseObject(
                        o["id"],
                        tuple(o["spawn"]),
                        bool(o.get("portable", False)),
                        tuple(o.get("affords", ())),
                        bool(o.get("lamp", False)),
                    )
                    for o in data["objects"]
                ),
                key=lambda o: o.id,
            )
        )
        receptacle_ids = {r.id for r in receptacles}
        for obj in objects:
            unknown = [s for s in obj.spawn if s not in receptacle_ids]
            if not obj.spawn or unknown:
                raise ConfigurationError(f"layout {layout_id!r}: object {obj.id!r} has invalid spawn list {obj.spawn}")
        return cls(layout_id, receptacles, objects, dict(data.get("families", {})))


class LayoutRegistry:
    """Versioned collection of GridHouse layouts loaded from JSON."""

    def __init__(self, layouts, version=LAYOUT_FORMAT_VERSION):
        self.layouts = dict(layouts)
        self.version = version

    @classmethod
    def load(cls, path=None):
        if path is None:
            text = importlib.resources.files("mctsep.environments.gridhouse").joinpath("layouts.json").read_text()
        else:
            with open(path, "r") as f:
                text = f.read()
        data = json.loads(text)
        version = data.get("version")
        if version != LAYOUT_FORMAT_VERSION:
            raise ConfigurationError(f"layout registry version {version} is not supported (expected {LAYOUT_FORMAT_VERSION})")
        layouts = {key: Layout.from_dict(key, value) for key, value in data["layouts"].items()}
        return cls(layouts, version)

    def __contains__(self, layout_id):
        return layout_id in self.layouts

    def get(self, layout_id):
        if layout_id not in self.layouts:
            raise ConfigurationError(f"unknown layout_id {layout_id!r}; known layouts: {sorted(self.layouts)}")
        return self.layouts[layout_id]


@functools.lru_cache(maxsize=None)
def default_registry():
    return LayoutRegistry.load()


@dataclass(frozen=True)
class WorldState:
    """Hidden world state in canonical (sorted) form."""

    agent: Optional[str]
    held: Optional[str]
    locations: Tuple[Tuple[str, str], ...]
    attributes: Tuple[Tuple[str, str], ...] = ()
    opened: Tuple[str, ...] = ()
    lamps_on: Tuple[str, ...] = ()

    def location_of(self, obj_id):
        for obj, receptacle in self.locations:
            if obj == obj_id:
                return receptacle
        return None

    def has_attribute(self, obj_id, attribute):
        return (obj_id, attribute) in self.attributes

    def with_attribute(self, obj_id, add, remove=None):
        attributes = {pair for pair in self.attributes if pair != (obj_id, remove)}
        attributes.add((obj_id, add))
        return replace(self, attributes=tuple(sorted(attributes)))

    def to_dict(self):
        return {
            "agent": self.agent,
            "held": self.held,
            "locations": [list(pair) for pair in self.locations],
            "attributes": [list(pair) for pair in self.attributes],
            "opened": list(self.opened),
            "lamps_on": list(self.lamps_on),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            data["agent"],
            data["held"],
            tuple(tuple(pair) for pair in data["locations"]),
            tuple(tuple(pair) for pair in data["attributes"]),
            tuple(data["opened"]),
            tuple(data["lamps_on"]),
        )


def initial_world(layout, seed):
    """Seeded initial world; a pure function of (layout, seed)."""
    rng = np.random.default_rng(seed)
    locations = []
    for obj in layout.portable_objects:
        locations.append((obj.id, obj.spawn[int(rng.integers(len(obj.spawn)))]))
    return WorldState(agent=None, held=None, locations=tuple(sorted(locations)))


def contents(layout, world, receptacle_id):
    """Ids of every object (portable or fixed) resting in a receptacle."""
    portable = [obj for obj, where in world.locations if where == receptacle_id]
    fixed = [o.id for o in layout.objects if not o.portable and o.spawn[0] == receptacle_id]
    return tuple(sorted(portable + fixed))


def is_accessible(layout, world, receptacle_id):
    return not layout.receptacle_map[receptacle_id].openable or receptacle_id in world.opened


def goal_status(layout, world, goal):
    """Outcome status of `world` under the goal predicate (without step accounting)."""
    targets = [o.id for o in layout.portable_objects if o.type == goal.target]
    if goal.family == Family.LOOK_IN_LIGHT:
        held_target = world.held in targets
        lit_here = any(
            lamp.id in world.lamps_on and lamp.spawn[0] == world.agent
            for lamp in layout.objects
            if lamp.lamp and lamp.type == goal.receptacle
        )
        if held_target and lit_here:
            return OutcomeStatus.COMPLETED
        return OutcomeStatus.PARTIAL if held_target else OutcomeStatus.INCOMPLETE

    attribute = FAMILY_ATTRIBUTE.get(goal.family)

    def satisfies(obj_id):
        return attribute is None or world.has_attribute(obj_id, attribute)

    placed = [
        obj for obj in targets if satisfies(obj) and object_type(world.location_of(obj) or "") == goal.receptacle
    ]
    if goal.family == Family.PICK_TWO_PLACE:
        if len(placed) >= 2:
            return OutcomeStatus.COMPLETED
        return OutcomeStatus.PARTIAL if len(placed) == 1 else OutcomeStatus.INCOMPLETE
    if placed:
        return OutcomeStatus.COMPLETED
    if world.held in targets:
        return OutcomeStatus.PARTIAL
    if attribute is not None and any(world.has_attribute(obj, attribute) for obj in targets):
        return OutcomeStatus.PARTIAL
    return OutcomeStatus.INCOMPLETE


def legal_actions(layout, world):
    """Every action whose preconditions hold, sorted by canonical text."""
    actions = [Action(Verb.GOTO, r.id) for r in layout.receptacles if r.id != world.agent]
    here = world.agent
    if here is not None:
        receptacle = layout.receptacle_map[here]
        actions.append(Action(Verb.EXAMINE, here))
        if receptacle.openable:
            actions.append(Action(Verb.CLOSE if here in world.opened else Verb.OPEN, here))
        if is_accessible(layout, world, here):
            if world.held is None:
                for obj, where in world.locations:
                    if where == here:
                        actions.append(Action(Verb.TAKE, obj, here))
            else:
                actions.append(Action(Verb.PUT, world.held, here))
            for lamp in layout.objects:
                if lamp.lamp and lamp.spawn[0] == here and lamp.id not in world.lamps_on:
                    actions.append(Action(Verb.USE, lamp.id))
        treatment = TREATMENTS.get(receptacle.type)
        if treatment is not None and world.held is not None:
            verb, attribute, _ = treatment
            held = layout.object_map[world.held]
            if VERB_AFFORDANCE[verb] in held.affords and not world.has_attribute(held.id, attribute):
                actions.append(Action(verb, held.id, here))
    return tuple(sorted(actions, key=lambda a: a.text))


def _listing(items):
    if not items:
        return "nothing"
    named = [f"a {item}" for item in items]
    if len(named) == 1:
        return named[0]
    return ", ".join(named[:-1]) + f", and {named[-1]}"


def describe_receptacle(layout, world, receptacle_id):
    receptacle = layout.receptacle_map[receptacle_id]
    if receptacle.openable:
        if receptacle_id not in world.opened:
            return f"The {receptacle_id} is closed."
        return f"The {receptacle_id} is open. In it, you see {_listing(contents(layout, world, receptacle_id))}."
    return f"On the {receptacle_id}, you see {_listing(contents(layout, world, receptacle_id))}."


def visible_objects(layout, world):
    if world.agent is None or not is_accessible(layout, world, world.agent):
        return ()
    return contents(layout, world, world.agent)


def apply_action(layout, world, action):
    """Transition for a legal action: returns (new world, observation text)."""
    verb, target, receptacle = action.verb, action.object, action.receptacle
    if verb == Verb.GOTO:
        world = replace(world, agent=target)
        return world, f"You arrive at {target}. " + describe_receptacle(layout, world, target)
    if verb == Verb.OPEN:
        world = replace(world, opened=tuple(sorted(world.opened + (target,))))
        return world, f"You open the {target}. " + describe_receptacle(layout, world, target)
    if verb == Verb.CLOSE:
        world = replace(world, opened=tuple(r for r in world.opened if r != target))
        return world, f"You close the {target}."
    if verb == Verb.TAKE:
        locations = tuple(pair for pair in world.locations if pair[0] != target)
        return replace(world, held=target, locations=locations), f"You pick up the {target} from the {receptacle}."
    if verb == Verb.PUT:
        locations = tuple(sorted(world.locations + ((target, receptacle),)))
        return replace(world, held=None, locations=locations), f"You put the {target} in/on the {receptacle}."
    if verb in (Verb.CLEAN, Verb.HEAT, Verb.COOL):
        _, add, remove = TREATMENTS[object_type(receptacle)]
        return world.with_attribute(target, add, remove), f"You {verb.value} the {target} using the {receptacle}."
    if verb == Verb.USE:
        world = replace(world, lamps_on=tuple(sorted(world.lamps_on + (target,))))
        return world, f"You turn on the {target}."
    if verb == Verb.EXAMINE:
        return world, describe_receptacle(layout, world, target)
    raise ContractError(f"unhandled verb {verb}")


def room_description(layout):
    return f"You are in the middle of a room. Looking quickly around you, you see {_listing([r.id for r in layout.receptacles])}."


class GridHouseEnv(gym.Env):
    """Deterministic text household simulator.

    Follows the gymnasium API; `EnvWrapper` exposes the task-level contract
    (`reset(spec)`, `step(action)`, `snapshot()`, `restore()`) used by search.
    """

    metadata = {"render_modes": ["ansi"]}

    def __init__(self, registry=None, max_steps=30, render_mode=None):
        self.registry = registry or default_registry()
        self.max_steps = max_steps
        self.render_mode = render_mode
        self.observation_space = spaces.Text(max_length=4096)
        self.action_space = spaces.Text(max_length=256)
        self.task = None
        self.layout = None
        self.goal = None
        self.world = None
        self.step_count = 0
        self.terminal = False
        self.last_observation = None

    def reset(self, *, seed=None, options=None):
        super().reset(seed=seed)
        task = (options or {}).get("task")
        if not isinstance(task, TaskSpec):
            raise ContractError("GridHouseEnv.reset requires options={'task': TaskSpec}")
        self.layout = self.registry.get(task.layout_id)
        self.goal = parse_goal(task.instruction, task.family)
        self.task = task
        self.world = initial_world(self.layout, task.seed)
        self.step_count = 0
        self.terminal = False
        self.last_observation = Observation(room_description(self.layout), (), FeedbackCode.OK)
        info = {"candidates": self.candidates(), "snapshot": self.snapshot()}
        return self.last_observation, info

    def candidates(self):
        if self.terminal:
            return ()
        return legal_actions(self.layout, self.world)

    def step(self, action):
        if self.task is None:
            raise ProtocolError("step called before reset")
        if self.terminal:
            raise ProtocolError("step called after the episode terminated")
        self.step_count += 1

        if isinstance(action, str):
            try:
                action = Action.parse(action)
            except ValueError:
                action = None

        if action is None or not self._known_ids(action):
            observation = Observation("Nothing happens.", visible_objects(self.layout, self.world), FeedbackCode.INVALID_ACTION)
        elif action not in legal_actions(self.layout, self.world):
            observation = Observation(
                "Nothing happens.", visible_objects(self.layout, self.world), FeedbackCode.NOTHING_HAPPENS
            )
        else:
            self.world, text = apply_action(self.layout, self.world, action)
            observation = Observation(text, visible_objects(self.layout, self.world), FeedbackCode.OK)
        self.last_observation = observation

        status = goal_status(self.layout, self.world, self.goal)
        terminated = status == OutcomeStatus.COMPLETED
        truncated = not terminated and self.step_count >= self.max_steps
        outcome = None
        if terminated or truncated:
            self.terminal = True
            outcome = Outcome(status, self.step_count)
        reward = outcome_reward(outcome) if outcome is not None else 0.0
        info = {"candidates": self.candidates(), "outcome": outcome, "feedback": observation.feedback_code}
        return observation, reward, terminated, truncated, info

    def _known_ids(self, action):
        names = set(self.layout.receptacle_map) | set(self.layout.object_map)
        return action.object in names and (action.receptacle is None or action.receptacle in self.layout.receptacle_map)

    def current_outcome(self):
        """Outcome status at the current state, terminal or not."""
        return Outcome(goal_status(self.layout, self.world, self.goal), self.step_count)

    def snapshot(self):
        if self.task is None:
            raise ProtocolError("snapshot called before reset")
        payload = {
            "layout_version": self.registry.version,
            "task": self.task.to_dict(),
            "world": self.world.to_dict(),
            "step_count": self.step_count,
            "terminal": self.terminal,
            "last_observation": self.last_observation.to_dict(),
        }
        return EnvSnapshot(self.task.layout_id, payload)

    def restore(self, snapshot):
        if self.task is not None and snapshot.layout_id != self.task.layout_id:
            raise ConfigurationError(
                f"cannot restore a {snapshot.layout_id!r} snapshot into a {self.task.layout_id!r} episode"
            )
        payload = snapshot.payload
        task = TaskSpec.from_dict(payload["task"])
        if task.layout_id != snapshot.layout_id:
            raise ConfigurationError("snapshot task layout does not match snapshot layout")
        self.layout = self.registry.get(task.layout_id)
        self.goal = parse_goal(task.instruction, task.family)
        self.task = task
        self.world = WorldState.from_dict(payload["world"])
        self.step_count = int(payload["step_count"])
        self.terminal = bool(payload["terminal"])
        self.last_observation = Observation.from_dict(payload["last_observation"])

    def render(self):
        if self.render_mode == "ansi" and self.last_observation is not None:
            return self.last_observation.text
        return None


def make_task(family, seed, layout_id, registry=None):
    """Build a TaskSpec whose goal does not already hold in the seeded initial state."""
    registry = registry or default_registry()
    layout = registry.get(layout_id)
    family = Family(family)
    options = layout.families.get(family.value)
    if not options:
        raise ConfigurationError(f"layout {layout_id!r} does not support family {family.value}")
    world = initial_world(layout, seed)
    combos = [(t, g) for t in options["targets"] for g in options["goals"]]
    rng = np.random.default_rng([seed, list(Family).index(family)])
    for index in rng.permutation(len(combos)):
        target, goal_receptacle = combos[int(index)]
        instruction = instruction_for(family, target, goal_receptacle)
        if goal_status(layout, world, parse_goal(instruction, family)) != OutcomeStatus.COMPLETED:
            return TaskSpec(family, instruction, seed, layout_id)
    raise ConfigurationError(f"no unsolved goal for {family.value} on {layout_id!r} with seed {seed}")
