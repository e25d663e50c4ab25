"""Domain types shared by every environment: tasks, actions, observations, outcomes."""

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional, Tuple

from mctsep.exceptions import ConfigurationError


class Family(str, Enum):
    PICK_PLACE = "PickPlace"
    CLEAN_PLACE = "CleanPlace"
    HEAT_PLACE = "HeatPlace"
    COOL_PLACE = "CoolPlace"
    LOOK_IN_LIGHT = "LookInLight"
    PICK_TWO_PLACE = "PickTwoPlace"


class Verb(str, Enum):
    GOTO = "goto"
    OPEN = "open"
    CLOSE = "close"
    TAKE = "take"
    PUT = "put"
    CLEAN = "clean"
    HEAT = "heat"
    COOL = "cool"
    EXAMINE = "examine"
    USE = "use"


class FeedbackCode(str, Enum):
    OK = "ok"
    INVALID_ACTION = "invalid_action"
    NOTHING_HAPPENS = "nothing_happens"


class OutcomeStatus(str, Enum):
    COMPLETED = "completed"
    PARTIAL = "partial"
    INCOMPLETE = "incomplete"


# Attribute each treating family requires on its target object.
FAMILY_ATTRIBUTE = {
    Family.CLEAN_PLACE: "clean",
    Family.HEAT_PLACE: "hot",
    Family.COOL_PLACE: "cold",
}

INSTRUCTION_TEMPLATES = {
    Family.PICK_PLACE: "put a {target} in {goal}",
    Family.CLEAN_PLACE: "put a clean {target} in {goal}",
    Family.HEAT_PLACE: "put a hot {target} in {goal}",
    Family.COOL_PLACE: "put a cool {target} in {goal}",
    Family.LOOK_IN_LIGHT: "look at {target} under the {goal}",
    Family.PICK_TWO_PLACE: "put two {target} in {goal}",
}

_INSTRUCTION_PATTERNS = {
    family: re.compile(
        "^" + re.escape(template).replace(r"\{target\}", r"(?P<target>[a-z]+)").replace(r"\{goal\}", r"(?P<goal>[a-z]+)") + "$"
    )
    for family, template in INSTRUCTION_TEMPLATES.items()
}


@dataclass(frozen=True)
class TaskSpec:
    family: Family
    instruction: str
    seed: int
    layout_id: str

    def __post_init__(self):
        if not self.instruction or not self.instruction.strip():
            raise ConfigurationError("task instruction must be non-empty")
        if self.seed < 0:
            raise ConfigurationError(f"task seed must be unsigned, got {self.seed}")
        object.__setattr__(self, "family", Family(self.family))

    @property
    def task_id(self):
        return f"{self.layout_id}/{self.family.value}/{self.seed}"

    def to_dict(self):
        return {
            "family": self.family.value,
            "instruction": self.instruction,
            "seed": self.seed,
            "layout_id": self.layout_id,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(Family(data["family"]), data["instruction"], int(data["seed"]), data["layout_id"])


@dataclass(frozen=True)
class Goal:
    """Goal predicate parameters parsed from an instruction."""

    family: Family
    target: str
    receptacle: str

    @property
    def attribute(self):
        return FAMILY_ATTRIBUTE.get(self.family)


def instruction_for(family, target, goal):
    return INSTRUCTION_TEMPLATES[Family(family)].format(target=target, goal=goal)


def parse_goal(instruction, family=None):
    """Parse the goal predicate out of an instruction.

    When `family` is given only that family's template is tried.
    """
    families = [Family(family)] if family is not None else list(Family)
    for candidate in families:
        match = _INSTRUCTION_PATTERNS[candidate].match(instruction.strip())
        if match:
            return Goal(candidate, match.group("target"), match.group("goal"))
    raise ConfigurationError(f"instruction {instruction!r} does not match any task template")


def object_type(identifier):
    """'pan 1' -> 'pan'."""
    return identifier.rsplit(" ", 1)[0] if identifier and identifier[-1].isdigit() else identifier


_ACTION_PATTERNS = [
    (Verb.GOTO, re.compile(r"^go to (?P<object>.+)$")),
    (Verb.TAKE, re.compile(r"^take (?P<object>.+?) from (?P<receptacle>.+)$")),
    (Verb.PUT, re.compile(r"^put (?P<object>.+?) in (?P<receptacle>.+)$")),
    (Verb.CLEAN, re.compile(r"^clean (?P<object>.+?) with (?P<receptacle>.+)$")),
    (Verb.HEAT, re.compile(r"^heat (?P<object>.+?) with (?P<receptacle>.+)$")),
    (Verb.COOL, re.compile(r"^cool (?P<object>.+?) with (?P<receptacle>.+)$")),
    (Verb.OPEN, re.compile(r"^open (?P<object>.+)$")),
    (Verb.CLOSE, re.compile(r"^close (?P<object>.+)$")),
    (Verb.EXAMINE, re.compile(r"^examine (?P<object>.+)$")),
    (Verb.USE, re.compile(r"^use (?P<object>.+)$")),
]

_RECEPTACLE_VERBS = {Verb.TAKE: "from", Verb.PUT: "in", Verb.CLEAN: "with", Verb.HEAT: "with", Verb.COOL: "with"}


@dataclass(frozen=True, order=True)
class Action:
    verb: Verb
    object: str
    receptacle: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "verb", Verb(self.verb))
        needs_receptacle = self.verb in _RECEPTACLE_VERBS
        if needs_receptacle != (self.receptacle is not None):
            raise ValueError(f"verb {self.verb.value!r} {'requires' if needs_receptacle else 'takes no'} receptacle")

    @property
    def text(self):
        if self.verb == Verb.GOTO:
            return f"go to {self.object}"
        if self.verb in _RECEPTACLE_VERBS:
            return f"{self.verb.value} {self.object} {_RECEPTACLE_VERBS[self.verb]} {self.receptacle}"
        return f"{self.verb.value} {self.object}"

    def __str__(self):
        return self.text

    @classmethod
    def parse(cls, text):
        normalized = " ".join(text.strip().lower().split())
        for verb, pattern in _ACTION_PATTERNS:
            match = pattern.match(normalized)
            if match:
                groups = match.groupdict()
                return cls(verb, groups["object"], groups.get("receptacle"))
        raise ValueError(f"cannot parse action {text!r}")


@dataclass(frozen=True)
class Observation:
    text: str
    visible_objects: Tuple[str, ...] = ()
    feedback_code: FeedbackCode = FeedbackCode.OK

    def __post_init__(self):
        object.__setattr__(self, "visible_objects", tuple(self.visible_objects))
        object.__setattr__(self, "feedback_code", FeedbackCode(self.feedback_code))

    def to_dict(self):
        return {
            "text": self.text,
            "visible_objects": list(self.visible_objects),
            "feedback_code": self.feedback_code.value,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data["text"], tuple(data.get("visible_objects", ())), FeedbackCode(data.get("feedback_code", "ok")))


@dataclass(frozen=True)
class Outcome:
    status: OutcomeStatus
    steps_used: int

    def __post_init__(self):
        object.__setattr__(self, "status", OutcomeStatus(self.status))

    def to_dict(self):
        return {"status": self.status.value, "steps_used": self.steps_used}

    @classmethod
    def from_dict(cls, data):
        return cls(OutcomeStatus(data["status"]), int(data["steps_used"]))


_REWARDS = {
    OutcomeStatus.COMPLETED: 1.0,
    OutcomeStatus.PARTIAL: 0.5,
    OutcomeStatus.INCOMPLETE: 0.0,
}


def outcome_reward(outcome):
    """Outcome reward: completed -> 1, partial -> 0.5, incomplete -> 0."""
    status = outcome.status if isinstance(outcome, Outcome) else OutcomeStatus(outcome)
    return _REWARDS[status]


@dataclass(frozen=True)
class EnvSnapshot:
    """Opaque capture of hidden environment state.

    `payload` is environment specific but must be JSON serializable.
    """

    layout_id: str
    payload: Dict[str, Any] = field(default_factory=dict, compare=True, hash=False)

    def to_dict(self):
        return {"layout_id": self.layout_id, "payload": self.payload}

    @classmethod
    def from_dict(cls, data):
        return cls(data["layout_id"], data["payload"])


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    candidates: Tuple[Action, ...]
    terminal: bool
    outcome: Optional[Outcome] = None
