import functools
import hashlib
import json
from dataclasses import dataclass, field
from typing import NewType, Optional, Tuple

from mctsep.environments.core import Action, Observation
from mctsep.exceptions import ContractError

StateKey = NewType("StateKey", str)

NOTHING_HAPPENS = "Nothing happens."


def identity_summarizer(observation):
    """Default summarizer: GridHouse observations are already compact."""
    return observation.text


def state_key(instruction, history, observation_text):
    """128-bit blake2b digest of the canonical JSON form of a state."""
    payload = json.dumps(
        [instruction, [[action.text, summary] for action, summary in history], observation_text],
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return StateKey(hashlib.blake2b(payload.encode("utf-8"), digest_size=16).hexdigest())


@dataclass(frozen=True)
class AgentState:
    """Instruction, compressed history and the one full current observation.

    `history[k]` pairs the k-th action with the summary of the observation that
    was current when it was taken; `observations[k]` keeps the raw text of that
    observation. The raw texts do not enter the state key.
    """

    instruction: str
    current_observation: Observation
    history: Tuple[Tuple[Action, str], ...] = field(default=())
    observations: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "history", tuple((action, summary) for action, summary in self.history))
        if not self.observations and self.history:
            object.__setattr__(self, "observations", tuple(summary for _, summary in self.history))
        object.__setattr__(self, "observations", tuple(self.observations))
        if len(self.observations) != len(self.history):
            raise ContractError(
                f"state has {len(self.history)} history entries but {len(self.observations)} raw observations"
            )

    @property
    def depth(self):
        return len(self.history)

    @property
    def last_action(self):
        return self.history[-1][0] if self.history else None

    @functools.cached_property
    def key(self):
        return state_key(self.instruction, self.history, self.current_observation.text)

    def revisits_observation(self):
        """True when the current observation text was already seen earlier on this path.

        Compares raw observation texts, so a lossy summarizer cannot hide a revisit.
        """
        return self.current_observation.text in self.observations

    def step_results(self):
        """(action, text observed right after it) for every history entry."""
        texts = [summary for _, summary in self.history[1:]] + [self.current_observation.text]
        return [(action, text) for (action, _), text in zip(self.history, texts)]

    def to_dict(self):
        return {
            "instruction": self.instruction,
            "history": [[action.text, summary] for action, summary in self.history],
            "observations": list(self.observations),
            "observation": self.current_observation.to_dict(),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            data["instruction"],
            Observation.from_dict(data["observation"]),
            tuple((Action.parse(action), summary) for action, summary in data["history"]),
            tuple(data.get("observations", ())),
        )


def init_state(instruction, o0):
    if not instruction or not instruction.strip():
        raise ContractError("instruction must be non-empty")
    return AgentState(instruction, o0, ())


def advance(state, action, o_next, summarizer=identity_summarizer, summary: Optional[str] = None):
    """Return the successor state; `state` itself is left untouched.

    The retiring observation is summarized; a model-produced `summary` takes
    precedence over the summarizer.
    """
    if summary is None:
        summary = summarizer(state.current_observation)
    return AgentState(
        state.instruction,
        o_next,
        state.history + ((action, summary),),
        state.observations + (state.current_observation.text,),
    )
