import logging
import re
from dataclasses import dataclass

from mctsep.exceptions import ConfigurationError, ResponseParseError
from mctsep.prompt_builder import render_context

logger = logging.getLogger(__name__)

_NUMBER = re.compile(r"[-+]?(?:\d+\.\d*|\.\d+|\d+)")


@dataclass(frozen=True)
class CriticScore:
    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"critic score {self.value} is outside [0, 1]")


class HeuristicCritic:
    """1 - repeat penalty - depth penalty, clamped to [0, 1].

    With the default penalties a state at depth d_max scores exactly 0.5, so
    the default expansion threshold keeps it a leaf.
    """

    def __init__(self, d_max, repeat_penalty=1.0, depth_penalty=0.5):
        if d_max < 1:
            raise ConfigurationError("critic d_max must be positive")
        self.d_max = d_max
        self.repeat_penalty = repeat_penalty
        self.depth_penalty = depth_penalty

    def score(self, state):
        value = 1.0
        if state.revisits_observation():
            value -= self.repeat_penalty
        value -= self.depth_penalty * state.depth / self.d_max
        return CriticScore(min(1.0, max(0.0, value)))


def parse_score(text):
    match = _NUMBER.search(text)
    if match is None:
        raise ResponseParseError(f"no number in critic output {text[:200]!r}")
    return CriticScore(min(1.0, max(0.0, float(match.group(0)))))


class RemoteCritic:
    """Critic that asks a model to rate the current state."""

    def __init__(self, client, template):
        self.client = client
        self.template = template

    def score(self, state):
        response = self.client.generate(render_context(state, self.template))
        return parse_score(response.completion)


def critic_score(critic, state):
    return critic.score(state)
