import numpy as np

from mctsep.agents.softmax import ActionDistribution
from mctsep.exceptions import ContractError


class BasePolicy:
    """Base class for providers of action distributions over candidate actions."""

    def distribution(self, state, candidates):
        """Return the ActionDistribution over `candidates` at `state`."""
        raise NotImplementedError

    def greedy(self, state, candidates):
        return self.distribution(state, candidates).argmax()

    def sample(self, state, candidates, rng):
        distribution = self.distribution(state, candidates)
        return distribution.actions[int(rng.choice(len(distribution.actions), p=distribution.probabilities))]

    def act(self, state, candidates):
        """Pick the action to play and an optional summary of the current observation."""
        return self.greedy(state, candidates), None

    def reset(self):
        pass


class UniformPolicy(BasePolicy):
    def distribution(self, state, candidates):
        candidates = tuple(candidates)
        if not candidates:
            raise ContractError("candidate list is empty")
        return ActionDistribution(candidates, np.full(len(candidates), 1.0 / len(candidates)))


class ScriptedPolicy(BasePolicy):
    """Plays a fixed plan: step k puts all mass on plan[k].

    Off-plan states (a plan action that is not a candidate, or a history longer
    than the plan) fall back to the first candidate.
    """

    def __init__(self, plan):
        self.plan = tuple(plan)

    def distribution(self, state, candidates):
        candidates = tuple(candidates)
        if not candidates:
            raise ContractError("candidate list is empty")
        probabilities = np.zeros(len(candidates))
        depth = state.depth
        if depth < len(self.plan) and self.plan[depth] in candidates:
            probabilities[candidates.index(self.plan[depth])] = 1.0
        else:
            probabilities[0] = 1.0
        return ActionDistribution(candidates, probabilities)
