"""Featurized linear-softmax policy over candidate actions."""

import functools
import hashlib
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from mctsep.environments.core import Action, Verb, object_type, parse_goal
from mctsep.exceptions import ArtifactMismatchError, ConfigurationError, ContractError, DatasetFormatError
from mctsep.prompt_builder.state import NOTHING_HAPPENS

FEATURE_VERSION = "gridhouse-v1"
PARAMS_FORMAT_VERSION = 1
DEFAULT_DIM = 4096

# Verbs whose `object` slot names a receptacle (or a lamp for `use`).
_RECEPTACLE_OBJECT_VERBS = (Verb.GOTO, Verb.OPEN, Verb.CLOSE, Verb.EXAMINE, Verb.USE)
_TREATMENT_ATTRIBUTE = {Verb.CLEAN: "clean", Verb.HEAT: "hot", Verb.COOL: "cold"}


@dataclass(frozen=True)
class ActionDistribution:
    actions: Tuple[Action, ...]
    probabilities: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        if len(self.actions) != len(self.probabilities):
            raise ContractError("distribution length does not match its candidate list")

    def probability(self, action):
        return float(self.probabilities[self.actions.index(action)])

    def argmax(self):
        return self.actions[int(np.argmax(self.probabilities))]


@dataclass(eq=False)
class PolicyParams:
    weights: np.ndarray
    feature_version: str = FEATURE_VERSION

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 1:
            raise ContractError("policy weights must be a vector")
        if not np.all(np.isfinite(self.weights)):
            raise ContractError("policy weights must be finite")

    @classmethod
    def zeros(cls, dim=DEFAULT_DIM):
        return cls(np.zeros(dim))

    @property
    def dim(self):
        return self.weights.shape[0]

    def copy(self):
        return PolicyParams(self.weights.copy(), self.feature_version)

    def to_dict(self):
        nonzero = np.flatnonzero(self.weights)
        return {
            "version": PARAMS_FORMAT_VERSION,
            "feature_version": self.feature_version,
            "dim": self.dim,
            "weights": {str(int(i)): float(self.weights[i]) for i in nonzero},
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("version") != PARAMS_FORMAT_VERSION:
            raise DatasetFormatError(f"policy params version {data.get('version')} is not {PARAMS_FORMAT_VERSION}")
        if data.get("feature_version") != FEATURE_VERSION:
            raise ArtifactMismatchError(
                f"policy params were trained with feature map {data.get('feature_version')!r}, not {FEATURE_VERSION!r}"
            )
        weights = np.zeros(int(data["dim"]))
        for index, value in data["weights"].items():
            weights[int(index)] = value
        return cls(weights, data["feature_version"])


@functools.lru_cache(maxsize=256)
def _goal_for(instruction):
    try:
        return parse_goal(instruction)
    except ConfigurationError:
        return None


def _receptacle_of(action):
    if action.receptacle is not None:
        return action.receptacle
    return action.object if action.verb in _RECEPTACLE_OBJECT_VERBS else None


def _progress(state, goal):
    """Phase flags recovered from the history: what is held, treated, placed, visited."""
    held = None
    treated = set()
    placed = set()
    visited = set()
    for action, text in state.step_results():
        if text == NOTHING_HAPPENS:
            continue
        if action.verb == Verb.GOTO:
            visited.add(action.object)
        elif action.verb == Verb.TAKE:
            held = action.object
            placed.discard(action.object)
        elif action.verb == Verb.PUT:
            held = None
            if object_type(action.object) == goal.target and object_type(action.receptacle) == goal.receptacle:
                placed.add(action.object)
        elif action.verb in _TREATMENT_ATTRIBUTE:
            if _TREATMENT_ATTRIBUTE[action.verb] == goal.attribute:
                treated.add(action.object)
            else:
                treated.discard(action.object)
    return held, treated, placed, visited


def featurize(state, action):
    """Named features of (state, action); every value is 1.0."""
    goal = _goal_for(state.instruction)
    verb = action.verb.value
    otype = object_type(action.object)
    receptacle = _receptacle_of(action)
    features = [f"verb={verb}", f"verb_obj={verb}|{otype}"]

    object_match = goal is not None and otype == goal.target
    receptacle_match = goal is not None and receptacle is not None and object_type(receptacle) == goal.receptacle
    if object_match:
        features.append("goal_object_match")
    if receptacle_match:
        features.append("goal_receptacle_match")
    features.append(f"depth={min(state.depth // 3, 3)}|{verb}")
    if state.last_action == action:
        features.append("repeat_last_action")

    if goal is not None:
        held, treated, placed, visited = _progress(state, goal)
        if held is None:
            holding = "none"
        elif object_type(held) != goal.target:
            holding = "other"
        elif goal.attribute is None or held in treated:
            holding = "ready"
        else:
            holding = "target"
        done = min(len(placed), 2)
        visible = any(object_type(obj) == goal.target for obj in state.current_observation.visible_objects)
        family = goal.family.value
        features.append(
            f"ctx={family}|{verb}|om={int(object_match)}|rm={int(receptacle_match)}|held={holding}|done={done}|vis={int(visible)}"
        )
        if action.verb == Verb.GOTO:
            features.append(f"nav={family}|{object_type(action.object)}|held={holding}|done={done}")
            if action.object in visited:
                features.append(f"visited|held={holding}")
    return {name: 1.0 for name in features}


@functools.lru_cache(maxsize=65536)
def feature_index(name, dim):
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dim


@dataclass(eq=False)
class FeatureMatrix:
    """Sparse (candidate x feature) matrix in coordinate form."""

    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    n_candidates: int

    def logits(self, weights):
        return np.bincount(self.rows, weights=weights[self.cols] * self.values, minlength=self.n_candidates)

    def weighted_sum(self, coefficients, dim):
        """Σ_i coefficients[i] · φ(candidate i) as a dense vector."""
        out = np.zeros(dim)
        np.add.at(out, self.cols, self.values * coefficients[self.rows])
        return out

    def row(self, index, dim):
        coefficients = np.zeros(self.n_candidates)
        coefficients[index] = 1.0
        return self.weighted_sum(coefficients, dim)


def feature_matrix(state, candidates, dim=DEFAULT_DIM):
    rows, cols, values = [], [], []
    for i, action in enumerate(candidates):
        for name, value in featurize(state, action).items():
            rows.append(i)
            cols.append(feature_index(name, dim))
            values.append(value)
    return FeatureMatrix(
        np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64), np.asarray(values), len(candidates)
    )


def softmax(logits):
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / e.sum()


def log_softmax(logits):
    z = logits - np.max(logits)
    return z - math.log(np.exp(z).sum())


def _checked(candidates):
    candidates = tuple(candidates)
    if not candidates:
        raise ContractError("candidate list is empty")
    return candidates


def action_distribution(params, state, candidates):
    candidates = _checked(candidates)
    matrix = feature_matrix(state, candidates, params.dim)
    return ActionDistribution(candidates, softmax(matrix.logits(params.weights)))


def log_prob(params, state, action, candidates):
    candidates = _checked(candidates)
    if action not in candidates:
        raise ContractError(f"action {action.text!r} is not among the candidates")
    matrix = feature_matrix(state, candidates, params.dim)
    return float(log_softmax(matrix.logits(params.weights))[candidates.index(action)])


def greedy_action(params, state, candidates):
    """Highest-probability action; the first candidate wins ties."""
    return action_distribution(params, state, candidates).argmax()


def sample_action(params, state, candidates, rng):
    distribution = action_distribution(params, state, candidates)
    return distribution.actions[int(rng.choice(len(distribution.actions), p=distribution.probabilities))]


class SoftmaxPolicy:
    """Trainable policy: softmax over dot(weights, features)."""

    def __init__(self, params):
        self.params = params

    def distribution(self, state, candidates):
        return action_distribution(self.params, state, candidates)

    def greedy(self, state, candidates):
        return greedy_action(self.params, state, candidates)

    def sample(self, state, candidates, rng):
        return sample_action(self.params, state, candidates, rng)

    def act(self, state, candidates):
        return self.greedy(state, candidates), None

    def reset(self):
        pass
