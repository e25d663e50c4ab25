"""Imitation and preference training for the featurized softmax policy.

SFT minimises the negative log-likelihood of recorded actions; DPO minimises
-log σ(β·[(log π(a_w|s) - log π_ref(a_w|s)) - (log π(a_l|s) - log π_ref(a_l|s))]).
Both are averaged over batch items and optimised with clipped gradient descent.
"""

import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import List, Optional

import numpy as np
from tqdm import tqdm

from mctsep.agents.softmax import PolicyParams, SoftmaxPolicy, feature_matrix, log_softmax, softmax
from mctsep.dataset import extract_preferences, extract_success, merge_buffers
from mctsep.environments.core import Action
from mctsep.exceptions import ConfigValidationError, ContractError, DataError, TrainingDivergedError
from mctsep.search import run_search
from mctsep.utils import canonical_json, derive_seed, read_json, sha256_hex, write_json

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.5
    learning_rate: float = 0.5
    epochs_sft: int = 20
    epochs_dpo: int = 10
    batch_size: int = 16
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        checks = [
            ("beta", self.beta > 0, "must be positive"),
            ("learning_rate", self.learning_rate > 0, "must be positive"),
            ("epochs_sft", self.epochs_sft >= 0, "must be non-negative"),
            ("epochs_dpo", self.epochs_dpo >= 0, "must be non-negative"),
            ("batch_size", self.batch_size >= 1, "must be at least 1"),
            ("grad_clip", self.grad_clip > 0, "must be positive"),
            ("seed", self.seed >= 0, "must be unsigned"),
        ]
        for name, ok, message in checks:
            if not ok:
                raise ConfigValidationError(f"train.{name}", f"{message} (got {getattr(self, name)!r})")

    @classmethod
    def from_config(cls, section):
        names = {f.name for f in fields(cls)}
        return cls(**{key: section[key] for key in section if key in names})

    def to_dict(self):
        return asdict(self)

    @property
    def hash(self):
        return sha256_hex(canonical_json(self.to_dict()))


class ReferencePolicy:
    """Frozen copy of the policy parameters that normalises DPO log-ratios."""

    def __init__(self, params):
        weights = np.array(params.weights, dtype=np.float64, copy=True)
        weights.setflags(write=False)
        self.params = PolicyParams(weights, params.feature_version)

    @property
    def weights(self):
        return self.params.weights


@dataclass
class IterationReport:
    iteration: int
    trajectories: int
    pairs: int
    new_trajectories: int
    new_pairs: int
    sft_loss: Optional[float]
    dpo_loss: Optional[float]
    success_rate: float
    mean_steps: float
    noop: bool = False

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**{f.name: data[f.name] for f in fields(cls)})


@dataclass(eq=False)
class _Decision:
    matrix: object
    index: int


@dataclass(eq=False)
class _Comparison:
    matrix: object
    winner: int
    loser: int
    ref_margin: float


def _decision(state, candidates, action_text, dim, where):
    action = Action.parse(action_text)
    if action not in candidates:
        raise DataError(f"{where}: action {action_text!r} is not among the recorded candidates")
    return _Decision(feature_matrix(state, candidates, dim), candidates.index(action))


def compile_trajectories(trajectories, dim):
    """Feature matrices for every step, grouped per trajectory."""
    compiled = []
    for t, trajectory in enumerate(trajectories):
        decisions = []
        for k, step in enumerate(trajectory.steps):
            where = f"trajectory {t} ({trajectory.task.task_id}) step {k}"
            decisions.append(_decision(step.agent_state(), step.candidate_actions(), step.action, dim, where))
        compiled.append(decisions)
    return compiled


def compile_pairs(pairs, reference, dim):
    """Feature matrices and reference log-ratio margins for every preference pair."""
    compiled = []
    for p, pair in enumerate(pairs):
        candidates = pair.candidate_actions()
        state = pair.agent_state()
        winner = _decision(state, candidates, pair.winner, dim, f"pair {p} winner")
        loser = _decision(state, candidates, pair.loser, dim, f"pair {p} loser")
        ref_logp = log_softmax(winner.matrix.logits(reference.weights))
        compiled.append(_Comparison(winner.matrix, winner.index, loser.index, ref_logp[winner.index] - ref_logp[loser.index]))
    return compiled


def _sft_terms(weights, compiled, with_grad=True):
    """Summed loss and gradient over a list of compiled trajectories."""
    loss = 0.0
    grad = np.zeros(weights.shape[0]) if with_grad else None
    for decisions in compiled:
        for decision in decisions:
            logits = decision.matrix.logits(weights)
            loss -= log_softmax(logits)[decision.index]
            if with_grad:
                coefficients = softmax(logits)
                coefficients[decision.index] -= 1.0
                grad += decision.matrix.weighted_sum(coefficients, weights.shape[0])
    return loss, grad


def _dpo_terms(weights, compiled, beta, with_grad=True):
    loss = 0.0
    grad = np.zeros(weights.shape[0]) if with_grad else None
    for comparison in compiled:
        logp = log_softmax(comparison.matrix.logits(weights))
        x = beta * ((logp[comparison.winner] - logp[comparison.loser]) - comparison.ref_margin)
        loss += np.logaddexp(0.0, -x)
        if with_grad:
            # d/dx of log(1 + e^-x) is -σ(-x)
            sigma = math.exp(-np.logaddexp(0.0, x))
            coefficients = np.zeros(comparison.matrix.n_candidates)
            coefficients[comparison.winner] -= beta * sigma
            coefficients[comparison.loser] += beta * sigma
            grad += comparison.matrix.weighted_sum(coefficients, weights.shape[0])
    return loss, grad


def sft_loss(params, trajectories):
    """Mean over trajectories of Σ_t -log π(a_t | s_{t-1}).

    Raises:
        DataError: A recorded action is missing from its step's candidates.
    """
    if not trajectories:
        raise ContractError("sft_loss needs at least one trajectory")
    loss, _ = _sft_terms(params.weights, compile_trajectories(trajectories, params.dim), with_grad=False)
    return float(loss) / len(trajectories)


def sft_grad(params, trajectories):
    if not trajectories:
        raise ContractError("sft_grad needs at least one trajectory")
    _, grad = _sft_terms(params.weights, compile_trajectories(trajectories, params.dim))
    return grad / len(trajectories)


def dpo_loss(params, reference, pairs, beta):
    """Mean DPO loss over `pairs` against the frozen `reference`."""
    if not pairs:
        raise ContractError("dpo_loss needs at least one pair")
    loss, _ = _dpo_terms(params.weights, compile_pairs(pairs, reference, params.dim), beta, with_grad=False)
    return float(loss) / len(pairs)


def dpo_grad(params, reference, pairs, beta):
    if not pairs:
        raise ContractError("dpo_grad needs at least one pair")
    _, grad = _dpo_terms(params.weights, compile_pairs(pairs, reference, params.dim), beta)
    return grad / len(pairs)


def train_phase(params, data, config, kind, reference=None, progress=False):
    """Mini-batch gradient descent with gradient-norm clipping.

    Args:
        params (PolicyParams): Starting parameters (not modified).
        data (list): Trajectories for "sft", preference pairs for "dpo".
        config (TrainConfig): Optimiser settings; `config.seed` fixes the shuffle.
        kind (str): "sft" or "dpo".
        reference (ReferencePolicy, optional): Frozen policy for "dpo"; defaults to a snapshot of `params`.

    Returns:
        tuple[PolicyParams, list[float]]: New parameters and the mean loss of every epoch.

    Raises:
        TrainingDivergedError: A loss or gradient became non-finite.
    """
    if not data:
        raise ContractError(f"{kind} phase needs non-empty data")
    if kind == "sft":
        compiled = compile_trajectories(data, params.dim)
        epochs = config.epochs_sft

        def terms(weights, batch):
            return _sft_terms(weights, batch)

    elif kind == "dpo":
        reference = reference or ReferencePolicy(params)
        compiled = compile_pairs(data, reference, params.dim)
        epochs = config.epochs_dpo

        def terms(weights, batch):
            return _dpo_terms(weights, batch, config.beta)

    else:
        raise ContractError(f"unknown training phase {kind!r}")

    rng = np.random.default_rng(config.seed)
    weights = params.weights.copy()
    curve = []
    for epoch in tqdm(range(epochs), desc=f"{kind} epochs", disable=not progress, leave=False):
        order = rng.permutation(len(compiled))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [compiled[i] for i in order[start : start + config.batch_size]]
            loss, grad = terms(weights, batch)
            loss, grad = loss / len(batch), grad / len(batch)
            norm = float(np.linalg.norm(grad))
            if not (math.isfinite(loss) and math.isfinite(norm)):
                report = {"kind": kind, "epoch": epoch, "batch_start": start, "loss": loss, "grad_norm": norm, "curve": curve}
                raise TrainingDivergedError(f"{kind} loss diverged at epoch {epoch}", report)
            if norm > config.grad_clip:
                grad *= config.grad_clip / norm
            weights -= config.learning_rate * grad
            epoch_loss += loss * len(batch)
        curve.append(epoch_loss / len(compiled))
        logger.debug(f"{kind} epoch {epoch}: loss {curve[-1]:.6f}")
    return PolicyParams(weights, params.feature_version), curve


def warmup_expert(params, trajectories, config):
    """SFT over the expert-sourced trajectories; params are returned unchanged when there are none."""
    experts = [t for t in trajectories if t.source == "expert"]
    if not experts:
        logger.warning("No expert trajectories; skipping warm-up")
        return params
    new_params, curve = train_phase(params, experts, config, "sft")
    logger.info(f"Expert warm-up on {len(experts)} trajectories: loss {curve[0]:.4f} -> {curve[-1]:.4f}")
    return new_params


@dataclass
class Buffers:
    trajectories: List = None
    pairs: List = None

    def __post_init__(self):
        self.trajectories = list(self.trajectories or [])
        self.pairs = list(self.pairs or [])


def collect_from_suite(params, suite, search_config, env, critic, iteration=0, epsilon=0.1, n_min=2, per_node_cap=6):
    """Search every task with the current policy and extract both datasets.

    Each task's search seed is derived from the configured seed, the task id
    and the iteration, so results do not depend on suite order.
    """
    policy = SoftmaxPolicy(params)
    trajectories, pairs, trees = [], [], []
    for spec in tqdm(suite, desc="Searching tasks", leave=False):
        config = replace(search_config, seed=derive_seed(search_config.seed, spec.task_id, iteration))
        tree = run_search(spec, policy, critic, env, config)
        found = extract_success(tree)
        preferred = extract_preferences(tree, epsilon, n_min, per_node_cap)
        logger.info(f"{spec.task_id}: {len(found)} trajectories, {len(preferred)} pairs")
        trajectories.extend(found)
        pairs.extend(preferred)
        trees.append(tree)
    return trajectories, pairs, trees


def run_iteration(
    params,
    suite,
    search_config,
    train_config,
    env,
    critic,
    eval_suite=None,
    buffers=None,
    iteration=0,
    loop_config=None,
    datasets_config=None,
):
    """One round of search, data merging, SFT, DPO and held-out evaluation.

    Args:
        params (PolicyParams): Parameters at the start of the iteration.
        suite (list[TaskSpec]): Training tasks to search.
        search_config (SearchConfig): Search settings.
        train_config (TrainConfig): Optimiser settings.
        env: Environment handle used for search and evaluation.
        critic: Expansion gate.
        eval_suite (list[TaskSpec], optional): Held-out tasks for greedy evaluation.
        buffers (Buffers, optional): Datasets accumulated by earlier iterations.
        iteration (int): Iteration index.
        loop_config (mapping, optional): `skip_sft`, `skip_dpo`, `fresh_only`, `buffer_cap`, `pair_cap`.
        datasets_config (mapping, optional): `epsilon`, `n_min`, `per_node_cap`.

    Returns:
        tuple[PolicyParams, IterationReport, Buffers]
    """
    from mctsep.evaluator import PolicyActor, evaluate_actor

    if not suite:
        raise ContractError("run_iteration needs a non-empty task suite")
    loop_config = loop_config or {}
    datasets_config = datasets_config or {}
    buffers = buffers or Buffers()

    new_trajectories, new_pairs, _ = collect_from_suite(
        params,
        suite,
        search_config,
        env,
        critic,
        iteration,
        datasets_config.get("epsilon", 0.1),
        datasets_config.get("n_min", 2),
        datasets_config.get("per_node_cap", 6),
    )
    if loop_config.get("fresh_only", False):
        merged = Buffers(new_trajectories, new_pairs)
    else:
        merged = Buffers(
            merge_buffers(buffers.trajectories, new_trajectories, loop_config.get("buffer_cap")),
            merge_buffers(buffers.pairs, new_pairs, loop_config.get("pair_cap")),
        )

    sft_value = dpo_value = None
    noop = not merged.trajectories and not merged.pairs
    if noop:
        logger.warning(f"Iteration {iteration} found no trajectories and no pairs; parameters unchanged")
    else:
        iteration_config = replace(train_config, seed=derive_seed(train_config.seed, "iteration", iteration))
        if merged.trajectories and not loop_config.get("skip_sft", False):
            params, curve = train_phase(params, merged.trajectories, iteration_config, "sft")
            sft_value = curve[-1] if curve else None
        reference = ReferencePolicy(params)
        if merged.pairs and not loop_config.get("skip_dpo", False):
            params, curve = train_phase(params, merged.pairs, iteration_config, "dpo", reference=reference)
            dpo_value = curve[-1] if curve else None

    success_rate = mean_steps = 0.0
    if eval_suite:
        report = evaluate_actor(env, eval_suite, PolicyActor(SoftmaxPolicy(params)))
        success_rate, mean_steps = report.success_rate, report.mean_steps

    report = IterationReport(
        iteration=iteration,
        trajectories=len(merged.trajectories),
        pairs=len(merged.pairs),
        new_trajectories=len(new_trajectories),
        new_pairs=len(new_pairs),
        sft_loss=sft_value,
        dpo_loss=dpo_value,
        success_rate=success_rate,
        mean_steps=mean_steps,
        noop=noop,
    )
    logger.info(
        f"Iteration {iteration}: |B|={report.trajectories} |P|={report.pairs} "
        f"success={success_rate:.3f} steps={mean_steps:.2f}"
    )
    return params, report, merged


def save_checkpoint(path, params, train_config=None, config_hash=None, iteration=None, phase=None):
    write_json(
        path,
        {
            "version": CHECKPOINT_FORMAT_VERSION,
            "params": params.to_dict(),
            "train_config_hash": train_config.hash if train_config is not None else None,
            "config_hash": config_hash,
            "iteration": iteration,
            "phase": phase,
        },
    )


def load_checkpoint(path):
    """Return (PolicyParams, checkpoint metadata)."""
    data = read_json(path)
    if data.get("version") != CHECKPOINT_FORMAT_VERSION:
        raise DataError(f"checkpoint {path} has version {data.get('version')}, expected {CHECKPOINT_FORMAT_VERSION}")
    params = PolicyParams.from_dict(data["params"])
    meta = {key: value for key, value in data.items() if key != "params"}
    return params, meta
