import json
import logging
import re

import numpy as np

from mctsep.agents.base import BasePolicy
from mctsep.agents.softmax import ActionDistribution, softmax
from mctsep.environments.core import Action
from mctsep.exceptions import AdapterError, ContractError, NonCandidateActionError, ResponseParseError
from mctsep.prompt_builder import render_context

logger = logging.getLogger(__name__)


def _loose_tokens(text):
    """Lower-cased tokens without instance numbers: 'take pan 1 from x 2' -> [take, pan, from, x]."""
    return [token for token in text.lower().replace('"', " ").split() if not token.isdigit()]


def match_candidate(text, candidates):
    """Map model text onto one candidate.

    An exact canonical match wins; otherwise the output may omit instance
    numbers or trailing words as long as exactly one candidate fits.
    """
    cleaned = text.strip().strip(".'\"`").strip()
    if not cleaned:
        raise ResponseParseError("model output is empty")
    try:
        parsed = Action.parse(cleaned)
    except ValueError:
        parsed = None
    if parsed is not None and parsed in candidates:
        return parsed
    wanted = _loose_tokens(cleaned)
    matches = [a for a in candidates if _loose_tokens(a.text)[: len(wanted)] == wanted]
    if len(matches) == 1:
        return matches[0]
    if matches:
        raise NonCandidateActionError(f"model output {cleaned!r} is ambiguous among {[a.text for a in matches]}")
    raise NonCandidateActionError(f"model output {cleaned!r} is not a candidate action")


def parse_completion(completion, output_format):
    """Return (action text, summary or None) from a raw completion."""
    if output_format == "json":
        match = re.search(r"\{.*\}", completion, flags=re.DOTALL)
        if match is None:
            raise ResponseParseError(f"no JSON object in model output {completion[:200]!r}")
        try:
            payload = json.loads(match.group(0))
        except json.JSONDecodeError as e:
            raise ResponseParseError(f"invalid JSON in model output: {e}") from e
        if not isinstance(payload, dict) or not isinstance(payload.get("action"), str):
            raise ResponseParseError("JSON output lacks an 'action' string")
        summary = payload.get("what_you_see")
        return payload["action"], summary if isinstance(summary, str) else None
    lines = [line.strip() for line in completion.splitlines() if line.strip()]
    if not lines:
        raise ResponseParseError("model output is empty")
    return lines[0], None


class RemotePolicy(BasePolicy):
    """Action distributions from a generative model behind an endpoint.

    When the client can score candidates the distribution is the softmax of the
    candidate log-likelihoods; otherwise one sampled completion becomes a point
    mass. Unusable replies are retried, then replaced by a uniform fallback.
    """

    def __init__(self, client, template, max_retries=2):
        self.client = client
        self.template = template
        self.max_retries = max_retries
        self.retries = 0
        self.fallbacks = 0
        self.last_summary = None

    def _with_retries(self, func):
        attempt = 0
        while True:
            try:
                return func()
            except AdapterError as e:
                if attempt >= self.max_retries:
                    raise
                attempt += 1
                self.retries += 1
                logger.warning(f"Model reply rejected ({type(e).__name__}: {e}); retry {attempt}/{self.max_retries}")

    def _uniform(self, candidates, reason):
        self.fallbacks += 1
        logger.warning(f"Falling back to a uniform distribution over {len(candidates)} candidates: {reason}")
        return ActionDistribution(candidates, np.full(len(candidates), 1.0 / len(candidates)))

    def sample_with_summary(self, state, candidates):
        """One completion mapped onto a candidate, with the model's summary when it gives one."""
        candidates = tuple(candidates)
        context = render_context(state, self.template, candidates)

        def attempt():
            response = self.client.generate(context, [a.text for a in candidates])
            text, summary = parse_completion(response.completion, self.template.output_format)
            return match_candidate(text, candidates), summary

        return self._with_retries(attempt)

    def distribution(self, state, candidates):
        candidates = tuple(candidates)
        if not candidates:
            raise ContractError("candidate list is empty")
        try:
            if self.client.supports_scores:
                context = render_context(state, self.template, candidates)
                scores = self._with_retries(lambda: self.client.score(context, [a.text for a in candidates]))
                return ActionDistribution(candidates, softmax(np.asarray(scores, dtype=np.float64)))
            action, self.last_summary = self.sample_with_summary(state, candidates)
        except AdapterError as e:
            return self._uniform(candidates, str(e))
        probabilities = np.zeros(len(candidates))
        probabilities[candidates.index(action)] = 1.0
        return ActionDistribution(candidates, probabilities)

    def act(self, state, candidates):
        candidates = tuple(candidates)
        try:
            return self.sample_with_summary(state, candidates)
        except AdapterError as e:
            fallback = self._uniform(candidates, str(e))
            return fallback.argmax(), None

    def reset(self):
        self.last_summary = None
