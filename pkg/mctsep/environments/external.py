"""Adapter for environments living behind the newline-delimited JSON wire protocol.

Client messages are `{"type": "reset", "task": {...}}` and `{"type": "step", "action": "<text>"}`;
the server answers each with `{"type": "result", ...}` or `{"type": "error", "kind": ..., "message": ...}`.
External environments need not support snapshots: interior states are re-entered by replaying the
recorded action prefix from reset and checking every observation against the recorded transcript.
"""

import logging
import socketserver
import threading
from collections import Counter

from mctsep.environments.core import Action, EnvSnapshot, Observation, Outcome, OutcomeStatus, StepResult, TaskSpec
from mctsep.exceptions import (
    ConfigurationError,
    ContractError,
    MalformedMessageError,
    MctsepError,
    ProtocolError,
    ReplayDivergenceError,
)
from mctsep.wire import LineConnection, read_message, send_message

logger = logging.getLogger(__name__)


def _parse_result(message):
    if message.get("type") == "error":
        if message.get("kind") == "protocol":
            raise ProtocolError(message.get("message", "protocol error reported by server"))
        if message.get("kind") == "configuration":
            raise ConfigurationError(message.get("message", "configuration error reported by server"))
        raise MalformedMessageError(f"server error: {message.get('message')}")
    if message.get("type") != "result":
        raise MalformedMessageError(f"expected a result message, got type {message.get('type')!r}")
    try:
        observation = Observation.from_dict(message["observation"])
        candidates = tuple(Action.parse(text) for text in message["candidates"])
        terminal = bool(message["terminal"])
        outcome = Outcome.from_dict(message["outcome"]) if message.get("outcome") else None
        status = OutcomeStatus(message.get("status", "incomplete"))
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedMessageError(f"malformed result message: {e}") from e
    return observation, candidates, terminal, outcome, status


class ExternalEnvSession:
    """Session with an external environment; same contract as `EnvWrapper`.

    The session truncates an episode itself once `max_steps` actions have been sent,
    whatever step limit the server applies.
    """

    def __init__(self, endpoint, spec=None, max_steps=30, timeout=30.0):
        if max_steps < 1:
            raise ConfigurationError("external sessions need max_steps of at least 1")
        self.endpoint = endpoint
        self.spec = spec
        self.max_steps = max_steps
        self.timeout = timeout
        self.messages_sent = Counter()
        self._connection = None
        self._actions = []
        self._transcript = []
        self._status = OutcomeStatus.INCOMPLETE
        self._terminal = False

    @property
    def connection(self):
        if self._connection is None:
            self._connection = LineConnection(self.endpoint, timeout=self.timeout)
        return self._connection

    def _request(self, message):
        self.messages_sent[message["type"]] += 1
        return _parse_result(self.connection.request(message))

    def reset(self, spec=None):
        if spec is not None:
            self.spec = spec
        if self.spec is None:
            raise ContractError("ExternalEnvSession.reset needs a TaskSpec")
        observation, candidates, terminal, _, status = self._request({"type": "reset", "task": self.spec.to_dict()})
        self._actions = []
        self._transcript = [observation.text]
        self._status = status
        self._terminal = terminal
        return observation, candidates, self.snapshot()

    def step(self, action):
        if self._terminal:
            raise ProtocolError("step called after the episode terminated")
        action = action if isinstance(action, Action) else Action.parse(action)
        observation, candidates, terminal, outcome, status = self._request({"type": "step", "action": action.text})
        self._actions.append(action.text)
        self._transcript.append(observation.text)
        self._status = status
        if not terminal and len(self._actions) >= self.max_steps:
            logger.debug(f"Truncating {self.spec.task_id} at the {self.max_steps}-step cap")
            terminal, candidates = True, ()
            outcome = Outcome(status, len(self._actions))
        self._terminal = terminal
        return StepResult(observation, candidates, terminal, outcome)

    def snapshot(self):
        if self.spec is None:
            raise ProtocolError("snapshot called before reset")
        payload = {
            "replay": {
                "task": self.spec.to_dict(),
                "actions": list(self._actions),
                "transcript": list(self._transcript),
            }
        }
        return EnvSnapshot(self.spec.layout_id, payload)

    def restore(self, snapshot):
        replay = snapshot.payload.get("replay")
        if replay is None:
            raise ConfigurationError("external sessions can only restore replay snapshots")
        if self.spec is not None and snapshot.layout_id != self.spec.layout_id:
            raise ConfigurationError(
                f"cannot restore a {snapshot.layout_id!r} snapshot into a {self.spec.layout_id!r} session"
            )
        self.spec = TaskSpec.from_dict(replay["task"])
        transcript = replay["transcript"]
        observation, _, terminal, _, status = self._request({"type": "reset", "task": self.spec.to_dict()})
        if observation.text != transcript[0]:
            raise ReplayDivergenceError(0, transcript[0], observation.text)
        self._actions, self._transcript = [], [observation.text]
        self._status, self._terminal = status, terminal
        for index, action_text in enumerate(replay["actions"], start=1):
            result = self.step(Action.parse(action_text))
            if result.observation.text != transcript[index]:
                raise ReplayDivergenceError(index, transcript[index], result.observation.text)
        logger.debug(f"Replayed {len(replay['actions'])} actions for {self.spec.task_id}")

    def current_outcome(self):
        return Outcome(self._status, len(self._actions))

    def close(self):
        if self._connection is not None:
            self._connection.close()
            self._connection = None


def external_env_session(endpoint, spec, max_steps=30, timeout=30.0):
    """Open a session with an external environment for `spec`."""
    return ExternalEnvSession(endpoint, spec=spec, max_steps=max_steps, timeout=timeout)


def result_message(result_or_reset, status):
    if isinstance(result_or_reset, StepResult):
        observation, candidates = result_or_reset.observation, result_or_reset.candidates
        terminal, outcome = result_or_reset.terminal, result_or_reset.outcome
    else:
        observation, candidates, _ = result_or_reset
        terminal, outcome = False, None
    return {
        "type": "result",
        "observation": observation.to_dict(),
        "candidates": [a.text for a in candidates],
        "terminal": terminal,
        "outcome": outcome.to_dict() if outcome is not None else None,
        "status": status.value,
    }


class EnvRequestHandler(socketserver.StreamRequestHandler):
    """Serves one session per connection against a fresh environment."""

    def transform_result(self, message):
        return message

    def handle(self):
        env = self.server.env_factory()
        while True:
            try:
                message = read_message(self.rfile)
            except MctsepError:
                break
            try:
                if message["type"] == "reset":
                    result = env.reset(TaskSpec.from_dict(message["task"]))
                elif message["type"] == "step":
                    result = env.step(Action.parse(message["action"]))
                else:
                    raise MalformedMessageError(f"unknown message type {message['type']!r}")
                reply = self.transform_result(result_message(result, env.current_outcome().status))
            except ProtocolError as e:
                reply = {"type": "error", "kind": "protocol", "message": str(e)}
            except ConfigurationError as e:
                reply = {"type": "error", "kind": "configuration", "message": str(e)}
            except (MctsepError, KeyError, ValueError) as e:
                reply = {"type": "error", "kind": "malformed", "message": str(e)}
            send_message(self.wfile, reply)


class EnvServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, env_factory, handler_class=EnvRequestHandler):
        self.env_factory = env_factory
        super().__init__(address, handler_class)


def serve_env(host, port, env_factory, handler_class=EnvRequestHandler, background=False):
    """Run an environment server; with `background=True` return it serving on a daemon thread."""
    server = EnvServer((host, port), env_factory, handler_class)
    logger.info(f"Serving environment on {server.server_address[0]}:{server.server_address[1]}")
    if background:
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        return server
    try:
        server.serve_forever()
    finally:
        server.server_close()
    return server
