"""Exception hierarchy shared by every mctsep module.

Each class maps to one of the CLI exit codes in `EXIT_CODES`.
"""


class MctsepError(Exception):
    """Base class for all errors raised by mctsep."""

    exit_code = 1


class ConfigurationError(MctsepError, ValueError):
    """Unknown layout, malformed instruction, cross-layout restore."""

    exit_code = 2


class ConfigValidationError(ConfigurationError):
    """A config field failed validation; `field` holds its dotted path."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ContractError(MctsepError, ValueError):
    """An operation was called with its precondition violated."""

    exit_code = 4


class ProtocolError(MctsepError, RuntimeError):
    """The environment protocol was misused (e.g. step after terminal)."""

    exit_code = 4


class TemplateError(MctsepError, KeyError):
    """A prompt template references a placeholder that cannot be bound."""

    exit_code = 2

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class EnvConnectionError(MctsepError, ConnectionError):
    exit_code = 4


class MalformedMessageError(MctsepError, ValueError):
    exit_code = 4


class ReplayDivergenceError(MctsepError, RuntimeError):
    """Replaying a recorded action prefix produced a different observation."""

    exit_code = 4

    def __init__(self, step_index, expected, actual):
        self.step_index = step_index
        self.expected = expected
        self.actual = actual
        super().__init__(f"replay diverged at step {step_index}: expected {expected!r}, got {actual!r}")


class AdapterError(MctsepError, RuntimeError):
    """Base class for failures talking to a remote model."""

    exit_code = 4


class TransportError(AdapterError):
    pass


class ResponseParseError(AdapterError):
    pass


class NonCandidateActionError(AdapterError):
    pass


class DataError(MctsepError, ValueError):
    """Training data is inconsistent with the recorded candidate sets."""

    exit_code = 3


class DatasetParseError(DataError):
    def __init__(self, path, line_number, message):
        self.path = path
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {message}")


class DatasetFormatError(DataError):
    pass


class GraphSizeError(MctsepError, RuntimeError):
    exit_code = 4

    def __init__(self, node_cap, frontier):
        self.node_cap = node_cap
        self.frontier = frontier
        super().__init__(f"state graph exceeded node cap {node_cap} with {frontier} states still on the frontier")


class TrainingDivergedError(MctsepError, FloatingPointError):
    exit_code = 4

    def __init__(self, message, report):
        self.report = report
        super().__init__(message)


class ArtifactMismatchError(MctsepError, ValueError):
    """Artifacts produced under different run-config hashes were mixed."""

    exit_code = 3


EXIT_CODES = {
    "ok": 0,
    "other": 1,
    "validation": 2,
    "data": 3,
    "runtime": 4,
}
