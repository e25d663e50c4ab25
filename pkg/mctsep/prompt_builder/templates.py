import functools
import importlib.resources
import string
from dataclasses import dataclass
from pathlib import Path

from mctsep.exceptions import TemplateError

PLACEHOLDERS = ("instruction", "history", "observation", "candidates")

# Built-in template name -> expected model output format.
BUILTIN_TEMPLATES = {
    "text_only": "action",
    "multimodal": "json",
    "critic": "score",
}


@dataclass(frozen=True)
class PromptTemplate:
    """Plain-text prompt with named placeholders.

    `output_format` tells the model adapter how to read completions:
    "action" (a bare action name), "json" (what_you_see + action) or "score".
    """

    name: str
    text: str
    output_format: str = "action"

    def __post_init__(self):
        unknown = sorted(set(self.placeholders) - set(PLACEHOLDERS))
        if unknown:
            raise TemplateError(f"template {self.name!r} uses unknown placeholders {unknown}")
        if self.output_format not in ("action", "json", "score"):
            raise TemplateError(f"template {self.name!r} has unknown output format {self.output_format!r}")

    @functools.cached_property
    def placeholders(self):
        try:
            fields = [name for _, name, _, _ in string.Formatter().parse(self.text) if name is not None]
        except ValueError as e:
            raise TemplateError(f"template {self.name!r} is malformed: {e}") from e
        return tuple(dict.fromkeys(fields))

    @classmethod
    def builtin(cls, name):
        if name not in BUILTIN_TEMPLATES:
            raise TemplateError(f"unknown built-in template {name!r}; known: {sorted(BUILTIN_TEMPLATES)}")
        text = importlib.resources.files("mctsep.prompt_builder").joinpath("templates", f"{name}.txt").read_text()
        return cls(name, text, BUILTIN_TEMPLATES[name])

    @classmethod
    def from_file(cls, path, output_format="action"):
        path = Path(path)
        return cls(path.stem, path.read_text(), output_format)


def render_history(state):
    if not state.history:
        return "(none)"
    return "\n".join(f"{k}. {summary} => {action.text}" for k, (action, summary) in enumerate(state.history, start=1))


def render_candidates(candidates):
    return "\n".join(f"- {action.text}" for action in candidates)


def render_context(state, template, candidates=None):
    """Render `state` through `template`; a pure function of its inputs."""
    values = {
        "instruction": state.instruction,
        "history": render_history(state),
        "observation": state.current_observation.text,
        "candidates": render_candidates(candidates) if candidates is not None else None,
    }
    unbound = [name for name in template.placeholders if values.get(name) is None]
    if unbound:
        raise TemplateError(f"template {template.name!r} has unbound placeholders {unbound}")
    return template.text.format_map(values)
