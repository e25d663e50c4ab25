from .state import AgentState, StateKey, advance, identity_summarizer, init_state, state_key
from .templates import PromptTemplate, render_context


def create_prompt_template(config):
    """
    Creates the prompt template named by the configuration.

    Args:
        config (Config): An object with a `template` key holding either a built-in
            template name (text_only, multimodal, critic) or a path to a text file,
            and an optional `output_format` used for file templates.
    Returns:
        PromptTemplate: The loaded template.
    """
    name = config.template
    if name.endswith(".txt"):
        return PromptTemplate.from_file(name, config.get("output_format", "action"))
    return PromptTemplate.builtin(name)


__all__ = [
    "AgentState",
    "PromptTemplate",
    "StateKey",
    "advance",
    "create_prompt_template",
    "identity_summarizer",
    "init_state",
    "render_context",
    "state_key",
]
