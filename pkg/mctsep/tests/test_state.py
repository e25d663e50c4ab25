import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from omegaconf import OmegaConf

from mctsep.environments.core import Action, Observation, Verb
from mctsep.exceptions import ContractError, TemplateError
from mctsep.prompt_builder import (
    AgentState,
    PromptTemplate,
    advance,
    create_prompt_template,
    init_state,
    render_context,
    state_key,
)

ROOM = Observation("You are in the middle of a room.")
COUNTER = Observation("You arrive at countertop 1. On the countertop 1, you see a apple 1.", ("apple 1",))
GOTO_COUNTER = Action(Verb.GOTO, "countertop 1")
GOTO_TABLE = Action(Verb.GOTO, "table 1")


def test_init_state_needs_an_instruction():
    with pytest.raises(ContractError):
        init_state("  ", ROOM)
    state = init_state("put a apple in table", ROOM)
    assert state.depth == 0
    assert state.last_action is None


def test_advance_summarizes_the_retiring_observation():
    start = init_state("put a apple in table", ROOM)
    nxt = advance(start, GOTO_COUNTER, COUNTER)
    assert start.depth == 0
    assert nxt.depth == 1
    assert nxt.history == ((GOTO_COUNTER, ROOM.text),)
    assert nxt.current_observation == COUNTER
    assert nxt.last_action == GOTO_COUNTER


def test_model_summary_takes_precedence():
    start = init_state("put a apple in table", ROOM)
    nxt = advance(start, GOTO_COUNTER, COUNTER, summarizer=lambda o: "ignored", summary="a room")
    assert nxt.history[-1][1] == "a room"
    custom = advance(start, GOTO_COUNTER, COUNTER, summarizer=lambda o: o.text.upper())
    assert custom.history[-1][1] == ROOM.text.upper()


def test_keys_follow_field_equality():
    a = advance(init_state("put a apple in table", ROOM), GOTO_COUNTER, COUNTER)
    b = advance(init_state("put a apple in table", ROOM), GOTO_COUNTER, COUNTER)
    c = advance(init_state("put a apple in table", ROOM), GOTO_TABLE, COUNTER)
    assert a.key == b.key
    assert a.key != c.key
    assert len(a.key) == 32


@settings(max_examples=200, deadline=None)
@given(
    first=st.tuples(st.text(min_size=1, max_size=8), st.lists(st.text(max_size=5), max_size=3), st.text(max_size=8)),
    second=st.tuples(st.text(min_size=1, max_size=8), st.lists(st.text(max_size=5), max_size=3), st.text(max_size=8)),
)
def test_distinct_states_get_distinct_keys(first, second):
    def key(parts):
        instruction, summaries, observation = parts
        return state_key(instruction, [(GOTO_TABLE, s) for s in summaries], observation)

    assert (key(first) == key(second)) == (first == second)


def test_revisits_observation():
    start = init_state("put a apple in table", ROOM)
    there = advance(start, GOTO_COUNTER, COUNTER)
    back = advance(there, GOTO_TABLE, ROOM)
    assert not there.revisits_observation()
    assert back.revisits_observation()


def test_state_dict_form_is_stable():
    state = advance(init_state("put a apple in table", ROOM), GOTO_COUNTER, COUNTER)
    assert AgentState.from_dict(state.to_dict()) == state
    assert state.to_dict()["history"] == [["go to countertop 1", ROOM.text]]


def test_raw_observations_survive_lossy_summaries():
    start = init_state("put a apple in table", ROOM)
    there = advance(start, GOTO_COUNTER, COUNTER, summarizer=lambda o: "a place")
    back = advance(there, GOTO_TABLE, ROOM, summarizer=lambda o: "a place")
    assert back.observations == (ROOM.text, COUNTER.text)
    assert back.revisits_observation()
    assert not there.revisits_observation()
    assert back.key == state_key(back.instruction, back.history, ROOM.text)
    assert AgentState.from_dict(back.to_dict()) == back

    older = {key: value for key, value in back.to_dict().items() if key != "observations"}
    assert AgentState.from_dict(older).observations == ("a place", "a place")
    with pytest.raises(ContractError):
        AgentState("put a apple in table", ROOM, back.history, ("only one",))


def test_render_context_lists_history_and_candidates():
    template = PromptTemplate.builtin("text_only")
    start = init_state("put a apple in table", ROOM)
    first = render_context(start, template, (GOTO_COUNTER, GOTO_TABLE))
    assert "Task: put a apple in table" in first
    assert "Previous state:\n(none)" in first
    assert "- go to countertop 1\n- go to table 1" in first
    assert first == render_context(start, template, (GOTO_COUNTER, GOTO_TABLE))

    nxt = advance(start, GOTO_COUNTER, COUNTER)
    second = render_context(nxt, template, (GOTO_TABLE,))
    assert f"1. {ROOM.text} => go to countertop 1" in second
    assert COUNTER.text in second


def test_unbound_placeholders_are_template_errors():
    state = init_state("put a apple in table", ROOM)
    with pytest.raises(TemplateError):
        render_context(state, PromptTemplate.builtin("text_only"))
    critic = render_context(state, PromptTemplate.builtin("critic"))
    assert "Candidate actions" not in critic


@pytest.mark.parametrize("text", ["{goal}", "{instruction", "{observation!x}{"])
def test_bad_templates_are_rejected(text):
    with pytest.raises(TemplateError):
        PromptTemplate("custom", text)


def test_unknown_builtin_template():
    with pytest.raises(TemplateError):
        PromptTemplate.builtin("haiku")


def test_create_prompt_template_from_config(tmp_path):
    assert create_prompt_template(OmegaConf.create({"template": "multimodal"})).output_format == "json"
    path = tmp_path / "mine.txt"
    path.write_text("Do {instruction} given {observation}.")
    template = create_prompt_template(OmegaConf.create({"template": str(path), "output_format": "action"}))
    assert template.name == "mine"
    assert render_context(init_state("put a apple in table", ROOM), template) == (
        f"Do put a apple in table given {ROOM.text}."
    )
