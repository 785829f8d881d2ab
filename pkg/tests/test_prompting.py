import pytest
from hypothesis import given
from hypothesis import strategies as st

from zoomcot.prompting import (
    DEFAULT_CONTEXT_PREFIX,
    EmptyCaption,
    EmptyQuestion,
    InvalidPromptSet,
    PromptSet,
    Stage,
    assemble_localization,
    assemble_observation,
    assemble_overview,
)


class TestPromptSet:
    def test_defaults_valid(self):
        ps = PromptSet()
        assert "in one sentence" in ps.caption_prompt
        assert ps.grounding_prompt_template.count("{question}") == 1

    def test_caption_without_length_constraint_rejected(self):
        with pytest.raises(InvalidPromptSet):
            PromptSet(caption_prompt="Describe this image.")

    def test_template_without_slot_rejected(self):
        with pytest.raises(InvalidPromptSet):
            PromptSet(grounding_prompt_template="Where is the answer?")

    def test_template_with_two_slots_rejected(self):
        with pytest.raises(InvalidPromptSet):
            PromptSet(grounding_prompt_template="{question} vs {question}")

    def test_empty_prefix_rejected(self):
        with pytest.raises(InvalidPromptSet):
            PromptSet(context_prefix="   ")

    def test_from_mapping_partial(self):
        ps = PromptSet.from_mapping({"task_prompt": "Answer briefly."})
        assert ps.task_prompt == "Answer briefly."
        assert ps.caption_prompt == PromptSet().caption_prompt


class TestAssembly:
    def test_overview_is_caption_prompt_verbatim(self):
        custom = PromptSet(caption_prompt="Summarize in one sentence, please.")
        out = assemble_overview(custom)
        assert out.text == "Summarize in one sentence, please."
        assert out.stage is Stage.OVERVIEW

    def test_localization_substitution(self):
        ps = PromptSet(grounding_prompt_template="Locate the region answering: {question}")
        out = assemble_localization(ps, "What is the plate number?")
        assert out.text == "Locate the region answering: What is the plate number?"
        assert out.stage is Stage.LOCALIZATION

    def test_braces_in_question_preserved(self):
        out = assemble_localization(PromptSet(), "what does {x} mean in {}?")
        assert "{x}" in out.text and "{}" in out.text

    def test_empty_question(self):
        with pytest.raises(EmptyQuestion):
            assemble_localization(PromptSet(), "   ")

    def test_observation_composition(self):
        ps = PromptSet()
        out = assemble_observation(ps, "A busy street with shops.", "What does the sign say?")
        assert out.text == (
            "This is the context of the scene: A busy street with shops.\n"
            + ps.task_prompt
            + "\nWhat does the sign say?"
        )
        assert out.stage is Stage.OBSERVATION

    def test_observation_trims_caption(self):
        out = assemble_observation(PromptSet(), "  caption here \n", "q?")
        assert "caption here\n" in out.text
        assert "  caption" not in out.text

    def test_empty_caption(self):
        with pytest.raises(EmptyCaption):
            assemble_observation(PromptSet(), " \n ", "q?")

    def test_observation_empty_question(self):
        with pytest.raises(EmptyQuestion):
            assemble_observation(PromptSet(), "cap", "")

    @given(
        cap=st.text(min_size=1).filter(lambda s: s.strip()),
        q=st.text(min_size=1).filter(lambda s: s.strip()),
    )
    def test_order_invariance(self, cap, q):
        ps = PromptSet()
        text = assemble_observation(ps, cap, q).text
        i_prefix = text.index(DEFAULT_CONTEXT_PREFIX)
        i_task = text.index(ps.task_prompt)
        i_q = text.rindex(q.strip())
        assert i_prefix < i_task < i_q

    def test_deterministic_bytes(self):
        a = assemble_observation(PromptSet(), "cap", "q?").text
        b = assemble_observation(PromptSet(), "cap", "q?").text
        assert a.encode() == b.encode()

    def test_no_cross_stage_leakage(self):
        ps = PromptSet()
        overview = assemble_overview(ps).text
        localization = assemble_localization(ps, "q?").text
        assert ps.grounding_prompt_template.replace("{question}", "q?") not in overview
        assert ps.caption_prompt not in localization
        assert ps.task_prompt not in localization
