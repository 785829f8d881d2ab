"""Stage prompt templates and deterministic prompt assembly."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping


class PromptError(ValueError):
    pass


class EmptyQuestion(PromptError):
    pass


class EmptyCaption(PromptError):
    pass


class InvalidPromptSet(PromptError):
    pass


class Stage(str, Enum):
    """Which pipeline step an assembled prompt belongs to."""

    OVERVIEW = "overview"
    LOCALIZATION = "localization"
    OBSERVATION = "observation"
    BASELINE_DIRECT = "baseline_direct"
    ZSCOT_REASON = "zscot_reason"
    ZSCOT_EXTRACT = "zscot_extract"


QUESTION_SLOT = "{question}"

DEFAULT_CAPTION_PROMPT = "Describe this image in one sentence."
DEFAULT_GROUNDING_TEMPLATE = (
    "Provide the bounding box coordinate of the region that can answer "
    "the following question: {question}"
)
DEFAULT_TASK_PROMPT = "Answer the question using the context above and the image."
DEFAULT_CONTEXT_PREFIX = "This is the context of the scene:"

# Single newline between caption context, task prompt, and question: keeps
# assembled text byte-reproducible for caching.
_SEPARATOR = "\n"


@dataclass(frozen=True)
class PromptSet:
    """The configurable stage prompts.

    The caption prompt must ask for a single sentence (it regulates caption
    length); the grounding template must carry exactly one question slot.
    """

    caption_prompt: str = DEFAULT_CAPTION_PROMPT
    grounding_prompt_template: str = DEFAULT_GROUNDING_TEMPLATE
    task_prompt: str = DEFAULT_TASK_PROMPT
    context_prefix: str = DEFAULT_CONTEXT_PREFIX

    def __post_init__(self) -> None:
        if "in one sentence" not in self.caption_prompt:
            raise InvalidPromptSet(
                "caption_prompt must contain the phrase 'in one sentence'"
            )
        if self.grounding_prompt_template.count(QUESTION_SLOT) != 1:
            raise InvalidPromptSet(
                "grounding_prompt_template must contain exactly one "
                f"{QUESTION_SLOT} slot"
            )
        if not self.context_prefix.strip():
            raise InvalidPromptSet("context_prefix must be non-empty")

    @classmethod
    def from_mapping(cls, cfg: Mapping[str, str] | None) -> "PromptSet":
        cfg = cfg or {}
        fields = (
            "caption_prompt",
            "grounding_prompt_template",
            "task_prompt",
            "context_prefix",
        )
        return cls(**{k: cfg[k] for k in fields if k in cfg})


@dataclass(frozen=True)
class AssembledPrompt:
    """The exact text sent to a backend, tagged with its pipeline stage."""

    text: str
    stage: Stage

    def __post_init__(self) -> None:
        if not self.text:
            raise PromptError("assembled prompt text must be non-empty")


def assemble_overview(prompts: PromptSet) -> AssembledPrompt:
    """The caption request: the caption prompt verbatim."""
    return AssembledPrompt(prompts.caption_prompt, Stage.OVERVIEW)


def assemble_localization(prompts: PromptSet, question: str) -> AssembledPrompt:
    """The grounding request: the template with the question substituted.

    Substitution is literal, so braces inside the question survive untouched.
    """
    q = question.strip()
    if not q:
        raise EmptyQuestion("localization requires a non-empty question")
    text = prompts.grounding_prompt_template.replace(QUESTION_SLOT, q)
    return AssembledPrompt(text, Stage.LOCALIZATION)


def assemble_observation(
    prompts: PromptSet, caption_answer: str, question: str
) -> AssembledPrompt:
    """The final request: prefixed caption context, task prompt, question."""
    cap = caption_answer.strip()
    if not cap:
        raise EmptyCaption("observation requires a non-empty caption answer")
    q = question.strip()
    if not q:
        raise EmptyQuestion("observation requires a non-empty question")
    text = _SEPARATOR.join(
        (
            f"{prompts.context_prefix.strip()} {cap}",
            prompts.task_prompt.strip(),
            q,
        )
    )
    return AssembledPrompt(text, Stage.OBSERVATION)
