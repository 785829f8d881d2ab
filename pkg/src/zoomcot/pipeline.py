"""Per-sample answering strategies.

direct       one shot: full image + bare question
zscot        zero-shot reasoning turn, then an answer-extraction turn
cot_sc       n sampled zscot paths at temperature 0.7, majority vote
zoomcot      staged: caption overview, coarse grounding, zoomed observation
"""

from __future__ import annotations

import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

from .backend import GenParams, VisionBackend, VisionRequest, derive_seed
from .dataset import Sample
from .geometry import (
    BoxParseError,
    CropConfig,
    CropMode,
    CropRegion,
    NormalizedBox,
    PixelBox,
    RasterImage,
    clamp_box,
    compute_crop,
    extract_crop,
    full_image_region,
    parse_bbox_text,
    to_pixel,
)
from .metrics import normalize_answer_text
from .prompting import (
    AssembledPrompt,
    EmptyQuestion,
    PromptSet,
    Stage,
    assemble_localization,
    assemble_observation,
    assemble_overview,
)

TRACE_SCHEMA_VERSION = 1

COT_SC_TEMPERATURE = 0.7
STEP_BY_STEP = "Let's think step-by-step."
ANSWER_DIRECTIVE = "Therefore, the answer is:"
REGION_HINT_TEMPLATE = "The answer region is at pixels [{x1}, {y1}, {x2}, {y2}]."

FALLBACK_BBOX_PARSE = "bbox_parse_failed"
FALLBACK_EMPTY_REASONING = "empty_reasoning"


class StrategyKind(str, Enum):
    DIRECT = "direct"
    ZSCOT = "zscot"
    COT_SC = "cot_sc"
    ZOOMCOT = "zoomcot"


@dataclass(frozen=True)
class Strategy:
    """An answering strategy plus its staged-pipeline options."""

    kind: StrategyKind
    use_crop: bool = True
    use_caption: bool = True
    crop_mode: CropMode | None = None  # None: take the CropConfig's mode
    paths: int = 5  # cot_sc only

    def __post_init__(self) -> None:
        if self.paths < 1:
            raise ValueError("paths must be >= 1")

    def describe(self) -> dict:
        out: dict = {"kind": self.kind.value}
        if self.kind is StrategyKind.ZOOMCOT:
            out["use_crop"] = self.use_crop
            out["use_caption"] = self.use_caption
            out["crop_mode"] = self.crop_mode.value if self.crop_mode else None
        if self.kind is StrategyKind.COT_SC:
            out["paths"] = self.paths
        return out


@dataclass
class CallRecord:
    stage: str
    prompt: str
    response: str


@dataclass
class PipelineTrace:
    """Full record of one strategy run over one sample."""

    sample_id: str
    strategy: dict
    calls: list[CallRecord] = field(default_factory=list)
    caption_answer: str | None = None
    grounding_raw: str | None = None
    parsed_box: PixelBox | None = None
    crop_region: CropRegion | None = None
    final_answer: str = ""
    fallback_events: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "schema": TRACE_SCHEMA_VERSION,
            "sample_id": self.sample_id,
            "strategy": self.strategy,
            "calls": [
                {"stage": c.stage, "prompt": c.prompt, "response": c.response}
                for c in self.calls
            ],
            "caption_answer": self.caption_answer,
            "grounding_raw": self.grounding_raw,
            "parsed_box": self.parsed_box.to_json() if self.parsed_box else None,
            "crop_region": self.crop_region.to_json() if self.crop_region else None,
            "final_answer": self.final_answer,
            "fallback_events": list(self.fallback_events),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineTrace":
        return cls(
            sample_id=obj["sample_id"],
            strategy=obj["strategy"],
            calls=[CallRecord(c["stage"], c["prompt"], c["response"]) for c in obj["calls"]],
            caption_answer=obj.get("caption_answer"),
            grounding_raw=obj.get("grounding_raw"),
            parsed_box=PixelBox.from_json(obj["parsed_box"]) if obj.get("parsed_box") else None,
            crop_region=CropRegion.from_json(obj["crop_region"])
            if obj.get("crop_region")
            else None,
            final_answer=obj.get("final_answer", ""),
            fallback_events=list(obj.get("fallback_events", ())),
        )


def _ask(
    backend: VisionBackend,
    trace: PipelineTrace,
    image: RasterImage,
    prompt: AssembledPrompt,
    params: GenParams,
) -> str:
    response = backend.generate(
        VisionRequest(image=image, prompt=prompt, params=params)
    )
    trace.calls.append(CallRecord(prompt.stage.value, prompt.text, response.text))
    return response.text


def _question(sample: Sample) -> str:
    q = sample.question.strip()
    if not q:
        raise EmptyQuestion(f"sample {sample.id} has an empty question")
    return q


def run_direct(
    sample: Sample,
    backend: VisionBackend,
    *,
    max_output_tokens: int = 512,
    image: RasterImage | None = None,
) -> PipelineTrace:
    """Single call with the full image and the bare question."""
    q = _question(sample)
    image = image if image is not None else RasterImage.load(sample.image_path)
    trace = PipelineTrace(sample.id, Strategy(StrategyKind.DIRECT).describe())
    params = GenParams(temperature=0.0, max_output_tokens=max_output_tokens)
    prompt = AssembledPrompt(q, Stage.BASELINE_DIRECT)
    trace.final_answer = _ask(backend, trace, image, prompt, params)
    return trace


def run_zscot(
    sample: Sample,
    backend: VisionBackend,
    *,
    max_output_tokens: int = 512,
    image: RasterImage | None = None,
) -> PipelineTrace:
    """Step-by-step reasoning turn, then extraction; falls back to direct
    when the reasoning turn comes back empty."""
    q = _question(sample)
    image = image if image is not None else RasterImage.load(sample.image_path)
    trace = PipelineTrace(sample.id, Strategy(StrategyKind.ZSCOT).describe())
    params = GenParams(temperature=0.0, max_output_tokens=max_output_tokens)

    reason_prompt = AssembledPrompt(f"{q}\n{STEP_BY_STEP}", Stage.ZSCOT_REASON)
    reasoning = _ask(backend, trace, image, reason_prompt, params)
    if not reasoning.strip():
        trace.fallback_events.append(FALLBACK_EMPTY_REASONING)
        prompt = AssembledPrompt(q, Stage.BASELINE_DIRECT)
        trace.final_answer = _ask(backend, trace, image, prompt, params)
        return trace

    extract_prompt = AssembledPrompt(
        f"{q}\n{reasoning.strip()}\n{ANSWER_DIRECTIVE}", Stage.ZSCOT_EXTRACT
    )
    trace.final_answer = _ask(backend, trace, image, extract_prompt, params)
    return trace


def vote(answers: Sequence[str]) -> str:
    """Majority vote over normalized answers; ties break to the
    lexicographically smallest normalized form. Returns the first raw
    answer whose normalized form won."""
    if not answers:
        raise ValueError("vote requires at least one answer")
    norms = [normalize_answer_text(a) for a in answers]
    counts = Counter(norms)
    top = max(counts.values())
    winner = min(n for n, c in counts.items() if c == top)
    for raw, norm in zip(answers, norms):
        if norm == winner:
            return raw
    raise AssertionError("unreachable: winner must come from answers")


def run_cot_sc(
    sample: Sample,
    backend: VisionBackend,
    n: int = 5,
    *,
    seed: int = 0,
    max_output_tokens: int = 512,
    image: RasterImage | None = None,
) -> PipelineTrace:
    """n sampled reasoning paths at temperature 0.7, majority-voted."""
    if n < 1:
        raise ValueError("n must be >= 1")
    q = _question(sample)
    image = image if image is not None else RasterImage.load(sample.image_path)
    trace = PipelineTrace(
        sample.id, Strategy(StrategyKind.COT_SC, paths=n).describe()
    )
    base_seed = derive_seed(seed, sample.id)
    reason_prompt = AssembledPrompt(f"{q}\n{STEP_BY_STEP}", Stage.ZSCOT_REASON)
    reason_params = GenParams(
        temperature=COT_SC_TEMPERATURE, max_output_tokens=max_output_tokens, seed=base_seed
    )
    responses = backend.sample_n(
        VisionRequest(image=image, prompt=reason_prompt, params=reason_params), n
    )

    answers = []
    for i, response in enumerate(responses):
        trace.calls.append(
            CallRecord(Stage.ZSCOT_REASON.value, reason_prompt.text, response.text)
        )
        reasoning = response.text.strip()
        extract_text = f"{q}\n{reasoning}\n{ANSWER_DIRECTIVE}" if reasoning else f"{q}\n{ANSWER_DIRECTIVE}"
        extract_prompt = AssembledPrompt(extract_text, Stage.ZSCOT_EXTRACT)
        extract_params = GenParams(
            temperature=COT_SC_TEMPERATURE,
            max_output_tokens=max_output_tokens,
            seed=derive_seed(base_seed, f"extract:{i}"),
        )
        answers.append(_ask(backend, trace, image, extract_prompt, extract_params))

    trace.final_answer = vote(answers)
    return trace


def run_zoomcot(
    sample: Sample,
    backend: VisionBackend,
    strategy: Strategy,
    prompts: PromptSet | None = None,
    crop_cfg: CropConfig | None = None,
    *,
    max_output_tokens: int = 512,
    image: RasterImage | None = None,
) -> PipelineTrace:
    """The staged pipeline: overview caption, coarse localization, zoomed
    fine observation.

    The question string sent at the localization stage is reused verbatim
    in the final stage. A grounding output that yields no usable box falls
    back to the uncropped image and records a fallback event rather than
    failing the sample.
    """
    q = _question(sample)
    prompts = prompts or PromptSet()
    crop_cfg = crop_cfg or CropConfig()
    if strategy.crop_mode is not None:
        crop_cfg = replace(crop_cfg, mode=strategy.crop_mode)
    image = image if image is not None else RasterImage.load(sample.image_path)
    dims = image.dims
    trace = PipelineTrace(sample.id, strategy.describe())
    params = GenParams(temperature=0.0, max_output_tokens=max_output_tokens)

    if strategy.use_caption:
        trace.caption_answer = _ask(
            backend, trace, image, assemble_overview(prompts), params
        )

    grounding_prompt = assemble_localization(prompts, q)
    trace.grounding_raw = _ask(backend, trace, image, grounding_prompt, params)
    try:
        parsed = parse_bbox_text(trace.grounding_raw, backend.bbox_convention)
        if isinstance(parsed, NormalizedBox):
            trace.parsed_box = to_pixel(parsed, dims)
        else:
            trace.parsed_box = clamp_box(parsed, dims)
    except BoxParseError:
        trace.fallback_events.append(FALLBACK_BBOX_PARSE)

    stage_image = image
    if strategy.use_crop:
        if trace.parsed_box is not None:
            trace.crop_region = compute_crop(trace.parsed_box, dims, crop_cfg)
        else:
            trace.crop_region = full_image_region(dims)
        stage_image = extract_crop(image, trace.crop_region)

    if strategy.use_caption:
        final_prompt = assemble_observation(prompts, trace.caption_answer or "", q)
    else:
        text = q
        if not strategy.use_crop and trace.parsed_box is not None:
            # grounding-only variant: pass the located region as text over
            # the full image instead of cropping to it
            b = trace.parsed_box
            text = f"{q}\n" + REGION_HINT_TEMPLATE.format(x1=b.x1, y1=b.y1, x2=b.x2, y2=b.y2)
        final_prompt = AssembledPrompt(text, Stage.OBSERVATION)

    trace.final_answer = _ask(backend, trace, stage_image, final_prompt, params)
    return trace


def run_sample(
    sample: Sample,
    backend: VisionBackend,
    strategy: Strategy,
    prompts: PromptSet | None = None,
    crop_cfg: CropConfig | None = None,
    *,
    seed: int = 0,
    max_output_tokens: int = 512,
) -> PipelineTrace:
    """Dispatch one sample through the configured strategy."""
    if strategy.kind is StrategyKind.DIRECT:
        return run_direct(sample, backend, max_output_tokens=max_output_tokens)
    if strategy.kind is StrategyKind.ZSCOT:
        return run_zscot(sample, backend, max_output_tokens=max_output_tokens)
    if strategy.kind is StrategyKind.COT_SC:
        return run_cot_sc(
            sample, backend, strategy.paths, seed=seed, max_output_tokens=max_output_tokens
        )
    return run_zoomcot(
        sample, backend, strategy, prompts, crop_cfg, max_output_tokens=max_output_tokens
    )


@dataclass
class SampleOutcome:
    """A trace on success, or the per-sample error that replaced it."""

    sample_id: str
    trace: PipelineTrace | None = None
    error: str | None = None

    def to_json(self) -> dict:
        if self.trace is not None:
            return self.trace.to_json()
        return {
            "schema": TRACE_SCHEMA_VERSION,
            "sample_id": self.sample_id,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SampleOutcome":
        if obj.get("error") is not None:
            return cls(sample_id=obj["sample_id"], error=obj["error"])
        return cls(sample_id=obj["sample_id"], trace=PipelineTrace.from_json(obj))


def run_samples(
    samples: Iterable[Sample],
    backend: VisionBackend,
    strategy: Strategy,
    prompts: PromptSet | None = None,
    crop_cfg: CropConfig | None = None,
    *,
    seed: int = 0,
    max_output_tokens: int = 512,
    concurrency: int = 4,
    skip_ids: frozenset[str] | set[str] = frozenset(),
) -> list[SampleOutcome]:
    """Run each sample independently; errors never abort the batch.

    Per-sample runs execute concurrently; the outcome list is sorted by
    sample id so downstream artifacts are deterministic.
    """
    todo = [s for s in samples if s.id not in skip_ids]

    def _one(sample: Sample) -> SampleOutcome:
        try:
            trace = run_sample(
                sample,
                backend,
                strategy,
                prompts,
                crop_cfg,
                seed=seed,
                max_output_tokens=max_output_tokens,
            )
            return SampleOutcome(sample.id, trace=trace)
        except Exception as exc:  # per-sample isolation is the contract
            return SampleOutcome(sample.id, error=f"{type(exc).__name__}: {exc}")

    if concurrency <= 1 or len(todo) <= 1:
        outcomes = [_one(s) for s in todo]
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            outcomes = list(pool.map(_one, todo))
    return sorted(outcomes, key=lambda o: o.sample_id)


def write_outcomes_jsonl(outcomes: Sequence[SampleOutcome], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for outcome in outcomes:
            fh.write(json.dumps(outcome.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def read_outcomes_jsonl(path) -> list[SampleOutcome]:
    outcomes = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                outcomes.append(SampleOutcome.from_json(json.loads(line)))
    return outcomes
