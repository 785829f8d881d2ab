"""Training-free staged chain-of-thought VQA for text-rich images.

The pipeline answers a question about a text-rich image in three stages:
a one-sentence overview caption, coarse localization of the answer region
via the model's grounding ability, and a fine-grained observation pass
over a square crop zoomed to that region. Baselines (direct, zero-shot
CoT, self-consistency), ablation variants, a deterministic synthetic
oracle, and an evaluation harness ship alongside.
"""

from .backend import (
    GenParams,
    HttpBackend,
    HttpBackendConfig,
    MockBackend,
    VisionBackend,
    VisionRequest,
    VisionResponse,
)
from .dataset import DatasetManifest, Sample, load_manifest, serialize_manifest
from .geometry import (
    BboxConvention,
    CropConfig,
    CropMode,
    CropRegion,
    ImageDims,
    NormalizedBox,
    PixelBox,
    RasterImage,
    compute_crop,
    extract_crop,
    parse_bbox_text,
    to_pixel,
)
from .metrics import EvalResult, Report, aggregate, contains_correct
from .pipeline import (
    PipelineTrace,
    Strategy,
    StrategyKind,
    run_cot_sc,
    run_direct,
    run_sample,
    run_samples,
    run_zoomcot,
    run_zscot,
)
from .prompting import (
    AssembledPrompt,
    PromptSet,
    Stage,
    assemble_localization,
    assemble_observation,
    assemble_overview,
)
from .store import CacheKey, ResponseCache, make_cache_key
from .synthetic import (
    OracleBackend,
    OracleParams,
    SyntheticScene,
    TextInstance,
    generate_suite,
    load_suite,
    write_suite,
)

__version__ = "0.1.0"
