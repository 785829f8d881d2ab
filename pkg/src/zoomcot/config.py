"""Run configuration: TOML file plus flag overrides, and component factories."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .backend import (
    DEFAULT_MAX_OUTPUT_TOKENS,
    HttpBackend,
    HttpBackendConfig,
    MockBackend,
    VisionBackend,
)
from .geometry import BboxConvention, CropConfig, CropMode
from .pipeline import Strategy, StrategyKind
from .prompting import PromptSet
from .store import ResponseCache
from .synthetic import oracle_from_sidecar

CACHE_ROOT_ENV = "ZOOMCOT_CACHE"

BACKEND_KINDS = ("http", "mock", "oracle")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackendSettings:
    kind: str = "mock"
    model_id: str = "mock-1"
    backend_id: str | None = None
    bbox_convention: str = BboxConvention.FRACTION_0_1.value
    endpoint: str | None = None
    api_key_env: str | None = None
    timeout_s: float = 60.0
    max_retries: int = 3
    backoff_base_s: float = 0.5
    max_in_flight: int = 4
    sidecar: str | None = None  # oracle: path to a suite sidecar

    def __post_init__(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"backend.kind must be one of {BACKEND_KINDS}, got {self.kind!r}")
        if self.kind == "http" and not self.endpoint:
            raise ConfigError("backend.kind = 'http' requires backend.endpoint")
        if self.kind == "oracle" and not self.sidecar:
            raise ConfigError("backend.kind = 'oracle' requires backend.sidecar")


@dataclass(frozen=True)
class RunConfig:
    """Everything one evaluation run needs, resolved and hashable."""

    dataset: Path
    output_dir: Path
    strategy: Strategy = Strategy(StrategyKind.ZOOMCOT)
    backend: BackendSettings = BackendSettings()
    crop: CropConfig = CropConfig()
    prompts: PromptSet = field(default_factory=PromptSet)
    cache_root: Path | None = None
    concurrency: int = 4
    resume: bool = False
    seed: int = 0
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    dataset_name: str | None = None

    def resolved(self) -> dict:
        """JSON snapshot of every field that affects run results."""
        return {
            "dataset": str(self.dataset.resolve()),
            "strategy": self.strategy.describe(),
            "backend": {
                "kind": self.backend.kind,
                "model_id": self.backend.model_id,
                "backend_id": self.backend.backend_id,
                "bbox_convention": self.backend.bbox_convention,
                "endpoint": self.backend.endpoint,
                "sidecar": self.backend.sidecar,
            },
            "crop": {
                "expand_ratio": self.crop.expand_ratio,
                "min_side": self.crop.min_side,
                "mode": self.crop.mode.value,
            },
            "prompts": {
                "caption_prompt": self.prompts.caption_prompt,
                "grounding_prompt_template": self.prompts.grounding_prompt_template,
                "task_prompt": self.prompts.task_prompt,
                "context_prefix": self.prompts.context_prefix,
            },
            "seed": self.seed,
            "max_output_tokens": self.max_output_tokens,
        }

    def config_hash(self) -> str:
        canon = json.dumps(self.resolved(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _strategy_from_mapping(kind: str, cfg: Mapping[str, Any]) -> Strategy:
    try:
        strategy_kind = StrategyKind(kind)
    except ValueError as exc:
        raise ConfigError(
            f"unknown strategy {kind!r}; expected one of "
            f"{[k.value for k in StrategyKind]}"
        ) from exc
    crop_mode = cfg.get("crop_mode")
    return Strategy(
        kind=strategy_kind,
        use_crop=bool(cfg.get("use_crop", True)),
        use_caption=bool(cfg.get("use_caption", True)),
        crop_mode=CropMode(crop_mode) if crop_mode else None,
        paths=int(cfg.get("paths", 5)),
    )


def _crop_from_mapping(cfg: Mapping[str, Any]) -> CropConfig:
    return CropConfig(
        expand_ratio=float(cfg.get("expand_ratio", 1.5)),
        min_side=int(cfg.get("min_side", 448)),
        mode=CropMode(cfg.get("mode", CropMode.SQUARE_SCALED.value)),
    )


def _backend_from_mapping(cfg: Mapping[str, Any]) -> BackendSettings:
    known = {
        "kind",
        "model_id",
        "backend_id",
        "bbox_convention",
        "endpoint",
        "api_key_env",
        "timeout_s",
        "max_retries",
        "backoff_base_s",
        "max_in_flight",
        "sidecar",
    }
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown backend config keys: {sorted(unknown)}")
    return BackendSettings(**cfg)


def _load_doc(path: str | Path | None) -> tuple[dict[str, Any], Path]:
    if path is None:
        return {}, Path(".")
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh), path.parent
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc


def load_components(
    path: str | Path | None,
) -> tuple[BackendSettings, PromptSet, CropConfig]:
    """Load just the backend/prompts/crop sections (for one-shot queries)."""
    doc, base = _load_doc(path)
    backend_cfg = dict(doc.get("backend", {}))
    if backend_cfg.get("sidecar"):
        sidecar = Path(backend_cfg["sidecar"])
        backend_cfg["sidecar"] = str(sidecar if sidecar.is_absolute() else base / sidecar)
    return (
        _backend_from_mapping(backend_cfg),
        PromptSet.from_mapping(doc.get("prompts")),
        _crop_from_mapping(doc.get("crop", {})),
    )


def load_run_config(
    path: str | Path | None = None, **overrides: Any
) -> RunConfig:
    """Build a RunConfig from an optional TOML file plus overrides.

    Override keys mirror RunConfig fields; None values are ignored so CLI
    flags can pass through unset options.
    """
    doc, base = _load_doc(path)
    run = doc.get("run", {})
    overrides = {k: v for k, v in overrides.items() if v is not None}

    def _resolve(p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else base / p

    dataset = overrides.get("dataset", run.get("dataset"))
    if dataset is None:
        raise ConfigError("run.dataset is required (or pass --dataset)")
    output_dir = overrides.get("output_dir", run.get("output_dir", "runs/out"))

    strategy_kind = overrides.get("strategy", run.get("strategy", "zoomcot"))
    strategy = _strategy_from_mapping(strategy_kind, doc.get("strategy", {}))
    if "use_crop" in overrides:
        strategy = Strategy(
            strategy.kind,
            use_crop=overrides["use_crop"],
            use_caption=strategy.use_caption,
            crop_mode=strategy.crop_mode,
            paths=strategy.paths,
        )
    if "use_caption" in overrides:
        strategy = Strategy(
            strategy.kind,
            use_crop=strategy.use_crop,
            use_caption=overrides["use_caption"],
            crop_mode=strategy.crop_mode,
            paths=strategy.paths,
        )

    backend_cfg = dict(doc.get("backend", {}))
    if backend_cfg.get("sidecar"):
        backend_cfg["sidecar"] = str(_resolve(backend_cfg["sidecar"]))
    backend = _backend_from_mapping(backend_cfg)

    cache_root = overrides.get(
        "cache_root", doc.get("cache", {}).get("root", os.environ.get(CACHE_ROOT_ENV))
    )

    return RunConfig(
        dataset=_resolve(dataset),
        output_dir=_resolve(output_dir),
        strategy=strategy,
        backend=backend,
        crop=_crop_from_mapping(doc.get("crop", {})),
        prompts=PromptSet.from_mapping(doc.get("prompts")),
        cache_root=_resolve(cache_root) if cache_root else None,
        concurrency=int(overrides.get("concurrency", run.get("concurrency", 4))),
        resume=bool(overrides.get("resume", False)),
        seed=int(overrides.get("seed", run.get("seed", 0))),
        max_output_tokens=int(run.get("max_output_tokens", DEFAULT_MAX_OUTPUT_TOKENS)),
        dataset_name=overrides.get("dataset_name", run.get("dataset_name")),
    )


def build_backend(
    settings: BackendSettings, cache: ResponseCache | None = None
) -> VisionBackend:
    """Instantiate the configured backend adapter."""
    convention = BboxConvention(settings.bbox_convention)
    if settings.kind == "mock":
        return MockBackend(
            backend_id=settings.backend_id or "mock",
            model_id=settings.model_id,
            bbox_convention=convention,
            cache=cache,
        )
    if settings.kind == "oracle":
        backend = oracle_from_sidecar(settings.sidecar, cache=cache)
        return backend
    return HttpBackend(
        HttpBackendConfig(
            endpoint=settings.endpoint,
            model_id=settings.model_id,
            backend_id=settings.backend_id or "http",
            api_key_env=settings.api_key_env,
            bbox_convention=convention,
            timeout_s=settings.timeout_s,
            max_retries=settings.max_retries,
            backoff_base_s=settings.backoff_base_s,
            max_in_flight=settings.max_in_flight,
        ),
        cache=cache,
    )
