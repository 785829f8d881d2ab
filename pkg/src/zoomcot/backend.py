"""Vision-language backend adapters.

One HTTP adapter speaking the common chat-completions-with-vision JSON
shape, and one deterministic mock for tests and offline runs. Both share
response caching, seeded sampling, and call accounting through a common
base class.
"""

from __future__ import annotations

import base64
import hashlib
import logging
import os
import threading
import time
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import requests

from .geometry import BboxConvention, RasterImage
from .prompting import AssembledPrompt
from .store import CacheKey, ResponseCache, make_cache_key

logger = logging.getLogger(__name__)

DEFAULT_MAX_OUTPUT_TOKENS = 512


class BackendError(Exception):
    pass


class TransportError(BackendError):
    """Transient transport failure that survived all retries."""


class BackendRefusal(BackendError):
    """The endpoint answered but refused or mangled the request (4xx-like)."""


class InvalidParams(BackendError):
    pass


class ImageDecodeError(BackendError):
    pass


@dataclass(frozen=True)
class GenParams:
    """Generation controls; temperature 0 everywhere except sampled paths."""

    temperature: float = 0.0
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise InvalidParams(f"temperature must be >= 0, got {self.temperature}")
        if self.max_output_tokens < 1:
            raise InvalidParams("max_output_tokens must be >= 1")

    def canonical(self) -> dict:
        return {
            "max_output_tokens": self.max_output_tokens,
            "seed": self.seed,
            "temperature": self.temperature,
        }


@dataclass(frozen=True)
class VisionRequest:
    """One image, one prompt. The pipeline never sends multi-image turns."""

    image: RasterImage
    prompt: AssembledPrompt
    params: GenParams = GenParams()
    backend_id: str | None = None
    model_id: str | None = None


@dataclass(frozen=True)
class VisionResponse:
    text: str  # recorded verbatim, untrimmed
    latency_ms: int = 0
    cached: bool = False


def derive_seed(base: int | None, label: object) -> int:
    """Stable 63-bit seed for a sampled path; a missing base acts as 0."""
    basis = 0 if base is None else base
    digest = hashlib.sha256(f"{basis}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def _deterministic(params: GenParams) -> bool:
    # Only deterministic requests are cacheable: greedy decoding, or sampled
    # decoding pinned by an explicit seed.
    return params.temperature == 0 or params.seed is not None


class VisionBackend:
    """Base adapter: caching, seeded sampling, and call accounting.

    Subclasses implement _complete(request) -> (text, latency_ms).
    """

    def __init__(
        self,
        backend_id: str,
        model_id: str,
        bbox_convention: BboxConvention = BboxConvention.FRACTION_0_1,
        cache: ResponseCache | None = None,
    ):
        self.backend_id = backend_id
        self.model_id = model_id
        self.bbox_convention = BboxConvention(bbox_convention)
        self._cache = cache
        self._calls = 0
        self._lock = threading.Lock()

    @property
    def call_count(self) -> int:
        """Completions actually performed (cache hits excluded)."""
        return self._calls

    def cache_key(self, request: VisionRequest) -> CacheKey:
        return make_cache_key(
            self.backend_id,
            self.model_id,
            request.params.canonical(),
            request.prompt.text,
            request.image.canonical_bytes(),
        )

    def generate(self, request: VisionRequest) -> VisionResponse:
        """Complete one request, consulting the cache first."""
        key: CacheKey | None = None
        if self._cache is not None and _deterministic(request.params):
            key = self.cache_key(request)
            hit = self._cache.get(key)
            if hit is not None:
                return VisionResponse(
                    text=hit["text"], latency_ms=hit.get("latency_ms", 0), cached=True
                )
        text, latency_ms = self._complete(request)
        with self._lock:
            self._calls += 1
        response = VisionResponse(text=text, latency_ms=latency_ms, cached=False)
        if key is not None:
            self._cache.put(key, {"text": response.text, "latency_ms": response.latency_ms})
        return response

    def sample_n(self, request: VisionRequest, n: int) -> list[VisionResponse]:
        """n completions with per-path derived seeds; reproducible when seeded."""
        if n < 1:
            raise InvalidParams(f"n must be >= 1, got {n}")
        if n > 1 and request.params.temperature <= 0:
            raise InvalidParams("sampling n > 1 requires temperature > 0")
        if n == 1:
            return [self.generate(request)]
        out = []
        for i in range(n):
            params_i = replace(request.params, seed=derive_seed(request.params.seed, i))
            out.append(self.generate(replace(request, params=params_i)))
        return out

    def _complete(self, request: VisionRequest) -> tuple[str, int]:
        raise NotImplementedError


class MockBackend(VisionBackend):
    """Deterministic stand-in backend.

    With no script, the completion is a digest echo: a pure function of
    (image bytes, prompt text) at temperature 0, with the seed folded in at
    temperature > 0. A script maps a Stage (or its value) to a fixed string,
    a sequence consumed per call, or a callable of the request.
    """

    def __init__(
        self,
        script: Mapping[object, object] | None = None,
        backend_id: str = "mock",
        model_id: str = "mock-1",
        bbox_convention: BboxConvention = BboxConvention.FRACTION_0_1,
        cache: ResponseCache | None = None,
    ):
        super().__init__(backend_id, model_id, bbox_convention, cache)
        self._script = dict(script or {})
        self._cursor: dict[object, int] = {}

    def _complete(self, request: VisionRequest) -> tuple[str, int]:
        stage = request.prompt.stage
        entry = self._script.get(stage, self._script.get(stage.value))
        if entry is None:
            return self._echo(request), 0
        if callable(entry):
            return str(entry(request)), 0
        if isinstance(entry, str):
            return entry, 0
        if isinstance(entry, Sequence):
            with self._lock:
                i = self._cursor.get(stage, 0)
                self._cursor[stage] = i + 1
            return str(entry[min(i, len(entry) - 1)]), 0
        raise TypeError(f"unsupported script entry for stage {stage}: {entry!r}")

    def _echo(self, request: VisionRequest) -> str:
        h = hashlib.sha256()
        h.update(request.image.canonical_bytes())
        h.update(request.prompt.text.encode("utf-8"))
        if request.params.temperature > 0 and request.params.seed is not None:
            h.update(str(request.params.seed).encode("utf-8"))
        return f"mock-{request.prompt.stage.value}-{h.hexdigest()[:12]}"


@dataclass(frozen=True)
class HttpBackendConfig:
    """Connection settings for a chat-with-vision HTTP endpoint."""

    endpoint: str
    model_id: str
    backend_id: str = "http"
    api_key_env: str | None = None
    bbox_convention: BboxConvention = BboxConvention.FRACTION_0_1
    timeout_s: float = 60.0
    max_retries: int = 3
    backoff_base_s: float = 0.5
    max_in_flight: int = 4


class HttpBackend(VisionBackend):
    """Adapter for JSON chat endpoints taking one text part and one image part.

    Transient transport failures (connection errors, timeouts, 5xx) retry
    with exponential backoff; semantic refusals (4xx) never retry.
    """

    def __init__(self, config: HttpBackendConfig, cache: ResponseCache | None = None):
        super().__init__(config.backend_id, config.model_id, config.bbox_convention, cache)
        self.config = config
        self._limiter = threading.BoundedSemaphore(config.max_in_flight)
        self._session = requests.Session()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env:
            key = os.environ.get(self.config.api_key_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def _payload(self, request: VisionRequest) -> dict:
        try:
            png = request.image.png_bytes()
        except Exception as exc:
            raise ImageDecodeError(f"cannot encode request image: {exc}") from exc
        image_url = "data:image/png;base64," + base64.b64encode(png).decode("ascii")
        payload = {
            "model": self.model_id,
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_output_tokens,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": request.prompt.text},
                        {"type": "image_url", "image_url": {"url": image_url}},
                    ],
                }
            ],
        }
        if request.params.seed is not None:
            payload["seed"] = request.params.seed
        return payload

    def _complete(self, request: VisionRequest) -> tuple[str, int]:
        payload = self._payload(request)
        headers = self._headers()
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                time.sleep(self.config.backoff_base_s * 2 ** (attempt - 1))
            start = time.monotonic()
            try:
                with self._limiter:
                    resp = self._session.post(
                        self.config.endpoint,
                        json=payload,
                        headers=headers,
                        timeout=self.config.timeout_s,
                    )
            except requests.RequestException as exc:
                last_error = exc
                logger.warning("transport failure (attempt %d): %s", attempt + 1, exc)
                continue
            latency_ms = int((time.monotonic() - start) * 1000)
            if 400 <= resp.status_code < 500:
                raise BackendRefusal(f"HTTP {resp.status_code}: {resp.text[:500]}")
            if resp.status_code != 200:
                last_error = TransportError(f"HTTP {resp.status_code}")
                logger.warning("server failure (attempt %d): HTTP %s", attempt + 1, resp.status_code)
                continue
            return self._extract_text(resp), latency_ms
        raise TransportError(
            f"request failed after {self.config.max_retries + 1} attempts: {last_error}"
        )

    @staticmethod
    def _extract_text(resp: requests.Response) -> str:
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendRefusal(f"malformed completion body: {exc}") from exc
        if not isinstance(text, str):
            raise BackendRefusal(f"completion content is not text: {type(text)}")
        return text
