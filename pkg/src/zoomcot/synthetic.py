"""Deterministic text-rich scene suites and a resolution-limited oracle.

The oracle backend answers like an idealized model whose input is resized
to a small square: text is readable only when its glyph height survives
the downscale. That makes the payoff of grounding-driven zooming a
checkable arithmetic fact instead of a model-quality anecdote.

Scenes are flat-color rasters with rectangular text blocks; the oracle
never reads pixels. Requests are matched to scenes through the provenance
carried by RasterImage views, so crops of a known scene stay known.
"""

from __future__ import annotations

import hashlib
import json
import random
import string
from dataclasses import dataclass
from io import BytesIO
from pathlib import Path

from PIL import Image, ImageDraw, PngImagePlugin

from .backend import BackendError, VisionBackend, VisionRequest
from .geometry import (
    PROVENANCE_ID_KEY,
    PROVENANCE_VIEW_KEY,
    BboxConvention,
    ImageDims,
    PixelBox,
    Provenance,
    RasterImage,
)
from .prompting import Stage
from .store import ResponseCache


class UnknownImage(BackendError):
    """The request's image carries no provenance the oracle recognizes."""


ARCHETYPES = (
    "large_small_text",
    "small_legible",
    "near_border",
    "elongated",
    "context_dependent",
)

# Target extents are capped so that the default 448-floor square, centered
# on a box jittered by up to 25% of its extent, always still contains the
# true box: side/2 = 224 >= extent/2 + 0.25 * extent = 210 at the cap.
_MAX_TARGET_EXTENT = 280


@dataclass(frozen=True)
class TextInstance:
    content: str
    bbox: PixelBox
    glyph_height: int

    def __post_init__(self) -> None:
        if self.glyph_height < 1 or self.glyph_height > self.bbox.height:
            raise ValueError(
                f"glyph height {self.glyph_height} must be in [1, box height "
                f"{self.bbox.height}]"
            )


@dataclass(frozen=True)
class SyntheticScene:
    scene_id: str
    archetype: str
    dims: ImageDims
    instances: tuple[TextInstance, ...]
    target_index: int
    question: str
    context_token: str | None
    distractor_answer: str
    image_png: bytes

    def __post_init__(self) -> None:
        target = self.instances[self.target_index]
        if self.distractor_answer == target.content:
            raise ValueError("distractor must differ from the target content")
        for inst in self.instances:
            if not inst.bbox.within(self.dims):
                raise ValueError(f"instance {inst.content} outside scene dims")

    @property
    def target(self) -> TextInstance:
        return self.instances[self.target_index]

    def raster(self) -> RasterImage:
        img = Image.open(BytesIO(self.image_png))
        img.load()
        provenance = Provenance(
            self.scene_id, PixelBox(0, 0, self.dims.width, self.dims.height)
        )
        return RasterImage(img, provenance)


@dataclass(frozen=True)
class OracleParams:
    """Knobs of the oracle's legibility model.

    model_input_side is the square resolution the pretend model sees;
    legibility_threshold is the minimum effective glyph height in pixels
    after the aspect-preserving downscale to that square.
    """

    model_input_side: int = 336
    legibility_threshold: float = 12.0
    grounding_jitter: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        if self.model_input_side < 1:
            raise ValueError("model_input_side must be >= 1")
        if self.legibility_threshold <= 0:
            raise ValueError("legibility_threshold must be > 0")
        if not 0 <= self.grounding_jitter < 1:
            raise ValueError("grounding_jitter must be in [0, 1)")

    def to_json(self) -> dict:
        return {
            "model_input_side": self.model_input_side,
            "legibility_threshold": self.legibility_threshold,
            "grounding_jitter": self.grounding_jitter,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "OracleParams":
        return cls(**obj)


def _code(rng: random.Random) -> str:
    letters = "".join(rng.choice(string.ascii_uppercase) for _ in range(2))
    digits = "".join(rng.choice(string.digits) for _ in range(4))
    return f"{letters}-{digits}"


def _intersects(a: PixelBox, b: PixelBox, pad: int = 4) -> bool:
    return not (
        a.x2 + pad <= b.x1 or b.x2 + pad <= a.x1 or a.y2 + pad <= b.y1 or b.y2 + pad <= a.y1
    )


def _place_target(rng: random.Random, archetype: str, dims: ImageDims) -> tuple[PixelBox, int]:
    w, h = dims.width, dims.height
    if archetype == "small_legible":
        glyph = rng.randint(max(26, (max(w, h) + 27) // 28 + 2), 34)
        bw = rng.randint(80, 200)
        bh = glyph + rng.randint(6, 30)
    elif archetype == "elongated":
        glyph = rng.randint(22, 30)
        if rng.random() < 0.5:
            bw = rng.randint(200, _MAX_TARGET_EXTENT)
            bh = glyph + rng.randint(4, 14)
        else:
            bh = rng.randint(200, _MAX_TARGET_EXTENT)
            bw = rng.randint(glyph + 4, 60)
    else:
        glyph = rng.randint(22, 30)
        bw = rng.randint(100, 260)
        bh = glyph + rng.randint(6, 40)

    if archetype == "near_border":
        side = rng.choice(("left", "right", "top", "bottom"))
        x1 = rng.randint(20, w - bw - 20)
        y1 = rng.randint(20, h - bh - 20)
        if side == "left":
            x1 = rng.randint(0, 6)
        elif side == "right":
            x1 = w - bw - rng.randint(0, 6)
        elif side == "top":
            y1 = rng.randint(0, 6)
        else:
            y1 = h - bh - rng.randint(0, 6)
    else:
        x1 = rng.randint(20, w - bw - 20)
        y1 = rng.randint(20, h - bh - 20)
    return PixelBox(x1, y1, x1 + bw, y1 + bh), glyph


def _scene_dims(rng: random.Random, archetype: str) -> ImageDims:
    if archetype == "small_legible":
        w = rng.randint(470, 660)
        h = rng.randint(462, w)
        return ImageDims(w, h)
    # Large enough that glyphs <= 30 px fall below a 12 px threshold after
    # downscale to 336: needs max dim > 28 * glyph = 840.
    return ImageDims(rng.randint(950, 1400), rng.randint(700, 1050))


def _decoys(
    rng: random.Random, dims: ImageDims, target: PixelBox
) -> list[tuple[PixelBox, int, str]]:
    out = []
    for _ in range(rng.randint(2, 4)):
        bw = rng.randint(60, 160)
        bh = rng.randint(24, 48)
        glyph = max(10, bh - 8)
        for _attempt in range(12):
            x1 = rng.randint(4, dims.width - bw - 4)
            y1 = rng.randint(4, dims.height - bh - 4)
            box = PixelBox(x1, y1, x1 + bw, y1 + bh)
            if not _intersects(box, target):
                out.append((box, glyph, _code(rng)))
                break
    return out


def generate_suite(
    n: int, params: OracleParams | None = None, seed: int = 0
) -> list[SyntheticScene]:
    """Generate n scenes cycling through the archetype stratification."""
    if n < 1:
        raise ValueError("n must be >= 1")
    del params  # scene geometry depends only on the suite seed
    scenes = []
    for i in range(n):
        scenes.append(_generate_scene(i, ARCHETYPES[i % len(ARCHETYPES)], seed))
    return scenes


def _generate_scene(index: int, archetype: str, seed: int) -> SyntheticScene:
    rng = random.Random(f"{seed}:{index}:scene")
    scene_id = f"scene-{index:04d}"
    dims = _scene_dims(rng, archetype)
    target_box, glyph = _place_target(rng, archetype, dims)
    target_content = _code(rng)
    distractor = _code(rng)
    while distractor == target_content:
        distractor = _code(rng)

    decoys = _decoys(rng, dims, target_box)
    insert_at = rng.randint(0, len(decoys))
    instances = [TextInstance(content, box, g) for box, g, content in decoys]
    instances.insert(insert_at, TextInstance(target_content, target_box, glyph))

    if archetype == "context_dependent":
        context_token = f"RC-{rng.randint(10, 99)}"
        question = (
            "What is the code printed in the field identified by this page's "
            "reference code?"
        )
    else:
        context_token = None
        question = f"What is the code printed in text field {insert_at + 1}?"

    png = _render_scene(scene_id, index, dims, instances)
    return SyntheticScene(
        scene_id=scene_id,
        archetype=archetype,
        dims=dims,
        instances=tuple(instances),
        target_index=insert_at,
        question=question,
        context_token=context_token,
        distractor_answer=distractor,
        image_png=png,
    )


def _render_scene(
    scene_id: str, index: int, dims: ImageDims, instances: list[TextInstance]
) -> bytes:
    # Per-scene background tint keeps views from distinct scenes
    # byte-distinct; the layout and per-box content strips do the rest.
    bg = (210 + index % 40, 210 + (index // 40) % 40, 232)
    ink = (40 + (index * 3) % 30, 44 + (index * 5) % 30, 48 + (index * 7) % 30)
    img = Image.new("RGB", (dims.width, dims.height), bg)
    draw = ImageDraw.Draw(img)
    # scene index strip in the top-left corner, 32 bits, 1 px tall
    for bit in range(32):
        on = (index >> (31 - bit)) & 1
        draw.point((bit, 0), fill=(0, 0, 0) if on else (255, 255, 255))
    for inst in instances:
        b = inst.bbox
        draw.rectangle((b.x1, b.y1, b.x2 - 1, b.y2 - 1), fill=ink)
        # simulate text lines: background-colored separators every glyph row
        y = b.y1 + inst.glyph_height
        while y + 2 <= b.y2:
            draw.rectangle((b.x1, y, b.x2 - 1, min(y + 1, b.y2 - 1)), fill=bg)
            y += inst.glyph_height + 2
        # machine-readable content strip along the top inner edge
        bits = hashlib.sha256(inst.content.encode("utf-8")).digest()[:6]
        for i in range(min(48, b.width)):
            on = (bits[i // 8] >> (7 - i % 8)) & 1
            draw.point((b.x1 + i, b.y1), fill=(0, 0, 0) if on else (255, 255, 255))

    info = PngImagePlugin.PngInfo()
    info.add_text(PROVENANCE_ID_KEY, scene_id)
    info.add_text(PROVENANCE_VIEW_KEY, f"0,0,{dims.width},{dims.height}")
    buf = BytesIO()
    img.save(buf, format="PNG", pnginfo=info)
    return buf.getvalue()


@dataclass(frozen=True)
class OracleSceneRecord:
    """The slice of a scene the oracle needs to answer requests."""

    scene_id: str
    dims: ImageDims
    target_bbox: PixelBox
    glyph_height: int
    target_content: str
    context_token: str | None
    distractor_answer: str
    instance_count: int

    @classmethod
    def from_scene(cls, scene: SyntheticScene) -> "OracleSceneRecord":
        return cls(
            scene_id=scene.scene_id,
            dims=scene.dims,
            target_bbox=scene.target.bbox,
            glyph_height=scene.target.glyph_height,
            target_content=scene.target.content,
            context_token=scene.context_token,
            distractor_answer=scene.distractor_answer,
            instance_count=len(scene.instances),
        )


class OracleBackend(VisionBackend):
    """Scene-aware backend with rule-based, resolution-limited answers.

    Requests are matched by the provenance their image view carries; there
    is no pixel inspection. Caption requests get a fixed template naming
    the scene (and its context token, if any). Grounding requests get the
    target box jittered by at most grounding_jitter of its extent, emitted
    as view-relative fractions. Everything else is treated as a question:
    the target content is returned iff the effective glyph height after
    downscale meets the legibility threshold, the target lies fully inside
    the view, and any required context token appears in the prompt text.
    """

    def __init__(
        self,
        scenes,
        params: OracleParams | None = None,
        cache: ResponseCache | None = None,
        backend_id: str = "oracle",
        model_id: str = "oracle-1",
    ):
        super().__init__(backend_id, model_id, BboxConvention.FRACTION_0_1, cache)
        self.params = params or OracleParams()
        self._scenes: dict[str, OracleSceneRecord] = {}
        for scene in scenes:
            rec = (
                scene
                if isinstance(scene, OracleSceneRecord)
                else OracleSceneRecord.from_scene(scene)
            )
            self._scenes[rec.scene_id] = rec
        self._jitter = {sid: self._jittered_box(rec) for sid, rec in self._scenes.items()}

    def _jittered_box(self, rec: OracleSceneRecord) -> tuple[float, float, float, float]:
        rng = random.Random(f"{self.params.seed}:{rec.scene_id}:grounding")
        b = rec.target_bbox
        j = self.params.grounding_jitter
        x1 = b.x1 + rng.uniform(-1, 1) * j * b.width
        x2 = b.x2 + rng.uniform(-1, 1) * j * b.width
        y1 = b.y1 + rng.uniform(-1, 1) * j * b.height
        y2 = b.y2 + rng.uniform(-1, 1) * j * b.height
        x1 = min(max(x1, 0.0), rec.dims.width - 1.0)
        y1 = min(max(y1, 0.0), rec.dims.height - 1.0)
        x2 = min(max(x2, x1 + 1.0), float(rec.dims.width))
        y2 = min(max(y2, y1 + 1.0), float(rec.dims.height))
        return x1, y1, x2, y2

    def _resolve(self, request: VisionRequest) -> tuple[OracleSceneRecord, PixelBox]:
        provenance = request.image.provenance
        if provenance is None:
            raise UnknownImage("request image carries no provenance")
        rec = self._scenes.get(provenance.source_id)
        if rec is None:
            raise UnknownImage(f"unregistered scene {provenance.source_id!r}")
        return rec, provenance.viewport

    def _complete(self, request: VisionRequest) -> tuple[str, int]:
        rec, view = self._resolve(request)
        stage = request.prompt.stage
        if stage is Stage.OVERVIEW:
            return self._caption(rec), 0
        if stage is Stage.LOCALIZATION:
            return self._grounding(rec, view), 0
        return self._answer(rec, view, request.prompt.text), 0

    @staticmethod
    def _caption(rec: OracleSceneRecord) -> str:
        text = f"A synthetic page ({rec.scene_id}) with {rec.instance_count} printed text fields."
        if rec.context_token is not None:
            text += f" Reference code {rec.context_token}."
        return text

    def _grounding(self, rec: OracleSceneRecord, view: PixelBox) -> str:
        x1, y1, x2, y2 = self._jitter[rec.scene_id]
        fx1 = min(max((x1 - view.x1) / view.width, 0.0), 1.0)
        fy1 = min(max((y1 - view.y1) / view.height, 0.0), 1.0)
        fx2 = min(max((x2 - view.x1) / view.width, 0.0), 1.0)
        fy2 = min(max((y2 - view.y1) / view.height, 0.0), 1.0)
        return f"[{fx1:.4f}, {fy1:.4f}, {fx2:.4f}, {fy2:.4f}]"

    def _answer(self, rec: OracleSceneRecord, view: PixelBox, prompt_text: str) -> str:
        h_eff = (
            rec.glyph_height * self.params.model_input_side / max(view.width, view.height)
        )
        legible = h_eff >= self.params.legibility_threshold
        inside = view.contains(rec.target_bbox)
        context_ok = rec.context_token is None or rec.context_token in prompt_text
        if legible and inside and context_ok:
            return rec.target_content
        return rec.distractor_answer


def write_suite(
    scenes: list[SyntheticScene], params: OracleParams, out_dir: str | Path
) -> tuple[Path, Path]:
    """Persist a suite: images/, canonical manifest.jsonl, scenes.json sidecar."""
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"
    sidecar_path = out_dir / "scenes.json"

    with open(manifest_path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            image_rel = f"images/{scene.scene_id}.png"
            (out_dir / image_rel).write_bytes(scene.image_png)
            fh.write(
                json.dumps(
                    {
                        "id": scene.scene_id,
                        "image": image_rel,
                        "question": scene.question,
                        "answers": [scene.target.content],
                    },
                    ensure_ascii=False,
                    sort_keys=True,
                )
                + "\n"
            )

    sidecar = {
        "oracle_params": params.to_json(),
        "scenes": [
            {
                "id": scene.scene_id,
                "archetype": scene.archetype,
                "width": scene.dims.width,
                "height": scene.dims.height,
                "image": f"images/{scene.scene_id}.png",
                "question": scene.question,
                "context_token": scene.context_token,
                "distractor_answer": scene.distractor_answer,
                "target_index": scene.target_index,
                "instances": [
                    {
                        "content": inst.content,
                        "glyph_height": inst.glyph_height,
                        **inst.bbox.to_json(),
                    }
                    for inst in scene.instances
                ],
            }
            for scene in scenes
        ],
    }
    sidecar_path.write_text(
        json.dumps(sidecar, ensure_ascii=False, sort_keys=True, indent=1), encoding="utf-8"
    )
    return manifest_path, sidecar_path


def load_suite(sidecar_path: str | Path) -> tuple[list[OracleSceneRecord], OracleParams]:
    """Rebuild oracle scene records and params from a suite sidecar."""
    obj = json.loads(Path(sidecar_path).read_text(encoding="utf-8"))
    params = OracleParams.from_json(obj["oracle_params"])
    records = []
    for entry in obj["scenes"]:
        target = entry["instances"][entry["target_index"]]
        records.append(
            OracleSceneRecord(
                scene_id=entry["id"],
                dims=ImageDims(entry["width"], entry["height"]),
                target_bbox=PixelBox(
                    target["x1"], target["y1"], target["x2"], target["y2"]
                ),
                glyph_height=target["glyph_height"],
                target_content=target["content"],
                context_token=entry["context_token"],
                distractor_answer=entry["distractor_answer"],
                instance_count=len(entry["instances"]),
            )
        )
    return records, params


def oracle_from_sidecar(
    sidecar_path: str | Path, cache: ResponseCache | None = None
) -> OracleBackend:
    records, params = load_suite(sidecar_path)
    return OracleBackend(records, params, cache=cache)
