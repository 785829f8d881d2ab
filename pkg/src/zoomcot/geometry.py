"""Integer box geometry for grounding-driven crops, plus raster image I/O.

All pixel boxes are half-open: a box covers pixels [x1, x2) x [y1, y2),
so width == x2 - x1 and a box flush with the right edge has x2 == image
width. This composes cleanly with PIL's crop convention and avoids
off-by-one disputes at the borders.
"""

from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from io import BytesIO
from pathlib import Path

from PIL import Image, PngImagePlugin, UnidentifiedImageError


class BoxParseError(ValueError):
    """Grounding text did not yield a usable box."""


class NoBoxFound(BoxParseError):
    """No coordinate tuple matched the parsing grammar."""


class DegenerateBox(BoxParseError):
    """Parsed coordinates collapse to zero or negative extent."""


class OutOfRange(BoxParseError):
    """Parsed value lies outside the declared coordinate convention."""


class BoxOutsideImage(ValueError):
    """A box violated the precondition of lying within its image."""


class RegionOutsideImage(ValueError):
    """A crop region extends past the image it is applied to."""


class ImageLoadError(RuntimeError):
    """An image file could not be read or decoded."""


class BboxConvention(str, Enum):
    """Coordinate convention a backend uses when emitting boxes as text."""

    FRACTION_0_1 = "fraction_0_1"
    PER_MILLE_0_999 = "per_mille_0_999"
    ABSOLUTE_PIXELS = "absolute_pixels"


class CropMode(str, Enum):
    STRICT_RECT = "strict_rect"
    SQUARE = "square"
    SQUARE_SCALED = "square_scaled"
    FULL_IMAGE = "full_image"


@dataclass(frozen=True)
class ImageDims:
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image dims must be positive, got {self.width}x{self.height}")


@dataclass(frozen=True)
class PixelBox:
    """Axis-aligned half-open pixel rectangle with origin at the top-left."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self) -> None:
        if self.x1 < 0 or self.y1 < 0:
            raise ValueError(f"box origin must be non-negative: {self}")
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise ValueError(f"box must have positive extent: {self}")

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    def within(self, dims: ImageDims) -> bool:
        return self.x2 <= dims.width and self.y2 <= dims.height

    def contains(self, other: "PixelBox") -> bool:
        return (
            self.x1 <= other.x1
            and self.y1 <= other.y1
            and other.x2 <= self.x2
            and other.y2 <= self.y2
        )

    def to_json(self) -> dict:
        return {"x1": self.x1, "y1": self.y1, "x2": self.x2, "y2": self.y2}

    @classmethod
    def from_json(cls, obj: dict) -> "PixelBox":
        return cls(obj["x1"], obj["y1"], obj["x2"], obj["y2"])


@dataclass(frozen=True)
class NormalizedBox:
    """Box with coordinates as fractions of the image extent, in [0, 1]."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"normalized coordinate out of [0, 1]: {v}")
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise ValueError(f"normalized box must have positive extent: {self}")


@dataclass(frozen=True)
class CropConfig:
    """Parameters of the square expansion crop.

    expand_ratio scales the squared box side; min_side is the floor applied
    after scaling, matching typical model input resolutions.
    """

    expand_ratio: float = 1.5
    min_side: int = 448
    mode: CropMode = CropMode.SQUARE_SCALED

    def __post_init__(self) -> None:
        if self.expand_ratio <= 0:
            raise ValueError(f"expand_ratio must be positive, got {self.expand_ratio}")
        if self.min_side < 0:
            raise ValueError(f"min_side must be >= 0, got {self.min_side}")


@dataclass(frozen=True)
class CropRegion:
    """A computed crop window plus flags recording how it was adjusted."""

    box: PixelBox
    side_limited_by_image: bool = False
    shifted_x: bool = False
    shifted_y: bool = False

    def flags(self) -> tuple[str, ...]:
        out = []
        if self.side_limited_by_image:
            out.append("side_limited_by_image")
        if self.shifted_x:
            out.append("shifted_x")
        if self.shifted_y:
            out.append("shifted_y")
        return tuple(out)

    def to_json(self) -> dict:
        obj = self.box.to_json()
        obj["flags"] = list(self.flags())
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "CropRegion":
        flags = set(obj.get("flags", ()))
        return cls(
            box=PixelBox(obj["x1"], obj["y1"], obj["x2"], obj["y2"]),
            side_limited_by_image="side_limited_by_image" in flags,
            shifted_x="shifted_x" in flags,
            shifted_y="shifted_y" in flags,
        )


_NUM = r"-?\d+(?:\.\d+)?"
# Bracketed 4-tuple "[a, b, c, d]" or paired corners "(a,b),(c,d)"; box tags
# or other wrapping text around either form are ignored by searching.
_QUAD_RE = re.compile(rf"\[\s*({_NUM})\s*,\s*({_NUM})\s*,\s*({_NUM})\s*,\s*({_NUM})\s*\]")
_PAIR_RE = re.compile(
    rf"\(\s*({_NUM})\s*,\s*({_NUM})\s*\)\s*,?\s*\(\s*({_NUM})\s*,\s*({_NUM})\s*\)"
)


def parse_bbox_text(
    raw: str, convention: BboxConvention
) -> NormalizedBox | PixelBox:
    """Parse the first coordinate 4-tuple in model output text.

    Returns a NormalizedBox for fraction and per-mille conventions (per-mille
    values are divided by 999) and a PixelBox for absolute pixels.

    Raises NoBoxFound when no tuple matches the grammar, OutOfRange when a
    value falls outside the convention's range, and DegenerateBox when the
    first matched tuple has non-positive extent.
    """
    convention = BboxConvention(convention)
    matches = [m for m in (_QUAD_RE.search(raw), _PAIR_RE.search(raw)) if m]
    if not matches:
        raise NoBoxFound(f"no box grammar match in {raw!r}")
    m = min(matches, key=lambda m: m.start())
    vals = [float(g) for g in m.groups()]
    x1, y1, x2, y2 = vals

    if convention is BboxConvention.FRACTION_0_1:
        _check_range(vals, 0.0, 1.0, convention)
        _check_extent(x1, y1, x2, y2, m.group(0))
        return NormalizedBox(x1, y1, x2, y2)
    if convention is BboxConvention.PER_MILLE_0_999:
        _check_range(vals, 0.0, 999.0, convention)
        _check_extent(x1, y1, x2, y2, m.group(0))
        return NormalizedBox(x1 / 999.0, y1 / 999.0, x2 / 999.0, y2 / 999.0)
    _check_range(vals, 0.0, math.inf, convention)
    _check_extent(x1, y1, x2, y2, m.group(0))
    return PixelBox(
        _round_half_away(x1),
        _round_half_away(y1),
        max(_round_half_away(x2), _round_half_away(x1) + 1),
        max(_round_half_away(y2), _round_half_away(y1) + 1),
    )


def _check_range(vals: list[float], lo: float, hi: float, convention: BboxConvention) -> None:
    for v in vals:
        if not lo <= v <= hi:
            raise OutOfRange(f"value {v} outside [{lo}, {hi}] for {convention.value}")


def _check_extent(x1: float, y1: float, x2: float, y2: float, text: str) -> None:
    if x2 <= x1 or y2 <= y1:
        raise DegenerateBox(f"parsed box has non-positive extent: {text}")


def _round_half_away(v: float) -> int:
    # round-half-away-from-zero; Python's round() would use banker's rounding
    if v >= 0:
        return math.floor(v + 0.5)
    return math.ceil(v - 0.5)


def to_pixel(box: NormalizedBox, dims: ImageDims) -> PixelBox:
    """Scale a normalized box to pixels, repairing rounding artifacts.

    Coordinates are rounded to the nearest integer; the result is clamped in
    bounds and widened to at least a 1-px extent so sub-pixel boxes survive.
    """
    px1 = _round_half_away(box.x1 * dims.width)
    px2 = _round_half_away(box.x2 * dims.width)
    py1 = _round_half_away(box.y1 * dims.height)
    py2 = _round_half_away(box.y2 * dims.height)
    px1 = min(max(px1, 0), dims.width - 1)
    py1 = min(max(py1, 0), dims.height - 1)
    px2 = min(max(px2, px1 + 1), dims.width)
    py2 = min(max(py2, py1 + 1), dims.height)
    return PixelBox(px1, py1, px2, py2)


def clamp_box(box: PixelBox, dims: ImageDims) -> PixelBox:
    """Intersect a pixel box with the image, repairing to 1-px extent.

    Raises DegenerateBox when the box lies entirely outside the image, i.e.
    no in-bounds repair exists.
    """
    if box.x1 >= dims.width or box.y1 >= dims.height:
        raise DegenerateBox(f"box {box} lies outside {dims.width}x{dims.height}")
    x2 = min(box.x2, dims.width)
    y2 = min(box.y2, dims.height)
    if x2 <= box.x1:
        x2 = box.x1 + 1
    if y2 <= box.y1:
        y2 = box.y1 + 1
    return PixelBox(box.x1, box.y1, x2, y2)


def full_image_region(dims: ImageDims) -> CropRegion:
    return CropRegion(PixelBox(0, 0, dims.width, dims.height))


def compute_crop(bbox: PixelBox, dims: ImageDims, cfg: CropConfig) -> CropRegion:
    """Compute the crop window for a grounded box.

    In square modes the box is squared to its longer side, scaled by
    expand_ratio, floored at min_side, clamped to the largest inscribed
    square when it exceeds the image, and positioned so its center sits as
    close as possible to the box center while staying in bounds.
    """
    if not bbox.within(dims):
        raise BoxOutsideImage(f"bbox {bbox} not within {dims.width}x{dims.height}")
    if cfg.mode is CropMode.FULL_IMAGE:
        return full_image_region(dims)
    if cfg.mode is CropMode.STRICT_RECT:
        return CropRegion(bbox)

    long_side = max(bbox.width, bbox.height)
    if cfg.mode is CropMode.SQUARE_SCALED:
        side_raw = max(cfg.min_side, _ceil_scaled(cfg.expand_ratio, long_side))
    else:  # CropMode.SQUARE: no scaling, no floor
        side_raw = long_side
    side = min(side_raw, dims.width, dims.height)
    limited = side < side_raw

    # Ideal origin puts the square's center on the box center; 2*center is
    # integer (x1 + x2), so the halving below is exact in binary.
    sx_raw = _round_half_away((bbox.x1 + bbox.x2 - side) / 2)
    sy_raw = _round_half_away((bbox.y1 + bbox.y2 - side) / 2)
    sx = min(max(sx_raw, 0), dims.width - side)
    sy = min(max(sy_raw, 0), dims.height - side)
    # A clamp in a dimension the square fully spans is attributed to
    # side_limited_by_image, not to a shift: there was no placement choice.
    shifted_x = sx != sx_raw and side < dims.width
    shifted_y = sy != sy_raw and side < dims.height

    return CropRegion(
        box=PixelBox(sx, sy, sx + side, sy + side),
        side_limited_by_image=limited,
        shifted_x=shifted_x,
        shifted_y=shifted_y,
    )


def _ceil_scaled(ratio: float, length: int) -> int:
    # Exact rational ceil: 1.1 * 10 must give 11, not 12 via float noise.
    return math.ceil(Fraction(str(ratio)) * length)


PROVENANCE_ID_KEY = "source-id"
PROVENANCE_VIEW_KEY = "source-viewport"


@dataclass(frozen=True)
class Provenance:
    """Identity of the source image and the viewport this raster shows of it."""

    source_id: str
    viewport: PixelBox


class RasterImage:
    """8-bit RGB raster with optional source provenance.

    Crops compose viewports, so a consumer can always tell which region of
    the original a derived raster shows. Provenance survives a save/load
    round trip via PNG text chunks; it is never part of the canonical pixel
    bytes used for hashing or transport.
    """

    def __init__(self, image: Image.Image, provenance: Provenance | None = None):
        if image.mode != "RGB":
            image = image.convert("RGB")
        self._image = image
        self.provenance = provenance
        self._canonical: bytes | None = None

    @property
    def pil(self) -> Image.Image:
        return self._image

    @property
    def dims(self) -> ImageDims:
        return ImageDims(self._image.width, self._image.height)

    def canonical_bytes(self) -> bytes:
        """Stable byte form for hashing: dims header plus raw RGB pixels.

        Raw pixels are used instead of an encoded container so the digest
        does not depend on the zlib build or encoder settings.
        """
        if self._canonical is None:
            w, h = self._image.size
            self._canonical = b"RGB8" + struct.pack("<II", w, h) + self._image.tobytes()
        return self._canonical

    def png_bytes(self) -> bytes:
        """Encode pixels to PNG without metadata (the wire format)."""
        buf = BytesIO()
        self._image.save(buf, format="PNG")
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        """Write as PNG, embedding provenance text chunks when present."""
        info = PngImagePlugin.PngInfo()
        if self.provenance is not None:
            v = self.provenance.viewport
            info.add_text(PROVENANCE_ID_KEY, self.provenance.source_id)
            info.add_text(PROVENANCE_VIEW_KEY, f"{v.x1},{v.y1},{v.x2},{v.y2}")
        self._image.save(path, format="PNG", pnginfo=info)

    @classmethod
    def load(cls, path: str | Path) -> "RasterImage":
        """Read a PNG or JPEG file and decode to 8-bit RGB."""
        try:
            with Image.open(path) as img:
                text = getattr(img, "text", {}) or {}
                decoded = img.convert("RGB")
        except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
            raise ImageLoadError(f"cannot load image {path}: {exc}") from exc
        provenance = None
        if PROVENANCE_ID_KEY in text and PROVENANCE_VIEW_KEY in text:
            try:
                coords = [int(p) for p in text[PROVENANCE_VIEW_KEY].split(",")]
                provenance = Provenance(text[PROVENANCE_ID_KEY], PixelBox(*coords))
            except (ValueError, TypeError):
                provenance = None  # malformed chunk: treat as plain image
        return cls(decoded, provenance)

    @classmethod
    def from_bytes(cls, data: bytes) -> "RasterImage":
        try:
            img = Image.open(BytesIO(data))
            img.load()
        except (UnidentifiedImageError, OSError) as exc:
            raise ImageLoadError(f"cannot decode image bytes: {exc}") from exc
        return cls(img.convert("RGB"))


def extract_crop(image: RasterImage, region: CropRegion) -> RasterImage:
    """Cut the region out of the image with no resampling.

    Returns the image itself when the region covers it entirely, so a
    full-image crop is an exact identity.
    """
    dims = image.dims
    b = region.box
    if not b.within(dims):
        raise RegionOutsideImage(f"region {b} not within {dims.width}x{dims.height}")
    if b.x1 == 0 and b.y1 == 0 and b.x2 == dims.width and b.y2 == dims.height:
        return image
    sub = image.pil.crop((b.x1, b.y1, b.x2, b.y2))
    provenance = None
    if image.provenance is not None:
        v = image.provenance.viewport
        provenance = Provenance(
            image.provenance.source_id,
            PixelBox(v.x1 + b.x1, v.y1 + b.y1, v.x1 + b.x2, v.y1 + b.y2),
        )
    return RasterImage(sub, provenance)
