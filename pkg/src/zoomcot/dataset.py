"""Canonical benchmark representation, JSONL loading, and raw converters.

Canonical manifest rows are UTF-8 JSONL objects:

    {"id": ..., "image": ..., "question": ..., "answers": [...]}

with image paths relative to the manifest file. All benchmarks funnel into
this shape; per-dataset quirks live in the converters.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable


class SchemaError(ValueError):
    pass


class FormatMismatch(ValueError):
    pass


class MissingImages(FileNotFoundError):
    def __init__(self, paths: list[Path]):
        self.paths = paths
        listed = ", ".join(str(p) for p in paths[:5])
        more = f" (+{len(paths) - 5} more)" if len(paths) > 5 else ""
        super().__init__(f"{len(paths)} referenced images missing: {listed}{more}")


@dataclass(frozen=True)
class Sample:
    """One benchmark item: image, question, and its ground-truth strings."""

    id: str
    image_path: Path
    question: str
    answers: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.answers:
            raise ValueError(f"sample {self.id}: answers must be non-empty")


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    split: str
    samples: tuple[Sample, ...]
    source_notes: str = ""


def _validate_row(obj: object, lineno: int) -> dict:
    if not isinstance(obj, dict):
        raise SchemaError(f"line {lineno}: row must be a JSON object")
    for key, kind in (("id", str), ("image", str), ("question", str)):
        value = obj.get(key)
        if not isinstance(value, kind) or not value.strip():
            raise SchemaError(f"line {lineno}: missing or empty {key!r}")
    answers = obj.get("answers")
    if (
        not isinstance(answers, list)
        or not answers
        or any(not isinstance(a, str) or not a.strip() for a in answers)
    ):
        raise SchemaError(f"line {lineno}: 'answers' must be a non-empty list of non-empty strings")
    return obj


def load_manifest(
    path: str | Path,
    name: str | None = None,
    split: str = "",
    check_images: bool = True,
) -> DatasetManifest:
    """Load and validate a canonical JSONL manifest.

    Schema violations report their line number; missing image files are
    collected and reported together.
    """
    path = Path(path)
    samples: list[Sample] = []
    seen_ids: set[str] = set()
    missing: list[Path] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}: invalid JSON: {exc}") from exc
            row = _validate_row(obj, lineno)
            if row["id"] in seen_ids:
                raise SchemaError(f"line {lineno}: duplicate id {row['id']!r}")
            seen_ids.add(row["id"])
            image_path = (path.parent / row["image"]).resolve()
            if check_images and not image_path.is_file():
                missing.append(image_path)
            samples.append(
                Sample(
                    id=row["id"],
                    image_path=image_path,
                    question=row["question"],
                    answers=tuple(row["answers"]),
                )
            )
    if missing:
        raise MissingImages(missing)
    return DatasetManifest(
        name=name if name is not None else path.stem,
        split=split,
        samples=tuple(samples),
    )


def serialize_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write canonical JSONL with image paths relative to the manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for sample in manifest.samples:
            rel = os.path.relpath(sample.image_path, path.parent.resolve())
            fh.write(
                json.dumps(
                    {
                        "id": sample.id,
                        "image": rel,
                        "question": sample.question,
                        "answers": list(sample.answers),
                    },
                    ensure_ascii=False,
                    sort_keys=True,
                )
                + "\n"
            )


CONVERT_FORMATS = ("textvqa_json", "funsd_kie")


def convert(raw_path: str | Path, format: str, image_name: str | None = None) -> list[dict]:
    """Convert a raw benchmark file into canonical manifest rows."""
    raw_path = Path(raw_path)
    if format not in CONVERT_FORMATS:
        raise FormatMismatch(f"unknown format {format!r}; expected one of {CONVERT_FORMATS}")
    try:
        with open(raw_path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatMismatch(f"{raw_path}: not valid JSON: {exc}") from exc
    if format == "textvqa_json":
        return _convert_textvqa(payload)
    return _convert_funsd(payload, image_name or f"{raw_path.stem}.png")


def _convert_textvqa(payload: object) -> list[dict]:
    if not isinstance(payload, dict) or not isinstance(payload.get("data"), list):
        raise FormatMismatch("expected top-level object with a 'data' list")
    rows = []
    for i, entry in enumerate(payload["data"]):
        if not isinstance(entry, dict):
            raise FormatMismatch(f"data[{i}]: entry must be an object")
        question = entry.get("question")
        answers = entry.get("answers")
        if not isinstance(question, str) or not question.strip():
            raise FormatMismatch(f"data[{i}]: missing question")
        if not isinstance(answers, list) or not answers:
            raise FormatMismatch(f"data[{i}]: missing answers")
        image = entry.get("image")
        if not isinstance(image, str) or not image:
            image_id = entry.get("image_id")
            if not isinstance(image_id, str) or not image_id:
                raise FormatMismatch(f"data[{i}]: missing image or image_id")
            image = f"{image_id}.jpg"
        rows.append(
            {
                "id": str(entry.get("question_id", i)),
                "image": image,
                "question": question,
                "answers": [str(a) for a in answers],
            }
        )
    return rows


def _convert_funsd(payload: object, image_name: str) -> list[dict]:
    """Map linked key-value pairs of a form annotation to QA rows.

    Each key ("question"-labeled item) becomes the question
    "What is the value for key '<K>'?" with its linked value text as the
    single answer; keys with multiple linked value boxes join them in form
    order.
    """
    if not isinstance(payload, dict) or not isinstance(payload.get("form"), list):
        raise FormatMismatch("expected top-level object with a 'form' list")
    items = payload["form"]
    by_id: dict[object, dict] = {}
    for i, item in enumerate(items):
        if not isinstance(item, dict) or "id" not in item:
            raise FormatMismatch(f"form[{i}]: item must be an object with an id")
        by_id[item["id"]] = item

    stem = Path(image_name).stem
    rows = []
    for item in items:
        if item.get("label") != "question":
            continue
        key_text = (item.get("text") or "").strip()
        if not key_text:
            continue
        linked_ids = [
            pair[1]
            for pair in item.get("linking", ())
            if isinstance(pair, (list, tuple)) and len(pair) == 2 and pair[0] == item["id"]
        ]
        value_parts = []
        for other in items:  # form order
            if other["id"] in linked_ids and other.get("label") == "answer":
                text = (other.get("text") or "").strip()
                if text:
                    value_parts.append(text)
        value = " ".join(value_parts)
        if not value:
            continue
        rows.append(
            {
                "id": f"{stem}-{item['id']}",
                "image": image_name,
                "question": f"What is the value for key '{key_text}'?",
                "answers": [value],
            }
        )
    return rows


def write_manifest_rows(rows: Iterable[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
