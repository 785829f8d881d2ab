import json

import pytest

from zoomcot.dataset import (
    FormatMismatch,
    MissingImages,
    SchemaError,
    convert,
    load_manifest,
    serialize_manifest,
    write_manifest_rows,
)


def write_rows(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def touch_images(base, rows):
    for row in rows:
        p = base / row["image"]
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(b"\x89PNG")


class TestLoadManifest:
    def test_valid_three_rows(self, tmp_path):
        rows = [
            {"id": f"s{i}", "image": f"img{i}.png", "question": "q?", "answers": ["a"]}
            for i in range(3)
        ]
        path = tmp_path / "m.jsonl"
        write_rows(path, rows)
        touch_images(tmp_path, rows)
        manifest = load_manifest(path)
        assert len(manifest.samples) == 3
        assert manifest.name == "m"
        assert manifest.samples[0].image_path == (tmp_path / "img0.png").resolve()

    def test_missing_answers_field(self, tmp_path):
        path = tmp_path / "m.jsonl"
        write_rows(path, [{"id": "s0", "image": "i.png", "question": "q?"}])
        with pytest.raises(SchemaError, match="line 1"):
            load_manifest(path)

    def test_invalid_json_reports_line(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"id": "a", "image": "i.png", "question": "q", "answers": ["x"]}\nnot json\n')
        with pytest.raises(SchemaError, match="line 2"):
            load_manifest(path, check_images=False)

    def test_duplicate_id(self, tmp_path):
        rows = [
            {"id": "dup", "image": "a.png", "question": "q?", "answers": ["a"]},
            {"id": "dup", "image": "b.png", "question": "q?", "answers": ["b"]},
        ]
        path = tmp_path / "m.jsonl"
        write_rows(path, rows)
        touch_images(tmp_path, rows)
        with pytest.raises(SchemaError, match="duplicate id"):
            load_manifest(path)

    def test_empty_answer_string_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        write_rows(path, [{"id": "s", "image": "i.png", "question": "q?", "answers": [" "]}])
        with pytest.raises(SchemaError):
            load_manifest(path, check_images=False)

    def test_missing_images_collected(self, tmp_path):
        rows = [
            {"id": f"s{i}", "image": f"img{i}.png", "question": "q?", "answers": ["a"]}
            for i in range(3)
        ]
        path = tmp_path / "m.jsonl"
        write_rows(path, rows)
        touch_images(tmp_path, rows[:1])
        with pytest.raises(MissingImages) as exc:
            load_manifest(path)
        assert len(exc.value.paths) == 2

    def test_round_trip(self, tmp_path):
        rows = [
            {"id": "s0", "image": "imgs/a.png", "question": "q?", "answers": ["x", "y"]},
            {"id": "s1", "image": "imgs/b.png", "question": "w?", "answers": ["z"]},
        ]
        path = tmp_path / "m.jsonl"
        write_rows(path, rows)
        touch_images(tmp_path, rows)
        manifest = load_manifest(path)
        out = tmp_path / "copy.jsonl"
        serialize_manifest(manifest, out)
        again = load_manifest(out, name=manifest.name)
        assert again == manifest


TEXTVQA_RAW = {
    "dataset_type": "val",
    "data": [
        {
            "question": "what is the brand?",
            "image_id": "003a8ae2ef43b901",
            "question_id": 34602,
            "answers": ["nokia"] * 8 + ["NOKIA", "unanswerable"],
        },
        {
            "question": "what number is shown?",
            "image_id": "00a5f4c8b5feedd7",
            "question_id": 34603,
            "answers": ["42"] * 10,
        },
    ],
}

FUNSD_RAW = {
    "form": [
        {"id": 0, "text": "DATE", "label": "question", "linking": [[0, 1]]},
        {"id": 1, "text": "2019-03-01", "label": "answer", "linking": [[0, 1]]},
        {"id": 2, "text": "TOTAL", "label": "question", "linking": [[2, 3], [2, 4]]},
        {"id": 3, "text": "$5", "label": "answer", "linking": [[2, 3]]},
        {"id": 4, "text": ".00", "label": "answer", "linking": [[2, 4]]},
        {"id": 5, "text": "header text", "label": "header", "linking": []},
        {"id": 6, "text": "ORPHAN", "label": "question", "linking": []},
    ]
}


class TestConverters:
    def test_textvqa_passthrough(self, tmp_path):
        raw = tmp_path / "raw.json"
        raw.write_text(json.dumps(TEXTVQA_RAW))
        rows = convert(raw, "textvqa_json")
        assert len(rows) == 2
        assert rows[0]["id"] == "34602"
        assert rows[0]["image"] == "003a8ae2ef43b901.jpg"
        assert len(rows[0]["answers"]) == 10

    def test_funsd_key_value_mapping(self, tmp_path):
        raw = tmp_path / "0001.json"
        raw.write_text(json.dumps(FUNSD_RAW))
        rows = convert(raw, "funsd_kie")
        assert rows[0]["question"] == "What is the value for key 'DATE'?"
        assert rows[0]["answers"] == ["2019-03-01"]
        assert rows[0]["image"] == "0001.png"
        # multi-linked values join in form order; orphan keys are dropped
        assert rows[1]["answers"] == ["$5 .00"]
        assert len(rows) == 2

    def test_funsd_image_override(self, tmp_path):
        raw = tmp_path / "0001.json"
        raw.write_text(json.dumps(FUNSD_RAW))
        rows = convert(raw, "funsd_kie", image_name="scans/0001.png")
        assert rows[0]["image"] == "scans/0001.png"

    def test_malformed_json(self, tmp_path):
        raw = tmp_path / "bad.json"
        raw.write_text("{not json")
        with pytest.raises(FormatMismatch):
            convert(raw, "textvqa_json")

    def test_wrong_shape(self, tmp_path):
        raw = tmp_path / "odd.json"
        raw.write_text(json.dumps({"rows": []}))
        with pytest.raises(FormatMismatch):
            convert(raw, "textvqa_json")
        with pytest.raises(FormatMismatch):
            convert(raw, "funsd_kie")

    def test_unknown_format(self, tmp_path):
        raw = tmp_path / "raw.json"
        raw.write_text("{}")
        with pytest.raises(FormatMismatch):
            convert(raw, "docvqa")

    def test_converter_output_loads(self, tmp_path):
        raw = tmp_path / "raw.json"
        raw.write_text(json.dumps(TEXTVQA_RAW))
        rows = convert(raw, "textvqa_json")
        out = tmp_path / "manifest.jsonl"
        write_manifest_rows(rows, out)
        touch_images(tmp_path, rows)
        manifest = load_manifest(out)
        assert len(manifest.samples) == 2
