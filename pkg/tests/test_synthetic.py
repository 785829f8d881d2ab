import pytest
from PIL import Image

from zoomcot.backend import GenParams, VisionRequest
from zoomcot.geometry import (
    BboxConvention,
    CropConfig,
    ImageDims,
    PixelBox,
    Provenance,
    RasterImage,
    compute_crop,
    parse_bbox_text,
    to_pixel,
)
from zoomcot.prompting import AssembledPrompt, Stage
from zoomcot.synthetic import (
    ARCHETYPES,
    OracleBackend,
    OracleParams,
    OracleSceneRecord,
    UnknownImage,
    generate_suite,
    load_suite,
    write_suite,
)


def view_of(scene_id: str, viewport: PixelBox) -> RasterImage:
    # the oracle matches on provenance, never pixels, so a 1x1 raster with
    # the right viewport stands in for any view
    return RasterImage(Image.new("RGB", (1, 1)), Provenance(scene_id, viewport))


def record(
    scene_id="scene-x",
    dims=(4000, 3000),
    bbox=(1800, 1400, 2000, 1460),
    glyph=40,
    content="KX-4821",
    token=None,
    distractor="QW-9913",
):
    return OracleSceneRecord(
        scene_id=scene_id,
        dims=ImageDims(*dims),
        target_bbox=PixelBox(*bbox),
        glyph_height=glyph,
        target_content=content,
        context_token=token,
        distractor_answer=distractor,
        instance_count=3,
    )


def ask(backend, scene_id, viewport, text="what is the code?", stage=Stage.BASELINE_DIRECT):
    req = VisionRequest(
        image=view_of(scene_id, viewport),
        prompt=AssembledPrompt(text, stage),
        params=GenParams(),
    )
    return backend.generate(req).text


class TestOracleLegibility:
    def test_full_view_of_large_scene_is_unreadable(self):
        # 40 px glyphs seen through a 336-square: 40 * 336 / 4000 = 3.36 < 12
        backend = OracleBackend([record()], OracleParams())
        out = ask(backend, "scene-x", PixelBox(0, 0, 4000, 3000))
        assert out == "QW-9913"

    def test_crop_view_recovers_resolution(self):
        # 448-square crop: 40 * 336 / 448 = 30 >= 12
        backend = OracleBackend([record()], OracleParams())
        out = ask(backend, "scene-x", PixelBox(1676, 1206, 2124, 1654))
        assert out == "KX-4821"

    def test_target_must_be_fully_inside_view(self):
        backend = OracleBackend([record()], OracleParams())
        # legible size but clips the target's right edge
        out = ask(backend, "scene-x", PixelBox(1551, 1200, 1999, 1648))
        assert out == "QW-9913"

    def test_threshold_boundary_is_inclusive(self):
        # view extent exactly glyph * side / tau: h_eff == tau counts as legible
        backend = OracleBackend(
            [record(dims=(1120, 1120), bbox=(500, 500, 600, 540))], OracleParams()
        )
        assert ask(backend, "scene-x", PixelBox(0, 0, 1120, 1120)) == "KX-4821"
        backend2 = OracleBackend(
            [record(dims=(1121, 1120), bbox=(500, 500, 600, 540))], OracleParams()
        )
        assert ask(backend2, "scene-x", PixelBox(0, 0, 1121, 1120)) == "QW-9913"

    def test_context_token_required_in_prompt(self):
        rec = record(dims=(600, 600), bbox=(100, 100, 220, 150), token="RC-55")
        backend = OracleBackend([rec], OracleParams())
        legible_view = PixelBox(0, 0, 600, 600)
        assert ask(backend, "scene-x", legible_view, "what is the code?") == "QW-9913"
        assert (
            ask(backend, "scene-x", legible_view, "context: RC-55. what is the code?")
            == "KX-4821"
        )

    def test_unknown_image(self):
        backend = OracleBackend([record()], OracleParams())
        with pytest.raises(UnknownImage):
            ask(backend, "scene-unregistered", PixelBox(0, 0, 10, 10))
        with pytest.raises(UnknownImage):
            backend.generate(
                VisionRequest(
                    image=RasterImage(Image.new("RGB", (4, 4))),
                    prompt=AssembledPrompt("q", Stage.BASELINE_DIRECT),
                    params=GenParams(),
                )
            )


class TestOracleStages:
    def test_caption_names_scene_and_token(self):
        rec = record(token="RC-55")
        backend = OracleBackend([rec], OracleParams())
        caption = ask(backend, "scene-x", PixelBox(0, 0, 4000, 3000), "cap", Stage.OVERVIEW)
        assert "scene-x" in caption and "RC-55" in caption

    def test_caption_without_token(self):
        backend = OracleBackend([record()], OracleParams())
        caption = ask(backend, "scene-x", PixelBox(0, 0, 4000, 3000), "cap", Stage.OVERVIEW)
        assert "scene-x" in caption and "RC-" not in caption

    def test_grounding_parses_and_stays_near_target(self):
        rec = record()
        backend = OracleBackend([rec], OracleParams(seed=42))
        text = ask(backend, "scene-x", PixelBox(0, 0, 4000, 3000), "locate", Stage.LOCALIZATION)
        box = to_pixel(parse_bbox_text(text, BboxConvention.FRACTION_0_1), rec.dims)
        b = rec.target_bbox
        # each edge within jitter (25% of extent) plus quantization slack
        assert abs(box.x1 - b.x1) <= 0.25 * b.width + 1
        assert abs(box.x2 - b.x2) <= 0.25 * b.width + 1
        assert abs(box.y1 - b.y1) <= 0.25 * b.height + 1
        assert abs(box.y2 - b.y2) <= 0.25 * b.height + 1

    def test_grounding_deterministic_across_instances(self):
        a = OracleBackend([record()], OracleParams(seed=7))
        b = OracleBackend([record()], OracleParams(seed=7))
        full = PixelBox(0, 0, 4000, 3000)
        assert ask(a, "scene-x", full, "l", Stage.LOCALIZATION) == ask(
            b, "scene-x", full, "l", Stage.LOCALIZATION
        )

    def test_grounding_seed_changes_jitter(self):
        a = OracleBackend([record()], OracleParams(seed=7))
        b = OracleBackend([record()], OracleParams(seed=8))
        full = PixelBox(0, 0, 4000, 3000)
        assert ask(a, "scene-x", full, "l", Stage.LOCALIZATION) != ask(
            b, "scene-x", full, "l", Stage.LOCALIZATION
        )


class TestGenerateSuite:
    def test_deterministic(self):
        a = generate_suite(10, OracleParams(seed=42), seed=42)
        b = generate_suite(10, OracleParams(seed=42), seed=42)
        assert [s.image_png for s in a] == [s.image_png for s in b]
        assert [s.question for s in a] == [s.question for s in b]
        assert [s.target.content for s in a] == [s.target.content for s in b]

    def test_stratification(self):
        scenes = generate_suite(10, seed=1)
        seen = {s.archetype for s in scenes}
        assert seen == set(ARCHETYPES)

    def test_instances_within_dims(self):
        for scene in generate_suite(15, seed=3):
            for inst in scene.instances:
                assert inst.bbox.within(scene.dims)
                assert inst.glyph_height <= inst.bbox.height

    def test_distractor_differs(self):
        for scene in generate_suite(15, seed=4):
            assert scene.distractor_answer != scene.target.content
            assert scene.target.content not in scene.distractor_answer

    def test_target_extent_capped_for_jitter_tolerance(self):
        for scene in generate_suite(25, seed=5):
            assert scene.target.bbox.width <= 280
            assert scene.target.bbox.height <= 280
            assert min(scene.dims.width, scene.dims.height) >= 448

    def test_raster_carries_provenance(self):
        scene = generate_suite(1, seed=6)[0]
        raster = scene.raster()
        assert raster.provenance.source_id == scene.scene_id
        assert raster.provenance.viewport == PixelBox(
            0, 0, scene.dims.width, scene.dims.height
        )

    def test_jitter_containment_property(self):
        # grounding-tolerance guarantee: a square crop of a box jittered
        # by <= 25% still contains the true target
        params = OracleParams(seed=42)
        scenes = generate_suite(25, params, seed=42)
        backend = OracleBackend(scenes, params)
        cfg = CropConfig(1.5, 448)
        for scene in scenes:
            full = PixelBox(0, 0, scene.dims.width, scene.dims.height)
            text = ask(backend, scene.scene_id, full, "l", Stage.LOCALIZATION)
            parsed = to_pixel(parse_bbox_text(text, BboxConvention.FRACTION_0_1), scene.dims)
            region = compute_crop(parsed, scene.dims, cfg)
            assert region.box.contains(scene.target.bbox), scene.scene_id


class TestSuitePersistence:
    def test_write_load_round_trip(self, tmp_path):
        params = OracleParams(seed=9)
        scenes = generate_suite(6, params, seed=9)
        manifest_path, sidecar_path = write_suite(scenes, params, tmp_path)
        records, loaded_params = load_suite(sidecar_path)
        assert loaded_params == params
        assert len(records) == 6
        by_id = {r.scene_id: r for r in records}
        for scene in scenes:
            rec = by_id[scene.scene_id]
            assert rec.target_bbox == scene.target.bbox
            assert rec.target_content == scene.target.content
            assert rec.context_token == scene.context_token

    def test_saved_png_reloads_with_provenance(self, tmp_path):
        params = OracleParams(seed=9)
        scenes = generate_suite(2, params, seed=9)
        write_suite(scenes, params, tmp_path)
        loaded = RasterImage.load(tmp_path / "images" / f"{scenes[0].scene_id}.png")
        assert loaded.provenance.source_id == scenes[0].scene_id

    def test_manifest_is_canonical(self, tmp_path):
        from zoomcot.dataset import load_manifest

        params = OracleParams(seed=11)
        scenes = generate_suite(5, params, seed=11)
        manifest_path, _ = write_suite(scenes, params, tmp_path)
        manifest = load_manifest(manifest_path)
        assert len(manifest.samples) == 5
        assert manifest.samples[0].answers == (scenes[0].target.content,)
