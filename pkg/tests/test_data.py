"""Annotation ingestion, synthetic scene generation, and the scoring oracle."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from humancrop.data import (AnnotatedImage, DatasetIndex, OracleWeights,
                            ScoredCrop, SynthSpec, dataset_stats,
                            load_annotations, oracle_score, render_scene,
                            save_annotations, synth_generate, with_split)
from humancrop.errors import AnnotationError, ValidationError
from humancrop.geometry import Box, CandidateParams, Size


def write_payload(tmp_path, payload, name="ann.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return path


def record(image="img-0", width=100.0, height=80.0, **extra):
    rec = {
        "image": image, "width": width, "height": height,
        "human_box": [20.0, 10.0, 60.0, 70.0],
        "crops": [
            {"box": [0.0, 0.0, 80.0, 80.0], "score": 2.0},
            {"box": [10.0, 0.0, 90.0, 80.0], "score": 3.0},
            {"box": [20.0, 0.0, 100.0, 80.0], "score": 4.0},
        ],
    }
    rec.update(extra)
    return rec


class TestLoadAnnotations:
    def test_mean_score_cached(self, tmp_path):
        path = write_payload(tmp_path, {"split": "train", "images": [record()]})
        index = load_annotations(path)
        assert index.split == "train"
        assert index.mean_score == pytest.approx(3.0)
        assert len(index.images) == 1
        assert index.images[0].human_box == Box(20, 10, 60, 70)
        assert index.images[0].is_human_centric

    def test_empty_image_list(self, tmp_path):
        path = write_payload(tmp_path, {"images": []})
        index = load_annotations(path)
        assert index.images == []
        assert index.mean_score is None

    def test_malformed_json_reports_position(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"images": [\n  {"image": }\n]}')
        with pytest.raises(AnnotationError, match="line 2"):
            load_annotations(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(AnnotationError, match="not found"):
            load_annotations(tmp_path / "nope.json")

    def test_wrong_top_level_shape(self, tmp_path):
        path = write_payload(tmp_path, [record()])
        with pytest.raises(AnnotationError, match="images"):
            load_annotations(path)

    def test_degenerate_crop_rejected_others_kept(self, tmp_path):
        bad = record()
        bad["crops"][1]["box"] = [50.0, 0.0, 50.0, 80.0]  # x2 <= x1
        path = write_payload(tmp_path, {"images": [bad]})
        index = load_annotations(path)
        assert len(index.images) == 1
        assert [c.score for c in index.images[0].crops] == [2.0, 4.0]
        assert any(d.where == "crops[1]" for d in index.diagnostics)

    def test_out_of_bounds_human_box_rejects_record(self, tmp_path):
        bad = record(image="bad", human_box=[20.0, 10.0, 160.0, 70.0])
        path = write_payload(tmp_path, {"images": [bad, record(image="ok")]})
        index = load_annotations(path)
        assert [img.image_id for img in index.images] == ["ok"]
        assert any(d.image == "bad" and d.where == "human_box"
                   for d in index.diagnostics)

    def test_nonfinite_score_rejected(self, tmp_path):
        bad = record()
        bad["crops"][0]["score"] = float("nan")
        path = write_payload(tmp_path, {"images": [bad]})
        index = load_annotations(path)
        assert [c.score for c in index.images[0].crops] == [3.0, 4.0]

    def test_human_centric_requires_box_below_area_cap(self, tmp_path):
        rec = record(human_box=[0.0, 0.0, 100.0, 80.0],
                     is_human_centric=True)  # covers 100% of the frame
        path = write_payload(tmp_path, {"images": [rec]})
        index = load_annotations(path)
        assert index.images[0].is_human_centric is False
        assert any(d.where == "is_human_centric" for d in index.diagnostics)

    def test_missing_size_rejects_record(self, tmp_path):
        rec = record()
        del rec["width"]
        path = write_payload(tmp_path, {"images": [rec]})
        index = load_annotations(path)
        assert index.images == []
        assert index.diagnostics[0].where == "size"


class TestSaveAnnotations:
    def test_round_trip(self, tmp_path):
        path = write_payload(tmp_path, {"split": "train", "images": [record()]})
        index = load_annotations(path)
        out = tmp_path / "out.json"
        save_annotations(index, out)
        again = load_annotations(out)
        assert again.split == index.split
        assert again.mean_score == index.mean_score
        assert again.images == index.images

    def test_deterministic_bytes(self, tmp_path):
        index = synth_generate(SynthSpec(seed=3, count=2))
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        save_annotations(index, a)
        save_annotations(index, b)
        assert a.read_bytes() == b.read_bytes()


class TestDatasetStats:
    def test_counts(self, tmp_path):
        path = write_payload(tmp_path, {"split": "train", "images": [record()]})
        stats = dataset_stats(load_annotations(path))
        assert stats["images"] == 1
        assert stats["crops"] == 3
        assert stats["human_centric"] == 1
        assert stats["mean_score"] == pytest.approx(3.0)
        assert sum(stats["score_histogram"]["counts"]) == 3
        json.dumps(stats)  # must be serializable as-is

    def test_empty_index(self):
        stats = dataset_stats(DatasetIndex(split="x", images=[], mean_score=None))
        assert stats["images"] == 0
        assert stats["mean_score"] is None
        assert stats["human_centric_ratio"] == 0.0


def centered_scene(facing="front", size=200.0):
    quarter = size / 4.0
    return {
        "background": [0.2, 0.2, 0.2],
        "person": {"box": [size / 2 - quarter / 2, size / 2 - quarter,
                           size / 2 + quarter / 2, size / 2 + quarter],
                   "facing": facing,
                   "body_color": [0.1, 0.1, 0.1], "face_color": [0.9, 0.9, 0.9]},
        "objects": [],
    }


class TestOracleScore:
    def test_front_facing_symmetry(self):
        scene = centered_scene("front")
        w = OracleWeights()
        left = oracle_score(scene, Box(0, 20, 160, 180), w)
        right = oracle_score(scene, Box(40, 20, 200, 180), w)
        assert left == pytest.approx(right, abs=1e-9)

    def test_facing_right_prefers_lead_room(self):
        scene = centered_scene("right")
        w = OracleWeights()
        # mirrored pair around the person center: space on the facing side wins
        rightward = oracle_score(scene, Box(40, 20, 200, 180), w)
        leftward = oracle_score(scene, Box(0, 20, 160, 180), w)
        assert rightward > leftward

    def test_person_excluded_hits_floor(self):
        scene = centered_scene("front")
        assert oracle_score(scene, Box(0, 0, 40, 40), OracleWeights()) == 1.0

    def test_score_range(self):
        rng = np.random.default_rng(5)
        scene = centered_scene("left")
        for _ in range(200):
            x1, y1 = rng.uniform(0, 100, 2)
            crop = Box(x1, y1, x1 + rng.uniform(40, 100), y1 + rng.uniform(40, 100))
            s = oracle_score(scene, crop, OracleWeights())
            assert 1.0 <= s <= 5.0

    def test_object_coverage_rewarded(self):
        scene = centered_scene("front")
        scene["objects"] = [{"box": [150.0, 80.0, 180.0, 120.0],
                             "color": [0.8, 0.5, 0.2]}]
        w = OracleWeights()
        covering = oracle_score(scene, Box(40, 20, 200, 180), w)
        missing = oracle_score(scene, Box(0, 20, 149.0, 180), w)
        # same thirds/lead geometry is impossible here, so compare like-for-like:
        # shrink only on the object side
        base = oracle_score(scene, Box(20, 20, 180, 180), w)
        no_obj = dict(scene, objects=[])
        base_no_obj = oracle_score(no_obj, Box(20, 20, 180, 180), w)
        assert covering >= missing
        assert base <= base_no_obj  # partial coverage scores below no-object parity

    def test_weights_validation(self):
        with pytest.raises(ValidationError):
            OracleWeights(thirds=-0.1).validate()


class TestRenderScene:
    def test_deterministic_and_shaped(self):
        scene = centered_scene("left")
        a = render_scene(scene, Size(64, 64))
        b = render_scene(scene, Size(64, 64))
        assert a.shape == (64, 64, 3) and a.dtype == np.float32
        assert np.array_equal(a, b)

    def test_face_block_marks_facing_side(self):
        size = Size(100, 100)
        left = render_scene(centered_scene("left", 100.0), size)
        right = render_scene(centered_scene("right", 100.0), size)
        # brightness concentrates on the facing side's half of the person box
        mid = 50
        assert left[:, :mid].sum() > left[:, mid:].sum()
        assert right[:, mid:].sum() > right[:, :mid].sum()

    def test_pixels_in_unit_range(self):
        spec = SynthSpec(seed=6, count=3)
        index = synth_generate(spec)
        for img in index.images:
            px = img.pixels()
            assert px.min() >= 0.0 and px.max() <= 1.0


class TestSynthGenerate:
    def test_determinism_byte_identical(self, tmp_path):
        spec = SynthSpec(seed=11, count=4)
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        save_annotations(synth_generate(spec), a)
        save_annotations(synth_generate(spec), b)
        assert a.read_bytes() == b.read_bytes()

    def test_different_seeds_differ(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        save_annotations(synth_generate(SynthSpec(seed=1, count=2)), a)
        save_annotations(synth_generate(SynthSpec(seed=2, count=2)), b)
        assert a.read_bytes() != b.read_bytes()

    def test_shape_and_flags(self):
        spec = SynthSpec(seed=0, count=5, crops_per_image=16)
        index = synth_generate(spec)
        assert len(index.images) == 5
        for img in index.images:
            assert len(img.crops) == 16
            assert img.human_box is not None
            assert img.is_human_centric
            for c in img.crops:
                assert 1.0 <= c.score <= 5.0
                c.box.validate_within(img.size)

    def test_image_ids_stable(self):
        index = synth_generate(SynthSpec(seed=9, count=3))
        assert [i.image_id for i in index.images] == [
            "synth-9-0000", "synth-9-0001", "synth-9-0002"]

    def test_scores_have_spread(self):
        index = synth_generate(SynthSpec(seed=0, count=8))
        for img in index.images:
            scores = np.array([c.score for c in img.crops])
            assert scores.std() > 0.05, img.image_id

    def test_round_trip_preserves_scene_pixels(self, tmp_path):
        spec = SynthSpec(seed=4, count=2)
        index = synth_generate(spec)
        path = tmp_path / "synth.json"
        save_annotations(index, path)
        loaded = load_annotations(path)
        for orig, back in zip(index.images, loaded.images):
            assert np.array_equal(orig.pixels(), back.pixels())

    def test_invalid_spec(self):
        with pytest.raises(ValidationError):
            SynthSpec(count=0).validate()
        with pytest.raises(ValidationError):
            SynthSpec(crops_per_image=1).validate()

    def test_with_split(self):
        index = synth_generate(SynthSpec(seed=0, count=1, split="train"))
        held = with_split(index, "test")
        assert held.split == "test"
        assert held.images == index.images


class TestPixels:
    def test_attach_pixels_wins(self):
        img = AnnotatedImage(image_id="x", size=Size(8, 8), human_box=None,
                             crops=[], is_human_centric=False)
        grid = np.full((8, 8, 3), 0.25, dtype=np.float32)
        img.attach_pixels(grid)
        assert np.array_equal(img.pixels(), grid)

    def test_no_source_raises(self):
        img = AnnotatedImage(image_id="x", size=Size(8, 8), human_box=None,
                             crops=[], is_human_centric=False)
        with pytest.raises(ValidationError):
            img.pixels()
