import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ganseq import instafill, pipeline, semmap
from ganseq.errors import ConfigError, DegenerateShapeError, MalformedTensorError, RunError
from ganseq.semmap import BoundingBox

from .oracles import scan_bbox


@pytest.fixture(scope="module")
def cfg(toy_run):
    ck = toy_run / "checkpoints"
    return pipeline.PipelineConfig(
        semgan_checkpoint=str(ck / "semgan.pt"),
        instafill_checkpoint=str(ck / "instafill.pt"),
        pixsynth_checkpoint=str(ck / "pixsynth.pt"),
        seed=42,
    )


@pytest.fixture(scope="module")
def stages(cfg):
    return pipeline.load_stages(cfg)


@pytest.fixture(scope="module")
def manifest(cfg, stages):
    return pipeline.run_generation(cfg, 3, stages=stages)


def test_scale_box_examples():
    assert pipeline.scale_box(BoundingBox(0, 0, 4, 4), (1024, 512), (512, 256)) == BoundingBox(0, 0, 2, 2)
    # odd origin floors, odd far edge ceils
    assert pipeline.scale_box(BoundingBox(3, 5, 3, 1), (1024, 512), (512, 256)) == BoundingBox(1, 2, 2, 1)


@given(st.integers(0, 1000), st.integers(0, 500), st.integers(1, 24), st.integers(1, 12))
def test_scale_box_covers_resized_pixels(x, y, w, h):
    w, h = min(w, 1024 - x), min(h, 512 - y)
    grid = np.zeros((512, 1024), dtype=np.uint8)
    grid[y : y + h, x : x + w] = 1
    small = semmap.resize_nearest(grid, 512, 256)
    got = pipeline.scale_box(BoundingBox(x, y, w, h), (1024, 512), (512, 256))
    seen = scan_bbox(small)
    if seen is not None:
        sx, sy, sw, sh = seen
        assert got.x <= sx and got.y <= sy and got.x2 >= sx + sw and got.y2 >= sy + sh
    assert got.x2 <= 512 and got.y2 <= 256


def test_sample_ids():
    assert pipeline.sample_id(7) == "sample_0007"


def test_manifest_samples(manifest, cfg):
    assert [s.sample_id for s in manifest.samples] == ["sample_0000", "sample_0001", "sample_0002"]
    for s in manifest.samples:
        assert s.status == "ok"
        assert s.step1.shape == (64, 64)
        assert s.full_before.shape == (512, 1024)
        assert s.labels.shape == (256, 512)
        assert s.image.shape == (256, 512, 3)
        assert len(s.boxes) + s.failed_insertions == cfg.instances_per_map


def test_boxes_follow_footprints(manifest, cfg):
    for s in manifest.samples:
        for (cls, box), full_box, fp in zip(s.boxes, s.full_boxes, s.inserted_masks):
            assert cls == 7
            assert full_box.as_tuple() == scan_bbox(fp)
            assert box == pipeline.scale_box(BoundingBox(*scan_bbox(fp)), cfg.full_size, cfg.translation_size)
            assert np.all(s.full_after[fp] == 7)


def test_sample_regenerates_independently(manifest, stages, cfg):
    again = pipeline.generate_sample(stages, cfg, 2)
    ref = manifest.samples[2]
    np.testing.assert_array_equal(again.labels, ref.labels)
    np.testing.assert_array_equal(again.image, ref.image)
    assert again.seeds == ref.seeds


def test_parallel_jobs_match_serial(manifest, stages, cfg):
    par = pipeline.run_generation(cfg, 3, jobs=2, stages=stages)
    assert par.to_json() == manifest.to_json()


def test_failed_insertion_keeps_sample(stages, cfg, monkeypatch):
    def fail(*a, **k):
        raise DegenerateShapeError("forced")

    monkeypatch.setattr(instafill, "insert_person", fail)
    s = pipeline.generate_sample(stages, cfg, 0)
    assert s.status == "ok" and s.failed_insertions == 1 and s.boxes == []


def test_stage_error_fails_run(stages, cfg, monkeypatch):
    def broken(*a, **k):
        raise MalformedTensorError("forced")

    monkeypatch.setattr(pipeline.semgan, "sample", broken)
    s = pipeline.generate_sample(stages, cfg, 0)
    assert s.status == "failed" and "MalformedTensorError" in s.error
    with pytest.raises(RunError):
        pipeline.run_generation(cfg, 2, stages=stages)


def test_consistency_checks(cfg, stages):
    bad = pipeline.PipelineConfig(**{**cfg.__dict__, "translation_size": (256, 128)})
    with pytest.raises(ConfigError):
        pipeline.check_consistency(bad, stages)


def test_config_validation():
    with pytest.raises(ConfigError):
        pipeline.PipelineConfig(instances_per_map=-1)


def test_export_layout(manifest, tmp_path):
    summary = pipeline.export_dataset(manifest, tmp_path)
    assert summary["exported"] == 3
    for s in manifest.samples:
        assert (tmp_path / "images" / f"{s.sample_id}.png").is_file()
        np.testing.assert_array_equal(semmap.load_map(tmp_path / "maps" / f"{s.sample_id}.png"), s.labels)
    lines = (tmp_path / "annotations.csv").read_text().splitlines()
    assert lines[0] == semmap.BOX_HEADER
    assert len(lines) - 1 == summary["boxes"]
    data = pipeline.load_manifest(tmp_path / "manifest.json")
    assert data["format"] == pipeline.MANIFEST_FORMAT
    assert data["entries"][0]["image_path"] == "images/sample_0000.png"
    assert len(data["config_hash"]) == 64


def test_load_manifest_rejects_other_json(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(ConfigError):
        pipeline.load_manifest(tmp_path / "m.json")
