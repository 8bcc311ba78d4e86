"""End-to-end generation: semantic map -> person insertion -> image, plus dataset export.

Every sample is a pure function of the master seed and its index. The
per-stage seeds are ``derive_seed(seed, index, stage[, instance])`` (SHA-256
of the colon-joined labels), so any sample can be regenerated on its own.

Export layout::

    images/<id>.png      8-bit RGB
    maps/<id>.png        8-bit class ids
    annotations.csv      image_id,class_id,x,y,w,h
    manifest.json        format "ganseq-manifest-1"
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import instafill, pixsynth, semgan, semmap
from .common import derive_seed, file_digest, latent
from .errors import ConfigError, GanseqError, RunError

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "ganseq-manifest-1"


@dataclass
class PipelineConfig:
    semgan_checkpoint: str = "checkpoints/semgan.pt"
    instafill_checkpoint: str = "checkpoints/instafill.pt"
    pixsynth_checkpoint: str = "checkpoints/pixsynth.pt"
    instances_per_map: int = 1
    seed: int = 0
    full_size: tuple[int, int] = (1024, 512)
    translation_size: tuple[int, int] = (512, 256)
    # fraction of failed samples above which the whole run fails
    max_failure_fraction: float = 0.5

    def __post_init__(self):
        self.full_size = tuple(int(v) for v in self.full_size)
        self.translation_size = tuple(int(v) for v in self.translation_size)
        if self.instances_per_map < 0:
            raise ConfigError("instances_per_map must be >= 0")
        if not 0 <= self.max_failure_fraction <= 1:
            raise ConfigError("max_failure_fraction must lie in [0, 1]")


@dataclass
class Stages:
    semgan: semgan.Checkpoint
    instafill: instafill.Checkpoint
    pixsynth: pixsynth.Checkpoint
    digests: dict[str, str]


def load_stages(cfg: PipelineConfig) -> Stages:
    paths = {
        "semgan": cfg.semgan_checkpoint,
        "instafill": cfg.instafill_checkpoint,
        "pixsynth": cfg.pixsynth_checkpoint,
    }
    stages = Stages(
        semgan=semgan.Checkpoint.load(paths["semgan"]),
        instafill=instafill.Checkpoint.load(paths["instafill"]),
        pixsynth=pixsynth.Checkpoint.load(paths["pixsynth"]),
        digests={k: file_digest(p) for k, p in paths.items()},
    )
    check_consistency(cfg, stages)
    return stages


def check_consistency(cfg: PipelineConfig, stages: Stages) -> None:
    ks = {stages.semgan.config.k, stages.instafill.config.k, stages.pixsynth.config.k}
    if len(ks) != 1:
        raise ConfigError(f"stage checkpoints disagree on the number of classes: {sorted(ks)}")
    if stages.instafill.config.full_size != cfg.full_size:
        raise ConfigError(
            f"insertion checkpoint works at {stages.instafill.config.full_size}, pipeline expects {cfg.full_size}"
        )
    if stages.pixsynth.config.operating_size != cfg.translation_size:
        raise ConfigError(
            f"translation checkpoint works at {stages.pixsynth.config.operating_size}, "
            f"pipeline expects {cfg.translation_size}"
        )
    fw, fh = cfg.full_size
    tw, th = cfg.translation_size
    if tw > fw or th > fh:
        raise ConfigError("translation size must not exceed the insertion size")


def scale_box(box: semmap.BoundingBox, src_size, dst_size) -> semmap.BoundingBox:
    """Map a box between resolutions: floor on the origin, ceil on the far edge."""
    (sw, sh), (dw, dh) = src_size, dst_size
    x0 = (box.x * dw) // sw
    y0 = (box.y * dh) // sh
    x1 = -((-box.x2 * dw) // sw)
    y1 = -((-box.y2 * dh) // sh)
    return semmap.BoundingBox(x0, y0, max(1, x1 - x0), max(1, y1 - y0))


@dataclass
class SampleResult:
    sample_id: str
    status: str
    seeds: dict
    error: str | None = None
    failed_insertions: int = 0
    step1: np.ndarray | None = None
    full_before: np.ndarray | None = None
    full_after: np.ndarray | None = None
    full_boxes: list = field(default_factory=list)
    inserted_masks: list = field(default_factory=list)  # boolean full-resolution footprints
    labels: np.ndarray | None = None
    boxes: list = field(default_factory=list)  # (class_id, BoundingBox) at translation size
    image: np.ndarray | None = None


def sample_id(index: int) -> str:
    return f"sample_{index:04d}"


def generate_sample(stages: Stages, cfg: PipelineConfig, index: int) -> SampleResult:
    sid = sample_id(index)
    seeds = {
        "semgan": derive_seed(cfg.seed, index, "semgan"),
        "insert": [derive_seed(cfg.seed, index, "insert", j) for j in range(cfg.instances_per_map)],
        "translate": derive_seed(cfg.seed, index, "translate"),
    }
    res = SampleResult(sample_id=sid, status="ok", seeds=seeds)
    person = stages.instafill.config.person_class_id
    try:
        z = latent(stages.semgan.config.latent_dim, seeds["semgan"])
        res.step1 = semgan.sample(stages.semgan, z)
        full = semmap.resize_nearest(res.step1, *cfg.full_size)
        res.full_before = full
        for j, s in enumerate(seeds["insert"]):
            try:
                ins = instafill.insert_person(stages.instafill, full, s)
            except GanseqError as exc:
                log.warning("%s: insertion %d failed after retries: %s", sid, j, exc)
                res.failed_insertions += 1
                continue
            res.inserted_masks.append(ins.footprint)
            full = ins.labels
            res.full_boxes.append(ins.box)
        res.full_after = full
        res.labels = semmap.resize_nearest(full, *cfg.translation_size)
        res.boxes = [(person, scale_box(b, cfg.full_size, cfg.translation_size)) for b in res.full_boxes]
        zt = latent(stages.pixsynth.config.latent_dim, seeds["translate"]) if stages.pixsynth.config.latent_dim else None
        res.image = pixsynth.translate(stages.pixsynth, res.labels, zt)
    except GanseqError as exc:
        log.warning("%s failed: %s", sid, exc)
        res.status, res.error = "failed", f"{type(exc).__name__}: {exc}"
    return res


@dataclass
class DatasetManifest:
    config_hash: str
    seed: int
    instances_per_map: int
    sizes: dict
    samples: list[SampleResult]

    def entry(self, s: SampleResult) -> dict:
        ok = s.status == "ok"
        return {
            "sample_id": s.sample_id,
            "status": s.status,
            "image_path": f"images/{s.sample_id}.png" if ok else None,
            "map_path": f"maps/{s.sample_id}.png" if ok else None,
            "boxes": [{"class_id": c, "x": b.x, "y": b.y, "w": b.w, "h": b.h} for c, b in s.boxes] if ok else [],
            "seeds": s.seeds,
            "failed_insertions": s.failed_insertions,
            "error": s.error,
        }

    def to_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "instances_per_map": self.instances_per_map,
            "sizes": self.sizes,
            "entries": [self.entry(s) for s in self.samples],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @property
    def failed(self) -> int:
        return sum(s.status != "ok" for s in self.samples)


def config_hash(cfg: PipelineConfig, stages: Stages) -> str:
    payload = {
        "checkpoints": stages.digests,
        "instances_per_map": cfg.instances_per_map,
        "seed": cfg.seed,
        "step1_resolution": stages.semgan.config.resolution,
        "full_size": list(cfg.full_size),
        "translation_size": list(cfg.translation_size),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def run_generation(cfg: PipelineConfig, n: int, jobs: int = 1, stages: Stages | None = None) -> DatasetManifest:
    if n < 0:
        raise ConfigError("n must be >= 0")
    stages = stages or load_stages(cfg)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            samples = list(pool.map(lambda i: generate_sample(stages, cfg, i), range(n)))
    else:
        samples = [generate_sample(stages, cfg, i) for i in range(n)]
    manifest = DatasetManifest(
        config_hash=config_hash(cfg, stages),
        seed=cfg.seed,
        instances_per_map=cfg.instances_per_map,
        sizes={
            "step1": [stages.semgan.config.resolution] * 2,
            "full": list(cfg.full_size),
            "translation": list(cfg.translation_size),
        },
        samples=samples,
    )
    if n and manifest.failed / n > cfg.max_failure_fraction:
        raise RunError(f"{manifest.failed} of {n} samples failed")
    return manifest


def export_dataset(manifest: DatasetManifest, out_dir) -> dict:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    records = []
    written = 0
    for s in manifest.samples:
        if s.status != "ok":
            continue
        pixsynth.save_image(s.image, out / "images" / f"{s.sample_id}.png")
        semmap.save_map(s.labels, out / "maps" / f"{s.sample_id}.png")
        records.extend((s.sample_id, c, b) for c, b in s.boxes)
        written += 1
    semmap.write_box_records(out / "annotations.csv", records)
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    summary = {"samples": len(manifest.samples), "exported": written, "failed": manifest.failed, "boxes": len(records)}
    log.info("exported %s to %s", summary, out)
    return summary


def load_manifest(path) -> dict:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("format") != MANIFEST_FORMAT:
        raise ConfigError(f"{path}: not a {MANIFEST_FORMAT} manifest")
    return data

