"""Semantic maps: label palettes, one-hot encoding, label-safe raster ops and toy scenes.

A semantic map is a 2-D integer array of shape ``(h, w)`` holding class ids.
Its one-hot encoding is a float array of shape ``(h, w, k)``. Coordinates are
``(x, y)`` with ``x`` along the width axis; arrays are indexed ``[y, x]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import (
    EmptyMaskError,
    InvalidLabelError,
    MalformedTensorError,
    OutOfBoundsError,
    ParseError,
    SceneTooSmallError,
)

MIN_SCENE_SIZE = 8


@dataclass(frozen=True)
class PaletteEntry:
    class_id: int
    name: str
    color: tuple[int, int, int]
    is_person: bool = False


@dataclass(frozen=True)
class LabelPalette:
    entries: tuple[PaletteEntry, ...]

    def __post_init__(self):
        ids = [e.class_id for e in self.entries]
        if sorted(ids) != list(range(len(ids))):
            raise InvalidLabelError(f"palette class ids must be exactly 0..k-1, got {ids}")
        colors = [tuple(e.color) for e in self.entries]
        if len(set(colors)) != len(colors):
            raise InvalidLabelError("palette colors must be unique")
        if sum(e.is_person for e in self.entries) > 1:
            raise InvalidLabelError("at most one palette entry may be flagged is_person")
        object.__setattr__(self, "entries", tuple(sorted(self.entries, key=lambda e: e.class_id)))

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    @property
    def person_id(self) -> int | None:
        for e in self.entries:
            if e.is_person:
                return e.class_id
        return None

    def id_of(self, name: str) -> int:
        for e in self.entries:
            if e.name == name:
                return e.class_id
        raise KeyError(name)

    def colors(self) -> np.ndarray:
        return np.array([e.color for e in self.entries], dtype=np.uint8)

    def to_json(self) -> str:
        return json.dumps(
            [
                {"id": e.class_id, "name": e.name, "color": list(e.color), "is_person": e.is_person}
                for e in self.entries
            ],
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "LabelPalette":
        raw = json.loads(text)
        return cls(
            tuple(
                PaletteEntry(int(r["id"]), str(r["name"]), tuple(int(c) for c in r["color"]), bool(r.get("is_person", False)))
                for r in raw
            )
        )


def save_palette(palette: LabelPalette, path) -> None:
    Path(path).write_text(palette.to_json() + "\n", encoding="utf-8")


def load_palette(path) -> LabelPalette:
    return LabelPalette.from_json(Path(path).read_text(encoding="utf-8"))


def _palette(rows) -> LabelPalette:
    return LabelPalette(tuple(PaletteEntry(i, n, c, n == "person") for i, (n, c) in enumerate(rows)))


# Small palette used for CPU-scale experiments.
TOY_PALETTE = _palette(
    [
        ("void", (0, 0, 0)),
        ("sky", (70, 130, 180)),
        ("building", (70, 70, 70)),
        ("road", (128, 64, 128)),
        ("sidewalk", (244, 35, 232)),
        ("vegetation", (107, 142, 35)),
        ("car", (0, 0, 142)),
        ("person", (220, 20, 60)),
    ]
)

# The 34 Cityscapes label ids. Colors follow the Cityscapes convention; the
# void classes, which share black there, get distinct greys here.
CITYSCAPES_PALETTE = _palette(
    [
        ("unlabeled", (0, 0, 0)),
        ("ego vehicle", (16, 16, 16)),
        ("rectification border", (32, 32, 32)),
        ("out of roi", (48, 48, 48)),
        ("static", (64, 64, 64)),
        ("dynamic", (111, 74, 0)),
        ("ground", (81, 0, 81)),
        ("road", (128, 64, 128)),
        ("sidewalk", (244, 35, 232)),
        ("parking", (250, 170, 160)),
        ("rail track", (230, 150, 140)),
        ("building", (70, 70, 70)),
        ("wall", (102, 102, 156)),
        ("fence", (190, 153, 153)),
        ("guard rail", (180, 165, 180)),
        ("bridge", (150, 100, 100)),
        ("tunnel", (150, 120, 90)),
        ("pole", (153, 153, 153)),
        ("polegroup", (153, 153, 163)),
        ("traffic light", (250, 170, 30)),
        ("traffic sign", (220, 220, 0)),
        ("vegetation", (107, 142, 35)),
        ("terrain", (152, 251, 152)),
        ("sky", (70, 130, 180)),
        ("person", (220, 20, 60)),
        ("rider", (255, 0, 0)),
        ("car", (0, 0, 142)),
        ("truck", (0, 0, 70)),
        ("bus", (0, 60, 100)),
        ("caravan", (0, 0, 90)),
        ("trailer", (0, 0, 110)),
        ("train", (0, 80, 100)),
        ("motorcycle", (0, 0, 230)),
        ("bicycle", (119, 11, 32)),
    ]
)

PALETTES = {"toy": TOY_PALETTE, "cityscapes": CITYSCAPES_PALETTE}


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"box extent must be at least 1x1, got {self.w}x{self.h}")

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    def area(self) -> int:
        return self.w * self.h

    def inside(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x2 <= width and self.y2 <= height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


@dataclass
class InstanceMask:
    """Binary silhouette placed with its top-left corner at ``anchor`` after scaling."""

    mask: np.ndarray
    anchor: tuple[int, int] = (0, 0)
    scale: float = 1.0

    def __post_init__(self):
        self.mask = np.asarray(self.mask)
        if self.mask.ndim != 2 or self.mask.size == 0:
            raise MalformedTensorError(f"mask must be a non-empty 2-D grid, got shape {self.mask.shape}")
        if not np.isin(self.mask, (0, 1)).all():
            raise MalformedTensorError("mask values must be 0 or 1")
        self.mask = self.mask.astype(np.uint8)
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def scaled_shape(self) -> tuple[int, int]:
        """(height, width) of the footprint; rounding is half-up, minimum 1."""
        mh, mw = self.mask.shape
        return (max(1, math.floor(mh * self.scale + 0.5)), max(1, math.floor(mw * self.scale + 0.5)))

    def scaled_mask(self) -> np.ndarray:
        sh, sw = self.scaled_shape()
        return resize_nearest(self.mask, sw, sh)


def _check_map(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[0] < 1 or labels.shape[1] < 1:
        raise MalformedTensorError(f"semantic map must be a non-empty 2-D grid, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InvalidLabelError(f"semantic map must hold integer class ids, got dtype {labels.dtype}")
    return labels


def validate_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = _check_map(labels)
    bad = (labels < 0) | (labels >= num_classes)
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise InvalidLabelError(
            f"pixel (x={x}, y={y}) has label {labels[y, x]} outside 0..{num_classes - 1}"
        )
    return labels


def encode_one_hot(labels: np.ndarray, palette: LabelPalette | int) -> np.ndarray:
    k = palette if isinstance(palette, int) else palette.num_classes
    labels = validate_labels(labels, k)
    return np.eye(k, dtype=np.float32)[labels]


def decode_argmax(tensor: np.ndarray) -> np.ndarray:
    t = np.asarray(tensor)
    if t.ndim != 3 or t.shape[-1] == 0:
        raise MalformedTensorError(f"expected an (h, w, k) tensor with k >= 1, got shape {t.shape}")
    if not np.isfinite(t).all():
        raise MalformedTensorError("tensor contains non-finite values")
    # np.argmax returns the first maximum, so ties go to the lowest class index.
    return np.argmax(t, axis=-1).astype(np.uint8 if t.shape[-1] <= 256 else np.int32)


def nearest_indices(src_size: int, dst_size: int) -> np.ndarray:
    """Source index for every destination index: floor(dst * src / dst_size)."""
    return (np.arange(dst_size, dtype=np.int64) * src_size) // dst_size


def resize_nearest(labels: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    labels = _check_map(labels)
    if new_w < 1 or new_h < 1:
        raise ValueError(f"target size must be at least 1x1, got {new_w}x{new_h}")
    h, w = labels.shape
    return labels[np.ix_(nearest_indices(h, new_h), nearest_indices(w, new_w))]


def composite_instance(labels: np.ndarray, inst: InstanceMask, class_id: int, num_classes: int | None = None) -> np.ndarray:
    labels = _check_map(labels)
    if class_id < 0 or (num_classes is not None and class_id >= num_classes) or class_id > np.iinfo(labels.dtype).max:
        raise InvalidLabelError(f"class id {class_id} is not valid for this map")
    sh, sw = inst.scaled_shape()
    ax, ay = inst.anchor
    h, w = labels.shape
    if ax < 0 or ay < 0 or ax + sw > w or ay + sh > h:
        raise OutOfBoundsError(
            f"footprint {sw}x{sh} at ({ax}, {ay}) exceeds map extent {w}x{h}"
        )
    out = labels.copy()
    window = out[ay : ay + sh, ax : ax + sw]
    window[inst.scaled_mask().astype(bool)] = class_id
    return out


def mask_to_bbox(inst: InstanceMask) -> BoundingBox:
    scaled = inst.scaled_mask()
    ys = np.flatnonzero(scaled.any(axis=1))
    xs = np.flatnonzero(scaled.any(axis=0))
    if ys.size == 0:
        raise EmptyMaskError("mask has no set pixels")
    ax, ay = inst.anchor
    return BoundingBox(int(ax + xs[0]), int(ay + ys[0]), int(xs[-1] - xs[0] + 1), int(ys[-1] - ys[0] + 1))


def bbox_of_labels(labels: np.ndarray) -> BoundingBox:
    """Tight box around the non-zero pixels of a boolean or integer grid."""
    ys, xs = np.nonzero(np.asarray(labels))
    if ys.size == 0:
        raise EmptyMaskError("grid has no set pixels")
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))


# ---------------------------------------------------------------------------
# toy scenes

DEFAULT_ROLES = ("sky", "building", "road", "person", "sidewalk", "vegetation", "car")


@dataclass
class ToyScene:
    labels: np.ndarray
    background: np.ndarray  # the same scene without any person
    persons: list[BoundingBox] = field(default_factory=list)
    road_top: int = 0


def resolve_roles(palette: LabelPalette, roles: dict[str, int] | None = None) -> dict[str, int]:
    out = {}
    for role in DEFAULT_ROLES:
        if roles and role in roles:
            out[role] = int(roles[role])
            continue
        try:
            out[role] = palette.id_of(role)
        except KeyError:
            pass
    if roles:
        for role, cid in roles.items():
            out.setdefault(role, int(cid))
    missing = [r for r in ("sky", "building", "road", "person") if r not in out]
    if missing:
        raise InvalidLabelError(f"palette lacks ids for scene roles {missing}; pass an explicit role mapping")
    for role, cid in out.items():
        if not 0 <= cid < palette.num_classes:
            raise InvalidLabelError(f"role {role!r} maps to id {cid} outside the palette")
    return out


def toy_scene(
    seed: int,
    w: int,
    h: int,
    palette: LabelPalette,
    roles: dict[str, int] | None = None,
    max_persons: int = 3,
    min_persons: int = 0,
) -> ToyScene:
    """Build a layered street scene: sky, building blocks, sidewalk, road, cars and persons."""
    if w < MIN_SCENE_SIZE or h < MIN_SCENE_SIZE:
        raise SceneTooSmallError(f"toy scenes need at least {MIN_SCENE_SIZE}x{MIN_SCENE_SIZE} pixels, got {w}x{h}")
    ids = resolve_roles(palette, roles)
    rng = np.random.default_rng(seed)
    dtype = np.uint8 if palette.num_classes <= 256 else np.int32
    labels = np.full((h, w), ids["sky"], dtype=dtype)

    horizon = int(h * rng.uniform(0.35, 0.5))
    road_top = max(horizon + 1, int(h * rng.uniform(0.55, 0.65)))
    road_top = min(road_top, h - 2)

    # building skyline standing on the horizon
    x = 0
    while x < w:
        bw = max(1, int(w * rng.uniform(0.08, 0.25)))
        top = int(horizon * rng.uniform(0.05, 0.7))
        labels[top:horizon, x : x + bw] = ids["building"]
        x += bw + int(w * rng.uniform(0.0, 0.05))
    labels[horizon:road_top, :] = ids.get("sidewalk", ids["building"])
    if "vegetation" in ids and rng.random() < 0.7:
        vw = max(1, int(w * rng.uniform(0.05, 0.2)))
        vx = int(rng.integers(0, max(1, w - vw)))
        vtop = int(horizon * rng.uniform(0.4, 0.9))
        labels[vtop:horizon, vx : vx + vw] = ids["vegetation"]
    labels[road_top:, :] = ids["road"]

    road_h = h - road_top
    if "car" in ids:
        for _ in range(int(rng.integers(0, 3))):
            ch = max(1, int(road_h * rng.uniform(0.2, 0.4)))
            cw = max(1, int(ch * rng.uniform(1.5, 2.5)))
            if cw >= w or ch >= road_h:
                continue
            cx = int(rng.integers(0, w - cw))
            cy = int(rng.integers(road_top, h - ch + 1))
            labels[cy : cy + ch, cx : cx + cw] = ids["car"]

    background = labels.copy()
    persons = []
    n_persons = int(rng.integers(min_persons, max_persons + 1)) if max_persons >= min_persons else 0
    for _ in range(n_persons):
        # farther down the road means closer to the camera, hence taller
        feet = int(rng.integers(road_top + 1, h + 1))
        ph = max(2, int((feet - road_top) * rng.uniform(0.6, 0.9)))
        ph = min(ph, feet - road_top)
        pw = max(1, int(ph * rng.uniform(0.3, 0.45)))
        if ph < 1 or pw >= w:
            continue
        px = int(rng.integers(0, w - pw + 1))
        labels[feet - ph : feet, px : px + pw] = ids["person"]
        persons.append(BoundingBox(px, feet - ph, pw, ph))
    return ToyScene(labels=labels, background=background, persons=persons, road_top=road_top)


def generate_toy_scene(seed: int, w: int, h: int, palette: LabelPalette, roles: dict[str, int] | None = None) -> np.ndarray:
    return toy_scene(seed, w, h, palette, roles).labels


def colorize(labels: np.ndarray, palette: LabelPalette) -> np.ndarray:
    labels = validate_labels(labels, palette.num_classes)
    return palette.colors()[labels]


# ---------------------------------------------------------------------------
# file formats


def save_map(labels: np.ndarray, path) -> None:
    labels = _check_map(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise InvalidLabelError("only class ids 0..255 fit in an 8-bit map PNG")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path, format="PNG")


def load_map(path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("L", "P"):
            raise MalformedTensorError(f"{path}: expected a single-channel PNG, got mode {img.mode}")
        return np.array(img, dtype=np.uint8)


BOX_HEADER = "image_id,class_id,x,y,w,h"


def format_box_record(image_id: str, class_id: int, box: BoundingBox) -> str:
    return f"{image_id},{class_id},{box.x},{box.y},{box.w},{box.h}"


def parse_box_fields(fields: Sequence[str], line_number: int | None = None) -> tuple[str, int, BoundingBox]:
    if len(fields) < 6:
        raise ParseError(f"expected at least 6 comma-separated fields, got {len(fields)}", line_number)
    try:
        image_id = fields[0].strip()
        class_id = int(fields[1])
        x, y, w, h = (int(v) for v in fields[2:6])
        box = BoundingBox(x, y, w, h)
    except ValueError as exc:
        raise ParseError(str(exc), line_number) from None
    if not image_id:
        raise ParseError("empty image_id", line_number)
    return image_id, class_id, box


def parse_box_record(line: str, line_number: int | None = None) -> tuple[str, int, BoundingBox]:
    fields = line.strip().split(",")
    if len(fields) != 6:
        raise ParseError(f"expected 6 fields ({BOX_HEADER}), got {len(fields)}", line_number)
    return parse_box_fields(fields, line_number)


def write_box_records(path, records: Iterable[tuple[str, int, BoundingBox]]) -> None:
    lines = [BOX_HEADER] + [format_box_record(i, c, b) for i, c, b in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
