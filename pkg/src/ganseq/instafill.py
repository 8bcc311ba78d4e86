"""Step 2: person insertion with a "where" and a "what" conditional GAN.

The where generator sees the map downsampled by 4 (plus coordinate channels)
and a latent vector, and proposes a placement: a normalized center and a
log-scale, squashed into their valid ranges so every proposal is valid
whatever the weights. The what generator sees the 128x128 full-resolution
neighborhood of that center and emits a silhouette, binarized at a threshold.
The placed footprint is the silhouette scaled to ``exp(log_scale) * 128``
pixels and centered on the proposal.

Both discriminators are trained with binary cross-entropy, batch size 1.
Each generator additionally has a supervised path: with the zero latent it
must reproduce the real placement (L1) or the real silhouette (binary
cross-entropy), weighted by ``recon_weight``. Without it the where generator
collapses onto a map corner within a few dozen steps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import semmap
from .common import MetricsLog, TrainConfig, check_finite, load_archive, save_archive, torch_generator
from .errors import (
    ConfigError,
    ContractError,
    DatasetEmptyError,
    DegenerateShapeError,
    PlacementError,
)
from .semgan import BCE_EPS, discriminator_bce_loss

log = logging.getLogger(__name__)

MAGIC = "INSTA1"
METRICS_COLUMNS = ("step", "epoch", "where_d", "where_g", "what_d", "what_g")
MASK_SIZE = (128, 128)


@dataclass
class InsertionConfig:
    full_size: tuple[int, int] = (1024, 512)
    where_size: tuple[int, int] = (256, 128)
    mask_size: tuple[int, int] = MASK_SIZE
    k: int = 8
    person_class_id: int = 7
    scale_min: float = 0.1
    scale_max: float = 1.5
    min_area: int = 32
    threshold: float = 0.5
    latent_dim: int = 32
    base_channels: int = 8
    retry_budget: int = 8
    # weight of the supervised path: the zero latent reconstructs the real placement / silhouette
    recon_weight: float = 10.0

    def __post_init__(self):
        self.full_size = tuple(int(v) for v in self.full_size)
        self.where_size = tuple(int(v) for v in self.where_size)
        self.mask_size = tuple(int(v) for v in self.mask_size)
        fw, fh = self.full_size
        if self.where_size != (fw // 4, fh // 4) or fw % 4 or fh % 4:
            raise ConfigError(f"where_size must be full_size / 4, got {self.where_size} for {self.full_size}")
        if fw % 128 or fh % 128:
            raise ConfigError(f"full_size dimensions must be multiples of 128, got {self.full_size}")
        if self.mask_size != MASK_SIZE:
            raise ConfigError(f"mask_size is fixed at {MASK_SIZE}, got {self.mask_size}")
        if not 0 <= self.person_class_id < self.k:
            raise ConfigError(f"person_class_id {self.person_class_id} outside 0..{self.k - 1}")
        if not 0 < self.scale_min < self.scale_max:
            raise ConfigError("need 0 < scale_min < scale_max")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.min_area < 1 or self.retry_budget < 1:
            raise ConfigError("min_area and retry_budget must be >= 1")
        if self.recon_weight < 0:
            raise ConfigError("recon_weight must be >= 0")

    @property
    def log_scale_bounds(self) -> tuple[float, float]:
        return math.log(self.scale_min), math.log(self.scale_max)


@dataclass(frozen=True)
class WhereProposal:
    cx: float
    cy: float
    log_scale: float

    @property
    def scale(self) -> float:
        return math.exp(self.log_scale)


@dataclass
class WhatMask:
    mask: np.ndarray  # (128, 128) uint8 in {0, 1}
    raw: np.ndarray | None = field(default=None, repr=False)


def _coords(b: int, h: int, w: int) -> torch.Tensor:
    ys = torch.linspace(-1, 1, h).view(1, 1, h, 1).expand(b, 1, h, w)
    xs = torch.linspace(-1, 1, w).view(1, 1, 1, w).expand(b, 1, h, w)
    return torch.cat([xs, ys], dim=1)


def _down(c_in, c_out):
    return nn.Sequential(nn.Conv2d(c_in, c_out, 4, stride=2, padding=1), nn.LeakyReLU(0.2))


class _PlacementEncoder(nn.Module):
    """Five stride-2 convolutions then one convolution spanning the whole remaining grid."""

    def __init__(self, c_in: int, base: int, where_size: tuple[int, int]):
        super().__init__()
        w, h = where_size
        widths = [base, base * 2, base * 4, base * 4, base * 4]
        layers, c = [], c_in
        for c_out in widths:
            layers.append(_down(c, c_out))
            c = c_out
        self.body = nn.Sequential(*layers)
        self.spread = nn.Sequential(nn.Conv2d(c, c * 2, (h // 32, w // 32)), nn.LeakyReLU(0.2))
        self.out_channels = c * 2

    def forward(self, x):
        return self.spread(self.body(x))


class WhereGenerator(nn.Module):
    def __init__(self, cfg: InsertionConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = _PlacementEncoder(cfg.k + 2, cfg.base_channels, cfg.where_size)
        c = self.encoder.out_channels
        self.head = nn.Sequential(
            nn.Conv2d(c + cfg.latent_dim, c, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c, 3, 1),
        )

    def forward(self, onehot: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """Return (B, 3) rows of (cx, cy, log_scale), already inside their valid ranges."""
        b, _, h, w = onehot.shape
        feat = self.encoder(torch.cat([onehot, _coords(b, h, w)], dim=1))
        raw = self.head(torch.cat([feat, z.view(b, -1, 1, 1)], dim=1)).view(b, 3)
        lo, hi = self.cfg.log_scale_bounds
        centre = torch.sigmoid(raw[:, :2])
        log_scale = lo + (hi - lo) * torch.sigmoid(raw[:, 2:])
        return torch.cat([centre, log_scale], dim=1)


def render_placement(params: torch.Tensor, height: int, width: int, full_size: tuple[int, int]) -> torch.Tensor:
    """Differentiable soft square marking each placement footprint, shape (B, 1, height, width)."""
    fw, _ = full_size
    px_scale = width / fw
    half = 0.5 * MASK_SIZE[0] * torch.exp(params[:, 2]) * px_scale
    cx = params[:, 0] * width
    cy = params[:, 1] * height
    xs = torch.arange(width, dtype=params.dtype) + 0.5
    ys = torch.arange(height, dtype=params.dtype) + 0.5
    bx = torch.sigmoid(xs[None] - (cx - half)[:, None]) * torch.sigmoid((cx + half)[:, None] - xs[None])
    by = torch.sigmoid(ys[None] - (cy - half)[:, None]) * torch.sigmoid((cy + half)[:, None] - ys[None])
    return (by[:, :, None] * bx[:, None, :]).unsqueeze(1)


class WhereDiscriminator(nn.Module):
    def __init__(self, cfg: InsertionConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = _PlacementEncoder(cfg.k + 3, cfg.base_channels, cfg.where_size)
        self.score = nn.Conv2d(self.encoder.out_channels, 1, 1)

    def forward(self, onehot, params):
        b, _, h, w = onehot.shape
        heat = render_placement(params, h, w, self.cfg.full_size)
        x = torch.cat([onehot, heat, _coords(b, h, w)], dim=1)
        return torch.sigmoid(self.score(self.encoder(x)).view(b))


class WhatGenerator(nn.Module):
    """Small U-Net from the one-hot context crop to silhouette probabilities."""

    def __init__(self, cfg: InsertionConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_channels
        self.d1 = _down(cfg.k, b)  # 64
        self.d2 = _down(b, b * 2)  # 32
        self.d3 = _down(b * 2, b * 4)  # 16
        self.d4 = _down(b * 4, b * 4)  # 8
        self.u4 = self._up(b * 4 + cfg.latent_dim, b * 4)
        self.u3 = self._up(b * 8, b * 2)
        self.u2 = self._up(b * 4, b)
        self.u1 = self._up(b * 2, b)
        self.out = nn.Conv2d(b, 1, 3, padding=1)

    @staticmethod
    def _up(c_in, c_out):
        return nn.Sequential(nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1), nn.InstanceNorm2d(c_out, affine=True), nn.ReLU())

    def logits(self, context, z):
        e1 = self.d1(context)
        e2 = self.d2(e1)
        e3 = self.d3(e2)
        e4 = self.d4(e3)
        zz = z.view(z.shape[0], -1, 1, 1).expand(-1, -1, e4.shape[2], e4.shape[3])
        x = self.u4(torch.cat([e4, zz], dim=1))
        x = self.u3(torch.cat([x, e3], dim=1))
        x = self.u2(torch.cat([x, e2], dim=1))
        x = self.u1(torch.cat([x, e1], dim=1))
        return self.out(x)

    def forward(self, context, z):
        return torch.sigmoid(self.logits(context, z))


class WhatDiscriminator(nn.Module):
    def __init__(self, cfg: InsertionConfig):
        super().__init__()
        b = cfg.base_channels
        self.body = nn.Sequential(
            _down(cfg.k + 1, b), _down(b, b * 2), _down(b * 2, b * 4), _down(b * 4, b * 4), _down(b * 4, b * 4)
        )
        self.score = nn.Conv2d(b * 4, 1, 4)

    def forward(self, context, mask):
        x = self.body(torch.cat([context, mask], dim=1))
        return torch.sigmoid(self.score(x).mean(dim=(1, 2, 3)))


def generator_bce_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    return -torch.log(fake_scores.clamp(BCE_EPS, 1 - BCE_EPS)).mean()


# ---------------------------------------------------------------------------
# geometry


def _round_half_up(v: float) -> int:
    return math.floor(v + 0.5)


def footprint_size(log_scale: float) -> int:
    return max(1, _round_half_up(math.exp(log_scale) * MASK_SIZE[0]))


def footprint_anchor(proposal: WhereProposal, full_size: tuple[int, int]) -> tuple[int, int]:
    """Top-left corner of the (unclipped) square footprint centered on the proposal."""
    fw, fh = full_size
    s = footprint_size(proposal.log_scale)
    return _round_half_up(proposal.cx * fw - s / 2), _round_half_up(proposal.cy * fh - s / 2)


def context_window(cx: float, cy: float, full_size: tuple[int, int]) -> tuple[int, int]:
    """Top-left of the 128x128 window around a normalized center, shifted to stay inside the map."""
    fw, fh = full_size
    mw, mh = MASK_SIZE
    x0 = min(max(_round_half_up(cx * fw) - mw // 2, 0), fw - mw)
    y0 = min(max(_round_half_up(cy * fh) - mh // 2, 0), fh - mh)
    return x0, y0


def context_crop(map_full: np.ndarray, cx: float, cy: float) -> np.ndarray:
    h, w = map_full.shape
    x0, y0 = context_window(cx, cy, (w, h))
    return map_full[y0 : y0 + MASK_SIZE[1], x0 : x0 + MASK_SIZE[0]]


def _one_hot_nchw(labels: np.ndarray, k: int) -> torch.Tensor:
    return torch.from_numpy(semmap.encode_one_hot(labels, k)).permute(2, 0, 1).unsqueeze(0).contiguous()


def _check_full(map_full: np.ndarray, cfg: InsertionConfig) -> np.ndarray:
    m = np.asarray(map_full)
    if m.ndim != 2 or (m.shape[1], m.shape[0]) != cfg.full_size:
        raise ContractError(f"insertion expects a {cfg.full_size[0]}x{cfg.full_size[1]} map, got shape {m.shape}")
    return semmap.validate_labels(m, cfg.k)


def binarize(raw: np.ndarray, cfg: InsertionConfig) -> np.ndarray:
    """Set pixels strictly above the threshold; fewer than ``min_area`` of them is degenerate."""
    mask = (np.asarray(raw) > cfg.threshold).astype(np.uint8)
    area = int(mask.sum())
    if area < cfg.min_area:
        raise DegenerateShapeError(f"silhouette has {area} set pixels, minimum is {cfg.min_area}")
    return mask


# ---------------------------------------------------------------------------
# checkpoint and inference


@dataclass
class Checkpoint:
    config: InsertionConfig
    train_config: TrainConfig
    where_g: dict
    where_d: dict
    what_g: dict
    what_d: dict
    optimizers: dict | None = None
    epoch: int = 0
    _nets: dict | None = field(default=None, repr=False, compare=False)

    def save(self, path) -> None:
        save_archive(
            path,
            MAGIC,
            {
                "config": asdict(self.config),
                "train_config": asdict(self.train_config),
                "where_g": self.where_g,
                "where_d": self.where_d,
                "what_g": self.what_g,
                "what_d": self.what_d,
                "optimizers": self.optimizers,
                "epoch": self.epoch,
            },
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        d = load_archive(path, MAGIC)
        return cls(
            config=InsertionConfig(**d["config"]),
            train_config=TrainConfig(**d["train_config"]),
            where_g=d["where_g"],
            where_d=d["where_d"],
            what_g=d["what_g"],
            what_d=d["what_d"],
            optimizers=d["optimizers"],
            epoch=d["epoch"],
        )

    def frozen(self, name: str) -> nn.Module:
        if self._nets is None:
            where, what = WhereGenerator(self.config), WhatGenerator(self.config)
            where.load_state_dict(self.where_g)
            what.load_state_dict(self.what_g)
            for net in (where, what):
                net.eval()
                for p in net.parameters():
                    p.requires_grad_(False)
            self._nets = {"where": where, "what": what}
        return self._nets[name]


def _latent(z, dim: int) -> torch.Tensor:
    z = torch.as_tensor(z, dtype=torch.float32)
    if z.shape != (dim,):
        raise ContractError(f"latent vector must have shape ({dim},), got {tuple(z.shape)}")
    return z.unsqueeze(0)


def propose_location(ckpt: Checkpoint, map_full: np.ndarray, z) -> WhereProposal:
    cfg = ckpt.config
    m = _check_full(map_full, cfg)
    small = semmap.resize_nearest(m, *cfg.where_size)
    with torch.no_grad():
        out = ckpt.frozen("where")(_one_hot_nchw(small, cfg.k), _latent(z, cfg.latent_dim))[0]
    return WhereProposal(float(out[0]), float(out[1]), float(out[2]))


def shape_probabilities(ckpt: Checkpoint, context: np.ndarray, z) -> np.ndarray:
    cfg = ckpt.config
    context = np.asarray(context)
    if context.shape != (MASK_SIZE[1], MASK_SIZE[0]):
        raise ContractError(f"context crop must be {MASK_SIZE}, got {context.shape}")
    with torch.no_grad():
        raw = ckpt.frozen("what")(_one_hot_nchw(context, cfg.k), _latent(z, cfg.latent_dim))
    return raw[0, 0].numpy()


def generate_shape(ckpt: Checkpoint, context: np.ndarray, z) -> WhatMask:
    raw = shape_probabilities(ckpt, context, z)
    return WhatMask(binarize(raw, ckpt.config), raw)


def place_mask(proposal: WhereProposal, mask: WhatMask, cfg: InsertionConfig) -> semmap.InstanceMask:
    """Scale the silhouette to its footprint and clip it to the map, as an unscaled InstanceMask."""
    fw, fh = cfg.full_size
    s = footprint_size(proposal.log_scale)
    scaled = semmap.resize_nearest(np.asarray(mask.mask, dtype=np.uint8), s, s)
    ax, ay = footprint_anchor(proposal, cfg.full_size)
    x0, y0 = max(ax, 0), max(ay, 0)
    x1, y1 = min(ax + s, fw), min(ay + s, fh)
    if x0 >= x1 or y0 >= y1:
        raise PlacementError(f"footprint {s}x{s} at ({ax}, {ay}) lies fully outside the {fw}x{fh} map")
    clipped = scaled[y0 - ay : y1 - ay, x0 - ax : x1 - ax]
    area = int(clipped.sum())
    if area < cfg.min_area:
        raise DegenerateShapeError(f"placed silhouette has {area} visible pixels, minimum is {cfg.min_area}")
    return semmap.InstanceMask(clipped, anchor=(x0, y0), scale=1.0)


def insert_instance(map_full: np.ndarray, proposal: WhereProposal, mask: WhatMask, cfg: InsertionConfig):
    """Composite the scaled silhouette as a person; return ``(new_map, box)``.

    The square footprint is clipped to the map. Nothing visible is a
    placement error; a clipped silhouette below ``min_area`` is degenerate.
    """
    m = _check_full(map_full, cfg)
    inst = place_mask(proposal, mask, cfg)
    out = semmap.composite_instance(m, inst, cfg.person_class_id, cfg.k)
    return out, semmap.mask_to_bbox(inst)


def footprint_grid(inst: semmap.InstanceMask, full_size: tuple[int, int]) -> np.ndarray:
    """Boolean full-resolution grid of the pixels an instance covers."""
    fw, fh = full_size
    grid = np.zeros((fh, fw), dtype=bool)
    m = inst.scaled_mask().astype(bool)
    ax, ay = inst.anchor
    grid[ay : ay + m.shape[0], ax : ax + m.shape[1]] = m
    return grid


@dataclass
class Insertion:
    labels: np.ndarray
    box: semmap.BoundingBox
    proposal: WhereProposal
    mask: WhatMask
    attempts: int
    footprint: np.ndarray  # boolean, full resolution


def insert_person(ckpt: Checkpoint, map_full: np.ndarray, seed: int) -> Insertion:
    """Propose, shape and insert one person, resampling latents on failure.

    Attempt ``i`` draws both latent vectors from a generator seeded with
    ``seed + i``. After ``retry_budget`` failed attempts the last error is raised.
    """
    cfg = ckpt.config
    error = None
    for attempt in range(cfg.retry_budget):
        g = torch_generator(seed + attempt)
        z_where = torch.randn(cfg.latent_dim, generator=g)
        z_what = torch.randn(cfg.latent_dim, generator=g)
        try:
            proposal = propose_location(ckpt, map_full, z_where)
            shape = generate_shape(ckpt, context_crop(map_full, proposal.cx, proposal.cy), z_what)
            labels, box = insert_instance(map_full, proposal, shape, cfg)
            footprint = footprint_grid(place_mask(proposal, shape, cfg), cfg.full_size)
            return Insertion(labels, box, proposal, shape, attempt + 1, footprint)
        except (DegenerateShapeError, PlacementError) as exc:
            log.debug("insertion attempt %d failed: %s", attempt + 1, exc)
            error = exc
    raise error


# ---------------------------------------------------------------------------
# training data and training


@dataclass
class InstanceExample:
    """One real insertion: the person-free map, where the person went and its silhouette."""

    background: np.ndarray
    cx: float
    cy: float
    log_scale: float
    mask: np.ndarray  # (128, 128)


def example_from_box(background: np.ndarray, box: semmap.BoundingBox, cfg: InsertionConfig) -> InstanceExample:
    """Encode a rectangular person as a placement plus a full-height rectangular silhouette."""
    fh, fw = background.shape
    scale = min(max(max(box.w, box.h) / MASK_SIZE[0], cfg.scale_min), cfg.scale_max)
    mask = np.zeros((MASK_SIZE[1], MASK_SIZE[0]), dtype=np.uint8)
    mw = min(MASK_SIZE[0], max(1, _round_half_up(box.w / scale)))
    mh = min(MASK_SIZE[1], max(1, _round_half_up(box.h / scale)))
    x0, y0 = (MASK_SIZE[0] - mw) // 2, (MASK_SIZE[1] - mh) // 2
    mask[y0 : y0 + mh, x0 : x0 + mw] = 1
    return InstanceExample(
        background=background,
        cx=(box.x + box.w / 2) / fw,
        cy=(box.y + box.h / 2) / fh,
        log_scale=math.log(scale),
        mask=mask,
    )


def toy_examples(n_maps: int, cfg: InsertionConfig, palette=semmap.TOY_PALETTE, seed: int = 0, min_height: int = 24):
    """Person instances harvested from toy scenes rendered at ``cfg.full_size``."""
    fw, fh = cfg.full_size
    out = []
    for i in range(n_maps):
        scene = semmap.toy_scene(seed + i, fw, fh, palette, min_persons=1, max_persons=3)
        for box in scene.persons:
            if box.h >= min_height:
                out.append(example_from_box(scene.background, box, cfg))
    return out


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: MetricsLog


def train_insertion(examples, cfg: InsertionConfig, tc: TrainConfig) -> TrainResult:
    examples = list(examples)
    if not examples:
        raise DatasetEmptyError("insertion training needs at least one person instance")
    for ex in examples:
        _check_full(ex.background, cfg)
    if tc.batch_size != 1:
        log.info("insertion training always uses batch size 1; ignoring batch_size=%d", tc.batch_size)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(tc.seed)
        where_g, where_d = WhereGenerator(cfg), WhereDiscriminator(cfg)
        what_g, what_d = WhatGenerator(cfg), WhatDiscriminator(cfg)
        opts = {
            "where_g": tc.adam(where_g.parameters()),
            "where_d": tc.adam(where_d.parameters()),
            "what_g": tc.adam(what_g.parameters()),
            "what_d": tc.adam(what_d.parameters()),
        }
        data_rng = torch_generator(tc.seed + 1)
        metrics = MetricsLog(METRICS_COLUMNS)
        step = 0
        for epoch in range(1, tc.epochs + 1):
            for idx in torch.randperm(len(examples), generator=data_rng).tolist():
                ex = examples[idx]
                small = _one_hot_nchw(semmap.resize_nearest(ex.background, *cfg.where_size), cfg.k)
                real_params = torch.tensor([[ex.cx, ex.cy, ex.log_scale]], dtype=torch.float32)
                context = _one_hot_nchw(context_crop(ex.background, ex.cx, ex.cy), cfg.k)
                real_mask = torch.from_numpy(ex.mask.astype(np.float32))[None, None]

                z = torch.randn(1, cfg.latent_dim)
                with torch.no_grad():
                    fake_params = where_g(small, z)
                wd = discriminator_bce_loss(where_d(small, real_params), where_d(small, fake_params))
                opts["where_d"].zero_grad(set_to_none=True)
                wd.backward()
                opts["where_d"].step()

                wg = generator_bce_loss(where_d(small, where_g(small, torch.randn(1, cfg.latent_dim))))
                if cfg.recon_weight:
                    recon = F.l1_loss(where_g(small, torch.zeros(1, cfg.latent_dim)), real_params)
                    wg = wg + cfg.recon_weight * recon
                opts["where_g"].zero_grad(set_to_none=True)
                wg.backward()
                opts["where_g"].step()

                z = torch.randn(1, cfg.latent_dim)
                with torch.no_grad():
                    fake_mask = what_g(context, z)
                hd = discriminator_bce_loss(what_d(context, real_mask), what_d(context, fake_mask))
                opts["what_d"].zero_grad(set_to_none=True)
                hd.backward()
                opts["what_d"].step()

                hg = generator_bce_loss(what_d(context, what_g(context, torch.randn(1, cfg.latent_dim))))
                if cfg.recon_weight:
                    logits = what_g.logits(context, torch.zeros(1, cfg.latent_dim))
                    hg = hg + cfg.recon_weight * F.binary_cross_entropy_with_logits(logits, real_mask)
                opts["what_g"].zero_grad(set_to_none=True)
                hg.backward()
                opts["what_g"].step()

                step += 1
                row = dict(where_d=wd.item(), where_g=wg.item(), what_d=hd.item(), what_g=hg.item())
                check_finite(step, **row)
                metrics.append(step=step, epoch=epoch, **row)
                if tc.max_steps and step >= tc.max_steps:
                    break
            log.info("insertion epoch %d done after %d steps", epoch, step)
            if tc.max_steps and step >= tc.max_steps:
                break

    def snap(net):
        return {k: v.clone() for k, v in net.state_dict().items()}

    ckpt = Checkpoint(
        config=cfg,
        train_config=tc,
        where_g=snap(where_g),
        where_d=snap(where_d),
        what_g=snap(what_g),
        what_d=snap(what_d),
        optimizers={k: o.state_dict() for k, o in opts.items()},
        epoch=epoch,
    )
    return TrainResult(ckpt, metrics)
