"""Step 3: semantic map to RGB image with spatially-adaptive normalization.

The generator starts from the map downsampled to ``operating_size / 2**n``
and runs ``n`` residual blocks, each followed by 2x nearest upsampling. Every
normalization inside a block is modulated per pixel by scale and bias maps
predicted from the one-hot map. A two-scale patch discriminator judges
(image, map) pairs at full and half resolution; training uses the hinge loss
plus discriminator feature matching.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from . import semmap
from .common import MetricsLog, TrainConfig, check_finite, load_archive, save_archive, torch_generator
from .errors import ConfigError, ContractError, DatasetEmptyError

log = logging.getLogger(__name__)

MAGIC = "PXSYN1"
METRICS_COLUMNS = ("step", "epoch", "d_loss", "g_loss", "fm_loss")
NUM_SCALES = 2


def _pow2(v: int) -> bool:
    return v >= 1 and not v & (v - 1)


@dataclass
class SynthConfig:
    operating_size: tuple[int, int] = (512, 256)
    k: int = 8
    base_channels: int = 16
    num_upsample_blocks: int = 4
    latent_dim: int = 0
    spade_hidden: int = 32
    disc_channels: int = 16
    fm_weight: float = 10.0

    def __post_init__(self):
        self.operating_size = tuple(int(v) for v in self.operating_size)
        w, h = self.operating_size
        if not (_pow2(w) and _pow2(h)):
            raise ConfigError(f"operating_size dimensions must be powers of two, got {self.operating_size}")
        n = self.num_upsample_blocks
        if n < 1 or w >> n < 1 or h >> n < 1:
            raise ConfigError(f"{n} upsampling blocks do not fit operating size {self.operating_size}")
        if min(w, h) < 16:
            raise ConfigError("operating size must be at least 16 pixels on each side for the discriminator")
        if self.k < 1 or self.base_channels < 1 or self.spade_hidden < 1 or self.latent_dim < 0:
            raise ConfigError("k, base_channels and spade_hidden must be >= 1, latent_dim >= 0")
        if self.fm_weight < 0:
            raise ConfigError("fm_weight must be >= 0")

    @property
    def height(self) -> int:
        return self.operating_size[1]

    @property
    def width(self) -> int:
        return self.operating_size[0]


class SPADE(nn.Module):
    """Parameter-free batch normalization modulated by ``gamma(seg)`` and ``beta(seg)``.

    Statistics always come from the current batch (no running averages), so
    training and inference normalize the same way.
    """

    def __init__(self, channels: int, label_nc: int, hidden: int = 32):
        super().__init__()
        self.norm = nn.BatchNorm2d(channels, affine=False, track_running_stats=False)
        self.shared = nn.Sequential(nn.Conv2d(label_nc, hidden, 3, padding=1), nn.ReLU())
        self.gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, 3, padding=1)
        nn.init.zeros_(self.gamma.weight)
        nn.init.ones_(self.gamma.bias)
        nn.init.zeros_(self.beta.bias)

    def forward(self, features: torch.Tensor, seg: torch.Tensor) -> torch.Tensor:
        if seg.dim() != 4 or features.dim() != 4 or seg.shape[0] != features.shape[0]:
            raise ContractError(f"cannot condition features {tuple(features.shape)} on map {tuple(seg.shape)}")
        seg = F.interpolate(seg, size=features.shape[2:], mode="nearest")
        if seg.shape[2:] != features.shape[2:]:
            raise ContractError("map and features disagree spatially after resizing")
        actv = self.shared(seg)
        return self.norm(features) * self.gamma(actv) + self.beta(actv)


def spatially_adaptive_norm(features: torch.Tensor, seg: torch.Tensor, norm: SPADE) -> torch.Tensor:
    return norm(features, seg)


class SPADEResBlock(nn.Module):
    def __init__(self, fin: int, fout: int, cfg: SynthConfig):
        super().__init__()
        mid = min(fin, fout)
        self.norm_0 = SPADE(fin, cfg.k, cfg.spade_hidden)
        self.conv_0 = nn.Conv2d(fin, mid, 3, padding=1)
        self.norm_1 = SPADE(mid, cfg.k, cfg.spade_hidden)
        self.conv_1 = nn.Conv2d(mid, fout, 3, padding=1)
        self.learned_shortcut = fin != fout
        if self.learned_shortcut:
            self.norm_s = SPADE(fin, cfg.k, cfg.spade_hidden)
            self.conv_s = nn.Conv2d(fin, fout, 1, bias=False)

    def forward(self, x, seg):
        xs = self.conv_s(self.norm_s(x, seg)) if self.learned_shortcut else x
        dx = self.conv_0(F.leaky_relu(self.norm_0(x, seg), 0.2))
        dx = self.conv_1(F.leaky_relu(self.norm_1(dx, seg), 0.2))
        return xs + dx


class SynthGenerator(nn.Module):
    def __init__(self, cfg: SynthConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.num_upsample_blocks
        widths = [cfg.base_channels * min(8, 2 ** (n - i)) for i in range(n + 1)]
        self.start_size = (cfg.height >> n, cfg.width >> n)
        self.head = nn.Conv2d(cfg.k + cfg.latent_dim, widths[0], 3, padding=1)
        self.blocks = nn.ModuleList(SPADEResBlock(widths[i], widths[i + 1], cfg) for i in range(n))
        self.to_rgb = nn.Conv2d(widths[-1], 3, 3, padding=1)

    def forward(self, seg: torch.Tensor, z: torch.Tensor | None = None) -> torch.Tensor:
        x = F.interpolate(seg, size=self.start_size, mode="nearest")
        if self.cfg.latent_dim:
            if z is None:
                z = torch.zeros(seg.shape[0], self.cfg.latent_dim)
            x = torch.cat([x, z.view(seg.shape[0], -1, 1, 1).expand(-1, -1, *self.start_size)], dim=1)
        x = self.head(x)
        for block in self.blocks:
            x = F.interpolate(block(x, seg), scale_factor=2, mode="nearest")
        return torch.tanh(self.to_rgb(F.leaky_relu(x, 0.2)))


class PatchDiscriminator(nn.Module):
    """Three stride-2 4x4 convolutions, one stride-1 3x3, then a 3x3 score head.

    For an input of (H, W) the score grid is (H/8, W/8).
    """

    def __init__(self, c_in: int, ch: int):
        super().__init__()
        self.layers = nn.ModuleList(
            [
                nn.Sequential(nn.Conv2d(c_in, ch, 4, 2, 1), nn.LeakyReLU(0.2)),
                nn.Sequential(nn.Conv2d(ch, ch * 2, 4, 2, 1), nn.InstanceNorm2d(ch * 2), nn.LeakyReLU(0.2)),
                nn.Sequential(nn.Conv2d(ch * 2, ch * 4, 4, 2, 1), nn.InstanceNorm2d(ch * 4), nn.LeakyReLU(0.2)),
                nn.Sequential(nn.Conv2d(ch * 4, ch * 4, 3, 1, 1), nn.InstanceNorm2d(ch * 4), nn.LeakyReLU(0.2)),
            ]
        )
        self.score = nn.Conv2d(ch * 4, 1, 3, 1, 1)

    def forward(self, x):
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return self.score(x), feats


def downsample_half(x: torch.Tensor) -> torch.Tensor:
    return F.avg_pool2d(x, 3, stride=2, padding=1, count_include_pad=False)


class MultiscaleDiscriminator(nn.Module):
    def __init__(self, cfg: SynthConfig):
        super().__init__()
        self.cfg = cfg
        self.scales = nn.ModuleList(PatchDiscriminator(3 + cfg.k, cfg.disc_channels) for _ in range(NUM_SCALES))

    def forward(self, image: torch.Tensor, seg: torch.Tensor):
        if image.dim() != 4 or seg.dim() != 4 or image.shape[0] != seg.shape[0] or image.shape[2:] != seg.shape[2:]:
            raise ContractError(f"image {tuple(image.shape)} and map {tuple(seg.shape)} are not aligned")
        x = torch.cat([image, seg], dim=1)
        out = []
        for i, d in enumerate(self.scales):
            if i:
                x = downsample_half(x)
            out.append(d(x))
        return out


def score_grid_shape(height: int, width: int, scale: int) -> tuple[int, int]:
    """(h, w) of the patch-score grid at a given scale."""
    for _ in range(scale):
        height, width = (height + 1) // 2, (width + 1) // 2
    for _ in range(3):
        height, width = height // 2, width // 2
    return height, width


def multiscale_discriminate(disc: MultiscaleDiscriminator, image: torch.Tensor, seg: torch.Tensor):
    return disc(image, seg)


def d_hinge_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return F.relu(1 - real_scores).mean() + F.relu(1 + fake_scores).mean()


def g_hinge_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    return -fake_scores.mean()


def multiscale_fm_loss(real_out, fake_out) -> torch.Tensor:
    """L1 between discriminator features of real and fake pairs, averaged over scales."""
    total = fake_out[0][1][0].new_zeros(())
    for (_, real_feats), (_, fake_feats) in zip(real_out, fake_out):
        for r, f in zip(real_feats, fake_feats):
            total = total + F.l1_loss(f, r.detach())
    return total / len(fake_out)


@dataclass
class Checkpoint:
    config: SynthConfig
    train_config: TrainConfig
    generator: dict
    discriminator: dict
    opt_g: dict | None = None
    opt_d: dict | None = None
    epoch: int = 0
    _gen: SynthGenerator | None = field(default=None, repr=False, compare=False)

    def save(self, path) -> None:
        save_archive(
            path,
            MAGIC,
            {
                "config": asdict(self.config),
                "train_config": asdict(self.train_config),
                "generator": self.generator,
                "discriminator": self.discriminator,
                "opt_g": self.opt_g,
                "opt_d": self.opt_d,
                "epoch": self.epoch,
            },
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        d = load_archive(path, MAGIC)
        return cls(
            config=SynthConfig(**d["config"]),
            train_config=TrainConfig(**d["train_config"]),
            generator=d["generator"],
            discriminator=d["discriminator"],
            opt_g=d["opt_g"],
            opt_d=d["opt_d"],
            epoch=d["epoch"],
        )

    def frozen_generator(self) -> SynthGenerator:
        if self._gen is None:
            g = SynthGenerator(self.config)
            g.load_state_dict(self.generator)
            g.eval()
            for p in g.parameters():
                p.requires_grad_(False)
            self._gen = g
        return self._gen


def _seg_tensor(labels: np.ndarray, cfg: SynthConfig) -> torch.Tensor:
    labels = np.asarray(labels)
    if labels.shape != (cfg.height, cfg.width):
        raise ContractError(
            f"translator operates on {cfg.width}x{cfg.height} maps, got {labels.shape[1]}x{labels.shape[0]}; "
            "resize with semmap.resize_nearest first"
        )
    return torch.from_numpy(semmap.encode_one_hot(labels, cfg.k)).permute(2, 0, 1).contiguous()


def translate(ckpt: Checkpoint, labels: np.ndarray, z=None) -> np.ndarray:
    """RGB image of shape (h, w, 3) with values in [-1, 1]."""
    seg = _seg_tensor(labels, ckpt.config).unsqueeze(0)
    if z is not None:
        z = torch.as_tensor(z, dtype=torch.float32).reshape(1, -1)
        if z.shape[1] != ckpt.config.latent_dim:
            raise ContractError(f"style vector must have {ckpt.config.latent_dim} entries, got {z.shape[1]}")
    with torch.no_grad():
        img = ckpt.frozen_generator()(seg, z)
    return img[0].permute(1, 2, 0).numpy()


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(image, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_image(image: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def toy_target(labels: np.ndarray, palette: semmap.LabelPalette, seed: int, noise: float = 0.05) -> np.ndarray:
    """Palette colors mapped to [-1, 1] plus seeded Gaussian noise; the toy translation target."""
    rgb = semmap.colorize(labels, palette).astype(np.float32) / 127.5 - 1.0
    rng = np.random.default_rng(seed)
    return np.clip(rgb + noise * rng.standard_normal(rgb.shape).astype(np.float32), -1.0, 1.0)


def toy_pairs(n: int, cfg: SynthConfig, palette=semmap.TOY_PALETTE, seed: int = 0):
    out = []
    for i in range(n):
        labels = semmap.generate_toy_scene(seed + i, cfg.width, cfg.height, palette)
        out.append((labels, toy_target(labels, palette, seed + i)))
    return out


def mean_abs_error(ckpt: Checkpoint, pairs) -> float:
    errs = [np.abs(translate(ckpt, m, None) - img).mean() for m, img in pairs]
    return float(np.mean(errs))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: MetricsLog
    initial: Checkpoint


def train_translation(pairs, cfg: SynthConfig, tc: TrainConfig) -> TrainResult:
    pairs = list(pairs)
    if not pairs:
        raise DatasetEmptyError("translation training needs at least one (map, image) pair")
    segs, imgs = [], []
    for i, (labels, image) in enumerate(pairs):
        segs.append(_seg_tensor(labels, cfg))
        image = np.asarray(image, dtype=np.float32)
        if image.shape != (cfg.height, cfg.width, 3):
            raise ContractError(f"pair {i}: image shape {image.shape} does not match the map")
        imgs.append(torch.from_numpy(image).permute(2, 0, 1))
    seg_all, img_all = torch.stack(segs), torch.stack(imgs)

    def snapshot(gen, disc, opt_g=None, opt_d=None, epoch=0):
        return Checkpoint(
            config=cfg,
            train_config=tc,
            generator={k: v.clone() for k, v in gen.state_dict().items()},
            discriminator={k: v.clone() for k, v in disc.state_dict().items()},
            opt_g=opt_g.state_dict() if opt_g else None,
            opt_d=opt_d.state_dict() if opt_d else None,
            epoch=epoch,
        )

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(tc.seed)
        gen, disc = SynthGenerator(cfg), MultiscaleDiscriminator(cfg)
        initial = snapshot(gen, disc)
        opt_g, opt_d = tc.adam(gen.parameters()), tc.adam(disc.parameters())
        data_rng = torch_generator(tc.seed + 1)
        metrics = MetricsLog(METRICS_COLUMNS)
        n = len(pairs)
        step = 0
        for epoch in range(1, tc.epochs + 1):
            order = torch.randperm(n, generator=data_rng)
            for start in range(0, n, tc.batch_size):
                idx = order[start : start + tc.batch_size]
                seg, real = seg_all[idx], img_all[idx]
                z = torch.randn(len(idx), cfg.latent_dim) if cfg.latent_dim else None

                with torch.no_grad():
                    fake = gen(seg, z)
                d_loss = sum(
                    d_hinge_loss(r[0], f[0]) for r, f in zip(disc(real, seg), disc(fake, seg))
                )
                opt_d.zero_grad(set_to_none=True)
                d_loss.backward()
                opt_d.step()

                fake = gen(seg, z)
                fake_out = disc(fake, seg)
                with torch.no_grad():
                    real_out = disc(real, seg)
                g_adv = sum(g_hinge_loss(f[0]) for f in fake_out)
                fm = multiscale_fm_loss(real_out, fake_out)
                g_total = g_adv + cfg.fm_weight * fm
                opt_g.zero_grad(set_to_none=True)
                g_total.backward()
                opt_g.step()

                step += 1
                row = dict(d_loss=d_loss.item(), g_loss=g_adv.item(), fm_loss=fm.item())
                check_finite(step, **row)
                metrics.append(step=step, epoch=epoch, **row)
                if tc.max_steps and step >= tc.max_steps:
                    break
            log.info("pixsynth epoch %d done after %d steps", epoch, step)
            if tc.max_steps and step >= tc.max_steps:
                break

    return TrainResult(snapshot(gen, disc, opt_g, opt_d, epoch), metrics, initial)
