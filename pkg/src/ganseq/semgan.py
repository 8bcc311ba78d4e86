"""Step 1: a DCGAN-style generator of one-hot semantic maps.

The generator projects a latent vector to a 4x4 grid with a transposed
convolution, doubles the resolution in each block (BatchNorm then SELU) and
ends with a 1x1 convolution and a softmax over classes. The discriminator is
fully convolutional: SELU activations, AlphaDropout after every block, and the
activations of its sixth convolution exposed as the ``conv6`` feature tap.
The generator trains on feature matching at that tap, the discriminator on
binary cross-entropy.

Networks work on NCHW tensors; ``generate_one_hot`` returns the ``(h, w, k)``
layout used by :mod:`ganseq.semmap`.
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
from .common import (
    MetricsLog,
    TrainConfig,
    check_finite,
    class_histogram,
    js_divergence,
    load_archive,
    save_archive,
    torch_generator,
)
from .errors import ConfigError, ContractError, DatasetEmptyError

log = logging.getLogger(__name__)

MAGIC = "SEMGAN1"
METRICS_COLUMNS = ("step", "epoch", "d_loss", "g_loss")
BCE_EPS = 1e-7
TAP_CONV = 6


@dataclass
class SemGanConfig:
    resolution: int = 64
    k: int = 8
    latent_dim: int = 128
    base_channels: int = 16
    dropout_rate: float = 0.3
    feature_tap: str = "conv6"
    num_blocks: int | None = None

    def __post_init__(self):
        r = self.resolution
        if r < 16 or r & (r - 1):
            raise ConfigError(f"resolution must be a power of two >= 16, got {r}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.base_channels < 8:
            raise ConfigError(f"base_channels must be >= 8, got {self.base_channels}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        derived = int(math.log2(r)) - 2
        if self.num_blocks is None:
            self.num_blocks = derived
        elif self.num_blocks != derived:
            raise ConfigError(f"num_blocks={self.num_blocks} inconsistent with resolution {r} (needs {derived})")
        if self.feature_tap != "conv6":
            raise ConfigError(f"only the 'conv6' feature tap is available, got {self.feature_tap!r}")

    @classmethod
    def full_scale(cls) -> "SemGanConfig":
        return cls(resolution=256, k=34, latent_dim=128, base_channels=64)


class Generator(nn.Module):
    def __init__(self, cfg: SemGanConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.num_blocks
        widths = [cfg.base_channels * min(8, 2 ** (n - i)) for i in range(n + 1)]
        # transposed conv on the 1x1 latent grid: projection to 4x4 without a linear layer
        self.project = nn.Sequential(
            nn.ConvTranspose2d(cfg.latent_dim, widths[0], 4, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.SELU(),
        )
        self.blocks = nn.Sequential(
            *[
                nn.Sequential(
                    nn.ConvTranspose2d(widths[i], widths[i + 1], 4, stride=2, padding=1, bias=False),
                    nn.BatchNorm2d(widths[i + 1]),
                    nn.SELU(),
                )
                for i in range(n)
            ]
        )
        self.to_classes = nn.Conv2d(widths[-1], cfg.k, 1)

    def logits(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() == 1:
            z = z.unsqueeze(0)
        if z.shape[-1] != self.cfg.latent_dim:
            raise ContractError(f"latent dimension {z.shape[-1]} != configured {self.cfg.latent_dim}")
        x = self.project(z.reshape(z.shape[0], -1, 1, 1))
        return self.to_classes(self.blocks(x))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.logits(z), dim=1)


def _lecun_init(module: nn.Module) -> None:
    if isinstance(module, nn.Conv2d):
        nn.init.kaiming_normal_(module.weight, nonlinearity="linear")
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def conv_strides(resolution: int) -> list[int]:
    """Stride of every discriminator convolution before the score head.

    Convolutions 1-6 alternate stride 2 and 1, leaving conv6 at resolution/8;
    further stride-2 convolutions follow until the grid is 4x4.
    """
    strides = [2, 1, 2, 1, 2, 1]
    size = resolution // 8
    while size > 4:
        strides.append(2)
        size //= 2
    return strides


def tap_shape(cfg: SemGanConfig) -> tuple[int, int, int]:
    """(channels, height, width) of the conv6 feature tap."""
    s = cfg.resolution // 8
    return (cfg.base_channels * 4, s, s)


class Discriminator(nn.Module):
    def __init__(self, cfg: SemGanConfig):
        super().__init__()
        if cfg.resolution < 16:
            raise ConfigError("resolution too small to reach six convolutions")
        self.cfg = cfg
        blocks = []
        c_in = cfg.k
        for i, stride in enumerate(conv_strides(cfg.resolution), start=1):
            c_out = cfg.base_channels * min(8, 2 ** ((i - 1) // 2))
            blocks.append(
                nn.ModuleDict(
                    {
                        "conv": nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
                        "act": nn.SELU(),
                        "drop": nn.AlphaDropout(cfg.dropout_rate),
                    }
                )
            )
            c_in = c_out
        self.blocks = nn.ModuleList(blocks)
        self.score = nn.Conv2d(c_in, 1, 1)
        self.apply(_lecun_init)

    def layer_names(self) -> list[str]:
        return [f"conv{i}" for i in range(1, len(self.blocks) + 1)] + ["score"]

    def forward(self, x: torch.Tensor, return_features: bool = False):
        if x.dim() != 4 or x.shape[1] != self.cfg.k or x.shape[2:] != (self.cfg.resolution,) * 2:
            raise ContractError(
                f"expected input (B, {self.cfg.k}, {self.cfg.resolution}, {self.cfg.resolution}), got {tuple(x.shape)}"
            )
        tap = None
        for i, block in enumerate(self.blocks, start=1):
            x = block["act"](block["conv"](x))
            if i == TAP_CONV:
                tap = x  # post-activation, before dropout
            x = block["drop"](x)
        score = torch.sigmoid(self.score(x).mean(dim=(1, 2, 3)))
        return (score, tap) if return_features else score


def build_generator(cfg: SemGanConfig) -> Generator:
    return Generator(cfg)


def build_discriminator(cfg: SemGanConfig) -> Discriminator:
    return Discriminator(cfg)


def feature_matching_loss(real_features: torch.Tensor, fake_features: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance between the batch means of two feature batches."""
    if real_features.shape[1:] != fake_features.shape[1:]:
        raise ContractError(
            f"feature shapes differ: {tuple(real_features.shape[1:])} vs {tuple(fake_features.shape[1:])}"
        )
    diff = real_features.mean(dim=0) - fake_features.mean(dim=0)
    return (diff * diff).sum()


def discriminator_bce_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy with real labelled 1 and fake 0.

    Scores are clamped to ``[1e-7, 1 - 1e-7]`` so saturated outputs never produce inf.
    """
    real = real_scores.clamp(BCE_EPS, 1 - BCE_EPS)
    fake = fake_scores.clamp(BCE_EPS, 1 - BCE_EPS)
    return -torch.log(real).mean() - torch.log1p(-fake).mean()


@dataclass
class Checkpoint:
    config: SemGanConfig
    train_config: TrainConfig
    generator: dict
    discriminator: dict
    opt_g: dict | None = None
    opt_d: dict | None = None
    epoch: int = 0
    _gen: Generator | None = field(default=None, repr=False, compare=False)

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
            config=SemGanConfig(**d["config"]),
            train_config=TrainConfig(**d["train_config"]),
            generator=d["generator"],
            discriminator=d["discriminator"],
            opt_g=d["opt_g"],
            opt_d=d["opt_d"],
            epoch=d["epoch"],
        )

    def frozen_generator(self) -> Generator:
        if self._gen is None:
            g = Generator(self.config)
            g.load_state_dict(self.generator)
            g.eval()
            for p in g.parameters():
                p.requires_grad_(False)
            self._gen = g
        return self._gen


def generate_one_hot(ckpt: Checkpoint, z) -> np.ndarray:
    """Generator output for one latent vector as an ``(h, w, k)`` array."""
    z = torch.as_tensor(z, dtype=torch.float32)
    if z.shape != (ckpt.config.latent_dim,):
        raise ContractError(f"latent vector must have shape ({ckpt.config.latent_dim},), got {tuple(z.shape)}")
    with torch.no_grad():
        out = ckpt.frozen_generator()(z)
    return out[0].permute(1, 2, 0).numpy()


def sample(ckpt: Checkpoint, z) -> np.ndarray:
    return semmap.decode_argmax(generate_one_hot(ckpt, z))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: MetricsLog
    # (epoch, histogram) pairs; epoch 0 is the untrained generator
    histograms: list[tuple[int, list[float]]]
    data_histogram: list[float]

    def js_by_epoch(self) -> list[float]:
        return [js_divergence(h, self.data_histogram) for _, h in self.histograms]


def _histogram(gen: Generator, z_eval: torch.Tensor, k: int) -> list[float]:
    was_training = gen.training
    gen.eval()
    with torch.no_grad():
        labels = gen.logits(z_eval).argmax(dim=1).numpy()
    gen.train(was_training)
    return class_histogram(labels, k).tolist()


def train(dataset, cfg: SemGanConfig, tc: TrainConfig, hist_samples: int = 16) -> TrainResult:
    maps = [np.asarray(m) for m in dataset]
    if not maps:
        raise DatasetEmptyError("semantic-map GAN needs at least one training map")
    for i, m in enumerate(maps):
        if m.shape != (cfg.resolution, cfg.resolution):
            raise ContractError(f"map {i} has shape {m.shape}, expected {(cfg.resolution,) * 2}; resize first")
        semmap.validate_labels(m, cfg.k)
    stack = np.stack(maps)
    real_all = torch.from_numpy(np.eye(cfg.k, dtype=np.float32)[stack]).permute(0, 3, 1, 2).contiguous()
    data_hist = class_histogram(stack, cfg.k).tolist()

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(tc.seed)
        gen, disc = Generator(cfg), Discriminator(cfg)
        opt_g, opt_d = tc.adam(gen.parameters()), tc.adam(disc.parameters())
        data_rng = torch_generator(tc.seed + 1)
        z_eval = torch.randn(hist_samples, cfg.latent_dim, generator=torch_generator(tc.seed + 2))
        metrics = MetricsLog(METRICS_COLUMNS)
        histograms = [(0, _histogram(gen, z_eval, cfg.k))]
        step = 0
        n = real_all.shape[0]
        gen.train()
        disc.train()
        for epoch in range(1, tc.epochs + 1):
            order = torch.randperm(n, generator=data_rng)
            for start in range(0, n, tc.batch_size):
                real = real_all[order[start : start + tc.batch_size]]
                b = real.shape[0]

                z = torch.randn(b, cfg.latent_dim)
                with torch.no_grad():
                    fake = gen(z)
                d_loss = discriminator_bce_loss(disc(real), disc(fake))
                opt_d.zero_grad(set_to_none=True)
                d_loss.backward()
                opt_d.step()

                z = torch.randn(b, cfg.latent_dim)
                _, real_feat = disc(real, return_features=True)
                _, fake_feat = disc(gen(z), return_features=True)
                g_loss = feature_matching_loss(real_feat.detach(), fake_feat)
                opt_g.zero_grad(set_to_none=True)
                g_loss.backward()
                opt_g.step()

                step += 1
                dl, gl = d_loss.item(), g_loss.item()
                check_finite(step, d_loss=dl, g_loss=gl)
                metrics.append(step=step, epoch=epoch, d_loss=dl, g_loss=gl)
                log.debug("semgan step %d epoch %d d_loss %.4f g_loss %.4f", step, epoch, dl, gl)
                if tc.max_steps and step >= tc.max_steps:
                    break
            histograms.append((epoch, _histogram(gen, z_eval, cfg.k)))
            log.info("semgan epoch %d done after %d steps", epoch, step)
            if tc.max_steps and step >= tc.max_steps:
                break

    gen.eval()
    ckpt = Checkpoint(
        config=cfg,
        train_config=tc,
        generator={k: v.clone() for k, v in gen.state_dict().items()},
        discriminator={k: v.clone() for k, v in disc.state_dict().items()},
        opt_g=opt_g.state_dict(),
        opt_d=opt_d.state_dict(),
        epoch=epoch,
    )
    return TrainResult(ckpt, metrics, histograms, data_hist)


def toy_dataset(n: int, resolution: int, palette=semmap.TOY_PALETTE, seed: int = 0) -> list[np.ndarray]:
    return [semmap.generate_toy_scene(seed + i, resolution, resolution, palette) for i in range(n)]
