"""Seeding, checkpoint archives and metric logs shared by the three GAN stages."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, ConfigError

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


def derive_seed(seed: int, *parts) -> int:
    """Child seed from a master seed and a label path, via SHA-256 of ``"seed:part:part..."``.

    The result fits in 63 bits so it is valid for both numpy and torch.
    """
    key = ":".join(str(p) for p in (seed, *parts)).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") >> 1


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def latent(dim: int, seed: int) -> torch.Tensor:
    """Standard-normal latent vector of shape ``(dim,)``."""
    return torch.randn(dim, generator=torch_generator(seed))


def save_archive(path, magic: str, payload: dict) -> None:
    torch.save({"magic": magic, "format": CHECKPOINT_FORMAT, **payload}, Path(path))


def load_archive(path, magic: str) -> dict:
    try:
        data = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from None
    if not isinstance(data, dict) or data.get("magic") != magic:
        found = data.get("magic") if isinstance(data, dict) else None
        raise CheckpointError(f"{path}: expected a {magic} checkpoint, found {found!r}")
    if data.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {data.get('format')!r}")
    return data


def peek_archive(path) -> dict:
    data = torch.load(Path(path), map_location="cpu", weights_only=True)
    if not isinstance(data, dict) or "magic" not in data:
        raise CheckpointError(f"{path}: not a ganseq checkpoint")
    return data


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def check_config_fields(cls, raw: dict, section: str):
    """Build dataclass ``cls`` from ``raw``, rejecting keys it does not declare."""
    names = set(cls.__dataclass_fields__)
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    return cls(**kwargs)


class MetricsLog:
    """Accumulates rows for a CSV metrics file with a fixed header."""

    def __init__(self, columns):
        self.columns = list(columns)
        self.rows: list[dict] = []

    def append(self, **row):
        self.rows.append(row)

    def column(self, name):
        return [r[name] for r in self.rows]

    def write(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def check_finite(step: int, **losses) -> None:
    from .errors import TrainingDivergedError

    bad = {k: v for k, v in losses.items() if not math.isfinite(v)}
    if bad:
        raise TrainingDivergedError(f"non-finite loss at step {step}: {bad} (all losses: {losses})")


def class_histogram(labels, k: int) -> np.ndarray:
    """Normalized class-frequency histogram over one or more label maps."""
    counts = np.bincount(np.asarray(labels).ravel().astype(np.int64), minlength=k)[:k].astype(np.float64)
    return counts / counts.sum()


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in nats; zero-probability terms contribute nothing."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p, q = p / p.sum(), q / q.sum()
    m = 0.5 * (p + q)

    def kl(a, b):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / b[nz])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


@dataclass
class TrainConfig:
    learning_rate: float = 0.0002
    beta1: float = 0.3
    beta2: float = 0.999
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0
    # stop early after this many optimizer steps; 0 means no cap
    max_steps: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.batch_size < 1 or self.epochs < 1 or self.max_steps < 0:
            raise ConfigError("batch_size and epochs must be >= 1 and max_steps >= 0")

    def adam(self, params):
        return torch.optim.Adam(params, lr=self.learning_rate, betas=(self.beta1, self.beta2))
