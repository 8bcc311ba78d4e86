"""Shared fixtures: a small trained toy model set produced through the CLI."""

import pytest

from ganseq import cli

RUN_TOML = """\
seed = 3

[palette]
name = "toy"

[semgan]
resolution = 64
base_channels = 8
latent_dim = 32
dataset_size = 16
epochs = 1
batch_size = 8

[instafill]
dataset_size = 32
epochs = 5

[pixsynth]
dataset_size = 4
max_steps = 10
"""


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """Directory holding run.toml and trained checkpoints/{semgan,instafill,pixsynth}.pt."""
    root = tmp_path_factory.mktemp("toyrun")
    cfg = root / "run.toml"
    cfg.write_text(RUN_TOML)
    for cmd in ("train-semgan", "train-insert", "train-translate"):
        assert cli.dispatch([cmd, "--config", str(cfg)]) == 0, cmd
    return root
