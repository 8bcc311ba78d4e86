import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ganseq import pixsynth, semmap
from ganseq.common import TrainConfig
from ganseq.errors import ConfigError, ContractError, DatasetEmptyError
from ganseq.pixsynth import SynthConfig

TINY = SynthConfig(operating_size=(32, 16), num_upsample_blocks=2, base_channels=4, spade_hidden=4, disc_channels=4)


def _seg(labels, k):
    return torch.from_numpy(semmap.encode_one_hot(labels, k)).permute(2, 0, 1).unsqueeze(0)


def test_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(operating_size=(500, 256))
    with pytest.raises(ConfigError):
        SynthConfig(operating_size=(64, 32), num_upsample_blocks=6)
    assert (SynthConfig().width, SynthConfig().height) == (512, 256)


def test_spade_gamma_starts_at_one():
    spade = pixsynth.SPADE(6, 4, hidden=5)
    with torch.no_grad():
        spade.beta.weight.zero_()
    x = torch.randn(3, 6, 8, 8) * 4 + 2
    seg = torch.softmax(torch.randn(3, 4, 8, 8), dim=1)
    mean = x.mean(dim=(0, 2, 3), keepdim=True)
    var = x.var(dim=(0, 2, 3), unbiased=False, keepdim=True)
    torch.testing.assert_close(spade(x, seg), (x - mean) / torch.sqrt(var + 1e-5))


def test_spade_uses_batch_statistics_in_eval():
    spade = pixsynth.SPADE(3, 2)
    x, seg = torch.randn(2, 3, 4, 4), torch.rand(2, 2, 4, 4)
    train_out = spade.train()(x, seg)
    torch.testing.assert_close(spade.eval()(x, seg), train_out)


def test_spade_modulation_follows_the_map():
    spade = pixsynth.SPADE(2, 2, hidden=3)
    with torch.no_grad():
        spade.beta.weight.normal_()
    x = torch.zeros(1, 2, 4, 4)
    left = torch.zeros(1, 2, 4, 4)
    left[:, 0, :, :2] = 1
    left[:, 1, :, 2:] = 1
    flipped = left.flip(1)
    assert not torch.allclose(spade(x, left), spade(x, flipped))
    torch.testing.assert_close(pixsynth.spatially_adaptive_norm(x, left, spade), spade(x, left))


def test_spade_resizes_the_map():
    spade = pixsynth.SPADE(2, 3)
    assert spade(torch.randn(2, 2, 4, 8), torch.rand(2, 3, 16, 32)).shape == (2, 2, 4, 8)
    with pytest.raises(ContractError):
        spade(torch.randn(2, 2, 4, 8), torch.rand(3, 3, 16, 32))


def test_generator_shape_and_range():
    cfg = SynthConfig(base_channels=4, spade_hidden=4, disc_channels=4)
    g = pixsynth.SynthGenerator(cfg).eval()
    labels = semmap.generate_toy_scene(0, 512, 256, semmap.TOY_PALETTE)
    with torch.no_grad():
        out = g(_seg(labels, 8))
    assert out.shape == (1, 3, 256, 512)
    assert out.abs().max() <= 1


def test_generator_with_latent():
    cfg = SynthConfig(operating_size=(32, 16), num_upsample_blocks=2, base_channels=4, spade_hidden=4, latent_dim=3)
    g = pixsynth.SynthGenerator(cfg)
    seg = torch.rand(2, 8, 16, 32)
    a = g(seg, torch.zeros(2, 3))
    torch.testing.assert_close(a, g(seg))
    assert not torch.allclose(a, g(seg, torch.ones(2, 3)))


@pytest.mark.parametrize("size", [(512, 256), (128, 64), (64, 32)])
def test_multiscale_discriminator_grids(size):
    w, h = size
    cfg = SynthConfig(operating_size=size, num_upsample_blocks=2, disc_channels=4)
    d = pixsynth.MultiscaleDiscriminator(cfg)
    out = pixsynth.multiscale_discriminate(d, torch.rand(1, 3, h, w), torch.rand(1, 8, h, w))
    assert len(out) == pixsynth.NUM_SCALES == 2
    (s0, f0), (s1, f1) = out
    assert tuple(s0.shape[2:]) == pixsynth.score_grid_shape(h, w, 0) == (h // 8, w // 8)
    assert tuple(s1.shape[2:]) == pixsynth.score_grid_shape(h, w, 1) == (h // 16, w // 16)
    assert len(f0) == len(f1) == 4


def test_discriminator_alignment_checked():
    d = pixsynth.MultiscaleDiscriminator(TINY)
    with pytest.raises(ContractError):
        d(torch.rand(1, 3, 16, 32), torch.rand(1, 8, 16, 16))


def test_downsample_half_average():
    x = torch.ones(1, 1, 8, 8)
    torch.testing.assert_close(pixsynth.downsample_half(x), torch.ones(1, 1, 4, 4))


def test_hinge_losses():
    assert pixsynth.d_hinge_loss(torch.ones(4), -torch.ones(4)).item() == 0.0
    assert pixsynth.d_hinge_loss(torch.zeros(4), torch.zeros(4)).item() == 2.0
    assert pixsynth.d_hinge_loss(torch.tensor([3.0]), torch.tensor([-5.0])).item() == 0.0
    assert pixsynth.g_hinge_loss(torch.tensor([1.0, 3.0])).item() == -2.0


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_d_hinge_nonnegative(r, f):
    assert pixsynth.d_hinge_loss(torch.tensor([r]), torch.tensor([f])).item() >= 0


def test_fm_loss_zero_on_identical_and_scale_average():
    feats = [torch.randn(1, 2, 4, 4) for _ in range(4)]
    out = [(None, feats), (None, feats)]
    assert pixsynth.multiscale_fm_loss(out, out).item() == 0.0
    shifted = [(None, [f + 1 for f in feats]), (None, [f + 1 for f in feats])]
    # each of 4 layers contributes 1 per scale, averaged over 2 scales
    assert pixsynth.multiscale_fm_loss(out, shifted).item() == pytest.approx(4.0)


def test_translate_contract():
    res = pixsynth.train_translation(pixsynth.toy_pairs(1, TINY), TINY, TrainConfig(batch_size=1, max_steps=1))
    img = pixsynth.translate(res.checkpoint, semmap.generate_toy_scene(3, 32, 16, semmap.TOY_PALETTE))
    assert img.shape == (16, 32, 3)
    assert np.abs(img).max() <= 1
    with pytest.raises(ContractError, match="resize"):
        pixsynth.translate(res.checkpoint, np.zeros((32, 32), dtype=np.uint8))


def test_to_uint8_mapping():
    np.testing.assert_array_equal(pixsynth.to_uint8(np.array([-1.0, 0.0, 1.0, 2.0])), [0, 128, 255, 255])


def test_toy_target_seeded():
    labels = semmap.generate_toy_scene(1, 32, 16, semmap.TOY_PALETTE)
    a = pixsynth.toy_target(labels, semmap.TOY_PALETTE, 4)
    np.testing.assert_array_equal(a, pixsynth.toy_target(labels, semmap.TOY_PALETTE, 4))
    assert a.shape == (16, 32, 3) and a.min() >= -1 and a.max() <= 1


def test_training_deterministic_and_logged():
    pairs = pixsynth.toy_pairs(3, TINY, seed=2)
    tc = TrainConfig(batch_size=2, epochs=2, seed=1, beta1=0.0, beta2=0.9)
    a = pixsynth.train_translation(pairs, TINY, tc)
    b = pixsynth.train_translation(pairs, TINY, tc)
    assert a.metrics.rows == b.metrics.rows
    assert a.metrics.column("step") == [1, 2, 3, 4]
    assert set(a.metrics.rows[0]) >= set(pixsynth.METRICS_COLUMNS)


def test_training_input_checks():
    with pytest.raises(DatasetEmptyError):
        pixsynth.train_translation([], TINY, TrainConfig())
    labels = semmap.generate_toy_scene(0, 32, 16, semmap.TOY_PALETTE)
    with pytest.raises(ContractError):
        pixsynth.train_translation([(labels, np.zeros((16, 16, 3)))], TINY, TrainConfig())


def test_checkpoint_roundtrip(tmp_path):
    res = pixsynth.train_translation(pixsynth.toy_pairs(2, TINY), TINY, TrainConfig(batch_size=2, max_steps=2))
    res.checkpoint.save(tmp_path / "p.pt")
    loaded = pixsynth.Checkpoint.load(tmp_path / "p.pt")
    labels = semmap.generate_toy_scene(9, 32, 16, semmap.TOY_PALETTE)
    np.testing.assert_array_equal(pixsynth.translate(loaded, labels), pixsynth.translate(res.checkpoint, labels))


def test_save_image(tmp_path):
    from PIL import Image

    img = np.zeros((4, 6, 3))
    pixsynth.save_image(img, tmp_path / "x.png")
    loaded = Image.open(tmp_path / "x.png")
    assert loaded.mode == "RGB" and loaded.size == (6, 4)
