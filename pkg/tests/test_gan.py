import numpy as np
import pytest
import torch

from octshift.errors import ConfigError, TrainingAbort
from octshift.gan import (
    CheckpointPool,
    Discriminator,
    GanConfig,
    apply_generator,
    build_discriminator,
    build_generator,
    gan_losses,
    load_gan_network,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    save_gan_network,
    train_cyclegan,
    translate_images,
)
from octshift.volume import Volume


class Identity(torch.nn.Module):
    def forward(self, x):
        return x


class Constant(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x):
        return torch.full((x.shape[0], 1, 4, 4), self.value)


def rand_images(n, shape, seed):
    rng = np.random.default_rng(seed)
    return [rng.random(shape).astype(np.float32) for _ in range(n)]


@pytest.mark.parametrize("size", [64, 460])
def test_generator_preserves_patch_shape(size):
    cfg = GanConfig(patch_size=size, ngf=8)
    G = build_generator(cfg)
    x = torch.rand(1, 1, size, size)
    with torch.no_grad():
        y = G.translate(x)
    assert y.shape == x.shape
    assert y.min() >= 0 and y.max() <= 1


def test_generator_architecture():
    G = build_generator(GanConfig(patch_size=64))
    convs = [m for m in G.modules() if isinstance(m, (torch.nn.Conv2d, torch.nn.ConvTranspose2d))]
    assert convs[0].kernel_size == (7, 7) and convs[0].out_channels == 64
    assert [c.out_channels for c in convs[1:3]] == [128, 256]
    assert convs[-1].kernel_size == (7, 7) and convs[-1].out_channels == 1
    assert G.descriptor["n_residual"] == 6
    assert build_generator(GanConfig(patch_size=256, ngf=4)).descriptor["n_residual"] == 9


def test_full_bscan_inference_shape():
    G = build_generator(GanConfig(patch_size=64, ngf=4))
    img = rand_images(1, (496, 512), 0)
    out = translate_images(G, img)[0]
    assert out.shape == (496, 512) and out.min() >= 0 and out.max() <= 1
    odd = translate_images(G, rand_images(1, (66, 70), 1))[0]
    assert odd.shape == (66, 70)


def test_patchgan_output_size():
    D = build_discriminator(GanConfig(patch_size=256))
    convs = [m for m in D.modules() if isinstance(m, torch.nn.Conv2d)]
    assert [c.out_channels for c in convs] == [64, 128, 256, 512, 1]
    with torch.no_grad():
        s = D(torch.rand(1, 1, 256, 256) * 2 - 1)
    assert s.shape[-2:] == (30, 30) == (Discriminator.output_size(256),) * 2
    assert Discriminator.output_size(64) == 6
    with torch.no_grad():
        assert torch.equal(D(torch.zeros(1, 1, 64, 64)), D(torch.zeros(1, 1, 64, 64)))
        assert torch.isfinite(s).all()


def test_lsgan_closed_forms():
    ones, zeros = torch.ones(2, 1, 5, 5), torch.zeros(2, 1, 5, 5)
    assert lsgan_discriminator_loss(ones, zeros).item() == 0.0
    assert lsgan_generator_loss(zeros).item() == 1.0
    assert lsgan_discriminator_loss(zeros, ones).item() == 1.0


def test_identity_generators_zero_cycle_and_identity():
    x_s, x_t = torch.rand(1, 1, 16, 16), torch.rand(1, 1, 16, 16)
    losses = gan_losses(Identity(), Identity(), Constant(1.0), Constant(1.0), x_s, x_t)
    assert losses["cycle"].item() == 0 and losses["identity"].item() == 0
    assert losses["adversarial"].item() == 0
    assert losses["D_src"].item() == pytest.approx(0.5)


def test_loss_terms_combine(tmp_path):
    cfg = GanConfig(patch_size=64, ngf=4, ndf=4)
    torch.manual_seed(0)
    nets = [build_generator(cfg), build_generator(cfg), build_discriminator(cfg), build_discriminator(cfg)]
    x_s, x_t = torch.rand(1, 1, 64, 64), torch.rand(1, 1, 64, 64)
    with torch.no_grad():
        L = gan_losses(*nets, x_s, x_t, lambda_cyc=3.0, lambda_id=2.0)
        G_fwd, G_bwd = nets[:2]
        cyc = (G_bwd(G_fwd(x_s * 2 - 1)) - (x_s * 2 - 1)).abs().mean() + (
            G_fwd(G_bwd(x_t * 2 - 1)) - (x_t * 2 - 1)
        ).abs().mean()
    assert L["cycle"].item() == pytest.approx(cyc.item(), rel=1e-6)
    total = L["adversarial"] + 3.0 * L["cycle"] + 2.0 * L["identity"]
    assert L["generator_total"].item() == pytest.approx(total.item(), rel=1e-6)


def test_config_validation():
    with pytest.raises(ConfigError):
        GanConfig(patch_size=100)
    with pytest.raises(ConfigError):
        GanConfig(epochs=0)


def test_training_requires_both_domains(tmp_path):
    with pytest.raises(ConfigError):
        train_cyclegan(GanConfig(), [], rand_images(1, (64, 64), 0), tmp_path)
    with pytest.raises(ConfigError):
        train_cyclegan(GanConfig(patch_size=128), rand_images(1, (64, 64), 0), rand_images(1, (64, 64), 1), tmp_path)


TINY = GanConfig(patch_size=64, epochs=1, ngf=4, ndf=4, residual_blocks=1, steps_per_epoch=2, seed=5)


def test_one_epoch_pool_and_determinism(tmp_path):
    src, tgt = rand_images(3, (64, 80), 0), rand_images(3, (72, 64), 1)
    torch.use_deterministic_algorithms(True)
    try:
        a = train_cyclegan(TINY, src, tgt, tmp_path / "a")
        b = train_cyclegan(TINY, src, tgt, tmp_path / "b")
    finally:
        torch.use_deterministic_algorithms(False)
    assert a.epochs == [1] and len(a.history) == 1
    for net in ("G_fwd", "G_bwd", "D_src", "D_tgt"):
        assert a.path(1, net).exists()
        assert a.path(1, net).read_bytes() == b.path(1, net).read_bytes()
    reopened = CheckpointPool.open(tmp_path / "a")
    assert reopened.epochs == [1]
    G = reopened.load(1, "G_bwd")
    assert G.direction == "target_to_source"


def test_checkpoint_reload_bit_identical(tmp_path):
    torch.manual_seed(3)
    G = build_generator(TINY)
    save_gan_network(tmp_path / "g.ckpt", G, "G_fwd", 4, TINY)
    back = load_gan_network(tmp_path / "g.ckpt")
    for (k, v), (k2, v2) in zip(G.state_dict().items(), back.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    assert back.checkpoint_meta["epoch"] == 4 and back.direction == "source_to_target"


def test_non_finite_loss_aborts(tmp_path):
    src = [np.full((64, 64), np.nan, np.float32)]
    with pytest.raises(TrainingAbort):
        train_cyclegan(TINY, src, rand_images(1, (64, 64), 0), tmp_path)
    assert (tmp_path / "diagnostic" / "G_fwd.ckpt").exists()


def test_apply_generator_records_provenance(tmp_path):
    torch.manual_seed(1)
    save_gan_network(tmp_path / "g.ckpt", build_generator(TINY), "G_bwd", 2, TINY)
    G = load_gan_network(tmp_path / "g.ckpt")
    vol = Volume(np.random.default_rng(0).random((20, 24, 3)).astype(np.float32))
    a, b = apply_generator(G, vol), apply_generator(G, vol)
    assert a.shape == vol.shape
    assert np.array_equal(a.voxels, b.voxels)
    prov = a.provenance["transform"]
    assert prov["method"] == "cgan" and prov["epoch"] == 2 and prov["checkpoint"].endswith("g.ckpt")
