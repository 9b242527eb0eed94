import numpy as np
import pytest
import torch
from torch.nn import functional as F

from octshift.errors import ConfigError, TrainingAbort
from octshift.segmentation import (
    SegConfig,
    SegModel,
    argmax_lowest,
    build_unet,
    learning_rate_at,
    log_probs,
    mean_fluid_f1,
    predict,
    train_segmentation,
    validation_f1,
)
from octshift.volume import Volume

TINY = SegConfig(depth=2, base_channels=4, epochs=1, batch_size=2, seed=0)


def encoder_widths(net):
    return [enc[0].out_channels for enc in net.encoders]


@pytest.mark.parametrize("shape", [(128, 128), (496, 512)])
def test_shape_contract(shape):
    net = build_unet(SegConfig(base_channels=4), shape)
    with torch.no_grad():
        out = net.eval()(torch.rand(1, 1, *shape))
    assert out.shape == (1, 3, *shape)


def test_encoder_channel_widths_64_to_1024():
    assert SegConfig().channels == (64, 128, 256, 512, 1024)
    assert encoder_widths(build_unet(SegConfig())) == [64, 128, 256, 512, 1024]


def test_indivisible_input_rejected():
    with pytest.raises(ConfigError):
        build_unet(SegConfig(), (100, 128))


def test_probabilities_normalized():
    net = build_unet(SegConfig(depth=3, base_channels=4)).eval()
    with torch.no_grad():
        p = net(torch.rand(2, 1, 32, 48)).exp().sum(dim=1)
    assert torch.allclose(p, torch.ones_like(p), atol=1e-5)


def test_lr_schedule():
    cfg = SegConfig()
    assert [learning_rate_at(cfg, e) for e in (1, 15, 16, 30, 31, 45)] == [1e-4, 1e-4, 5e-5, 5e-5, 2.5e-5, 2.5e-5]
    for e in range(1, 81):
        assert learning_rate_at(cfg, e) == 1e-4 * 0.5 ** ((e - 1) // 15)


def gradient_check(n_coords=100, seed=0, eps=1e-5):
    """Worst relative error between autograd and central differences on random parameter coordinates."""
    cfg = SegConfig(depth=2, base_channels=4, seed=seed)
    net = build_unet(cfg).double().train()
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 1, 8, 8, generator=gen, dtype=torch.float64)
    y = torch.randint(0, 3, (2, 8, 8), generator=gen)
    params = [p for p in net.parameters()]

    def loss():
        return F.nll_loss(net(x), y)

    net.zero_grad()
    loss().backward()
    sizes = [p.numel() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for flat in rng.choice(sum(sizes), n_coords, replace=False):
            i = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
            j = int(flat - sum(sizes[:i]))
            p = params[i].view(-1)
            old = p[j].item()
            p[j] = old + eps
            up = loss().item()
            p[j] = old - eps
            down = loss().item()
            p[j] = old
            numeric = (up - down) / (2 * eps)
            analytic = params[i].grad.view(-1)[j].item()
            # conv biases feeding batch norm have zero gradient; compare those absolutely
            scale = max(abs(numeric), abs(analytic), 1e-6)
            worst = max(worst, abs(numeric - analytic) / scale)
    return worst


def test_gradient_check():
    assert gradient_check() <= 1e-3


def test_validation_f1_rules():
    gt = [np.array([[0, 1], [2, 2]])]
    assert mean_fluid_f1(gt, gt) == 1.0
    assert mean_fluid_f1([np.zeros((2, 2), int)], gt) == 0.0
    # IRC 0.69 and SRF 0.75 average to 0.72
    assert (0.69 + 0.75) / 2 == pytest.approx(0.72)


def test_uniform_logprobs_predict_background():
    lp = np.full((3, 4, 5), np.log(1 / 3))
    assert not argmax_lowest(lp).any()
    rng = np.random.default_rng(0)
    lp = rng.normal(size=(3, 6, 6))
    shift = rng.normal(size=(1, 6, 6))
    assert np.array_equal(argmax_lowest(lp), argmax_lowest(lp + shift))


def test_predict_shape_and_determinism():
    net = build_unet(SegConfig(depth=3, base_channels=4))
    vol = Volume(np.random.default_rng(1).random((20, 18, 49)).astype(np.float32))
    a, b = predict(net, vol), predict(net, vol)
    assert a.shape == vol.shape
    assert np.array_equal(a.labels, b.labels)
    assert log_probs(net, [vol.voxels[:, :, 0]])[0].shape == (3, 20, 18)


def toy_items(n, seed):
    rng = np.random.default_rng(seed)
    items = []
    for _ in range(n):
        lab = np.zeros((8, 8), np.int64)
        lab[2:4, 2:5] = 1
        lab[5:7, 1:6] = 2
        img = np.where(lab == 0, 0.8, 0.1 + 0.1 * lab).astype(np.float32) + rng.normal(0, 0.01, (8, 8)).astype(np.float32)
        items.append((np.clip(img, 0, 1), lab))
    return items


def test_one_epoch_selects_epoch_one(tmp_path):
    model = train_segmentation(TINY, toy_items(4, 0), toy_items(2, 1))
    assert model.selected_epoch == 1 and len(model.f1_trace) == 1
    assert model.validation_f1 == model.f1_trace[0]
    model.save(tmp_path / "m.ckpt")
    back = SegModel.load(tmp_path / "m.ckpt")
    for v, w in zip(model.net.state_dict().values(), back.net.state_dict().values()):
        assert torch.equal(v, w)
    assert back.selected_epoch == 1


def test_keeps_best_epoch():
    cfg = SegConfig(depth=2, base_channels=4, epochs=6, batch_size=2, learning_rate=1e-2, seed=3)
    val = toy_items(2, 1)
    model = train_segmentation(cfg, toy_items(6, 0), val)
    best = int(np.argmax(model.f1_trace)) + 1
    assert model.selected_epoch == best
    assert validation_f1(model, val) == pytest.approx(model.f1_trace[best - 1])


def test_empty_and_non_finite(tmp_path):
    with pytest.raises(ConfigError):
        train_segmentation(TINY, [], toy_items(1, 0))
    bad = [(np.full((8, 8), np.nan, np.float32), np.zeros((8, 8), np.int64))] * 2
    with pytest.raises(TrainingAbort):
        train_segmentation(TINY, bad, toy_items(1, 0), tmp_path / "diag.ckpt")
    assert (tmp_path / "diag.ckpt").exists()
