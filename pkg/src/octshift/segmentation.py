"""U-Net B-scan segmentation into background / IRC / SRF.

Training follows a fixed recipe: Kaiming init, Adam, unweighted per-pixel
NLL, step-halving learning rate, and retention of the epoch with the best
mean validation F1 over the two fluid classes.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import checkpoint as ckpt
from .errors import ConfigError, TrainingAbort
from .volume import FLUID_CLASSES, LabelMap, Volume

log = logging.getLogger(__name__)

N_CLASSES = 3


@dataclass(frozen=True)
class SegConfig:
    depth: int = 5
    base_channels: int = 64
    learning_rate: float = 1e-4
    lr_halving_period: int = 15
    epochs: int = 80
    batch_size: int = 8
    class_weights: tuple[float, float, float] | None = None
    bn_momentum: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.base_channels < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("base_channels, epochs and batch_size must be >= 1")
        if self.lr_halving_period < 1:
            raise ConfigError("lr_halving_period must be >= 1")
        if self.class_weights is not None and len(self.class_weights) != N_CLASSES:
            raise ConfigError("class_weights needs one weight per class")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2**i for i in range(self.depth))

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)

    def check_input(self, rows: int, cols: int) -> None:
        if rows % self.divisor or cols % self.divisor:
            raise ConfigError(f"input {rows}x{cols} not divisible by {self.divisor} for depth {self.depth}")

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


def learning_rate_at(cfg: SegConfig, epoch: int) -> float:
    """Learning rate for 1-based `epoch`."""
    return cfg.learning_rate * 0.5 ** ((epoch - 1) // cfg.lr_halving_period)


def conv_block(cin: int, cout: int, momentum: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.BatchNorm2d(cout, momentum=momentum),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.BatchNorm2d(cout, momentum=momentum),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    def __init__(self, cfg: SegConfig):
        super().__init__()
        self.cfg = cfg
        self.descriptor = {"kind": "unet", "depth": cfg.depth, "base_channels": cfg.base_channels}
        chans = cfg.channels
        self.encoders = nn.ModuleList()
        cin = 1
        for c in chans:
            self.encoders.append(conv_block(cin, c, cfg.bn_momentum))
            cin = c
        self.decoders = nn.ModuleList(
            conv_block(chans[i + 1] + chans[i], chans[i], cfg.bn_momentum) for i in reversed(range(cfg.depth - 1))
        )
        self.head = nn.Conv2d(chans[0], N_CLASSES, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(N, 1, H, W) in [0, 1] -> (N, 3, H, W) log-probabilities."""
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x if i == 0 else F.max_pool2d(x, 2))
            skips.append(x)
        x = skips.pop()
        for dec in self.decoders:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = dec(torch.cat([x, skips.pop()], dim=1))
        return F.log_softmax(self.head(x), dim=1)


def _kaiming(m: nn.Module) -> None:
    if isinstance(m, nn.Conv2d):
        nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
        if m.bias is not None:
            nn.init.zeros_(m.bias)


def build_unet(cfg: SegConfig, input_shape: tuple[int, int] | None = None) -> UNet:
    if input_shape is not None:
        cfg.check_input(*input_shape)
    torch.manual_seed(cfg.seed)
    net = UNet(cfg)
    net.apply(_kaiming)
    return net


@dataclass
class SegModel:
    net: UNet
    selected_epoch: int = 0
    validation_f1: float = 0.0
    f1_trace: list[float] = field(default_factory=list)
    loss_trace: list[float] = field(default_factory=list)

    @property
    def cfg(self) -> SegConfig:
        return self.net.cfg

    def save(self, path: str | Path, extra: dict[str, Any] | None = None) -> None:
        meta = {
            "architecture": self.net.descriptor,
            "config": self.cfg.to_json(),
            "config_fingerprint": ckpt.fingerprint(self.cfg.to_json()),
            "selected_epoch": self.selected_epoch,
            "validation_f1": self.validation_f1,
            "f1_trace": self.f1_trace,
            "loss_trace": self.loss_trace,
            "seed": self.cfg.seed,
        }
        meta.update(extra or {})
        ckpt.save_module(path, ckpt.SEG_MAGIC, self.net, meta)

    @classmethod
    def load(cls, path: str | Path) -> "SegModel":
        meta, arrays = ckpt.read(path, ckpt.SEG_MAGIC)
        cfg_doc = dict(meta["config"])
        if cfg_doc.get("class_weights") is not None:
            cfg_doc["class_weights"] = tuple(cfg_doc["class_weights"])
        net = UNet(SegConfig(**cfg_doc))
        ckpt.load_state(net, arrays)
        net.eval()
        return cls(net, meta["selected_epoch"], meta["validation_f1"], meta["f1_trace"], meta["loss_trace"])


# --------------------------------------------------------------------------
# metrics used for model selection


def confusion_counts(pred: np.ndarray, gt: np.ndarray, cls: int) -> tuple[int, int, int]:
    p, g = pred == cls, gt == cls
    return int(np.sum(p & g)), int(np.sum(p & ~g)), int(np.sum(~p & g))


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def mean_fluid_f1(preds: Iterable[np.ndarray], gts: Iterable[np.ndarray]) -> float:
    """Per-class pixel-aggregate F1 for IRC and SRF, then their unweighted mean."""
    totals = {c: [0, 0, 0] for c in FLUID_CLASSES}
    for p, g in zip(preds, gts):
        for c in FLUID_CLASSES:
            for i, v in enumerate(confusion_counts(p, g, c)):
                totals[c][i] += v
    return float(np.mean([f1_from_counts(*totals[c]) for c in FLUID_CLASSES]))


# --------------------------------------------------------------------------
# inference


@torch.no_grad()
def log_probs(net: UNet, images: Sequence[np.ndarray], batch: int = 8) -> list[np.ndarray]:
    """(3, H, W) log-probabilities per image; reflect-pads to the depth divisor and crops back."""
    net.eval()
    m = net.cfg.divisor
    out = []
    for i in range(0, len(images), batch):
        chunk = images[i : i + batch]
        h, w = chunk[0].shape
        x = torch.from_numpy(np.stack([np.asarray(c, dtype=np.float32) for c in chunk]))[:, None]
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="reflect")
        y = net(x)[:, :, :h, :w].numpy()
        out.extend(y)
    return out


def argmax_lowest(logp: np.ndarray) -> np.ndarray:
    """Class argmax over axis 0; ties resolve to the lowest class id."""
    return np.argmax(logp, axis=0).astype(np.uint8)


def predict_bscans(model: SegModel | UNet, images: Sequence[np.ndarray]) -> list[np.ndarray]:
    net = model.net if isinstance(model, SegModel) else model
    return [argmax_lowest(lp) for lp in log_probs(net, images)]


def predict(model: SegModel | UNet, vol: Volume) -> LabelMap:
    slices = predict_bscans(model, [vol.voxels[:, :, k] for k in range(vol.n_slices)])
    return LabelMap(np.stack(slices, axis=2), vol.volume_id)


def validation_f1(model: SegModel | UNet, validation: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    if not validation:
        raise ValueError("validation set is empty")
    images = [img for img, _ in validation]
    return mean_fluid_f1(predict_bscans(model, images), [lab for _, lab in validation])


# --------------------------------------------------------------------------
# training


def train_segmentation(
    cfg: SegConfig,
    train: Sequence[tuple[np.ndarray, np.ndarray]],
    validation: Sequence[tuple[np.ndarray, np.ndarray]],
    diagnostic_path: str | Path | None = None,
) -> SegModel:
    if not train:
        raise ConfigError("segmentation training set is empty")
    cfg.check_input(*train[0][0].shape)
    x_all = torch.from_numpy(np.stack([np.asarray(i, dtype=np.float32) for i, _ in train]))[:, None]
    y_all = torch.from_numpy(np.stack([np.asarray(l, dtype=np.int64) for _, l in train]))
    present = set(np.unique(y_all.numpy()).tolist())
    for c in range(N_CLASSES):
        if c not in present:
            log.warning("class %d absent from segmentation training data", c)

    net = build_unet(cfg)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    weight = torch.tensor(cfg.class_weights, dtype=torch.float32) if cfg.class_weights else None
    gen = torch.Generator().manual_seed(cfg.seed)

    model = SegModel(net)
    best_state, best_f1 = None, -1.0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        for group in opt.param_groups:
            group["lr"] = learning_rate_at(cfg, epoch)
        net.train()
        order = torch.randperm(len(x_all), generator=gen)
        total, n = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            if len(idx) < 2 and len(order) > 1:
                continue  # batch-norm needs more than one sample
            loss = F.nll_loss(net(x_all[idx]), y_all[idx], weight=weight)
            if not math.isfinite(loss.item()):
                if diagnostic_path is not None:
                    model.save(diagnostic_path, {"aborted_epoch": epoch})
                raise TrainingAbort(f"non-finite segmentation loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            n += len(idx)
        f1 = validation_f1(net, validation)
        model.f1_trace.append(f1)
        model.loss_trace.append(total / max(n, 1))
        if f1 > best_f1:
            best_f1, best_state = f1, copy.deepcopy(net.state_dict())
            model.selected_epoch, model.validation_f1 = epoch, f1
        log.info("seg epoch %d/%d %.1fs loss=%.4f valF1=%.4f", epoch, cfg.epochs, time.perf_counter() - t0, model.loss_trace[-1], f1)
    net.load_state_dict(best_state)
    net.eval()
    return model
