"""CycleGAN translation between the source and target domains.

Networks see intensities in [-1, 1]; every public entry point takes and
returns [0, 1] images. ``G_fwd`` maps source -> target and ``G_bwd`` maps
target -> source; ``D_src`` / ``D_tgt`` judge realism in their own domain.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .errors import ConfigError, TrainingAbort
from .volume import Volume

log = logging.getLogger(__name__)

PATCH_SIZES = (64, 128, 256, 460)
NETWORKS = ("G_fwd", "G_bwd", "D_src", "D_tgt")
DIRECTIONS = {"G_fwd": "source_to_target", "G_bwd": "target_to_source"}


@dataclass(frozen=True)
class GanConfig:
    patch_size: int = 64
    epochs: int = 20
    batch_size: int = 1
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_cyc: float = 10.0
    lambda_id: float = 5.0
    residual_blocks: int | None = None  # None: 6 for patch <= 128, else 9
    ngf: int = 64
    ndf: int = 64
    steps_per_epoch: int | None = None  # None: one step per training B-scan
    seed: int = 0

    def __post_init__(self) -> None:
        if self.patch_size not in PATCH_SIZES:
            raise ConfigError(f"patch_size must be one of {PATCH_SIZES}, got {self.patch_size}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.ngf < 1 or self.ndf < 1:
            raise ConfigError("ngf and ndf must be >= 1")

    @property
    def n_residual(self) -> int:
        if self.residual_blocks is not None:
            return self.residual_blocks
        return 6 if self.patch_size <= 128 else 9

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    def fingerprint(self) -> str:
        return ckpt.fingerprint(self.to_json())


# --------------------------------------------------------------------------
# networks


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3),
            nn.InstanceNorm2d(ch),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3),
            nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Residual translator: 7x7 stem, two stride-2 downs, N residual blocks, two ups, 7x7 tanh head."""

    def __init__(self, ngf: int = 64, n_residual: int = 9, direction: str = "", epoch: int = 0):
        super().__init__()
        self.descriptor = {"kind": "resnet_generator", "ngf": ngf, "n_residual": n_residual}
        self.direction = direction
        self.epoch = epoch
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(1, ngf, 7),
            nn.InstanceNorm2d(ngf),
            nn.ReLU(inplace=True),
        ]
        ch = ngf
        for _ in range(2):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), nn.InstanceNorm2d(ch * 2), nn.ReLU(inplace=True)]
            ch *= 2
        layers += [ResidualBlock(ch) for _ in range(n_residual)]
        for _ in range(2):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(ch // 2),
                nn.ReLU(inplace=True),
            ]
            ch //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ch, 1, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        """[-1, 1] -> [-1, 1]."""
        return self.model(x)

    def translate(self, x01: torch.Tensor) -> torch.Tensor:
        return (self.model(x01 * 2 - 1) + 1) / 2


class Discriminator(nn.Module):
    """70x70 PatchGAN: three stride-2 blocks, one stride-1 block, 1-channel score head."""

    def __init__(self, ndf: int = 64, epoch: int = 0, domain: str = ""):
        super().__init__()
        self.descriptor = {"kind": "patchgan", "ndf": ndf, "n_layers": 3}
        self.epoch = epoch
        self.domain = domain
        layers: list[nn.Module] = [nn.Conv2d(1, ndf, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        ch = ndf
        for stride in (2, 2, 1):
            layers += [
                nn.Conv2d(ch, min(ch * 2, ndf * 8), 4, stride=stride, padding=1),
                nn.InstanceNorm2d(min(ch * 2, ndf * 8)),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch = min(ch * 2, ndf * 8)
        layers.append(nn.Conv2d(ch, 1, 4, stride=1, padding=1))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        """[-1, 1] image -> unbounded score map."""
        return self.model(x)

    @staticmethod
    def output_size(size: int) -> int:
        for _ in range(3):
            size = (size + 2 - 4) // 2 + 1
        for _ in range(2):
            size = size + 2 - 4 + 1
        return size


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(m.weight, 0.0, 0.02)
        nn.init.zeros_(m.bias)


def build_generator(cfg: GanConfig, direction: str = "target_to_source") -> Generator:
    g = Generator(cfg.ngf, cfg.n_residual, direction)
    g.apply(_init_weights)
    return g


def build_discriminator(cfg: GanConfig, domain: str = "source") -> Discriminator:
    d = Discriminator(cfg.ndf, domain=domain)
    d.apply(_init_weights)
    return d


# --------------------------------------------------------------------------
# losses


def lsgan_generator_loss(score: torch.Tensor) -> torch.Tensor:
    return ((score - 1) ** 2).mean()


def lsgan_discriminator_loss(real_score: torch.Tensor, fake_score: torch.Tensor) -> torch.Tensor:
    return 0.5 * ((real_score - 1) ** 2).mean() + 0.5 * (fake_score**2).mean()


def gan_losses(
    G_fwd: nn.Module,
    G_bwd: nn.Module,
    D_src: nn.Module,
    D_tgt: nn.Module,
    x_src: torch.Tensor,
    x_tgt: torch.Tensor,
    lambda_cyc: float = 10.0,
    lambda_id: float = 5.0,
) -> dict[str, torch.Tensor]:
    """All CycleGAN loss terms for one batch of [0, 1] images.

    Discriminator terms see detached fakes, so backpropagating
    ``generator_total`` never updates a discriminator's objective.
    """
    real_s, real_t = x_src * 2 - 1, x_tgt * 2 - 1
    fake_t = G_fwd(real_s)
    fake_s = G_bwd(real_t)
    adv_fwd = lsgan_generator_loss(D_tgt(fake_t))
    adv_bwd = lsgan_generator_loss(D_src(fake_s))
    cyc = (G_bwd(fake_t) - real_s).abs().mean() + (G_fwd(fake_s) - real_t).abs().mean()
    idt = (G_fwd(real_t) - real_t).abs().mean() + (G_bwd(real_s) - real_s).abs().mean()
    adv = adv_fwd + adv_bwd
    return {
        "adv_fwd": adv_fwd,
        "adv_bwd": adv_bwd,
        "adversarial": adv,
        "cycle": cyc,
        "identity": idt,
        "generator_total": adv + lambda_cyc * cyc + lambda_id * idt,
        "D_tgt": lsgan_discriminator_loss(D_tgt(real_t), D_tgt(fake_t.detach())),
        "D_src": lsgan_discriminator_loss(D_src(real_s), D_src(fake_s.detach())),
    }


# --------------------------------------------------------------------------
# checkpoint pool


@dataclass
class CheckpointPool:
    root: Path
    epochs: list[int] = field(default_factory=list)
    history: list[dict[str, float]] = field(default_factory=list)

    def path(self, epoch: int, net: str) -> Path:
        return self.root / f"epoch_{epoch:03d}" / f"{net}.ckpt"

    def load(self, epoch: int, net: str) -> nn.Module:
        return load_gan_network(self.path(epoch, net))

    def __len__(self) -> int:
        return len(self.epochs)

    def save_index(self) -> None:
        doc = {"epochs": self.epochs, "history": self.history, "networks": list(NETWORKS)}
        from .volume import atomic_write_bytes

        atomic_write_bytes(self.root / "pool.json", json.dumps(doc, indent=1, sort_keys=True).encode())

    @classmethod
    def open(cls, root: str | Path) -> "CheckpointPool":
        root = Path(root)
        doc = json.loads((root / "pool.json").read_text())
        return cls(root, list(doc["epochs"]), list(doc.get("history", [])))


def save_gan_network(path: Path, net: nn.Module, role: str, epoch: int, cfg: GanConfig) -> None:
    meta = {
        "role": role,
        "architecture": net.descriptor,
        "epoch": epoch,
        "config_fingerprint": cfg.fingerprint(),
        "seed": cfg.seed,
    }
    if role in DIRECTIONS:
        meta["direction"] = DIRECTIONS[role]
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save_module(path, ckpt.GAN_MAGIC, net, meta)


def load_gan_network(path: str | Path) -> nn.Module:
    meta, arrays = ckpt.read(path, ckpt.GAN_MAGIC)
    arch = meta["architecture"]
    if arch["kind"] == "resnet_generator":
        net: nn.Module = Generator(arch["ngf"], arch["n_residual"], meta.get("direction", ""), meta["epoch"])
    elif arch["kind"] == "patchgan":
        net = Discriminator(arch["ndf"], meta["epoch"], meta.get("role", ""))
    else:
        raise ckpt.FormatError(f"{path}: unknown architecture {arch['kind']!r}")
    ckpt.load_state(net, arrays)
    net.checkpoint_meta = dict(meta, path=str(path))  # type: ignore[attr-defined]
    net.eval()
    return net


# --------------------------------------------------------------------------
# training


def _sample_patches(
    images: Sequence[np.ndarray], n: int, size: int, rng: np.random.Generator
) -> torch.Tensor:
    out = np.empty((n, 1, size, size), dtype=np.float32)
    for b in range(n):
        img = images[int(rng.integers(len(images)))]
        r = int(rng.integers(img.shape[0] - size + 1))
        c = int(rng.integers(img.shape[1] - size + 1))
        out[b, 0] = img[r : r + size, c : c + size]
    return torch.from_numpy(out)


def train_cyclegan(
    cfg: GanConfig,
    source_bscans: Sequence[np.ndarray],
    target_bscans: Sequence[np.ndarray],
    out_dir: str | Path,
    progress: Callable[[int, dict[str, float]], None] | None = None,
) -> CheckpointPool:
    """Train both generator/discriminator pairs and store all four networks every epoch."""
    if not source_bscans or not target_bscans:
        raise ConfigError("CycleGAN training needs B-scans from both domains")
    for img in list(source_bscans[:1]) + list(target_bscans[:1]):
        if min(img.shape) < cfg.patch_size:
            raise ConfigError(f"patch_size {cfg.patch_size} exceeds B-scan size {img.shape}")

    torch.manual_seed(cfg.seed)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 2])))
    G_fwd = build_generator(cfg, "source_to_target")
    G_bwd = build_generator(cfg, "target_to_source")
    D_src, D_tgt = build_discriminator(cfg, "source"), build_discriminator(cfg, "target")
    nets = dict(zip(NETWORKS, (G_fwd, G_bwd, D_src, D_tgt)))
    betas = (cfg.beta1, cfg.beta2)
    opt_G = torch.optim.Adam(list(G_fwd.parameters()) + list(G_bwd.parameters()), cfg.learning_rate, betas=betas)
    opt_D = torch.optim.Adam(list(D_src.parameters()) + list(D_tgt.parameters()), cfg.learning_rate, betas=betas)

    steps = cfg.steps_per_epoch or max(len(source_bscans), len(target_bscans))
    pool = CheckpointPool(Path(out_dir))
    pool.root.mkdir(parents=True, exist_ok=True)
    for net in nets.values():
        net.train()

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        step_losses: list[float] = []
        sums: dict[str, float] = {}
        for _ in range(steps):
            x_s = _sample_patches(source_bscans, cfg.batch_size, cfg.patch_size, rng)
            x_t = _sample_patches(target_bscans, cfg.batch_size, cfg.patch_size, rng)
            losses = gan_losses(G_fwd, G_bwd, D_src, D_tgt, x_s, x_t, cfg.lambda_cyc, cfg.lambda_id)
            values = {k: float(v.detach()) for k, v in losses.items()}
            if not all(math.isfinite(v) for v in values.values()):
                diag = pool.root / "diagnostic"
                for name, net in nets.items():
                    save_gan_network(diag / f"{name}.ckpt", net, name, epoch, cfg)
                raise TrainingAbort(f"non-finite CycleGAN loss at epoch {epoch}: {values}; state saved to {diag}")
            opt_G.zero_grad(set_to_none=True)
            losses["generator_total"].backward()
            opt_G.step()
            opt_D.zero_grad(set_to_none=True)
            (losses["D_src"] + losses["D_tgt"]).backward()
            opt_D.step()
            step_losses.append(values["generator_total"])
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v

        for name, net in nets.items():
            save_gan_network(pool.path(epoch, name), net, name, epoch, cfg)
        record = {k: v / steps for k, v in sums.items()}
        record["epoch"] = epoch
        record["generator_total_last50"] = float(np.mean(step_losses[-50:]))
        pool.epochs.append(epoch)
        pool.history.append(record)
        pool.save_index()
        log.info("cyclegan epoch %d/%d %.1fs G=%.4f", epoch, cfg.epochs, time.perf_counter() - t0, record["generator_total"])
        if progress is not None:
            progress(epoch, record)
    return pool


# --------------------------------------------------------------------------
# inference


def _pad_to_multiple(x: torch.Tensor, m: int) -> tuple[torch.Tensor, tuple[int, int]]:
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        x = nn.functional.pad(x, (0, pw, 0, ph), mode="reflect")
    return x, (h, w)


@torch.no_grad()
def translate_images(G: Generator, images: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Full-image inference on 2D [0, 1] arrays; output clamped to [0, 1]."""
    G.eval()
    out = []
    for img in images:
        x = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))[None, None]
        x, (h, w) = _pad_to_multiple(x, 4)
        y = G.translate(x)[0, 0, :h, :w].clamp(0.0, 1.0)
        out.append(y.numpy())
    return out


def apply_generator(G: Generator, vol: Volume) -> Volume:
    slices = translate_images(G, [vol.voxels[:, :, k] for k in range(vol.n_slices)])
    meta = getattr(G, "checkpoint_meta", {})
    prov = {
        "method": "cgan",
        "direction": G.direction,
        "epoch": meta.get("epoch", G.epoch),
        "checkpoint": meta.get("path", ""),
        "config_fingerprint": meta.get("config_fingerprint", ""),
    }
    return vol.with_voxels(np.stack(slices, axis=2), transform=prov)
