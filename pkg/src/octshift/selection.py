"""Generator selection from a pool of per-epoch CycleGAN checkpoints.

Every generator translates the validation set; every discriminator of the
matching domain scores every translated set. A generator's score is its
worst (maximum) mean adversarial loss over the discriminator pool, and the
generator with the lowest score wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import SelectionError
from .gan import (
    CheckpointPool,
    Discriminator,
    Generator,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    translate_images,
)

# direction -> (generator role, discriminator role, domain of the generator's input)
DIRECTION_ROLES = {
    "target_to_source": ("G_bwd", "D_src", "target"),
    "source_to_target": ("G_fwd", "D_tgt", "source"),
}
LOSS_SIDES = ("generator", "discriminator")


@dataclass(frozen=True)
class SelectionScore:
    epoch: int
    losses: tuple[float, ...]  # mean adversarial loss under each discriminator epoch
    score: float

    def to_json(self) -> dict:
        return {"epoch": self.epoch, "losses": list(self.losses), "score": self.score}


def scores_from_matrix(L: Sequence[Sequence[float]], epochs: Sequence[int] | None = None) -> list[SelectionScore]:
    """Row-max scores of a loss matrix L[generator][discriminator]."""
    rows = [tuple(float(v) for v in row) for row in L]
    epochs = list(epochs) if epochs is not None else list(range(1, len(rows) + 1))
    # np.max propagates NaN where the builtin would silently skip it
    return [SelectionScore(e, row, float(np.max(row))) for e, row in zip(epochs, rows)]


def select_generator(scores: Sequence[SelectionScore]) -> int:
    """Epoch of the lowest score; ties go to the earliest epoch."""
    if not scores:
        raise SelectionError("no selection scores")
    if not all(math.isfinite(s.score) for s in scores):
        raise SelectionError("non-finite selection score")
    best = min(scores, key=lambda s: (s.score, s.epoch))
    return best.epoch


def _as_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))[None, None] * 2 - 1


@torch.no_grad()
def adversarial_loss_matrix(
    generators: Sequence[Generator],
    discriminators: Sequence[Discriminator],
    images: Sequence[np.ndarray],
    loss: str = "generator",
    reals: Sequence[np.ndarray] | None = None,
) -> np.ndarray:
    """L[e][j]: mean over `images` of discriminator j's adversarial loss on generator e's output.

    ``loss="generator"`` uses mean (D(G(x)) - 1)^2. ``loss="discriminator"``
    uses the discriminator objective and needs `reals` from the output domain.
    """
    if not images:
        raise SelectionError("validation set is empty")
    if loss not in LOSS_SIDES:
        raise SelectionError(f"unknown selection loss {loss!r}")
    if loss == "discriminator" and not reals:
        raise SelectionError("discriminator-side selection needs real output-domain images")
    for D in discriminators:
        D.eval()
    real_scores = None
    if loss == "discriminator":
        real_scores = [[D(_as_tensor(r)) for r in reals] for D in discriminators]  # type: ignore[union-attr]
    L = np.zeros((len(generators), len(discriminators)))
    for e, G in enumerate(generators):
        fakes = [_as_tensor(y) for y in translate_images(G, images)]
        for j, D in enumerate(discriminators):
            if loss == "generator":
                vals = [float(lsgan_generator_loss(D(f))) for f in fakes]
            else:
                reals_j = real_scores[j]  # type: ignore[index]
                vals = [
                    float(lsgan_discriminator_loss(reals_j[i % len(reals_j)], D(f))) for i, f in enumerate(fakes)
                ]
            L[e, j] = float(np.mean(vals))
    return L


def score_generators(
    pool: CheckpointPool,
    validation_bscans: Sequence[np.ndarray],
    direction: str = "target_to_source",
    loss: str = "generator",
    reals: Sequence[np.ndarray] | None = None,
) -> list[SelectionScore]:
    """Score every generator epoch of `pool` in one translation direction.

    `validation_bscans` come from the generator's input domain (target-domain
    images for ``target_to_source``); `reals` from its output domain are only
    needed for discriminator-side scoring.
    """
    if direction not in DIRECTION_ROLES:
        raise SelectionError(f"unknown direction {direction!r}")
    if len(pool) == 0:
        raise SelectionError("checkpoint pool is empty")
    g_role, d_role, _ = DIRECTION_ROLES[direction]
    discriminators = [pool.load(e, d_role) for e in pool.epochs]
    L = np.zeros((len(pool.epochs), len(pool.epochs)))
    for i, e in enumerate(pool.epochs):
        L[i] = adversarial_loss_matrix([pool.load(e, g_role)], discriminators, validation_bscans, loss, reals)[0]
    return scores_from_matrix(L, pool.epochs)
