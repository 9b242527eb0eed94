"""Seeded synthetic two-domain OCT phantoms with IRC/SRF ground truth.

Randomness comes exclusively from numpy's PCG64 bit generator. Per-patient
streams are derived as ``SeedSequence([seed, 0, patient_index])`` and the
split stream as ``SeedSequence([seed, 1])``, so every patient can be
generated independently and in any order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import Dataset, split_patients
from .errors import ConfigError, GenerationError
from .volume import IRC, SRF, Domain, LabelMap, SplitManifest, Volume

VITREOUS = 0.04
FLUID = 0.06
RPE = 0.92
# base reflectivity of retinal bands, cycled if n_layers exceeds its length
BAND_LEVELS = (0.72, 0.42, 0.62, 0.5, 0.68, 0.38)

MAX_PLACEMENT_TRIES = 200


@dataclass(frozen=True)
class PhantomParams:
    shape: tuple[int, int, int] = (128, 128, 8)
    n_layers: int = 4
    fluid_counts: tuple[float, float] = (5.0, 1.5)
    source_noise_sigma: float = 0.02
    target_speckle_sigma: float = 0.3
    source_gamma: float = 1.0
    target_gamma: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "fluid_counts", tuple(float(c) for c in self.fluid_counts))
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ConfigError(f"phantom shape must be three sizes >= 1, got {self.shape}")
        if self.shape[0] < 32 or self.shape[1] < 8:
            raise ConfigError("phantom B-scans need at least 32 rows and 8 columns")
        if self.n_layers < 2:
            raise ConfigError("n_layers must be >= 2")
        if min(self.fluid_counts) < 0:
            raise ConfigError("fluid_counts must be >= 0")
        if self.source_noise_sigma < 0 or self.target_speckle_sigma < 0:
            raise ConfigError("noise scales must be >= 0")
        if self.source_gamma <= 0 or self.target_gamma <= 0:
            raise ConfigError("gammas must be > 0")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Anatomy:
    clean: np.ndarray  # (rows, cols, slices) float64 in [0, 1]
    labels: LabelMap
    # boundaries[k, col, slice] = row position of interface k, top to bottom
    boundaries: np.ndarray = field(repr=False)

    def __iter__(self):
        return iter((self.clean, self.labels))


def patient_rng(seed: int, patient_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0, patient_index])))


def split_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))


def _smooth_field(rng: np.random.Generator, cols: int, slices: int, amp: float, n_terms: int = 3) -> np.ndarray:
    """Sum of low-frequency sinusoids over the (col, slice) plane."""
    x = np.arange(cols)[:, None] / max(cols, 1)
    z = np.arange(slices)[None, :] / max(slices, 1)
    out = np.zeros((cols, slices))
    for _ in range(n_terms):
        fx, fz = rng.uniform(0.3, 1.5), rng.uniform(0.0, 0.6)
        phase = rng.uniform(0, 2 * np.pi)
        a = rng.uniform(0.3, 1.0) * amp / n_terms
        out += a * np.sin(2 * np.pi * (fx * x + fz * z) + phase)
    return out


def _boundaries(params: PhantomParams, rng: np.random.Generator) -> np.ndarray:
    rows, cols, slices = params.shape
    top = rows * rng.uniform(0.22, 0.28) + _smooth_field(rng, cols, slices, amp=0.06 * rows)
    total = rows * rng.uniform(0.42, 0.48)
    weights = rng.uniform(0.8, 1.2, size=params.n_layers)
    weights /= weights.sum()
    b = [top]
    for w in weights:
        thick = total * w * (1.0 + _smooth_field(rng, cols, slices, amp=0.3))
        b.append(b[-1] + np.maximum(thick, 3.0))
    return np.stack(b)


def generate_anatomy(params: PhantomParams, rng: np.random.Generator) -> Anatomy:
    rows, cols, slices = params.shape
    bnd = _boundaries(params, rng)
    r = np.arange(rows, dtype=np.float64)[:, None, None]

    clean = np.full(params.shape, VITREOUS)
    for k in range(params.n_layers):
        inside = (r >= bnd[k][None]) & (r < bnd[k + 1][None])
        clean[inside] = BAND_LEVELS[k % len(BAND_LEVELS)]
    last = bnd[-1][None]
    rpe_thick = max(2.0, rows / 40)
    clean[(r >= last) & (r < last + rpe_thick)] = RPE
    below = r >= last + rpe_thick
    depth = (r - last - rpe_thick) / rows
    choroid = np.clip(0.5 - 1.2 * depth, 0.12, 0.5)
    clean = np.where(below, choroid, clean)

    labels = np.zeros(params.shape, dtype=np.uint8)
    n_irc = rng.poisson(params.fluid_counts[0])
    n_srf = rng.poisson(params.fluid_counts[1])
    rr, cc, zz = np.meshgrid(
        np.arange(rows), np.arange(cols), np.arange(slices), indexing="ij", sparse=True
    )

    # IRC: dark ellipsoids between the first and the deepest inner interface
    upper, lower = bnd[0][None] + 1.0, bnd[-2][None] - 1.0
    for blob in range(n_irc):
        for _ in range(MAX_PLACEMENT_TRIES):
            ar = rng.uniform(2.0, max(2.0, 0.05 * rows))
            ax = rng.uniform(3.0, max(3.0, 0.08 * cols))
            az = rng.uniform(0.5, 2.2)
            zc = int(rng.integers(0, slices))
            xc = int(rng.integers(0, cols))
            rc = int(rng.integers(0, rows))
            mask = ((rr - rc) / ar) ** 2 + ((cc - xc) / ax) ** 2 + ((zz - zc) / az) ** 2 <= 1.0
            if mask.any() and np.all((rr > upper) & (rr < lower) | ~mask):
                labels[mask] = IRC
                break
        else:
            raise GenerationError(
                f"could not place IRC blob {blob} after {MAX_PLACEMENT_TRIES} tries (seed {params.seed})"
            )

    # SRF: lenses hanging directly beneath the deepest inner interface
    roof, floor = bnd[-2], bnd[-1] - 1.0
    x = np.arange(cols)[:, None]
    z = np.arange(slices)[None, :]
    for blob in range(n_srf):
        for _ in range(MAX_PLACEMENT_TRIES):
            ax = rng.uniform(0.06 * cols, 0.14 * cols)
            az = rng.uniform(0.8, 2.5)
            h = rng.uniform(3.0, max(3.0, 0.07 * rows))
            xc = rng.uniform(0, cols - 1)
            zc = int(rng.integers(0, slices))
            q = 1.0 - ((x - xc) / ax) ** 2 - ((z - zc) / az) ** 2
            thick = np.where(q > 0, h * np.sqrt(np.clip(q, 0, None)), 0.0)
            mask = (rr > roof[None]) & (rr <= roof[None] + thick[None]) & (rr < floor[None])
            if mask.any():
                labels[mask] = SRF
                break
        else:
            raise GenerationError(
                f"could not place SRF blob {blob} after {MAX_PLACEMENT_TRIES} tries (seed {params.seed})"
            )

    clean[labels > 0] = FLUID
    return Anatomy(clean=clean, labels=LabelMap(labels), boundaries=bnd)


def render_domain(
    clean: np.ndarray,
    domain: Domain | str,
    params: PhantomParams,
    rng: np.random.Generator,
    patient_id: str = "",
    volume_id: str = "",
) -> Volume:
    clean = np.asarray(clean, dtype=np.float64)
    if clean.min() < 0 or clean.max() > 1:
        raise ValueError("clean grid must lie in [0, 1]")
    domain = Domain.parse(domain)
    if domain is Domain.SOURCE:
        out = clean ** params.source_gamma
        if params.source_noise_sigma > 0:
            out = out + rng.normal(0.0, params.source_noise_sigma, size=clean.shape)
    else:
        out = clean ** params.target_gamma
        if params.target_speckle_sigma > 0:
            out = out * (1.0 + rng.normal(0.0, params.target_speckle_sigma, size=clean.shape))
    return Volume(
        np.clip(out, 0.0, 1.0).astype(np.float32),
        domain=domain,
        patient_id=patient_id,
        volume_id=volume_id,
    )


def patient_volumes(
    params: PhantomParams, patient_index: int, volumes_per_patient: int = 1
) -> list[tuple[Volume, LabelMap]]:
    """All volumes of one patient: each anatomy rendered once per domain."""
    rng = patient_rng(params.seed, patient_index)
    pid = f"p{patient_index:03d}"
    out = []
    for v in range(volumes_per_patient):
        anat = generate_anatomy(params, rng)
        for domain, tag in ((Domain.SOURCE, "src"), (Domain.TARGET, "tgt")):
            vid = f"{pid}-v{v}-{tag}"
            vol = render_domain(anat.clean, domain, params, rng, pid, vid)
            out.append((vol, LabelMap(anat.labels.labels, vid)))
    return out


def generate_dataset(
    n_patients: int,
    volumes_per_patient: int,
    params: PhantomParams,
    fractions: dict[str, float] | None = None,
) -> tuple[list[tuple[Volume, LabelMap]], SplitManifest]:
    if n_patients < 5:
        raise ConfigError("n_patients must be >= 5")
    if volumes_per_patient < 1:
        raise ConfigError("volumes_per_patient must be >= 1")
    fractions = fractions or {"train": 0.7, "validation": 0.1, "test": 0.2}
    pairs = []
    for p in range(n_patients):
        pairs.extend(patient_volumes(params, p, volumes_per_patient))
    patient_index = {vol.volume_id: vol.patient_id for vol, _ in pairs}
    pids = sorted(set(patient_index.values()))
    by_patient = split_patients(pids, fractions, split_rng(params.seed))
    partitions = {
        name: [vid for vid in sorted(patient_index) if patient_index[vid] in set(members)]
        for name, members in by_patient.items()
    }
    manifest = SplitManifest(partitions, patient_index, params.seed)
    manifest.validate(list(patient_index))
    return pairs, manifest


def as_dataset(pairs: list[tuple[Volume, LabelMap]], manifest: SplitManifest) -> Dataset:
    return Dataset(
        {vol.volume_id: vol for vol, _ in pairs},
        {vol.volume_id: lab for vol, lab in pairs},
        manifest,
    )
