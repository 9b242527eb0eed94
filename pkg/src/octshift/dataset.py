"""On-disk dataset directories: volumes, optional labels and a split manifest.

Layout::

    <dir>/manifest.json
    <dir>/volumes/<volume_id>.octvol
    <dir>/labels/<volume_id>.octlab
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError
from .volume import (
    Domain,
    LabelMap,
    SplitManifest,
    Volume,
    load_labels,
    load_volume,
    save_labels,
    save_volume,
)


@dataclass
class Dataset:
    volumes: dict[str, Volume]
    labels: dict[str, LabelMap] = field(default_factory=dict)
    manifest: SplitManifest | None = None

    def __post_init__(self) -> None:
        for vid, lab in self.labels.items():
            lab.check_pair(self.volumes[vid])

    def ids(self, partition: str | None = None, domain: Domain | str | None = None) -> list[str]:
        if partition is None:
            vids = sorted(self.volumes)
        else:
            if self.manifest is None:
                raise DataError("dataset has no split manifest")
            vids = list(self.manifest.partitions.get(partition, []))
        if domain is not None:
            dom = Domain.parse(domain)
            vids = [v for v in vids if self.volumes[v].domain is dom]
        return vids

    def subset(self, vids: list[str]) -> "Dataset":
        return Dataset(
            {v: self.volumes[v] for v in vids},
            {v: self.labels[v] for v in vids if v in self.labels},
            None,
        )

    def bscans(self, vids: list[str]) -> list[np.ndarray]:
        return [self.volumes[v].voxels[:, :, k] for v in vids for k in range(self.volumes[v].n_slices)]

    def labelled_bscans(self, vids: list[str]) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for v in vids:
            vol, lab = self.volumes[v], self.labels[v]
            for k in range(vol.n_slices):
                yield vol.voxels[:, :, k], lab.labels[:, :, k]


def volume_path(root: str | os.PathLike, vid: str) -> Path:
    return Path(root) / "volumes" / f"{vid}.octvol"


def label_path(root: str | os.PathLike, vid: str) -> Path:
    return Path(root) / "labels" / f"{vid}.octlab"


def save_dataset(ds: Dataset, root: str | os.PathLike) -> list[Path]:
    root = Path(root)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    written = []
    for vid, vol in sorted(ds.volumes.items()):
        p = volume_path(root, vid)
        save_volume(vol, p)
        written.append(p)
    if ds.labels:
        (root / "labels").mkdir(exist_ok=True)
        for vid, lab in sorted(ds.labels.items()):
            p = label_path(root, vid)
            save_labels(lab, p)
            written.append(p)
    if ds.manifest is not None:
        ds.manifest.save(root / "manifest.json")
        written.append(root / "manifest.json")
    return written


def load_dataset(root: str | os.PathLike, require_labels: bool = False) -> Dataset:
    root = Path(root)
    vdir = root / "volumes"
    if not vdir.is_dir():
        raise DataError(f"{root}: no volumes/ directory")
    volumes = {}
    for p in sorted(vdir.glob("*.octvol")):
        vol = load_volume(p)
        volumes[vol.volume_id or p.stem] = vol
    labels = {}
    for vid in volumes:
        lp = label_path(root, vid)
        if lp.exists():
            labels[vid] = load_labels(lp)
        elif require_labels:
            raise DataError(f"{root}: missing labels for {vid!r}")
    manifest = None
    if (root / "manifest.json").exists():
        manifest = SplitManifest.load(root / "manifest.json")
        manifest.validate(list(volumes))
    return Dataset(volumes, labels, manifest)


def largest_remainder(n: int, fractions: dict[str, float]) -> dict[str, int]:
    """Apportion `n` items to named fractions by the largest-remainder rule.

    Ties in the remainder go to the partition listed first.
    """
    from fractions import Fraction

    if not fractions:
        raise ConfigError("no split fractions given")
    if any(f < 0 for f in fractions.values()) or abs(sum(fractions.values()) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be >= 0 and sum to 1, got {fractions}")
    exact = {k: Fraction(f).limit_denominator(10**6) * n for k, f in fractions.items()}
    counts = {k: int(q) for k, q in exact.items()}
    order = sorted(fractions, key=lambda k: (-(exact[k] - counts[k]), list(fractions).index(k)))
    for k in order[: n - sum(counts.values())]:
        counts[k] += 1
    return counts


def split_patients(
    patient_ids: list[str], fractions: dict[str, float], rng: np.random.Generator
) -> dict[str, list[str]]:
    """Shuffle patients once, then cut consecutive runs by largest-remainder counts."""
    counts = largest_remainder(len(patient_ids), fractions)
    order = [patient_ids[i] for i in rng.permutation(len(patient_ids))]
    out, start = {}, 0
    for name in fractions:
        out[name] = sorted(order[start : start + counts[name]])
        start += counts[name]
    return out
