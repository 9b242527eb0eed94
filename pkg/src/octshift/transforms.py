"""Baseline harmonization: median filtering (T1) and histogram matching + T1 (T2)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .dataset import Dataset
from .errors import DataError
from .volume import Domain, Volume


@dataclass(frozen=True)
class TemplateRef:
    volume_id: str
    selection_seed: int
    cdf_bins: int = 256

    def to_json(self) -> dict:
        return asdict(self)


def median2d(image: np.ndarray, k: int = 3) -> np.ndarray:
    """k x k median with edge-replicated borders."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"median kernel size must be odd and >= 1, got {k}")
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("median2d expects a 2D image")
    return ndimage.median_filter(image, size=k, mode="nearest")


def median_axial(vol: Volume) -> Volume:
    """Median of each voxel and its two neighbors along the B-scan axis."""
    out = ndimage.median_filter(vol.voxels, size=(1, 1, 3), mode="nearest")
    return vol.with_voxels(out)


def _bin_index(values: np.ndarray, bins: int) -> np.ndarray:
    return np.minimum((np.asarray(values, dtype=np.float64) * bins).astype(np.int64), bins - 1)


def histogram_map(source: np.ndarray, template: np.ndarray, bins: int = 256) -> np.ndarray:
    """Lookup table (one entry per bin of `source`) of the matched output value.

    For a value in bin b the output is Q_t(F_s(b)): F_s is the binned CDF of
    `source`, Q_t the left-continuous quantile of the binned template CDF, and
    each template bin is represented by the mean of the template values in it.
    CDF comparisons use integer counts, so there is no rounding slack.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    s_idx = _bin_index(source, bins).ravel()
    t_idx = _bin_index(template, bins).ravel()
    if s_idx.size == 0 or t_idx.size == 0:
        raise ValueError("histogram matching needs nonempty inputs")
    cdf_s = np.cumsum(np.bincount(s_idx, minlength=bins))
    t_counts = np.bincount(t_idx, minlength=bins)
    cdf_t = np.cumsum(t_counts)
    t_sums = np.bincount(t_idx, weights=np.asarray(template, dtype=np.float64).ravel(), minlength=bins)
    t_means = np.divide(t_sums, t_counts, out=np.zeros(bins), where=t_counts > 0)
    # smallest template bin j with cdf_t[j] / n_t >= cdf_s[b] / n_s
    j = np.searchsorted(cdf_t * s_idx.size, cdf_s * t_idx.size, side="left")
    return t_means[np.minimum(j, bins - 1)]


def histogram_match(vol: Volume, template: Volume, bins: int = 256) -> Volume:
    lut = histogram_map(vol.voxels, template.voxels, bins)
    out = lut[_bin_index(vol.voxels, bins)]
    return vol.with_voxels(np.clip(out, 0.0, 1.0).astype(np.float32))


def transform_t1(vol: Volume, k: int = 3) -> Volume:
    filtered = np.stack([median2d(vol.voxels[:, :, s], k) for s in range(vol.n_slices)], axis=2)
    out = median_axial(vol.with_voxels(filtered))
    return out.with_voxels(out.voxels, transform={"method": "t1", "median_kernel": k})


def choose_template(ds: Dataset, seed: int, bins: int = 256, partition: str = "train") -> TemplateRef:
    """Seeded uniform draw of one source-domain volume from `partition`."""
    candidates = sorted(ds.ids(partition, Domain.SOURCE))
    if not candidates:
        raise DataError(f"no source-domain volumes in partition {partition!r} to use as template")
    rng = np.random.Generator(np.random.PCG64(seed))
    return TemplateRef(candidates[int(rng.integers(len(candidates)))], seed, bins)


def transform_t2(vol: Volume, template_ref: TemplateRef, ds: Dataset, k: int = 3) -> Volume:
    try:
        template = ds.volumes[template_ref.volume_id]
    except KeyError:
        raise DataError(f"template volume {template_ref.volume_id!r} not in dataset") from None
    matched = histogram_match(vol, template, template_ref.cdf_bins)
    out = transform_t1(matched, k)
    return out.with_voxels(
        out.voxels, transform={"method": "t2", "median_kernel": k, "template": template_ref.to_json()}
    )


def histogram_w1(a: np.ndarray, b: np.ndarray, bins: int = 256) -> float:
    """Wasserstein-1 distance between the `bins`-bin histograms of two intensity sets on [0, 1]."""
    ha = np.bincount(_bin_index(a, bins).ravel(), minlength=bins) / np.asarray(a).size
    hb = np.bincount(_bin_index(b, bins).ravel(), minlength=bins) / np.asarray(b).size
    return float(np.abs(np.cumsum(ha - hb)[:-1]).sum() / bins)
