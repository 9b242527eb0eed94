"""Volume / label data model, container files and nearest-neighbor resampling.

Axis convention is (rows, cols, slices): axial depth, lateral position and
B-scan index. Intensities are float32 in [0, 1].
"""

from __future__ import annotations

import enum
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import FormatError, ValidationError

VOLUME_MAGIC = b"OCTVOL01"
LABEL_MAGIC = b"OCTLAB01"

BACKGROUND, IRC, SRF = 0, 1, 2
CLASS_NAMES = {BACKGROUND: "background", IRC: "IRC", SRF: "SRF"}
FLUID_CLASSES = (IRC, SRF)


class Domain(str, enum.Enum):
    SOURCE = "source"  # Spectralis-like: averaged frames, low noise
    TARGET = "target"  # Cirrus-like: speckled

    @classmethod
    def parse(cls, value: "str | Domain") -> "Domain":
        try:
            return cls(value)
        except ValueError:
            raise ValidationError(f"unknown domain {value!r}") from None


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    domain: Domain = Domain.SOURCE
    patient_id: str = ""
    volume_id: str = ""
    provenance: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        vox = np.asarray(self.voxels)
        if vox.ndim != 3:
            raise ValidationError(f"volume must be 3D, got shape {vox.shape}")
        if min(vox.shape) < 1:
            raise ValidationError(f"degenerate volume shape {vox.shape}")
        vox = vox.astype(np.float32, copy=False)
        if not np.all(np.isfinite(vox)) or vox.min() < 0.0 or vox.max() > 1.0:
            raise ValidationError("intensities must lie in [0, 1]")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValidationError(f"spacing must be 3 positive values, got {self.spacing}")
        object.__setattr__(self, "voxels", _frozen(vox))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "domain", Domain.parse(self.domain))
        object.__setattr__(self, "provenance", dict(self.provenance))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape  # type: ignore[return-value]

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[2]

    def with_voxels(self, voxels: np.ndarray, **provenance: Any) -> "Volume":
        """Copy with new voxel data, merging `provenance` into the provenance record."""
        prov = dict(self.provenance)
        prov.update(provenance)
        return replace(self, voxels=voxels, provenance=prov)


@dataclass(frozen=True, eq=False)
class LabelMap:
    labels: np.ndarray
    volume_id: str = ""

    def __post_init__(self) -> None:
        lab = np.asarray(self.labels)
        if lab.ndim != 3 or min(lab.shape) < 1:
            raise ValidationError(f"label map must be nonempty 3D, got shape {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() > 2):
            raise ValidationError("label values must be in {0, 1, 2}")
        object.__setattr__(self, "labels", _frozen(lab.astype(np.uint8)))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape  # type: ignore[return-value]

    def check_pair(self, vol: Volume) -> None:
        if self.shape != vol.shape:
            raise ValidationError(
                f"label map shape {self.shape} does not match volume {vol.volume_id!r} {vol.shape}"
            )


@dataclass
class SplitManifest:
    """Patient-distinct assignment of volume ids to named partitions."""

    partitions: dict[str, list[str]]
    patient_index: dict[str, str]
    seed: int = 0

    def validate(self, known_volume_ids: Sequence[str] | None = None) -> None:
        owner: dict[str, str] = {}
        for part, vids in self.partitions.items():
            for vid in vids:
                if vid not in self.patient_index:
                    raise ValidationError(f"volume {vid!r} has no patient entry")
                pid = self.patient_index[vid]
                if owner.setdefault(pid, part) != part:
                    raise ValidationError(
                        f"patient {pid!r} appears in partitions {owner[pid]!r} and {part!r}"
                    )
        if known_volume_ids is not None:
            known = set(known_volume_ids)
            missing = [v for vids in self.partitions.values() for v in vids if v not in known]
            if missing:
                raise ValidationError(f"manifest references unknown volumes: {missing[:5]}")

    def patients(self, partition: str) -> list[str]:
        return sorted({self.patient_index[v] for v in self.partitions.get(partition, [])})

    def to_json(self) -> dict[str, Any]:
        return {
            "partitions": {k: list(v) for k, v in self.partitions.items()},
            "patient_index": dict(sorted(self.patient_index.items())),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "SplitManifest":
        m = cls(
            partitions={k: list(v) for k, v in doc["partitions"].items()},
            patient_index=dict(doc["patient_index"]),
            seed=int(doc.get("seed", 0)),
        )
        m.validate()
        return m

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_bytes(path, json.dumps(self.to_json(), indent=2, sort_keys=True).encode())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SplitManifest":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


# --------------------------------------------------------------------------
# container IO


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write via a temp file in the target directory, then rename over `path`."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack(magic: bytes, meta: dict[str, Any], payload: bytes) -> bytes:
    doc = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<I", len(doc)) + doc + payload


def _unpack(blob: bytes, magic: bytes, path: Any) -> tuple[dict[str, Any], memoryview]:
    if blob[:8] != magic:
        raise FormatError(f"{path}: bad magic {blob[:8]!r}, expected {magic!r}")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header")
    (n,) = struct.unpack_from("<I", blob, 8)
    try:
        meta = json.loads(bytes(blob[12 : 12 + n]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable metadata: {exc}") from exc
    if not isinstance(meta, dict):
        raise FormatError(f"{path}: metadata must be an object")
    return meta, memoryview(blob)[12 + n :]


def _shape_from_meta(meta: Mapping[str, Any], path: Any) -> tuple[int, int, int]:
    try:
        shape = tuple(int(s) for s in meta["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: missing or malformed shape") from exc
    if len(shape) != 3:
        raise FormatError(f"{path}: shape must have 3 entries")
    if min(shape) < 1:
        raise ValidationError(f"{path}: degenerate shape {shape}")
    return shape  # type: ignore[return-value]


def quantize_u8(voxels: np.ndarray) -> np.ndarray:
    """Round half up: 0.5 -> 128."""
    return np.floor(np.asarray(voxels, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def save_volume(vol: Volume, path: str | os.PathLike, dtype: str = "f32") -> None:
    if dtype == "f32":
        payload = vol.voxels.astype("<f4").tobytes(order="C")
    elif dtype == "u8":
        payload = quantize_u8(vol.voxels).tobytes(order="C")
    else:
        raise ValueError(f"unsupported payload dtype {dtype!r}")
    meta: dict[str, Any] = {
        "shape": list(vol.shape),
        "spacing_um": list(vol.spacing),
        "dtype": dtype,
        "domain": vol.domain.value,
        "patient_id": vol.patient_id,
        "volume_id": vol.volume_id,
    }
    if vol.provenance:
        meta["provenance"] = vol.provenance
    atomic_write_bytes(path, _pack(VOLUME_MAGIC, meta, payload))


def load_volume(path: str | os.PathLike) -> Volume:
    blob = Path(path).read_bytes()
    meta, payload = _unpack(blob, VOLUME_MAGIC, path)
    shape = _shape_from_meta(meta, path)
    dtype = meta.get("dtype")
    width = {"f32": 4, "u8": 1}.get(dtype)  # type: ignore[arg-type]
    if width is None:
        raise FormatError(f"{path}: unknown dtype {dtype!r}")
    n = shape[0] * shape[1] * shape[2]
    if len(payload) != n * width:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {n * width}")
    if dtype == "f32":
        vox = np.frombuffer(payload, dtype="<f4").astype(np.float32)
        if not np.all(np.isfinite(vox)) or vox.min() < 0.0 or vox.max() > 1.0:
            raise ValidationError(f"{path}: intensity outside [0, 1]")
    else:
        vox = (np.frombuffer(payload, dtype=np.uint8) / 255.0).astype(np.float32)
    try:
        return Volume(
            voxels=vox.reshape(shape),
            spacing=tuple(meta.get("spacing_um", (1.0, 1.0, 1.0))),  # type: ignore[arg-type]
            domain=meta.get("domain", "source"),
            patient_id=str(meta.get("patient_id", "")),
            volume_id=str(meta.get("volume_id", "")),
            provenance=meta.get("provenance", {}),
        )
    except TypeError as exc:
        raise FormatError(f"{path}: malformed metadata: {exc}") from exc


def save_labels(labels: LabelMap, path: str | os.PathLike) -> None:
    meta = {"shape": list(labels.shape), "dtype": "u8", "volume_id": labels.volume_id}
    atomic_write_bytes(path, _pack(LABEL_MAGIC, meta, labels.labels.tobytes(order="C")))


def load_labels(path: str | os.PathLike) -> LabelMap:
    blob = Path(path).read_bytes()
    meta, payload = _unpack(blob, LABEL_MAGIC, path)
    shape = _shape_from_meta(meta, path)
    if meta.get("dtype", "u8") != "u8":
        raise FormatError(f"{path}: label maps must be u8")
    if len(payload) != shape[0] * shape[1] * shape[2]:
        raise FormatError(f"{path}: payload size does not match shape {shape}")
    return LabelMap(np.frombuffer(payload, dtype=np.uint8).reshape(shape), str(meta.get("volume_id", "")))


# --------------------------------------------------------------------------
# resampling


def nearest_index_map(in_size: int, out_size: int) -> np.ndarray:
    """Source index for every output index, pixel-center aligned.

    src = floor((i + 0.5) * in / out), evaluated in exact integer arithmetic
    and clamped to [0, in - 1].
    """
    if in_size < 1 or out_size < 1:
        raise ValueError("axis sizes must be >= 1")
    i = np.arange(out_size, dtype=np.int64)
    src = ((2 * i + 1) * in_size) // (2 * out_size)
    return np.minimum(src, in_size - 1)


def _index_maps(shape: Sequence[int], target_shape: Sequence[int]) -> list[np.ndarray]:
    target_shape = tuple(int(s) for s in target_shape)
    if len(target_shape) != 3 or min(target_shape) < 1:
        raise ValueError(f"target shape must be three sizes >= 1, got {target_shape}")
    return [nearest_index_map(a, b) for a, b in zip(shape, target_shape)]


def _gather(arr: np.ndarray, maps: list[np.ndarray]) -> np.ndarray:
    return arr[np.ix_(*maps)]


def resample_nearest(vol: Volume, target_shape: Sequence[int]) -> Volume:
    maps = _index_maps(vol.shape, target_shape)
    spacing = tuple(sp * a / b for sp, a, b in zip(vol.spacing, vol.shape, (len(m) for m in maps)))
    return replace(vol, voxels=_gather(vol.voxels, maps), spacing=spacing)


def resample_labels(
    labels: LabelMap, target_shape: Sequence[int], paired: Volume | None = None
) -> LabelMap:
    """Resample labels with the same index map as `resample_nearest`.

    If `paired` (the already-resampled volume) is given, the result must match
    its shape.
    """
    out = LabelMap(_gather(labels.labels, _index_maps(labels.shape, target_shape)), labels.volume_id)
    if paired is not None:
        out.check_pair(paired)
    return out


def extract_bscan(vol: Volume, k: int) -> np.ndarray:
    if not 0 <= k < vol.n_slices:
        raise IndexError(f"B-scan index {k} out of range for {vol.n_slices} slices")
    return np.array(vol.voxels[:, :, k], copy=True)


def stack_bscans(bscans: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack(list(bscans), axis=2)


def export_bscan_png(vol: Volume, k: int, path: str | os.PathLike) -> None:
    from PIL import Image

    Image.fromarray(quantize_u8(extract_bscan(vol, k))).save(path)
