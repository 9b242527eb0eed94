"""Run configuration: one JSON document, validated strictly, canonicalized for fingerprints."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Optional

import pydantic
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .checkpoint import fingerprint
from .errors import ConfigError
from .gan import PATCH_SIZES, GanConfig
from .phantom import PhantomParams
from .segmentation import SegConfig

PARTITIONS = ("train", "validation", "test")


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True, frozen=True)


def _check_split(split: dict[str, float]) -> dict[str, float]:
    unknown = set(split) - set(PARTITIONS)
    if unknown:
        raise ValueError(f"unknown partitions {sorted(unknown)}")
    if any(v < 0 for v in split.values()) or abs(sum(split.values()) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be >= 0 and sum to 1, got {split}")
    return {k: split[k] for k in PARTITIONS if k in split}


class PhantomSection(Section):
    shape: tuple[int, int, int] = (128, 128, 8)
    n_layers: int = 4
    fluid_counts: tuple[float, float] = (5.0, 1.5)
    source_noise_sigma: float = 0.02
    target_speckle_sigma: float = 0.3
    source_gamma: float = 1.0
    target_gamma: float = 0.5
    n_patients: int = Field(30, ge=5)
    volumes_per_patient: int = Field(1, ge=1)
    split: dict[str, float] = {"train": 0.7, "validation": 0.1, "test": 0.2}

    @field_validator("split")
    @classmethod
    def _split(cls, v: dict[str, float]) -> dict[str, float]:
        return _check_split(v)

    def params(self, seed: int) -> PhantomParams:
        kw = self.model_dump(exclude={"n_patients", "volumes_per_patient", "split"})
        return PhantomParams(seed=seed, **kw)


class CrossDomainSection(Section):
    """Unlabelled two-domain data for CycleGAN training and generator selection."""

    n_patients: int = Field(20, ge=5)
    volumes_per_patient: int = Field(1, ge=1)
    split: dict[str, float] = {"train": 0.9, "validation": 0.1}

    @field_validator("split")
    @classmethod
    def _split(cls, v: dict[str, float]) -> dict[str, float]:
        return _check_split(v)


class TransformSection(Section):
    median_kernel: int = 3
    bins: int = Field(256, ge=2)
    template_seed: Optional[int] = None

    @field_validator("median_kernel")
    @classmethod
    def _odd(cls, v: int) -> int:
        if v < 1 or v % 2 == 0:
            raise ValueError("median_kernel must be odd and >= 1")
        return v


class GanSection(Section):
    patch_size: int = 64
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(1, ge=1)
    learning_rate: float = Field(2e-4, gt=0)
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_cyc: float = 10.0
    lambda_id: float = 5.0
    residual_blocks: Optional[int] = None
    ngf: int = Field(64, ge=1)
    ndf: int = Field(64, ge=1)
    steps_per_epoch: Optional[int] = None
    selection_loss: str = "generator"

    @field_validator("patch_size")
    @classmethod
    def _patch(cls, v: int) -> int:
        if v not in PATCH_SIZES:
            raise ValueError(f"must be one of {PATCH_SIZES}")
        return v

    @field_validator("selection_loss")
    @classmethod
    def _selection_loss(cls, v: str) -> str:
        if v not in ("generator", "discriminator"):
            raise ValueError("must be 'generator' or 'discriminator'")
        return v

    def gan_config(self, seed: int) -> GanConfig:
        return GanConfig(seed=seed, **self.model_dump(exclude={"selection_loss"}))


class SegmentationSection(Section):
    depth: int = Field(5, ge=1)
    base_channels: int = Field(64, ge=1)
    learning_rate: float = Field(1e-4, gt=0)
    lr_halving_period: int = Field(15, ge=1)
    epochs: int = Field(80, ge=1)
    batch_size: int = Field(8, ge=1)
    class_weights: Optional[tuple[float, float, float]] = None
    bn_momentum: float = 0.1

    def seg_config(self, seed: int) -> SegConfig:
        return SegConfig(seed=seed, **self.model_dump())


class EvaluationSection(Section):
    variants: list[str] = ["none", "t1", "t2", "cgan-64"]
    upper_bound: bool = True

    @field_validator("variants")
    @classmethod
    def _variants(cls, v: list[str]) -> list[str]:
        if not v:
            raise ValueError("at least one variant is required")
        for name in v:
            if name in ("none", "t1", "t2"):
                continue
            if not (name.startswith("cgan-") and name[5:].isdigit() and int(name[5:]) in PATCH_SIZES):
                raise ValueError(f"unknown variant {name!r}")
        if len(set(v)) != len(v):
            raise ValueError("duplicate variants")
        return v


class RunConfig(Section):
    seed: int = 1234
    deterministic: bool = True
    out: Optional[str] = None
    phantom: PhantomSection = PhantomSection()
    crossdomain: CrossDomainSection = CrossDomainSection()
    transforms: TransformSection = TransformSection()
    gan: GanSection = GanSection()
    segmentation: SegmentationSection = SegmentationSection()
    evaluation: EvaluationSection = EvaluationSection()

    @model_validator(mode="after")
    def _cgan_matches_patch(self) -> "RunConfig":
        for name in self.evaluation.variants:
            if name.startswith("cgan-") and int(name[5:]) != self.gan.patch_size:
                raise ValueError(f"evaluation variant {name} does not match gan.patch_size {self.gan.patch_size}")
        rows, cols, _ = self.phantom.shape
        if self.gan.patch_size > min(rows, cols):
            raise ValueError(f"gan.patch_size {self.gan.patch_size} exceeds phantom B-scan size {rows}x{cols}")
        divisor = 2 ** (self.segmentation.depth - 1)
        if rows % divisor or cols % divisor:
            raise ValueError(f"phantom B-scan {rows}x{cols} not divisible by {divisor} (segmentation.depth)")
        return self

    def stage_seed(self, stage: str) -> int:
        """Per-stage seed; the phantom uses the global seed directly."""
        if stage == "phantom":
            return self.seed
        digest = hashlib.sha256(f"{self.seed}:{stage}".encode()).digest()
        return int.from_bytes(digest[:4], "little")

    def template_seed(self) -> int:
        t = self.transforms.template_seed
        return self.stage_seed("template") if t is None else t

    def canonical(self) -> dict[str, Any]:
        return self.model_dump(mode="json")

    def dumps(self) -> str:
        return canonical_dumps(self.canonical())

    def section_fingerprint(self, *keys: str) -> str:
        doc = self.canonical()
        return fingerprint({k: doc[k] for k in keys})


def canonical_dumps(doc: Any) -> str:
    """Sorted keys, no whitespace; json emits floats in shortest round-trip form."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _format_error(err: pydantic.ValidationError) -> str:
    parts = []
    for e in err.errors():
        key = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{key}: {e['msg']}")
    return "; ".join(parts)


def config_from_dict(doc: dict[str, Any]) -> RunConfig:
    return parse_config_text(json.dumps(doc))


def parse_config_text(text: str) -> RunConfig:
    try:
        return RunConfig.model_validate_json(text)
    except pydantic.ValidationError as exc:
        raise ConfigError(_format_error(exc)) from None


def parse_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config_text(p.read_text(encoding="utf-8"))


def with_overrides(cfg: RunConfig, **updates: Any) -> RunConfig:
    doc = cfg.canonical()
    doc.update({k: v for k, v in updates.items() if v is not None})
    return config_from_dict(doc)
