"""Per-class precision / recall / F1 and the cross-domain experiment.

Counts are aggregated over every pixel of a dataset before any ratio is
taken; per-image averaging never happens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .dataset import Dataset
from .errors import OrchestrationError, ValidationError
from .gan import Generator, apply_generator
from .segmentation import SegConfig, SegModel, predict, train_segmentation
from .transforms import TemplateRef, choose_template, transform_t1, transform_t2
from .volume import CLASS_NAMES, FLUID_CLASSES, Domain, LabelMap, Volume


def confusion(pred: LabelMap | np.ndarray, gt: LabelMap | np.ndarray, c: int) -> tuple[int, int, int]:
    p = pred.labels if isinstance(pred, LabelMap) else np.asarray(pred)
    g = gt.labels if isinstance(gt, LabelMap) else np.asarray(gt)
    if p.shape != g.shape:
        raise ValidationError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    pc, gc = p == c, g == c
    return int(np.count_nonzero(pc & gc)), int(np.count_nonzero(pc & ~gc)), int(np.count_nonzero(~pc & gc))


def prf1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall, F1; each is 0 when its denominator is 0."""
    pr = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return pr, rec, f1_score(pr, rec)


def f1_score(pr: float, rec: float) -> float:
    return 2 * pr * rec / (pr + rec) if pr + rec > 0 else 0.0


@dataclass
class ConfusionCounts:
    counts: dict[int, list[int]] = field(default_factory=lambda: {c: [0, 0, 0] for c in FLUID_CLASSES})

    def add(self, pred, gt) -> "ConfusionCounts":
        for c in self.counts:
            for i, v in enumerate(confusion(pred, gt, c)):
                self.counts[c][i] += v
        return self

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        out = ConfusionCounts()
        for c in out.counts:
            out.counts[c] = [a + b for a, b in zip(self.counts[c], other.counts[c])]
        return out

    def metrics(self, c: int) -> tuple[float, float, float]:
        return prf1(*self.counts[c])


@dataclass
class MetricsReport:
    row: str
    counts: ConfusionCounts
    model_id: str = ""
    dataset_version: str = ""
    provenance: Mapping[str, Any] = field(default_factory=dict)

    def metrics(self, c: int) -> tuple[float, float, float]:
        return self.counts.metrics(c)

    def f1(self, c: int) -> float:
        return self.metrics(c)[2]

    @property
    def mean_f1(self) -> float:
        return float(np.mean([self.f1(c) for c in FLUID_CLASSES]))

    def rows_json(self) -> list[dict[str, Any]]:
        out = []
        for c in FLUID_CLASSES:
            pr, rec, f1 = self.metrics(c)
            tp, fp, fn = self.counts.counts[c]
            out.append(
                {
                    "row": self.row,
                    "class": CLASS_NAMES[c],
                    "precision": pr,
                    "recall": rec,
                    "f1": f1,
                    "tp": tp,
                    "fp": fp,
                    "fn": fn,
                    "model": self.model_id,
                    "dataset_version": self.dataset_version,
                    "provenance": dict(self.provenance),
                }
            )
        return out


def evaluate_model(
    model: SegModel,
    items: Iterable[tuple[Volume, LabelMap]],
    row: str,
    model_id: str = "",
    dataset_version: str = "",
    provenance: Mapping[str, Any] | None = None,
) -> MetricsReport:
    counts = ConfusionCounts()
    for vol, gt in items:
        counts.add(predict(model, vol), gt)
    return MetricsReport(row, counts, model_id, dataset_version, provenance or {})


@dataclass
class ExperimentReport:
    reference: MetricsReport  # source model on source test data
    rows: list[MetricsReport]  # source model on each target variant, then the upper bound

    def row(self, name: str) -> MetricsReport:
        for r in [self.reference, *self.rows]:
            if r.row == name:
                return r
        raise KeyError(name)

    def to_json(self) -> dict[str, Any]:
        return {
            "columns": ["Transformation", "IRC Pr", "IRC Rec", "IRC F1", "SRF Pr", "SRF Rec", "SRF F1"],
            "rows": [entry for r in [self.reference, *self.rows] for entry in r.rows_json()],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def render_table(self) -> str:
        head = f"{'Transformation':<22}| {'IRC Pr':>6} {'Rec':>6} {'F1':>6} | {'SRF Pr':>6} {'Rec':>6} {'F1':>6}"
        lines = [head, "-" * len(head)]
        for r in [self.reference, *self.rows]:
            irc, srf = r.metrics(FLUID_CLASSES[0]), r.metrics(FLUID_CLASSES[1])
            lines.append(
                f"{r.row:<22}| {irc[0]:6.2f} {irc[1]:6.2f} {irc[2]:6.2f} | {srf[0]:6.2f} {srf[1]:6.2f} {srf[2]:6.2f}"
            )
        return "\n".join(lines)


# --------------------------------------------------------------------------
# experiment


def variant_transform(
    variant: str,
    ds: Dataset,
    template: TemplateRef | None = None,
    generators: Mapping[str, Generator] | None = None,
) -> Callable[[Volume], Volume]:
    if variant == "none":
        return lambda v: v.with_voxels(v.voxels, transform={"method": "none"})
    if variant == "t1":
        return transform_t1
    if variant == "t2":
        if template is None:
            raise OrchestrationError("variant t2 needs a template (stage: transform)")
        return lambda v: transform_t2(v, template, ds)
    if variant.startswith("cgan-"):
        gen = (generators or {}).get(variant)
        if gen is None:
            raise OrchestrationError(f"variant {variant} needs a selected generator (stage: select-generator)")
        return lambda v: apply_generator(gen, v)
    raise OrchestrationError(f"unknown transform variant {variant!r}")


def variant_label(variant: str) -> str:
    return {"none": "None", "t1": "T1", "t2": "T2"}.get(variant, variant.upper())


@dataclass
class ExperimentPlan:
    dataset: Dataset  # both domains, labelled, with a train/validation/test manifest
    variants: Sequence[str] = ("none", "t1", "t2")
    upper_bound: bool = True
    seg_config: SegConfig = field(default_factory=SegConfig)
    template_seed: int = 0
    generators: Mapping[str, Generator] = field(default_factory=dict)
    source_model: SegModel | None = None  # trained on demand when absent
    target_model: SegModel | None = None
    dataset_version: str = ""

    def __post_init__(self) -> None:
        if not self.variants:
            raise ValidationError("experiment plan needs at least one variant")
        if self.dataset.manifest is None:
            raise ValidationError("experiment dataset has no split manifest")


def domain_items(ds: Dataset, partition: str, domain: Domain | str) -> list[tuple[Volume, LabelMap]]:
    return [(ds.volumes[v], ds.labels[v]) for v in ds.ids(partition, domain)]


def train_domain_model(ds: Dataset, domain: Domain | str, cfg: SegConfig) -> SegModel:
    return train_segmentation(
        cfg,
        list(ds.labelled_bscans(ds.ids("train", domain))),
        list(ds.labelled_bscans(ds.ids("validation", domain))),
    )


def run_experiment(plan: ExperimentPlan) -> ExperimentReport:
    ds = plan.dataset
    source_model = plan.source_model or train_domain_model(ds, Domain.SOURCE, plan.seg_config)
    version = plan.dataset_version
    reference = evaluate_model(
        source_model, domain_items(ds, "test", Domain.SOURCE), "Source-on-source", "source", version
    )
    template = choose_template(ds, plan.template_seed) if "t2" in plan.variants else None
    target_test = domain_items(ds, "test", Domain.TARGET)
    rows = []
    for variant in plan.variants:
        fn = variant_transform(variant, ds, template, plan.generators)
        transformed = [(fn(vol), lab) for vol, lab in target_test]
        prov = transformed[0][0].provenance.get("transform", {}) if transformed else {}
        rows.append(evaluate_model(source_model, transformed, variant_label(variant), "source", version, prov))
    if plan.upper_bound:
        target_model = plan.target_model or train_domain_model(ds, Domain.TARGET, plan.seg_config)
        rows.append(evaluate_model(target_model, target_test, "*Target-on-target", "target", version))
    return ExperimentReport(reference, rows)
