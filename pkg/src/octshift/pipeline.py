"""End-to-end orchestration with fingerprint-keyed stage caching.

Each stage owns one directory under the output root and writes a
``stage.json`` with its fingerprint and output list. A stage is skipped when
that record matches the current fingerprint, every listed output still
exists, and no upstream stage executed during this run.
"""

from __future__ import annotations

import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import torch

from .checkpoint import fingerprint
from .config import RunConfig
from .dataset import load_dataset, save_dataset
from .errors import OctShiftError, OrchestrationError
from .evaluation import ExperimentPlan, run_experiment, train_domain_model, variant_transform
from .gan import CheckpointPool, load_gan_network, train_cyclegan
from .phantom import as_dataset, generate_dataset
from .segmentation import SegModel
from .selection import DIRECTION_ROLES, score_generators, select_generator
from .transforms import choose_template
from .volume import Domain, atomic_write_bytes, save_volume

log = logging.getLogger(__name__)

LEDGER_NAME = "run_ledger.json"
STAGE_RECORD = "stage.json"


@dataclass
class StageRecord:
    stage: str
    fingerprint: str
    status: str  # executed | cached | skipped | failed
    seed: int
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    duration_s: float = 0.0
    error: str = ""

    def to_json(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class RunLedger:
    root: Path
    config_fingerprint: str
    records: list[StageRecord] = field(default_factory=list)

    def status(self, stage: str) -> str:
        for r in self.records:
            if r.stage == stage:
                return r.status
        raise KeyError(stage)

    @property
    def all_cached(self) -> bool:
        return all(r.status in ("cached", "skipped") for r in self.records)

    def to_json(self) -> dict[str, Any]:
        return {"config_fingerprint": self.config_fingerprint, "stages": [r.to_json() for r in self.records]}

    def save(self) -> None:
        atomic_write_bytes(self.root / LEDGER_NAME, json.dumps(self.to_json(), indent=2).encode())

    @classmethod
    def load(cls, root: str | Path) -> "RunLedger":
        doc = json.loads((Path(root) / LEDGER_NAME).read_text())
        return cls(Path(root), doc["config_fingerprint"], [StageRecord(**r) for r in doc["stages"]])


@dataclass
class Stage:
    name: str
    sections: tuple[str, ...]  # config sections that feed the fingerprint
    upstream: tuple[str, ...]
    run: Callable[[RunConfig, Path, dict[str, Path]], list[Path]]
    enabled: Callable[[RunConfig], bool] = lambda cfg: True


def set_determinism(enabled: bool) -> None:
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.backends.cudnn.benchmark = False


# --------------------------------------------------------------------------
# stage bodies


def _stage_phantom(cfg: RunConfig, out: Path, up: dict[str, Path]) -> list[Path]:
    ph = cfg.phantom
    pairs, manifest = generate_dataset(ph.n_patients, ph.volumes_per_patient, ph.params(cfg.seed), ph.split)
    return save_dataset(as_dataset(pairs, manifest), out)


def _stage_crossdomain(cfg: RunConfig, out: Path, up: dict[str, Path]) -> list[Path]:
    cd = cfg.crossdomain
    params = cfg.phantom.params(cfg.stage_seed("crossdomain"))
    pairs, manifest = generate_dataset(cd.n_patients, cd.volumes_per_patient, params, cd.split)
    ds = as_dataset(pairs, manifest)
    ds.labels = {}  # translation training is unsupervised
    return save_dataset(ds, out)


def _stage_cyclegan(cfg: RunConfig, out: Path, up: dict[str, Path]) -> list[Path]:
    ds = load_dataset(up["crossdomain"])
    pool = train_cyclegan(
        cfg.gan.gan_config(cfg.stage_seed("cyclegan")),
        ds.bscans(ds.ids("train", Domain.SOURCE)),
        ds.bscans(ds.ids("train", Domain.TARGET)),
        out,
    )
    return [pool.root / "pool.json"] + [pool.path(e, n) for e in pool.epochs for n in ("G_fwd", "G_bwd", "D_src", "D_tgt")]


def _stage_selection(cfg: RunConfig, out: Path, up: dict[str, Path]) -> list[Path]:
    ds = load_dataset(up["crossdomain"])
    pool = CheckpointPool.open(up["cyclegan"])
    report: dict[str, Any] = {"selection_loss": cfg.gan.selection_loss, "directions": {}}
    written = []
    for direction, (g_role, _, in_domain) in DIRECTION_ROLES.items():
        out_domain = Domain.SOURCE if in_domain == "target" else Domain.TARGET
        scores = score_generators(
            pool,
            ds.bscans(ds.ids("validation", in_domain)),
            direction,
            cfg.gan.selection_loss,
            ds.bscans(ds.ids("validation", out_domain)),
        )
        epoch = select_generator(scores)
        dest = out / f"{g_role}.ckpt"
        shutil.copyfile(pool.path(epoch, g_role), dest)
        written.append(dest)
        report["directions"][direction] = {
            "selected_epoch": epoch,
            "generator": g_role,
            "scores": [s.to_json() for s in scores],
        }
    atomic_write_bytes(out / "selection.json", json.dumps(report, indent=2, sort_keys=True).encode())
    return [out / "selection.json", *written]


def _train_model(domain: Domain, stage: str) -> Callable[[RunConfig, Path, dict[str, Path]], list[Path]]:
    def body(cfg: RunConfig, out: Path, up: dict[str, Path]) -> list[Path]:
        ds = load_dataset(up["phantom"], require_labels=True)
        model = train_domain_model(ds, domain, cfg.segmentation.seg_config(cfg.stage_seed(stage)))
        path = out / "model.ckpt"
        model.save(path, {"domain": domain.value})
        return [path]

    return body


def _stage_evaluation(cfg: RunConfig, out: Path, up: dict[str, Path]) -> list[Path]:
    ds = load_dataset(up["phantom"], require_labels=True)
    generators = {}
    for v in cfg.evaluation.variants:
        if v.startswith("cgan-"):
            generators[v] = load_gan_network(up["selection"] / "G_bwd.ckpt")
    plan = ExperimentPlan(
        dataset=ds,
        variants=list(cfg.evaluation.variants),
        upper_bound=cfg.evaluation.upper_bound,
        template_seed=cfg.template_seed(),
        generators=generators,
        source_model=SegModel.load(up["source_model"] / "model.ckpt"),
        target_model=SegModel.load(up["target_model"] / "model.ckpt") if cfg.evaluation.upper_bound else None,
        dataset_version=cfg.section_fingerprint("seed", "phantom")[:16],
    )
    report = run_experiment(plan)
    written = [out / "report.json", out / "table.txt"]
    atomic_write_bytes(written[0], report.dumps().encode())
    atomic_write_bytes(written[1], (report.render_table() + "\n").encode())

    # persist the transformed target test volumes for inspection
    template = choose_template(ds, cfg.template_seed()) if "t2" in cfg.evaluation.variants else None
    for variant in cfg.evaluation.variants:
        vdir = out / "variants" / variant
        vdir.mkdir(parents=True, exist_ok=True)
        fn = variant_transform(variant, ds, template, generators)
        for vid in ds.ids("test", Domain.TARGET):
            p = vdir / f"{vid}.octvol"
            save_volume(fn(ds.volumes[vid]), p)
            written.append(p)
    return written


def _needs_cgan(cfg: RunConfig) -> bool:
    return any(v.startswith("cgan-") for v in cfg.evaluation.variants)


STAGES: tuple[Stage, ...] = (
    Stage("phantom", ("seed", "phantom"), (), _stage_phantom),
    Stage("crossdomain", ("seed", "phantom", "crossdomain"), (), _stage_crossdomain, _needs_cgan),
    Stage("cyclegan", ("seed", "gan"), ("crossdomain",), _stage_cyclegan, _needs_cgan),
    Stage("selection", ("seed", "gan"), ("crossdomain", "cyclegan"), _stage_selection, _needs_cgan),
    Stage("source_model", ("seed", "segmentation"), ("phantom",), _train_model(Domain.SOURCE, "source_model")),
    Stage(
        "target_model",
        ("seed", "segmentation"),
        ("phantom",),
        _train_model(Domain.TARGET, "target_model"),
        lambda cfg: cfg.evaluation.upper_bound,
    ),
    Stage(
        "evaluation",
        ("seed", "transforms", "evaluation"),
        ("phantom", "selection", "source_model", "target_model"),
        _stage_evaluation,
    ),
)


def stage_fingerprint(cfg: RunConfig, stage: Stage, upstream_fps: dict[str, str]) -> str:
    doc = cfg.canonical()
    return fingerprint(
        {
            "stage": stage.name,
            "config": {k: doc[k] for k in stage.sections},
            "upstream": {u: upstream_fps[u] for u in stage.upstream if u in upstream_fps},
        }
    )


def _cache_valid(out: Path, fp: str) -> bool:
    rec = out / STAGE_RECORD
    if not rec.exists():
        return False
    doc = json.loads(rec.read_text())
    return doc.get("fingerprint") == fp and all((out / p).exists() for p in doc.get("outputs", []))


def run_pipeline(cfg: RunConfig, out_root: str | Path | None = None) -> RunLedger:
    root = Path(out_root or cfg.out or "octshift-run")
    root.mkdir(parents=True, exist_ok=True)
    set_determinism(cfg.deterministic)
    atomic_write_bytes(root / "config.json", (json.dumps(cfg.canonical(), indent=2, sort_keys=True) + "\n").encode())
    ledger = RunLedger(root, fingerprint(cfg.canonical()))
    fps: dict[str, str] = {}
    executed: set[str] = set()

    for stage in STAGES:
        out = root / stage.name
        active_up = [u for u in stage.upstream if u in fps]
        fp = stage_fingerprint(cfg, stage, fps)
        record = StageRecord(stage.name, fp, "skipped", cfg.stage_seed(stage.name), [str(root / u) for u in active_up])
        ledger.records.append(record)
        if not stage.enabled(cfg):
            continue
        fps[stage.name] = fp
        if _cache_valid(out, fp) and not executed.intersection(active_up):
            record.status = "cached"
            record.outputs = json.loads((out / STAGE_RECORD).read_text())["outputs"]
            log.info("stage %s: cache hit", stage.name)
            continue

        if out.exists():
            shutil.rmtree(out)
        out.mkdir(parents=True)
        t0 = time.perf_counter()
        log.info("stage %s: running", stage.name)
        try:
            outputs = stage.run(cfg, out, {u: root / u for u in active_up})
        except Exception as exc:
            record.status, record.error = "failed", f"{type(exc).__name__}: {exc}"
            record.duration_s = time.perf_counter() - t0
            ledger.save()
            if isinstance(exc, OctShiftError):
                raise
            raise OrchestrationError(f"stage {stage.name} failed: {exc}") from exc
        record.status = "executed"
        record.duration_s = time.perf_counter() - t0
        record.outputs = sorted(str(p.relative_to(out)) for p in outputs)
        atomic_write_bytes(
            out / STAGE_RECORD,
            json.dumps({"stage": stage.name, "fingerprint": fp, "outputs": record.outputs}, indent=1).encode(),
        )
        executed.add(stage.name)
    ledger.save()
    return ledger


def list_orphans(root: str | Path) -> list[Path]:
    """Files under `root` not referenced by the ledger (bookkeeping files excluded)."""
    root = Path(root)
    ledger = RunLedger.load(root)
    referenced = {root / LEDGER_NAME, root / "config.json"}
    for r in ledger.records:
        if r.status in ("executed", "cached"):
            referenced.add(root / r.stage / STAGE_RECORD)
            referenced.update(root / r.stage / p for p in r.outputs)
    return sorted(p for p in root.rglob("*") if p.is_file() and p not in referenced)


def load_report(root: str | Path) -> dict[str, Any]:
    return json.loads((Path(root) / "evaluation" / "report.json").read_text())


def report_metrics(report: dict[str, Any]) -> dict[tuple[str, str], tuple[float, float, float]]:
    return {(r["row"], r["class"]): (r["precision"], r["recall"], r["f1"]) for r in report["rows"]}
