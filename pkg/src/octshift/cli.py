"""Command-line entry point: one subcommand per pipeline stage plus ``run-all``.

Exit codes: 0 success, 2 config error, 3 data error, 4 training abort,
5 orchestration error.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .config import RunConfig, parse_config, with_overrides
from .dataset import Dataset, load_dataset, save_dataset
from .errors import ConfigError, DataError, OctShiftError
from .volume import Domain, atomic_write_bytes, resample_labels, resample_nearest, save_labels


def _cfg(ctx: click.Context, config: str | None = None) -> RunConfig:
    obj = ctx.obj
    cfg = parse_config(config or obj.get("config"))
    return with_overrides(cfg, seed=obj.get("seed"), deterministic=obj.get("deterministic"))


def _out(ctx: click.Context, out: str | None) -> Path:
    path = out or ctx.obj.get("out")
    if path is None:
        raise ConfigError("an output location is required (--out)")
    return Path(path)


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


@click.group()
@click.option("--config", "config", type=click.Path(dir_okay=False), help="Run configuration (JSON).")
@click.option("--seed", type=int, help="Override the global seed.")
@click.option("--out", type=click.Path(), help="Output location.")
@click.option("--deterministic/--no-deterministic", default=None, help="Force deterministic kernels.")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def cli(ctx, config, seed, out, deterministic, verbose):
    """Cross-device OCT harmonization and covariate-shift evaluation."""
    logging.basicConfig(
        level=logging.WARNING - 10 * min(verbose, 2), format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )
    ctx.obj = {"config": config, "seed": seed, "out": out, "deterministic": deterministic}


@cli.command("phantom-generate")
@click.option("--config", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False))
@click.pass_context
def phantom_generate(ctx, config, out):
    """Write a labelled two-domain phantom dataset and its manifest."""
    from .phantom import as_dataset, generate_dataset

    cfg = _cfg(ctx, config)
    ph = cfg.phantom
    pairs, manifest = generate_dataset(ph.n_patients, ph.volumes_per_patient, ph.params(cfg.seed), ph.split)
    dest = _out(ctx, out)
    save_dataset(as_dataset(pairs, manifest), dest)
    click.echo(f"wrote {len(pairs)} volumes to {dest}")


@cli.command("resample")
@click.option("--in", "src", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", type=click.Path(file_okay=False))
@click.option("--shape", nargs=3, type=int, required=True, help="ROWS COLS SLICES")
@click.pass_context
def resample(ctx, src, out, shape):
    """Nearest-neighbor resample every volume (and label map) to SHAPE."""
    ds = load_dataset(src)
    vols = {k: resample_nearest(v, shape) for k, v in ds.volumes.items()}
    labs = {k: resample_labels(l, shape, vols[k]) for k, l in ds.labels.items()}
    save_dataset(Dataset(vols, labs, ds.manifest), _out(ctx, out))


@cli.command("transform")
@click.option("--method", type=click.Choice(["none", "t1", "t2"]), required=True)
@click.option("--in", "src", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", type=click.Path(file_okay=False))
@click.option("--template-seed", type=int, default=None)
@click.option("--partition", default=None, help="Only transform volumes of this partition.")
@click.option("--bins", type=int, default=256)
@click.pass_context
def transform(ctx, method, src, out, template_seed, partition, bins):
    """Apply a classical transform to the target-domain volumes of a dataset."""
    from .evaluation import variant_transform
    from .transforms import choose_template

    ds = load_dataset(src)
    template = None
    if method == "t2":
        seed = template_seed if template_seed is not None else _cfg(ctx).template_seed()
        template = choose_template(ds, seed, bins)
    fn = variant_transform(method, ds, template)
    dest = _out(ctx, out)
    vids = ds.ids(partition, Domain.TARGET)
    if not vids:
        raise DataError(f"{src}: no target-domain volumes to transform")
    vols = {v: fn(ds.volumes[v]) for v in vids}
    save_dataset(Dataset(vols, {v: ds.labels[v] for v in vids if v in ds.labels}), dest)
    _write_json(
        dest / "provenance.json",
        {"method": method, "median_kernel": 3, "template": template.to_json() if template else None, "source": str(src)},
    )


@cli.command("train-cyclegan")
@click.option("--config", type=click.Path(dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", type=click.Path(file_okay=False))
@click.pass_context
def train_cyclegan_cmd(ctx, config, data, out):
    """Train CycleGAN on the train partition of DATA; store every epoch."""
    from .gan import train_cyclegan
    from .pipeline import set_determinism

    cfg = _cfg(ctx, config)
    set_determinism(cfg.deterministic)
    ds = load_dataset(data)
    pool = train_cyclegan(
        cfg.gan.gan_config(cfg.stage_seed("cyclegan")),
        ds.bscans(ds.ids("train", Domain.SOURCE)),
        ds.bscans(ds.ids("train", Domain.TARGET)),
        _out(ctx, out),
    )
    click.echo(f"stored {len(pool)} epochs in {pool.root}")


@cli.command("select-generator")
@click.option("--pool", "pool_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--val", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--report", required=True, type=click.Path(dir_okay=False))
@click.option("--loss", type=click.Choice(["generator", "discriminator"]), default="generator")
def select_generator_cmd(pool_dir, val, report, loss):
    """Score every pooled generator on the validation partition of VAL and pick one per direction."""
    from .gan import CheckpointPool
    from .selection import DIRECTION_ROLES, score_generators, select_generator

    pool = CheckpointPool.open(pool_dir)
    ds = load_dataset(val)
    part = "validation" if ds.manifest and ds.manifest.partitions.get("validation") else None
    doc = {"selection_loss": loss, "directions": {}}
    for direction, (g_role, _, in_domain) in DIRECTION_ROLES.items():
        out_domain = "source" if in_domain == "target" else "target"
        scores = score_generators(
            pool, ds.bscans(ds.ids(part, in_domain)), direction, loss, ds.bscans(ds.ids(part, out_domain))
        )
        epoch = select_generator(scores)
        doc["directions"][direction] = {
            "selected_epoch": epoch,
            "checkpoint": str(pool.path(epoch, g_role)),
            "scores": [s.to_json() for s in scores],
        }
        click.echo(f"{direction}: epoch {epoch}")
    _write_json(Path(report), doc)


@cli.command("translate")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--in", "src", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", type=click.Path(file_okay=False))
@click.pass_context
def translate(ctx, ckpt, src, out):
    """Translate every volume of the generator's input domain with checkpoint CKPT."""
    from .gan import Generator, apply_generator, load_gan_network

    G = load_gan_network(ckpt)
    if not isinstance(G, Generator):
        raise DataError(f"{ckpt} is not a generator checkpoint")
    in_domain = Domain.TARGET if G.direction == "target_to_source" else Domain.SOURCE
    ds = load_dataset(src)
    vids = ds.ids(None, in_domain)
    vols = {v: apply_generator(G, ds.volumes[v]) for v in vids}
    save_dataset(Dataset(vols, {v: ds.labels[v] for v in vids if v in ds.labels}), _out(ctx, out))


@cli.command("train-seg")
@click.option("--config", type=click.Path(dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), help="Checkpoint file to write.")
@click.option("--domain", type=click.Choice(["source", "target"]), default="source")
@click.pass_context
def train_seg(ctx, config, data, out, domain):
    """Train the U-Net on one domain's train partition, selecting by validation F1."""
    from .evaluation import train_domain_model
    from .pipeline import set_determinism

    cfg = _cfg(ctx, config)
    set_determinism(cfg.deterministic)
    ds = load_dataset(data, require_labels=True)
    model = train_domain_model(ds, Domain(domain), cfg.segmentation.seg_config(cfg.stage_seed(f"{domain}_model")))
    dest = _out(ctx, out)
    dest.parent.mkdir(parents=True, exist_ok=True)
    model.save(dest, {"domain": domain})
    click.echo(f"selected epoch {model.selected_epoch} (validation F1 {model.validation_f1:.4f})")


@cli.command("predict")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--in", "src", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", type=click.Path(file_okay=False))
@click.pass_context
def predict_cmd(ctx, ckpt, src, out):
    """Write predicted label maps for every volume of SRC."""
    from .segmentation import SegModel, predict

    model = SegModel.load(ckpt)
    ds = load_dataset(src)
    dest = _out(ctx, out) / "labels"
    dest.mkdir(parents=True, exist_ok=True)
    for vid, vol in sorted(ds.volumes.items()):
        save_labels(predict(model, vol), dest / f"{vid}.octlab")


@cli.command("evaluate")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--in", "src", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--report", type=click.Path(dir_okay=False))
@click.option("--row", default="evaluation", help="Row label in the report.")
def evaluate_cmd(ckpt, src, report, row):
    """Per-class precision / recall / F1 of CKPT on the labelled volumes of SRC."""
    from .evaluation import evaluate_model
    from .segmentation import SegModel

    ds = load_dataset(src, require_labels=True)
    m = evaluate_model(SegModel.load(ckpt), [(ds.volumes[v], ds.labels[v]) for v in sorted(ds.volumes)], row, str(ckpt))
    rows = m.rows_json()
    for r in rows:
        click.echo(f"{r['class']}: Pr {r['precision']:.4f} Rec {r['recall']:.4f} F1 {r['f1']:.4f}")
    if report:
        _write_json(Path(report), {"rows": rows})


@cli.command("run-all")
@click.option("--config", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False))
@click.pass_context
def run_all(ctx, config, out):
    """Run every stage in dependency order, reusing cached stage outputs."""
    from .pipeline import run_pipeline

    cfg = _cfg(ctx, config)
    root = Path(out or ctx.obj.get("out") or cfg.out or "octshift-run")
    ledger = run_pipeline(cfg, root)
    for r in ledger.records:
        click.echo(f"{r.stage:<14} {r.status:<9} {r.duration_s:8.1f}s")
    table = root / "evaluation" / "table.txt"
    if table.exists():
        click.echo(table.read_text())


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, prog_name="octshift", standalone_mode=False)
    except OctShiftError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return 2 if isinstance(exc, click.UsageError) else exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
