"""Command-line entry point tying the modules together.

Exit codes: 0 success, 1 runtime failure (bad data, diverged training,
missing checkpoint, ...), 2 usage errors (unknown flags, malformed values).
"""

from __future__ import annotations

import functools
import json
from pathlib import Path

import click
import numpy as np
from PIL import Image

from . import __version__
from .ablation import VARIANT_ORDER, run_ablation
from .augment import denormalize_to_uint8, parallel_augment
from .config import git_blob_hash, load_config, write_resolved
from .data import generate_synthetic, load_directory, write_dataset
from .errors import PadeError
from .evaluation import DEFAULT_ALPHAS, evaluate_model, occlusion_sweep
from .trainer import configs_from_checkpoint, fit, load_checkpoint, model_from_checkpoint


def friendly_errors(fn):
    """Surface domain errors as clean messages with exit code 1."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except PadeError as exc:
            raise click.ClickException(str(exc)) from exc
    return wrapper


def _float_list(_ctx, _param, value):
    if value is None:
        return None
    try:
        return tuple(float(x) for x in value.split(",") if x.strip())
    except ValueError as exc:
        raise click.BadParameter(f"expected comma-separated numbers, got {value!r}") from exc


def _int_list(_ctx, _param, value):
    if value is None:
        return None
    try:
        return tuple(int(x) for x in value.split(",") if x.strip())
    except ValueError as exc:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}") from exc


@click.group()
@click.version_option(version=__version__, prog_name="pade")
def cli():
    """Occlusion-robust person re-identification: augmentation, training,
    retrieval evaluation, and perturbation sweeps."""


@cli.group()
def data():
    """Dataset utilities."""


@data.command("synth")
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="TOML file; the [synthetic] section is used.")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--seed", type=int, default=None, help="Override the generator seed.")
@friendly_errors
def data_synth(spec_path, out_dir, seed):
    """Generate a synthetic identity dataset (images + manifest.csv)."""
    overrides = {"synthetic.seed": seed} if seed is not None else None
    cfg = load_config(spec_path, overrides)
    splits = generate_synthetic(cfg.synthetic)
    manifest = write_dataset(splits, out_dir)
    write_resolved(cfg, out_dir)
    click.echo(f"wrote {len(splits.train)} train / {len(splits.query)} query / "
               f"{len(splits.gallery)} gallery images; manifest: {manifest}")


@cli.command("augment-preview")
@click.option("--image", "image_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--seed", type=int, default=0)
@friendly_errors
def augment_preview(image_path, out_dir, config_path, seed):
    """Write the (base, erased, cropped) views of one image as PNGs."""
    cfg = load_config(config_path)
    if not image_path.is_file():
        raise click.ClickException(f"image {image_path} does not exist")
    with Image.open(image_path) as im:
        src = np.asarray(im.convert("RGB"), dtype=np.uint8)
    triplet = parallel_augment(src, cfg.augment, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, arr in (("base", triplet.base), ("erased", triplet.erased),
                      ("cropped", triplet.cropped)):
        Image.fromarray(denormalize_to_uint8(arr, cfg.augment)).save(out_dir / f"{name}.png")
    click.echo(f"wrote base/erased/cropped previews to {out_dir}")
    click.echo(f"rng trace: {triplet.rng_trace}")


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="TOML run configuration.")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--seed", type=int, default=None, help="Override trainer.seed.")
@click.option("--deterministic", is_flag=True,
              help="Force deterministic torch kernels.")
@click.option("--resume", is_flag=True, help="Continue from last.ckpt in --out.")
@friendly_errors
def train(config_path, data_dir, out_dir, seed, deterministic, resume):
    """Train a model on a train/query/gallery directory layout."""
    import torch

    overrides = {"trainer.seed": seed} if seed is not None else None
    cfg = load_config(config_path, overrides)
    if deterministic:
        torch.use_deterministic_algorithms(True)
    splits = load_directory(data_dir)
    if splits.skip_report:
        click.echo(f"skipped {len(splits.skip_report)} non-image/unparseable files")
    val = (splits.query, splits.gallery) if cfg.trainer.val_every else None
    result = fit(splits.train, cfg.trainer, cfg.backbone, cfg.augment, out_dir,
                 val=val, resume=resume, log_every=1)
    write_resolved(cfg, out_dir, checkpoint=result.checkpoint)
    click.echo(f"trained {result.epochs_run} epochs; "
               f"loss {result.first_epoch_loss:.4f} -> {result.final_epoch_loss:.4f}")
    if result.best_val_map is not None:
        click.echo(f"best validation mAP: {result.best_val_map:.4f}")
    click.echo(f"checkpoint: {result.checkpoint}")


@cli.command("eval")
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--metric", type=click.Choice(["euclidean", "cosine"]), default="euclidean")
@click.option("--max-rank", type=int, default=10)
@friendly_errors
def eval_cmd(ckpt_path, data_dir, out_dir, metric, max_rank):
    """Evaluate retrieval metrics; writes metrics.json."""
    state = load_checkpoint(ckpt_path)
    model = model_from_checkpoint(state)
    _, _, aug_cfg = configs_from_checkpoint(state)
    splits = load_directory(data_dir)
    result = evaluate_model(model, splits.query, splits.gallery, aug_cfg,
                            metric=metric, max_rank=max_rank)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "metrics": result.summary(),
        "metric": metric,
        "checkpoint": {"path": str(ckpt_path), "content_hash": git_blob_hash(ckpt_path)},
        "num_query": len(splits.query),
        "num_gallery": len(splits.gallery),
        "skipped_files": splits.skip_report,
    }
    (out_dir / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    click.echo(f"mAP={result.mean_ap:.4f} rank1={result.rank1:.4f} "
               f"({result.num_valid} valid / {result.num_excluded} excluded queries)")
    click.echo(f"wrote {out_dir / 'metrics.json'}")


@cli.command()
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--alphas", callback=_float_list, default=None,
              help="Comma-separated erase probabilities (default 0,0.2,...,1).")
@click.option("--seed", type=int, default=0)
@friendly_errors
def sweep(ckpt_path, data_dir, out_dir, alphas, seed):
    """Occlusion-probability sweep; writes sweep.csv and sweep.png."""
    state = load_checkpoint(ckpt_path)
    model = model_from_checkpoint(state)
    _, _, aug_cfg = configs_from_checkpoint(state)
    splits = load_directory(data_dir)
    rows = occlusion_sweep(model, splits.query, splits.gallery, aug_cfg,
                           alphas=alphas or DEFAULT_ALPHAS, seed=seed,
                           out_dir=out_dir)
    for row in rows:
        click.echo(f"alpha={row['alpha']:.2f}  mAP={row['mAP']:.4f}  "
                   f"rank1={row['rank1']:.4f}")
    click.echo(f"wrote {Path(out_dir) / 'sweep.csv'} and sweep.png")


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False, path_type=Path),
              help="Dataset directory; omitted -> synthetic data from the config.")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--seeds", callback=_int_list, default=None,
              help="Comma-separated training seeds (default 0,1,2).")
@friendly_errors
def ablate(config_path, data_dir, out_dir, seeds):
    """Train and compare the five augmentation/enhancement variants."""
    cfg = load_config(config_path)
    splits = load_directory(data_dir) if data_dir else generate_synthetic(cfg.synthetic)
    summary = run_ablation(splits, cfg, out_dir, seeds=seeds or (0, 1, 2),
                           variants=VARIANT_ORDER, log=click.echo)
    write_resolved(cfg, out_dir)
    click.echo(f"{'variant':<12} {'mAP':>8} {'rank1':>8}")
    for row in summary:
        click.echo(f"{row['variant']:<12} {row['mAP']:>8.4f} {row['rank1']:>8.4f}")
    click.echo(f"wrote {Path(out_dir) / 'ablation.csv'}")


main = cli

if __name__ == "__main__":
    main()
