"""Command-line surface for every pipeline stage.

Commands: synth-export, pretrain, agg-generate, gcl, eval, serve.
A JSON config file can mirror any flag via --config; the default
checkpoint for eval/serve can come from $GRAINSEG_CHECKPOINT.
"""

from __future__ import annotations

import json
import sys

import click
import numpy as np

from .clicks import ClickSimConfig
from .core import BinaryMask, MaskRole, Proposal, ProposalSource
from .engine import LoopConfig, mine_object
from .errors import GrainsegError
from .evaluation import (
    EvalConfig,
    evaluate_fixed,
    evaluate_sweep,
    load_folder,
    make_predict_fn,
    optimal_granularity_histogram,
    write_summary,
)
from .granularity import EstimatorConfig, estimate
from .lora import inject_lora, save_adapter
from .model import SegmenterConfig, build_segmenter, load_checkpoint, save_checkpoint
from .store import ProposalStore
from .synthetic import KINDS, export_scenes, generate
from .training import TrainConfig, pretrain_object_level, train

CHECKPOINT_ENV = "GRAINSEG_CHECKPOINT"


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON file mapping command names to flag defaults.")
@click.pass_context
def cli(ctx: click.Context, config_path: str | None) -> None:
    """Granularity-controllable interactive segmentation pipeline."""
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            ctx.default_map = json.load(fh)


@cli.command("synth-export")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--count", default=50, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--canvas", default=128, show_default=True)
@click.option("--kinds", default=",".join(KINDS), show_default=True,
              help="Comma-separated scene kinds to cycle through.")
def synth_export(out: str, count: int, seed: int, canvas: int, kinds: str) -> None:
    """Generate synthetic scenes into the generic folder layout."""
    kind_tuple = tuple(k.strip() for k in kinds.split(",") if k.strip())
    scenes = generate(seed, count, canvas=canvas, kinds=kind_tuple)
    export_scenes(scenes, out)
    click.echo(f"wrote {len(scenes)} scenes to {out}")


def _model_options(fn):
    for opt in reversed([
        click.option("--image-size", default=128, show_default=True),
        click.option("--patch-size", default=8, show_default=True),
        click.option("--embed-dim", default=96, show_default=True),
        click.option("--depth", default=4, show_default=True),
        click.option("--heads", default=4, show_default=True),
        click.option("--bins", default=11, show_default=True),
        click.option("--model-seed", default=0, show_default=True),
    ]):
        fn = opt(fn)
    return fn


@cli.command("pretrain")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--epochs", default=30, show_default=True)
@click.option("--lr", default=3e-4, show_default=True)
@click.option("--lr-decay-epoch", default=None, type=int, help="Defaults to epochs (no decay).")
@click.option("--batch-size", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--metrics", default=None, type=click.Path(dir_okay=False))
@_model_options
def pretrain(data, out, epochs, lr, lr_decay_epoch, batch_size, seed, metrics,
             image_size, patch_size, embed_dim, depth, heads, bins, model_seed) -> None:
    """Object-level pretraining on an image+object-mask folder."""
    dataset = [(img, mask) for _, img, mask in load_folder(data, level="object")]
    if not dataset:
        raise click.ClickException(f"no object-level instances found under {data}")
    config = SegmenterConfig(
        patch_size=patch_size, embed_dim=embed_dim, depth=depth,
        num_heads=heads, image_size=image_size, granularity_bins=bins,
    )
    model = build_segmenter(config, seed=model_seed)
    cfg = TrainConfig(
        epochs=epochs, lr=lr, lr_decay_epoch=epochs if lr_decay_epoch is None else lr_decay_epoch,
        batch_size=batch_size, seed=seed,
    )
    log = pretrain_object_level(dataset, model, cfg)
    save_checkpoint(model, out)
    if metrics:
        log.write(metrics)
    click.echo(
        f"pretrained on {len(dataset)} objects: "
        f"epoch-1 loss {log.epoch_means[0]:.4f} -> final {log.epoch_means[-1]:.4f}; saved {out}"
    )


@cli.command("agg-generate")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--store", "store_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", default=0, show_default=True)
@click.option("--min-iters", default=3, show_default=True)
@click.option("--max-iters", default=6, show_default=True)
@click.option("--min-area", default=16, show_default=True)
@click.option("--lambda", "lam", default=0.5, show_default=True,
              help="Weight of semantic granularity in the blend.")
@click.option("--include-gt-parts", is_flag=True, default=False,
              help="Also ingest ground-truth part masks from the data folder.")
def agg_generate(ckpt, data, store_dir, seed, min_iters, max_iters, min_area, lam,
                 include_gt_parts) -> None:
    """Mine part proposals and store mask-granularity pairs."""
    model = load_checkpoint(ckpt)
    store = ProposalStore(store_dir)
    click_cfg = ClickSimConfig()
    est_cfg = EstimatorConfig(lam=lam)
    dataset = load_folder(data, level="object")
    if not dataset:
        raise click.ClickException(f"no object-level instances found under {data}")
    parts_by_image: dict[str, list] = {}
    if include_gt_parts:
        for part_id, image, mask in load_folder(data, level="part"):
            parts_by_image.setdefault(image.id, []).append((part_id, mask))

    total = 0
    for index, (object_id, image, gt) in enumerate(dataset):
        cfg = LoopConfig(min_iters=min_iters, max_iters=max_iters, min_area=min_area,
                         rng_seed=seed * 1_000_003 + index)
        mined = mine_object(image, gt, model, cfg, click_cfg, object_id=object_id)
        store.save_image(image)
        for proposal in mined.proposals:
            record = estimate(image, proposal, gt, model, est_cfg, click_cfg)
            store.add_proposal(image.id, proposal, record)
            total += 1
        for part_id, mask in parts_by_image.get(object_id, []):
            clipped = np.logical_and(mask.pixels, gt.pixels)
            if not clipped.any() or np.array_equal(clipped, gt.pixels):
                continue
            proposal = Proposal(
                mask=BinaryMask(clipped, role=MaskRole.PROPOSAL),
                parent_object_id=object_id,
                proposal_id=f"{part_id}-gt",
                source=ProposalSource.GROUND_TRUTH_PART,
            )
            record = estimate(image, proposal, gt, model, est_cfg, click_cfg)
            store.add_proposal(image.id, proposal, record)
            total += 1
    click.echo(f"stored {total} proposals from {len(dataset)} objects in {store_dir}")


@cli.command("gcl")
@click.option("--base", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--adapter-out", default=None, type=click.Path(dir_okay=False),
              help="Also write an adapter-only checkpoint.")
@click.option("--rank", default=8, show_default=True)
@click.option("--lambda", "lam", default=None, type=float,
              help="Re-blend stored scale/semantic granularities with this weight.")
@click.option("--sampling", type=click.Choice(["inverse", "uniform"]), default="inverse",
              show_default=True)
@click.option("--epochs", default=55, show_default=True)
@click.option("--lr", default=5e-5, show_default=True)
@click.option("--lr-decay-epoch", default=50, show_default=True)
@click.option("--batch-size", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--metrics", default=None, type=click.Path(dir_okay=False))
def gcl(base, store_dir, out, adapter_out, rank, lam, sampling, epochs, lr, lr_decay_epoch,
        batch_size, seed, metrics) -> None:
    """Granularity-controllable fine-tuning with low-rank adapters."""
    import torch

    model = load_checkpoint(base)
    torch.manual_seed(seed)
    inject_lora(model, rank)
    store = ProposalStore(store_dir)
    images = store.load_images()
    if not images:
        raise click.ClickException(f"store {store_dir} holds no images; rerun agg-generate")
    cfg = TrainConfig(
        epochs=epochs, lr=lr, lr_decay_epoch=min(lr_decay_epoch, epochs),
        batch_size=batch_size, seed=seed,
    )
    log = train(store, images, model, cfg, sampling=sampling, lam_override=lam)
    save_checkpoint(model, out, lora_rank=rank)
    if adapter_out:
        save_adapter(model, adapter_out)
    if metrics:
        log.write(metrics)
    click.echo(
        f"gcl done ({sampling} sampling): epoch-1 loss {log.epoch_means[0]:.4f} -> "
        f"final {log.epoch_means[-1]:.4f}; saved {out}"
    )


@cli.command("eval")
@click.option("--ckpt", envvar=CHECKPOINT_ENV, required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--granularity", default=None, type=float)
@click.option("--sweep", is_flag=True, default=False)
@click.option("--curves", default=None, type=click.Path(dir_okay=False))
@click.option("--summary", default=None, type=click.Path(dir_okay=False))
@click.option("--level", type=click.Choice(["object", "part"]), default="object", show_default=True)
@click.option("--max-clicks", default=20, show_default=True)
def eval_cmd(ckpt, data, granularity, sweep, curves, summary, level, max_clicks) -> None:
    """Protocol evaluation at a fixed granularity or over the full sweep."""
    if sweep and granularity is not None:
        raise click.UsageError("--granularity and --sweep are mutually exclusive")
    if curves and not sweep:
        raise click.UsageError("--curves requires --sweep")
    model = load_checkpoint(ckpt)
    predict_fn = make_predict_fn(model)
    dataset = load_folder(data, level=level)
    if not dataset:
        raise click.ClickException(f"no {level}-level instances found under {data}")
    # parts rarely reach 90% IoU within the click budget; report NoC@85 only
    thresholds = (0.85,) if level == "part" else (0.85, 0.90)
    cfg = EvalConfig(max_clicks=max_clicks, iou_thresholds=thresholds)
    if sweep:
        result = evaluate_sweep(dataset, predict_fn, cfg, curve_path=curves)
        report = {
            "instances": len(dataset),
            "optimal_noc": {str(t): result.optimal_noc(t) for t in cfg.iou_thresholds},
            "mean_iou_at_1_by_granularity": {
                str(g): v for g, v in result.mean_iou_by_granularity(1).items()
            },
            "optimal_granularity_histogram": {
                str(g): n for g, n in optimal_granularity_histogram(result).items()
            },
        }
    else:
        fixed = evaluate_fixed(dataset, predict_fn, granularity, cfg)
        report = {
            "instances": len(dataset),
            "granularity": granularity,
            "mean_noc": {str(t): v for t, v in fixed.mean_noc.items()},
            "mean_iou_at_1": fixed.mean_iou_at_1,
        }
    click.echo(json.dumps(report, indent=2, sort_keys=True))
    if summary:
        write_summary(report, summary)


@cli.command("serve")
@click.option("--ckpt", envvar=CHECKPOINT_ENV, required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--port", default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--ttl-minutes", default=30.0, show_default=True)
def serve(ckpt, port, host, ttl_minutes) -> None:
    """Start the interactive annotation session service."""
    import uvicorn

    from .service import create_app

    model = load_checkpoint(ckpt)
    app = create_app(model, ttl_seconds=ttl_minutes * 60)
    uvicorn.run(app, host=host, port=port, log_level="info")


def main() -> None:
    try:
        cli(standalone_mode=True)
    except GrainsegError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
