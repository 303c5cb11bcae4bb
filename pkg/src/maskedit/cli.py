"""Command-line entry points: dataset export, training, evaluation, the HTTP
service, and mask file conversion."""

import json
from pathlib import Path

import click
import numpy as np

from .data import MixConfig, export_dataset
from .masks import BinaryMask, rle_decode, rle_encode, MaskRLE


@click.group()
def main():
    """Free-shape-mask instruction image editing toolkit."""


def _pipeline_config(ctx_params) -> "PipelineConfig":
    from .training import PipelineConfig

    return PipelineConfig(
        ablation=ctx_params["ablation"],
        lambda_multi=ctx_params["lambda_multi"],
        eq6_residual=ctx_params["eq6_residual"],
        share_branch_kv=ctx_params["share_branch_kv"],
        seed=ctx_params["model_seed"],
    )


def pipeline_options(f):
    f = click.option("--ablation", type=click.Choice(["full", "no_ca", "no_dca"]),
                     default="full", show_default=True)(f)
    f = click.option("--lambda-multi", type=float, default=1.0, show_default=True,
                     help="weight of the subject attention branch")(f)
    f = click.option("--eq6-residual/--no-eq6-residual", default=True,
                     show_default=True,
                     help="add the query embedding back after scene attention")(f)
    f = click.option("--share-branch-kv", is_flag=True,
                     help="share K/V projections across both attention branches")(f)
    f = click.option("--model-seed", type=int, default=0, show_default=True)(f)
    return f


@main.command("dataset")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--count", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--ratio-edit", type=float, default=0.7, show_default=True)
def dataset_cmd(out_dir, count, seed, ratio_edit):
    """Export a synthetic dataset (PNGs, mask RLEs, manifest)."""
    cfg = MixConfig(ratio_edit=ratio_edit, ratio_mask_predict=1.0 - ratio_edit,
                    seed=seed)
    path = export_dataset(out_dir, count, cfg)
    click.echo(f"wrote {count} samples to {path}")


@main.command("train")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--steps", type=int, default=200, show_default=True)
@click.option("--batch-size", type=int, default=4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--lr-backbone", type=float, default=1e-4, show_default=True)
@click.option("--lr-rest", type=float, default=2e-4, show_default=True)
@click.option("--checkpoint-every", type=int, default=0, show_default=True)
@click.option("--resume", type=click.Path(exists=True), default=None,
              help="checkpoint to continue from")
@pipeline_options
def train_cmd(out_dir, steps, batch_size, seed, lr_backbone, lr_rest,
              checkpoint_every, resume, **model_params):
    """Train the editing pipeline on the synthetic stream."""
    from .training import TrainConfig, load_checkpoint, train

    if resume:
        pipeline, optimizer, cfg, start = load_checkpoint(resume)
        cfg.total_steps = steps
        cfg.out_dir = out_dir
        train(cfg, pipeline, optimizer, start_step=start)
    else:
        cfg = TrainConfig(seed=seed, total_steps=steps, batch_size=batch_size,
                          lr_backbone=lr_backbone, lr_rest=lr_rest,
                          checkpoint_every=checkpoint_every, out_dir=out_dir,
                          mix=MixConfig(seed=seed),
                          pipeline=_pipeline_config(model_params))
        train(cfg)
    click.echo(f"finished at step {steps}; checkpoints in {out_dir}")


@main.command("evaluate")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--count", type=int, default=20, show_default=True,
              help="benchmark scenes (each scored with exact and free-shape masks)")
@click.option("--steps", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def evaluate_cmd(checkpoint, out_path, count, steps, seed):
    """Score a checkpoint on the paired-mask benchmark."""
    from .evaluation import build_benchmark, evaluate_benchmark, save_report
    from .training import load_checkpoint

    pipeline, _, _, _ = load_checkpoint(checkpoint)
    pipeline.eval()
    items = build_benchmark(count, seed=1234 + seed)
    report = evaluate_benchmark(pipeline, items, steps=steps, seed=seed)
    save_report(report, out_path)
    click.echo(json.dumps(report["groups"], indent=2))


@main.command("compare")
@click.argument("reports", nargs=-1, required=True,
                type=click.Path(exists=True))
def compare_cmd(reports):
    """Tabulate benchmark reports side by side."""
    rows = []
    for path in reports:
        rep = json.loads(Path(path).read_text())
        for group, agg in rep["groups"].items():
            rows.append((Path(path).stem, group, agg))
    header = f"{'report':20s} {'masks':10s} {'fg_psnr':>8s} {'fg_ssim':>8s} {'success':>8s}"
    click.echo(header)
    for name, group, agg in rows:
        click.echo(f"{name:20s} {group:10s} {agg['foreground_psnr']:8.3f} "
                   f"{agg['foreground_ssim']:8.4f} {agg['success_rate']:8.3f}")


@main.command("serve")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve_cmd(checkpoint, host, port):
    """Serve the editing HTTP API from a checkpoint."""
    import uvicorn

    from .service import load_app_from_checkpoint

    app = load_app_from_checkpoint(checkpoint)
    uvicorn.run(app, host=host, port=port)


@main.command("mask-encode")
@click.argument("png_path", type=click.Path(exists=True))
@click.argument("json_path", type=click.Path())
def mask_encode_cmd(png_path, json_path):
    """PNG (any nonzero pixel counts as set) -> run-length JSON."""
    from PIL import Image

    arr = np.asarray(Image.open(png_path).convert("L"))
    mask = BinaryMask.from_array((arr > 127).astype(np.uint8))
    Path(json_path).write_text(rle_encode(mask).to_json())
    click.echo(f"{mask.popcount()} set pixels -> {json_path}")


@main.command("mask-decode")
@click.argument("json_path", type=click.Path(exists=True))
@click.argument("png_path", type=click.Path())
def mask_decode_cmd(json_path, png_path):
    """Run-length JSON -> black/white PNG."""
    from PIL import Image

    rle = MaskRLE.from_json(Path(json_path).read_text())
    mask = rle_decode(rle)
    Image.fromarray(mask.data * 255, mode="L").save(png_path)
    click.echo(f"wrote {png_path}")


@main.command("train-encoder")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--steps", type=int, default=300, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def train_encoder_cmd(out_path, steps, seed):
    """Train the two-tower metric encoder and report retrieval accuracy."""
    import torch

    from .evaluation import retrieval_at_1, train_two_tower

    enc = train_two_tower(seed=seed, steps=steps)
    acc = retrieval_at_1(enc)
    torch.save(enc.state_dict(), out_path)
    click.echo(f"retrieval@1 = {acc:.3f}; weights -> {out_path}")


@main.command("edit")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--scene", required=True, type=click.Path(exists=True))
@click.option("--mask", "mask_path", required=True, type=click.Path(exists=True),
              help="run-length JSON mask")
@click.option("--instruction", required=True)
@click.option("--subject", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--steps", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def edit_cmd(checkpoint, scene, mask_path, instruction, subject, out_path,
             steps, seed):
    """Run one edit from image files."""
    from .data import image_from_png, image_to_png
    from .training import load_checkpoint

    pipeline, _, _, _ = load_checkpoint(checkpoint)
    pipeline.eval()
    x1 = image_from_png(scene)
    x2 = image_from_png(subject) if subject else None
    m = rle_decode(MaskRLE.from_json(Path(mask_path).read_text()))
    out, text = pipeline.edit(x1, m, instruction, x2=x2, steps=steps, seed=seed)
    image_to_png(out, out_path)
    click.echo(f"{text!r} -> {out_path}")
