"""Command-line interface: render, synth, train, cv, eval, predict, visualize."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import evalkit, harness, synth
from .cloudio import canonicalize, load_ply
from .datapack import kfold_split, make_batch, read_manifest
from .projector import VIEW_ORDER, RenderSettings, project_views


def _save_png(path, array):
    Image.fromarray(array).save(path)


def _save_depth16(path, depth):
    data = (depth * 65535.0).round().astype(np.uint16)
    img = Image.new("I;16", (data.shape[1], data.shape[0]))
    img.frombytes(data.tobytes())
    img.save(path)


def _heatmap(values):
    """Map a 2-D array to an RGB heatmap (dark blue -> red) without matplotlib."""
    v = values.astype(np.float64)
    span = v.max() - v.min()
    v = (v - v.min()) / span if span > 0 else np.zeros_like(v)
    r = np.clip(1.5 * v - 0.25, 0, 1)
    g = np.clip(1.0 - np.abs(2.0 * v - 1.0), 0, 1)
    b = np.clip(1.25 - 1.5 * v, 0, 1)
    return (np.stack([r, g, b], axis=-1) * 255).round().astype(np.uint8)


_MASK_PALETTE = [
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
    (188, 189, 34), (23, 190, 207), (174, 199, 232), (255, 187, 120),
]


def _save_mask_png(path, mask, regions):
    img = Image.fromarray(mask.astype(np.uint8), mode="P")
    palette = []
    for t in range(regions):
        palette.extend(_MASK_PALETTE[t % len(_MASK_PALETTE)])
    img.putpalette(palette)
    img.save(path)


def cmd_render(args):
    settings = RenderSettings(resolution=args.resolution, point_radius=args.radius)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.manifest:
        manifest = read_manifest(args.manifest)
        inputs = [(e.sample_id, e.path) for e in manifest.entries]
    else:
        inputs = [(Path(args.input).stem, args.input)]
    for sample_id, path in inputs:
        pc = canonicalize(load_ply(path))
        vs = project_views(pc, settings)
        sdir = out / sample_id
        sdir.mkdir(exist_ok=True)
        for i, view in enumerate(VIEW_ORDER):
            tag = view.replace("+", "p").replace("-", "m")
            _save_png(sdir / f"texture_{tag}.png",
                      (vs.texture[i] * 255).round().astype(np.uint8))
            _save_depth16(sdir / f"depth_{tag}.png", vs.depth[i])
            _save_png(sdir / f"occupancy_{tag}.png",
                      (vs.occupancy[i] * 255).astype(np.uint8))
        with open(sdir / "ratios.json", "w") as fh:
            json.dump({view: vs.ratios[i] for i, view in enumerate(VIEW_ORDER)}, fh, indent=2)
        print(f"rendered {sample_id} -> {sdir}")
    return 0


def cmd_synth(args):
    manifest = synth.generate_dataset(
        args.out, contents=args.contents, levels=args.levels,
        seed=args.seed, points=args.points,
    )
    print(f"wrote {len(manifest)} samples to {args.out}/manifest.csv")
    return 0


def _load_config(args):
    cfg = harness.TrainConfig.load(args.config) if args.config else (
        harness.TrainConfig.tiny(seed=args.seed) if args.tiny else harness.TrainConfig(seed=args.seed)
    )
    if args.epochs is not None:
        cfg.epochs = args.epochs
    return cfg


def cmd_train(args):
    cfg = _load_config(args)
    manifest = read_manifest(args.manifest)
    plan = kfold_split(manifest, args.k, cfg.seed)
    train_entries, _ = plan.split(manifest, args.fold)
    samples = harness.load_samples(train_entries, cfg.render_settings(), args.cache)
    result = harness.train(cfg, samples)
    result.model.load_state_dict(result.best_state)
    harness.save_checkpoint(args.out, result.model, None, result.best_epoch, cfg)
    print(f"best epoch {result.best_epoch}, "
          f"final loss {result.log[-1]['loss']:.4f}, checkpoint -> {args.out}")
    return 0


def cmd_cv(args):
    cfg = _load_config(args)
    manifest = read_manifest(args.manifest)
    reports, avg = harness.run_cv(cfg, manifest, args.k, args.cache)
    evalkit.write_report_csv(reports, args.out)
    print(f"cv average: plcc={avg.plcc:.4f} srocc={avg.srocc:.4f} rmse={avg.rmse:.4f}")
    print(f"report -> {args.out}")
    return 0


def cmd_eval(args):
    model, cfg = harness.model_from_checkpoint(args.checkpoint)
    manifest = read_manifest(args.manifest)
    plan = kfold_split(manifest, args.k, cfg.seed)
    _, test_entries = plan.split(manifest, args.fold)
    samples = harness.load_samples(test_entries, cfg.render_settings(), args.cache)
    report = evalkit.evaluate(
        model, samples, crops=cfg.test_crops, seed=cfg.seed,
        fold=args.fold, crop_size=cfg.crop_size,
    )
    print(f"fold {args.fold}: plcc={report.plcc:.4f} "
          f"srocc={report.srocc:.4f} rmse={report.rmse:.4f}")
    return 0


def _forward_single(model, cfg, ply_path):
    pc = canonicalize(load_ply(ply_path))
    vs = project_views(pc, cfg.render_settings())
    preds = evalkit.score_samples(
        model, [(vs, 0.0)], crops=cfg.test_crops, seed=cfg.seed, crop_size=cfg.crop_size
    )
    return vs, preds[0]


def cmd_predict(args):
    model, cfg = harness.model_from_checkpoint(args.checkpoint)
    _, score = _forward_single(model, cfg, args.ply)
    print(f"{args.ply}: {score:.4f}")
    return 0


def cmd_visualize(args):
    import torch

    model, cfg = harness.model_from_checkpoint(args.checkpoint)
    pc = canonicalize(load_ply(args.ply))
    vs = project_views(pc, cfg.render_settings())
    rng = np.random.default_rng(cfg.seed)
    from .datapack import crop_sample
    cropped = crop_sample(vs, cfg.crop_size, rng)
    batch = make_batch([(cropped, 0.0)])
    model.eval()
    with torch.no_grad():
        out = model(batch)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = out["maps"][0].numpy()  # (6, heads, g, g)
    for i, view in enumerate(VIEW_ORDER):
        tag = view.replace("+", "p").replace("-", "m")
        for h in range(maps.shape[1]):
            _save_png(out_dir / f"attn_{tag}_head{h}.png", _heatmap(maps[i, h]))
    mask = out["plan"].mask[0].numpy()
    _save_mask_png(out_dir / "mask.png", mask, model.cfg.regions)
    print(f"wrote attention heatmaps and mask to {out_dir}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pcqa", description="No-reference point cloud quality assessment"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a PLY or manifest to PNG view triplets")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--input", help="single PLY file")
    group.add_argument("--manifest", help="manifest CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=512)
    p.add_argument("--radius", type=float, default=0.01)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("synth", help="generate a synthetic PLY dataset + manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--contents", type=int, default=4)
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--points", type=int, default=4000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    def add_train_flags(p):
        p.add_argument("--config", help="JSON config file (flat keys)")
        p.add_argument("--tiny", action="store_true", help="use the desk-scale config")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--cache", default=None, help="render cache directory")

    p = sub.add_parser("train", help="train one fold")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="k-fold cross-validation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True, help="report CSV path")
    add_train_flags(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test fold")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--cache", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict the quality score of one PLY")
    p.add_argument("ply")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("visualize", help="emit attention heatmaps and the guided mask")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ply", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
