"""Command-line surface wiring the pipeline end to end.

Subcommands: synth, select, train, render, reenact, eval, export-ply.
Every run is deterministic under a fixed --seed and logs its fully
resolved configuration. Exit codes: 0 success, 1 runtime failure, 2 usage
error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .avatar import init_splats, load_checkpoint, realize_world, save_checkpoint
from .dataset import load_manifest
from .errors import MeshSplatError, TopologyMismatch
from .evaluation import evaluate_model
from .geometry import build_frame_rig
from .imageio import write_png
from .renderer import rasterize
from .selection import (
    SelectionConfig,
    depose_frame,
    export_offset_heatmap,
    face_center_offsets,
    load_selection_cache,
    precompute_selections,
    save_selection_cache,
)
from .synth import synth_generate
from .training import TrainConfig, train


def _log_config(name: str, payload: dict) -> None:
    print(f"[meshsplat {name}] resolved config: {json.dumps(payload, sort_keys=True)}")


def cmd_synth(args) -> int:
    _log_config(
        "synth",
        {
            "seed": args.seed,
            "faces": args.faces,
            "frames": args.frames,
            "views": args.views,
            "size": args.size,
            "out": args.out,
        },
    )
    manifest = synth_generate(
        seed=args.seed,
        faces=args.faces,
        frames=args.frames,
        views=args.views,
        out_path=args.out,
        image_size=args.size,
    )
    print(f"wrote {manifest.n_frames} frames x {manifest.n_views} views to {args.out}")
    return 0


def cmd_select(args) -> int:
    _log_config(
        "select",
        {"data": args.data, "threshold": args.threshold, "out": args.out, "heatmap": args.heatmap},
    )
    manifest = load_manifest(args.data)
    sequence = manifest.load_sequence()
    model = init_splats(sequence.neutral, sh_degree=0)  # membership only needs parent faces
    config = SelectionConfig(threshold=args.threshold)
    masks = precompute_selections(sequence, model, config)
    save_selection_cache(masks, args.out, threshold=args.threshold)
    non_empty = sum(0 if m.is_empty else 1 for m in masks)
    if non_empty == 0:
        print("warning: every frame produced an empty selection "
              "(dataset may be neutral-only or the threshold too high)")
    print(f"selection cache: {non_empty}/{len(masks)} non-empty frames -> {args.out}")
    if args.heatmap:
        offsets = np.stack(
            [
                face_center_offsets(depose_frame(sequence, i), sequence.neutral)
                for i in range(sequence.n_frames)
            ]
        )
        export_offset_heatmap(sequence, offsets, args.heatmap)
        print(f"offset heatmaps -> {args.heatmap}")
    return 0


def cmd_train(args) -> int:
    manifest = load_manifest(args.data)
    if args.config:
        config = TrainConfig.from_json(args.config)
    else:
        config = TrainConfig()
    if args.iterations is not None:
        config.iterations = args.iterations
    if args.seed is not None:
        config.seed = args.seed
    config.selective = not args.no_selective
    config.background = tuple(manifest.background)

    selections: dict[int, np.ndarray] = {}
    if config.selective:
        if not args.selection or not os.path.exists(args.selection):
            print(
                "error: selective training needs a selection cache; "
                "run `meshsplat select` first (or pass --no-selective)",
                file=sys.stderr,
            )
            return 1
        selections = load_selection_cache(args.selection)
    elif args.selection and os.path.exists(args.selection):
        selections = load_selection_cache(args.selection)

    _log_config(
        "train",
        {
            "data": args.data,
            "selection": args.selection,
            "out": args.out,
            "iterations": config.iterations,
            "seed": config.seed,
            "selective": config.selective,
            "lambda_dssim": config.lambda_dssim,
            "global_period": config.global_period,
        },
    )
    os.makedirs(args.out, exist_ok=True)
    config.to_json(os.path.join(args.out, "train_config.json"))
    sequence = manifest.load_sequence()
    model = init_splats(sequence.neutral, sh_degree=args.sh_degree)
    model, log = train(model, manifest, selections, config, out_dir=args.out)
    print(
        f"trained {config.iterations} iterations; "
        f"first total {log[0]['total']:.5f} -> last total {log[-1]['total']:.5f}"
    )
    print(f"checkpoint -> {os.path.join(args.out, 'checkpoint_final.ply')}")
    return 0


def _render_frames(model, manifest, sequence, frames, views, out_dir, tag="render"):
    bg = np.asarray(manifest.background, dtype=np.float64)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for frame in frames:
        rig = build_frame_rig(sequence, frame)
        world = realize_world(model, rig)
        for view in views:
            img = rasterize(world, manifest.camera(view), bg)
            path = os.path.join(out_dir, f"{tag}_f{frame:04d}_v{view:02d}.png")
            write_png(path, img)
            written.append(path)
    return written


def _parse_int_list(text: str | None, default: list[int]) -> list[int]:
    if not text:
        return default
    return [int(v) for v in text.split(",") if v != ""]


def cmd_render(args) -> int:
    _log_config("render", {"data": args.data, "checkpoint": args.checkpoint, "out": args.out})
    manifest = load_manifest(args.data)
    sequence = manifest.load_sequence()
    model = load_checkpoint(args.checkpoint)
    if model.parent_face.max() >= sequence.neutral.n_faces:
        raise TopologyMismatch("checkpoint references faces beyond the dataset mesh")
    frames = _parse_int_list(args.frames, list(range(manifest.n_frames)))
    views = _parse_int_list(args.views, list(range(manifest.n_views)))
    written = _render_frames(model, manifest, sequence, frames, views, args.out)
    print(f"rendered {len(written)} image(s) -> {args.out}")
    return 0


def cmd_reenact(args) -> int:
    _log_config(
        "reenact", {"data": args.data, "checkpoint": args.checkpoint, "out": args.out}
    )
    manifest = load_manifest(args.data)
    sequence = manifest.load_sequence()
    model = load_checkpoint(args.checkpoint)
    n_faces = sequence.neutral.n_faces
    if model.parent_face.max() >= n_faces:
        raise TopologyMismatch(
            f"model embeds faces up to {int(model.parent_face.max())} but the driving "
            f"sequence has only {n_faces} faces"
        )
    frames = _parse_int_list(args.frames, list(range(manifest.n_frames)))
    views = _parse_int_list(args.views, manifest.test_views or [0])
    written = _render_frames(model, manifest, sequence, frames, views, args.out, tag="reenact")
    print(f"reenacted {len(written)} image(s) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    _log_config(
        "eval", {"data": args.data, "checkpoint": args.checkpoint, "out": args.out}
    )
    manifest = load_manifest(args.data)
    model = load_checkpoint(args.checkpoint)
    views = _parse_int_list(args.views, manifest.test_views)
    selections = None
    if args.selection and os.path.exists(args.selection):
        selections = load_selection_cache(args.selection)
    report = evaluate_model(model, manifest, view_ids=views, selections=selections)
    report.to_json(args.out)
    if args.csv:
        report.to_csv(args.csv)
    print(f"mean PSNR {report.mean_psnr:.2f} dB, mean SSIM {report.mean_ssim:.4f} -> {args.out}")
    return 0


def cmd_export_ply(args) -> int:
    _log_config(
        "export-ply",
        {"checkpoint": args.checkpoint, "data": args.data, "frame": args.frame, "out": args.out},
    )
    from .avatar import export_world_ply
    from .geometry import neutral_rig

    model = load_checkpoint(args.checkpoint)
    if args.data:
        manifest = load_manifest(args.data)
        sequence = manifest.load_sequence()
        rig = build_frame_rig(sequence, args.frame)
    else:
        raise MeshSplatError(
            "export-ply needs --data to rebuild the mesh rig for the snapshot"
        )
    world = realize_world(model, rig)
    export_world_ply(world, args.out, parent_face=model.parent_face)
    print(f"world-space snapshot ({model.n_splats} splats) -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshsplat",
        description="Mesh-driven dynamic Gaussian head avatars with selective training",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--faces", type=int, default=500)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("select", help="precompute per-frame trainable faces")
    p.add_argument("--data", required=True, help="dataset manifest.json")
    p.add_argument("--threshold", type=float, default=0.01)
    p.add_argument("--out", required=True, help="selection cache path")
    p.add_argument("--heatmap", help="directory for offset heatmap diagnostics")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("train", help="train an avatar")
    p.add_argument("--data", required=True)
    p.add_argument("--selection", help="selection cache from `select`")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="TrainConfig JSON file")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--sh-degree", type=int, default=1)
    p.add_argument("--no-selective", action="store_true", help="all-global ablation run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render frames from a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", help="comma-separated frame indices (default all)")
    p.add_argument("--views", help="comma-separated view indices (default all)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("reenact", help="drive a checkpoint with another mesh sequence")
    p.add_argument("--data", required=True, help="driving dataset manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames")
    p.add_argument("--views")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reenact)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out views")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--views", help="view indices; defaults to the manifest test views")
    p.add_argument("--selection", help="selection cache for region PSNR")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", help="optional report CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-ply", help="export a world-space splat snapshot")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_ply)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MeshSplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
