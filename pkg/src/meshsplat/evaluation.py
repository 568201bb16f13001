"""Held-out-view evaluation of a trained model against a dataset."""

from __future__ import annotations

import numpy as np

from .avatar import SplatModel, SplatWorld, realize_world
from .dataset import DatasetManifest
from .geometry import build_frame_rig
from .metrics import EvalEntry, EvalReport, psnr, region_psnr, ssim
from .renderer import Camera, RenderConfig, rasterize
from .selection import splat_row_mask


def coverage_mask(
    world: SplatWorld,
    member_rows: np.ndarray,
    cam: Camera,
    config: RenderConfig | None = None,
    threshold: float = 0.5,
) -> np.ndarray:
    """Pixels where the given splats carry most of the composited weight.

    Renders the scene with member splats at color 1 and the rest at color 0
    over a black background; the result is the member compositing mass per
    pixel, thresholded into a boolean mask.
    """
    marked = SplatWorld(
        xyz_world=world.xyz_world,
        rot_world=world.rot_world,
        scale_world=world.scale_world,
        opacity=world.opacity,
        sh=np.zeros_like(world.sh),
    )
    mass_sh = np.zeros_like(world.sh)
    mass_sh[member_rows, 0, :] = 0.5 / 0.28209479177387814  # rgb 1 after DC shift
    marked.sh = mass_sh
    mass = rasterize(marked, cam, np.zeros(3), config)
    return mass.mean(axis=2) > threshold


def evaluate_model(
    model: SplatModel,
    manifest: DatasetManifest,
    view_ids=None,
    selections: dict[int, np.ndarray] | None = None,
    coverage_model: SplatModel | None = None,
    config: RenderConfig | None = None,
) -> EvalReport:
    """PSNR/SSIM of re-rendered frames against stored images.

    view_ids defaults to the manifest's held-out test views. When
    `selections` is given, a per-frame region PSNR is computed over the
    pixels covered by the selected faces' splats (using coverage_model for
    the coverage geometry; defaults to the evaluated model).
    """
    if view_ids is None:
        view_ids = manifest.test_views
    if not view_ids:
        raise ValueError("no views to evaluate (manifest has no test views)")
    sequence = manifest.load_sequence()
    bg = np.asarray(manifest.background, dtype=np.float64)
    cov_model = coverage_model if coverage_model is not None else model

    report = EvalReport()
    for frame in range(manifest.n_frames):
        rig = build_frame_rig(sequence, frame)
        world = realize_world(model, rig)
        cov_world = world if cov_model is model else realize_world(cov_model, rig)
        faces = None
        if selections is not None:
            faces = selections.get(frame)
            if faces is not None and len(faces) == 0:
                faces = None
        for view in view_ids:
            cam = manifest.camera(view)
            rendered = rasterize(world, cam, bg, config)
            gt = manifest.load_image(frame, view)
            r_psnr = None
            if faces is not None:
                rows = np.nonzero(
                    splat_row_mask(cov_model, faces, sequence.neutral.n_faces)
                )[0]
                mask = coverage_mask(cov_world, rows, cam, config)
                if mask.any():
                    r_psnr = region_psnr(rendered, gt, mask)
            report.add(
                EvalEntry(
                    frame_index=frame,
                    view_index=view,
                    psnr=psnr(rendered, gt),
                    ssim=ssim(rendered, gt),
                    region_psnr=r_psnr,
                )
            )
    return report
