"""Synthetic head-proxy dataset generation.

Builds a deformed geodesic sphere ("head"), labels four key regions on it,
animates region-local bulges plus random rigid head poses over a frame
sequence, plants a hidden ground-truth splat model on the mesh, renders
all (frame, view) images with this engine's own rasterizer and writes a
complete dataset directory:

    out/
      manifest.json
      neutral.obj
      frames/frame_0000.bin ...      float32 vertex buffers
      images/f0000_v00.png ...
      gt_model.ply                   hidden ground truth (oracle use only)

The generator is deterministic for a fixed seed. The ground-truth model is
finer than the default trainee initialization (10 splats per face vs 6)
and carries extra per-splat color detail inside the key regions, so a
trained model has to spend capacity there.
"""

from __future__ import annotations

import os

import numpy as np

from .avatar import SplatModel, logit, realize_world, save_checkpoint, load_checkpoint
from .dataset import DatasetManifest, load_manifest, save_manifest
from .geometry import (
    FramePose,
    MeshSequence,
    TriMesh,
    apply_rigid,
    face_frames,
    rig_from_vertices,
    save_obj,
    save_vertex_buffer,
)
from .imageio import to_uint8, write_png
from .quat import quat_normalize, rotmat_to_quat
from .renderer import Camera, RenderConfig, rasterize
from .selection import SelectionConfig, precompute_selections
from .sh import SH_C0

HEAD_RADII = (0.095, 0.115, 0.100)  # x, y, z: a ~0.2-unit-tall head

REGION_ANCHORS = {
    "left_eye": (-0.42, 0.38, 0.82),
    "right_eye": (0.42, 0.38, 0.82),
    "nose": (0.0, 0.0, 1.0),
    "mouth": (0.0, -0.45, 0.89),
}
REGION_RADII = {"left_eye": 0.32, "right_eye": 0.32, "nose": 0.24, "mouth": 0.32}
CHEEK_ANCHOR = (-0.70, -0.12, 0.64)  # a non-region bump exercising per-face selection

# wandering low-amplitude deformation lobes: like tracked capture data, most
# of the surface crosses the selection threshold in some frames
BREATHING_LOBES = (
    # (base direction, precession axis, revolutions per sequence, amplitude)
    ((1.0, 0.3, 0.2), (0.0, 1.0, 0.0), 1.0, 0.020),
    ((0.1, 1.0, -0.3), (1.0, 0.0, 0.0), 2.0, 0.018),
    ((-0.4, -0.2, 1.0), (0.577, 0.577, 0.577), 3.0, 0.016),
)
BREATHING_WIDTH = 0.55  # radians

# the shipped mesh track is an idealized fit; images are rendered from
# per-frame amplitude jitter around it, standing in for tracking error
TRACK_JITTER = 0.15


def icosphere(frequency: int) -> tuple[np.ndarray, np.ndarray]:
    """Geodesic subdivision of an icosahedron: 20 * frequency**2 faces on the unit sphere."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    base = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    base /= np.linalg.norm(base, axis=1, keepdims=True)
    base_faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    f = frequency
    vert_map: dict[tuple, int] = {}
    vertices: list[np.ndarray] = []
    faces: list[list[int]] = []

    def vid(p: np.ndarray) -> int:
        key = tuple(np.round(p, 9))
        if key not in vert_map:
            vert_map[key] = len(vertices)
            vertices.append(p)
        return vert_map[key]

    for tri in base_faces:
        a, b, c = base[tri]
        grid = {}
        for i in range(f + 1):
            for j in range(f + 1 - i):
                p = (a * (f - i - j) + b * i + c * j) / f
                p = p / np.linalg.norm(p)
                grid[(i, j)] = vid(p)
        for i in range(f):
            for j in range(f - i):
                faces.append([grid[(i, j)], grid[(i + 1, j)], grid[(i, j + 1)]])
                if i + j < f - 1:
                    faces.append([grid[(i + 1, j)], grid[(i + 1, j + 1)], grid[(i, j + 1)]])
    return np.asarray(vertices), np.asarray(faces, dtype=np.int32)


def _region_masks(sphere_vertices: np.ndarray, faces: np.ndarray) -> dict[str, np.ndarray]:
    centroids = sphere_vertices[faces].mean(axis=1)
    dirs = centroids / np.linalg.norm(centroids, axis=1, keepdims=True)
    names = list(REGION_ANCHORS)
    anchors = np.array([REGION_ANCHORS[n] for n in names])
    anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
    angles = np.arccos(np.clip(dirs @ anchors.T, -1.0, 1.0))  # (F, R)
    radii = np.array([REGION_RADII[n] for n in names])
    inside = angles < radii[None, :]
    nearest = np.argmin(angles, axis=1)
    masks = {}
    taken = np.zeros(len(dirs), dtype=bool)
    for r, name in enumerate(names):
        chosen = inside[:, r] & (nearest == r) & ~taken
        if not chosen.any():  # coarse meshes: claim the closest free face
            order = np.argsort(angles[:, r])
            for f in order:
                if not taken[f]:
                    chosen[f] = True
                    break
        taken |= chosen
        masks[name] = np.nonzero(chosen)[0].astype(np.int32)
    return masks


def _deform_amplitudes(t: int, n_frames: int) -> dict[str, float]:
    """Per-frame bulge amplitude (mesh units) for each region plus the cheek."""
    if t % 8 == 0:  # anchor frames stay neutral (pose only)
        return {k: 0.0 for k in ("left_eye", "right_eye", "nose", "mouth", "cheek")}
    return {
        "mouth": 0.050 * abs(np.sin(np.pi * t / 5.0)),
        "left_eye": 0.036 if t % 5 in (1, 2) else 0.0,
        "right_eye": 0.036 if t % 7 in (2, 3) else 0.0,
        "nose": 0.030 if t % 8 in (4, 5) else 0.0,
        "cheek": 0.030 if t % 6 == 4 else 0.0,
    }


def _rotate_about(v: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    c, s = np.cos(angle), np.sin(angle)
    return v * c + np.cross(axis, v) * s + axis * (axis @ v) * (1.0 - c)


def _breathing_field(sphere_vertices: np.ndarray, t: int, n_frames: int) -> np.ndarray:
    """Per-vertex amplitude of the wandering surface lobes for frame t."""
    amp = np.zeros(len(sphere_vertices))
    for base, axis, revs, strength in BREATHING_LOBES:
        base = np.asarray(base) / np.linalg.norm(base)
        center = _rotate_about(base, np.asarray(axis), 2.0 * np.pi * revs * t / n_frames)
        ang = np.arccos(np.clip(sphere_vertices @ center, -1.0, 1.0))
        amp += strength * np.exp(-((ang / BREATHING_WIDTH) ** 2))
    return amp


def _deform(
    sphere_vertices: np.ndarray,
    neutral_vertices: np.ndarray,
    amps: dict[str, float],
    t: int = 0,
    n_frames: int = 1,
    breathing_scale: float = 1.0,
) -> np.ndarray:
    """Radial bulges with smooth falloff around each active anchor."""
    dirs = sphere_vertices  # unit sphere positions double as outward normals
    out = neutral_vertices.copy()
    anchors = dict(REGION_ANCHORS)
    anchors["cheek"] = CHEEK_ANCHOR
    radii = dict(REGION_RADII)
    radii["cheek"] = 0.26
    for name, amp in amps.items():
        if amp == 0.0:
            continue
        a = np.asarray(anchors[name], dtype=np.float64)
        a /= np.linalg.norm(a)
        angle = np.arccos(np.clip(dirs @ a, -1.0, 1.0))
        reach = 2.0 * radii[name]
        fall = np.where(angle < reach, np.cos(0.5 * np.pi * angle / reach) ** 2, 0.0)
        out += (amp * fall)[:, None] * dirs
    if t % 8 != 0:  # anchor frames stay fully neutral
        out += breathing_scale * _breathing_field(sphere_vertices, t, n_frames)[:, None] * dirs
    return out


def _ground_truth_model(
    mesh: TriMesh, sphere_vertices: np.ndarray, sh_degree: int, rng: np.random.Generator
) -> SplatModel:
    """A fine splat model on the mesh: 10 lattice splats per face, detailed colors."""
    verts = mesh.vertices
    faces = mesh.faces
    tri = verts[faces]
    origins, rotations = face_frames(verts, faces)
    n_faces = len(faces)

    bary = []
    f = 3
    for i in range(f + 1):
        for j in range(f + 1 - i):
            bary.append(((f - i - j) / f, i / f, j / f))
    bary = np.asarray(bary)  # (10, 3)
    points = np.einsum("bk,fkd->fbd", bary, tri)  # (F, 10, 3)
    rel = points - origins[:, None, :]
    xyz_em = np.einsum("fji,fbj->fbi", rotations, rel).reshape(-1, 3)

    n = n_faces * len(bary)
    parent = np.repeat(np.arange(n_faces, dtype=np.int32), len(bary))

    edge = np.linalg.norm(np.roll(tri, -1, axis=1) - tri, axis=-1).mean(axis=1)
    base_scale = np.repeat(0.16 * edge, len(bary))
    jitter = rng.uniform(0.75, 1.25, size=(n, 3))
    log_scale = np.log(base_scale[:, None] * jitter)

    rot = quat_normalize(rng.standard_normal((n, 4)) * 0.25 + np.array([1.0, 0, 0, 0]))
    opacity = logit(rng.uniform(0.75, 0.97, size=n))

    # smooth near-gray skin with strong per-splat detail in the key regions:
    # the proxy for teeth/eye/wrinkle detail the regions exist for
    world = points.reshape(-1, 3)
    freqs = np.array([[9.0, 3.0, 5.0], [4.0, 8.0, 5.0], [5.0, 4.0, 9.0]])
    phases = np.array([0.3, 1.2, 2.1])
    base_rgb = 0.52 + 0.07 * np.sin(world @ freqs.T + phases)

    in_region = np.zeros(n_faces, dtype=bool)
    for idx in mesh.region_masks.values():
        in_region[idx] = True
    detail_sigma = np.where(in_region[parent], 0.40, 0.02)
    detail = rng.uniform(-1.0, 1.0, size=(n, 3)) * detail_sigma[:, None]
    rgb = np.clip(base_rgb + detail, 0.06, 0.94)

    k = (sh_degree + 1) ** 2
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = (rgb - 0.5) / SH_C0
    if k > 1:
        sh[:, 1:, :] = rng.uniform(-0.05, 0.05, size=(n, k - 1, 3))

    return SplatModel(
        parent_face=parent,
        xyz_em=xyz_em,
        rot_em=rot,
        log_scale_em=log_scale,
        opacity_raw=opacity,
        sh=sh,
        sh_degree=sh_degree,
    )


def make_cameras(views: int, image_size: int, distance: float = 0.42) -> list[Camera]:
    """A frontal arc of cameras looking at the origin; view 0 is dead frontal."""
    azimuths = [0.0]
    span = np.linspace(-75.0, 75.0, views - 1) if views > 1 else []
    azimuths += [a for a in span if True]
    cams = []
    up = np.array([0.0, 1.0, 0.0])
    for i, az_deg in enumerate(azimuths[:views]):
        elev_deg = 8.0 * (-1.0) ** i if i else 0.0
        az, el = np.radians(az_deg), np.radians(elev_deg)
        pos = distance * np.array([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
        z_cam = -pos / np.linalg.norm(pos)
        x_cam = np.cross(z_cam, up)
        x_cam /= np.linalg.norm(x_cam)
        y_cam = np.cross(z_cam, x_cam)
        rot = np.stack([x_cam, y_cam, z_cam], axis=0)
        q = rotmat_to_quat(rot)
        t = -rot @ pos
        f = 0.866 * image_size
        cams.append(
            Camera(
                fx=f,
                fy=f,
                cx=image_size / 2.0,
                cy=image_size / 2.0,
                width=image_size,
                height=image_size,
                world_to_camera_rot=q,
                world_to_camera_trans=t,
            )
        )
    return cams


def synth_generate(
    seed: int,
    faces: int,
    frames: int,
    views: int,
    out_path,
    image_size: int = 64,
    sh_degree: int = 1,
    background: tuple[float, float, float] = (1.0, 1.0, 1.0),
    verify: bool = True,
) -> DatasetManifest:
    """Generate a complete synthetic dataset; returns the loaded manifest."""
    if faces <= 0 or frames <= 0 or views <= 0 or image_size <= 0:
        raise ValueError("faces, frames, views and image_size must be positive")
    rng_root = np.random.SeedSequence(seed)
    rng_model, rng_pose, rng_track = (np.random.default_rng(s) for s in rng_root.spawn(3))

    frequency = max(1, int(round(np.sqrt(faces / 20.0))))
    sphere_v, faces_arr = icosphere(frequency)
    neutral_v = sphere_v * np.asarray(HEAD_RADII)
    masks = _region_masks(sphere_v, faces_arr)
    neutral = TriMesh(vertices=neutral_v, faces=faces_arr, region_masks=masks)

    os.makedirs(out_path, exist_ok=True)
    os.makedirs(os.path.join(out_path, "frames"), exist_ok=True)
    os.makedirs(os.path.join(out_path, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_path, "gt_frames"), exist_ok=True)
    save_obj(os.path.join(out_path, "neutral.obj"), neutral_v, faces_arr)

    frame_records = []
    posed_frames = []  # the shipped (idealized) track
    render_frames = []  # the hidden track the images are rendered from
    for t in range(frames):
        amps = _deform_amplitudes(t, frames)
        deformed = _deform(sphere_v, neutral_v, amps, t=t, n_frames=frames)
        # tracking error: the images come from jittered amplitudes
        jitter = {k: 1.0 + TRACK_JITTER * rng_track.uniform(-1.0, 1.0) for k in amps}
        b_scale = 1.0 + TRACK_JITTER * rng_track.uniform(-1.0, 1.0)
        true_amps = {k: v * jitter[k] for k, v in amps.items()}
        deformed_true = _deform(
            sphere_v, neutral_v, true_amps, t=t, n_frames=frames, breathing_scale=b_scale
        )
        if t == 0:
            q = np.array([1.0, 0.0, 0.0, 0.0])
            trans = np.zeros(3)
        else:
            axis = rng_pose.standard_normal(3)
            axis /= np.linalg.norm(axis)
            angle = rng_pose.uniform(0.02, 0.20)
            q = np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])
            trans = rng_pose.uniform(-0.03, 0.03, size=3)
        posed = apply_rigid(deformed, q, trans)
        posed_true = apply_rigid(deformed_true, q, trans)
        rel = os.path.join("frames", f"frame_{t:04d}.bin")
        save_vertex_buffer(os.path.join(out_path, rel), posed)
        save_vertex_buffer(os.path.join(out_path, "gt_frames", f"frame_{t:04d}.bin"), posed_true)
        frame_records.append(
            {
                "index": t,
                "vertices": rel,
                "rigid_rotation": [float(v) for v in q],
                "rigid_translation": [float(v) for v in trans],
            }
        )
        posed_frames.append(FramePose(vertex_positions=posed, rigid_rotation=q, rigid_translation=trans))
        render_frames.append(
            FramePose(vertex_positions=posed_true, rigid_rotation=q, rigid_translation=trans)
        )

    sequence = MeshSequence(neutral=neutral, frames=posed_frames)
    gt_model = _ground_truth_model(neutral, sphere_v, sh_degree, rng_model)
    save_checkpoint(gt_model, os.path.join(out_path, "gt_model.ply"))

    cameras = make_cameras(views, image_size)
    render_cfg = RenderConfig()
    bg = np.asarray(background, dtype=np.float64)
    neutral_areas = neutral.face_areas()

    image_paths = []
    for t in range(frames):
        rig = rig_from_vertices(render_frames[t].vertex_positions, faces_arr, neutral_areas)
        world = realize_world(gt_model, rig)
        row = []
        for v, cam in enumerate(cameras):
            img = rasterize(world, cam, bg, render_cfg)
            rel = os.path.join("images", f"f{t:04d}_v{v:02d}.png")
            write_png(os.path.join(out_path, rel), img)
            row.append(rel)
        image_paths.append(row)

    manifest = DatasetManifest(
        root=os.path.abspath(out_path),
        neutral_mesh="neutral.obj",
        regions={k: v.tolist() for k, v in masks.items()},
        frames=frame_records,
        cameras=cameras,
        train_views=list(range(1, views)) if views > 1 else [0],
        test_views=[0] if views > 1 else [],
        images=image_paths,
        background=tuple(float(b) for b in background),
    )
    save_manifest(manifest, os.path.join(out_path, "manifest.json"))
    loaded = load_manifest(os.path.join(out_path, "manifest.json"))

    if verify:
        render_sequence = MeshSequence(neutral=neutral, frames=render_frames)
        _verify_dataset(loaded, sequence, render_sequence, gt_model, render_cfg, frames)
    return loaded


def _verify_dataset(manifest, sequence, render_sequence, gt_model, render_cfg, frames):
    """Self-consistency and deformation-coverage checks on the fresh dataset."""
    from .imageio import read_png

    neutral_areas = sequence.neutral.face_areas()
    bg = np.asarray(manifest.background)
    check_pairs = [(0, v) for v in range(min(manifest.n_views, 2))]
    if frames > 1:
        check_pairs.append((frames // 2, manifest.n_views - 1))
    for t, v in check_pairs:
        rig = rig_from_vertices(
            render_sequence.frames[t].vertex_positions, sequence.neutral.faces, neutral_areas
        )
        world = realize_world(gt_model, rig)
        img = rasterize(world, manifest.camera(v), bg, render_cfg)
        stored = read_png(manifest.path(manifest.images[t][v]))
        if not np.array_equal(to_uint8(img), to_uint8(stored)):
            raise AssertionError(f"re-render of frame {t} view {v} does not match stored image")

    if frames >= 8:
        model_probe = gt_model  # membership only depends on parent faces
        selections = precompute_selections(sequence, model_probe, SelectionConfig())
        non_empty = sum(0 if s.is_empty else 1 for s in selections)
        if non_empty < max(1, int(0.7 * frames)):
            raise AssertionError(f"only {non_empty}/{frames} frames produce a non-empty selection")
        tripped = set()
        for s in selections:
            for name, idx in sequence.neutral.region_masks.items():
                if idx.size and np.isin(idx, s.selected_faces).all():
                    tripped.add(name)
        missing = set(sequence.neutral.region_masks) - tripped
        if missing:
            raise AssertionError(f"regions never selected: {sorted(missing)}")


def load_gt_model(dataset_dir) -> SplatModel:
    return load_checkpoint(os.path.join(dataset_dir, "gt_model.ply"))


def load_gt_sequence(dataset_dir, manifest) -> MeshSequence:
    """The hidden mesh track the images were rendered from (oracle use only)."""
    from .geometry import load_vertex_buffer

    neutral = manifest.load_neutral()
    frames = []
    for rec in manifest.frames:
        path = os.path.join(dataset_dir, "gt_frames", f"frame_{rec['index']:04d}.bin")
        frames.append(
            FramePose(
                vertex_positions=load_vertex_buffer(path, neutral.n_vertices),
                rigid_rotation=np.asarray(rec["rigid_rotation"]),
                rigid_translation=np.asarray(rec["rigid_translation"]),
            )
        )
    return MeshSequence(neutral=neutral, frames=frames)
