"""Per-frame choice of trainable splats from mesh deformation.

For every frame the rigid head pose is removed, each triangle centroid is
compared against the neutral mesh, and faces that moved beyond a threshold
are selected. Named key regions (eyes, mouth, nose) are all-or-nothing:
a region is selected as a block iff its mean centroid offset exceeds the
threshold. Splats are selected through their parent face.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .avatar import SplatModel
from .errors import TopologyMismatch
from .geometry import MeshSequence, TriMesh, face_centroids
from .quat import quat_conjugate, quat_rotate

DEFAULT_THRESHOLD = 0.01  # mesh units, calibrated to a ~0.2-unit head


@dataclass
class SelectionConfig:
    threshold: float = DEFAULT_THRESHOLD
    key_regions: tuple[str, ...] | None = None  # None = every region on the mesh

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")

    def resolve_regions(self, mesh: TriMesh) -> list[str]:
        if self.key_regions is None:
            return sorted(mesh.region_masks)
        missing = [r for r in self.key_regions if r not in mesh.region_masks]
        if missing:
            raise KeyError(f"key regions not defined on the mesh: {missing}")
        return list(self.key_regions)


@dataclass
class SelectionMask:
    """Faces (and their splats) trainable on one frame."""

    frame_index: int
    selected_faces: np.ndarray  # sorted face indices
    selected_splats: np.ndarray  # sorted splat indices

    def __post_init__(self):
        self.selected_faces = np.unique(np.asarray(self.selected_faces, dtype=np.int64))
        self.selected_splats = np.unique(np.asarray(self.selected_splats, dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return self.selected_faces.size == 0


def depose_frame(sequence: MeshSequence, frame_index: int) -> np.ndarray:
    """Remove a frame's rigid pose: v' = R^-1 (v - t)."""
    frame = sequence.frames[frame_index]
    inv = quat_conjugate(frame.rigid_rotation)
    return quat_rotate(inv, frame.vertex_positions - frame.rigid_translation)


def face_center_offsets(deposed_vertices: np.ndarray, neutral: TriMesh) -> np.ndarray:
    """Distance each face centroid moved relative to the neutral mesh, shape (F,)."""
    deposed_vertices = np.asarray(deposed_vertices, dtype=np.float64)
    if deposed_vertices.shape != neutral.vertices.shape:
        raise TopologyMismatch(
            f"deposed vertices {deposed_vertices.shape} vs neutral {neutral.vertices.shape}"
        )
    moved = face_centroids(deposed_vertices, neutral.faces)
    return np.linalg.norm(moved - neutral.face_centroids(), axis=1)


def select_faces(offsets: np.ndarray, mesh: TriMesh, config: SelectionConfig) -> np.ndarray:
    """Faces whose offset exceeds the threshold, with key regions kept atomic.

    A key region is included as a whole iff the mean offset over its faces
    strictly exceeds the threshold; faces outside every key region are
    judged individually. Returns sorted face indices.
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != (mesh.n_faces,):
        raise TopologyMismatch(f"offsets length {offsets.shape} vs {mesh.n_faces} faces")
    region_names = config.resolve_regions(mesh)
    in_region = np.zeros(mesh.n_faces, dtype=bool)
    picked = np.zeros(mesh.n_faces, dtype=bool)
    for name in region_names:
        idx = mesh.region_masks[name]
        in_region[idx] = True
        if idx.size and offsets[idx].mean() > config.threshold:
            picked[idx] = True
    free = ~in_region
    picked[free] = offsets[free] > config.threshold
    return np.nonzero(picked)[0].astype(np.int64)


def splats_on_faces(model: SplatModel, faces: np.ndarray, n_faces: int) -> np.ndarray:
    """Sorted indices of splats whose parent face is in `faces`."""
    lut = np.zeros(n_faces, dtype=bool)
    lut[np.asarray(faces, dtype=np.int64)] = True
    return np.nonzero(lut[model.parent_face])[0].astype(np.int64)


def splat_row_mask(model: SplatModel, faces: np.ndarray, n_faces: int) -> np.ndarray:
    """Boolean per-splat membership mask for the given faces."""
    lut = np.zeros(n_faces, dtype=bool)
    lut[np.asarray(faces, dtype=np.int64)] = True
    return lut[model.parent_face]


def build_selection(
    sequence: MeshSequence,
    frame_index: int,
    model: SplatModel,
    config: SelectionConfig,
) -> SelectionMask:
    """Full per-frame selection: depose, measure offsets, pick faces, map to splats."""
    deposed = depose_frame(sequence, frame_index)
    offsets = face_center_offsets(deposed, sequence.neutral)
    faces = select_faces(offsets, sequence.neutral, config)
    splats = splats_on_faces(model, faces, sequence.neutral.n_faces)
    return SelectionMask(frame_index=frame_index, selected_faces=faces, selected_splats=splats)


def precompute_selections(
    sequence: MeshSequence, model: SplatModel, config: SelectionConfig
) -> list[SelectionMask]:
    return [build_selection(sequence, i, model, config) for i in range(sequence.n_frames)]


# ---------------------------------------------------------------------------
# On-disk cache: faces only. Splat membership is re-derived against whatever
# model is current, so splats added by densification inherit their parent
# face's selection automatically.


def save_selection_cache(masks: list[SelectionMask], path, threshold: float | None = None) -> None:
    payload = {
        "schema_version": 1,
        "threshold": threshold,
        "frames": [
            {"frame_index": int(m.frame_index), "faces": m.selected_faces.tolist()} for m in masks
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_selection_cache(path) -> dict[int, np.ndarray]:
    """frame_index -> sorted selected face indices."""
    with open(path) as fh:
        payload = json.load(fh)
    return {
        int(rec["frame_index"]): np.asarray(rec["faces"], dtype=np.int64)
        for rec in payload["frames"]
    }


def bind_cache_to_model(
    cache: dict[int, np.ndarray], model: SplatModel, n_faces: int
) -> list[SelectionMask]:
    masks = []
    for frame_index in sorted(cache):
        faces = cache[frame_index]
        masks.append(
            SelectionMask(
                frame_index=frame_index,
                selected_faces=faces,
                selected_splats=splats_on_faces(model, faces, n_faces),
            )
        )
    return masks


# ---------------------------------------------------------------------------
# Diagnostics: offsets as vertex-colored OBJ plus a color-mapped PNG strip.


def _colormap(values: np.ndarray) -> np.ndarray:
    """Map scalars in [0, 1] to a blue -> green -> red gradient, shape (..., 3)."""
    v = np.clip(values, 0.0, 1.0)
    r = np.clip(2.0 * v - 1.0, 0.0, 1.0)
    g = 1.0 - np.abs(2.0 * v - 1.0)
    b = np.clip(1.0 - 2.0 * v, 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def export_offset_heatmap(
    sequence: MeshSequence,
    all_offsets: np.ndarray,
    out_dir,
    scale: float | None = None,
) -> None:
    """Write one vertex-colored OBJ per frame and a frames-by-faces PNG heatmap.

    all_offsets has shape (n_frames, n_faces). Colors saturate at `scale`
    (default: the 99th percentile of all offsets).
    """
    import os

    from .imageio import write_png

    os.makedirs(out_dir, exist_ok=True)
    mesh = sequence.neutral
    if scale is None:
        top = float(np.percentile(all_offsets, 99)) if all_offsets.size else 0.0
        scale = top if top > 0 else 1.0
    norm = np.asarray(all_offsets, dtype=np.float64) / scale
    from .geometry import save_obj

    for frame_index in range(len(norm)):
        face_colors = _colormap(norm[frame_index])
        vert_color = np.zeros((mesh.n_vertices, 3))
        counts = np.zeros(mesh.n_vertices)
        for corner in range(3):
            np.add.at(vert_color, mesh.faces[:, corner], face_colors)
            np.add.at(counts, mesh.faces[:, corner], 1.0)
        vert_color /= np.maximum(counts, 1.0)[:, None]
        save_obj(
            os.path.join(out_dir, f"offsets_frame{frame_index:04d}.obj"),
            mesh.vertices,
            mesh.faces,
            vertex_colors=vert_color,
        )
    heat = _colormap(norm)  # (frames, faces, 3)
    write_png(os.path.join(out_dir, "offsets_heatmap.png"), heat)
