"""Triangle-mesh data model and per-face local frames.

Every face of a mesh carries an orthonormal frame: origin at the vertex
centroid, x-axis toward the face's first vertex, z-axis along the face
normal, y = z × x. Deformation is measured per face by the square root of
the area ratio against the neutral (canonical) mesh, which is the scale
factor applied to embedded splats.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFace, TopologyMismatch
from .quat import quat_rotate

MIN_FACE_AREA = 1e-12


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Per-triangle areas, shape (F,)."""
    tri = np.asarray(vertices)[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=-1)


def face_centroids(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Per-triangle vertex centroids, shape (F, 3)."""
    return np.asarray(vertices)[faces].mean(axis=1)


@dataclass
class TriMesh:
    """A triangle mesh plus optional named face regions.

    Attributes:
        vertices: (V, 3) float array, mesh units.
        faces: (F, 3) int array of vertex indices.
        region_masks: region name -> sorted array of face indices. Regions
            must be disjoint.
    """

    vertices: np.ndarray
    faces: np.ndarray
    region_masks: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int32)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError(f"faces must be (F, 3), got {self.faces.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face indices out of range")
        areas = self.face_areas()
        bad = np.nonzero(areas <= MIN_FACE_AREA)[0]
        if bad.size:
            raise DegenerateFace(f"{bad.size} degenerate face(s), first is face {bad[0]}")
        self.region_masks = {
            name: np.unique(np.asarray(idx, dtype=np.int32)) for name, idx in self.region_masks.items()
        }
        seen = np.zeros(len(self.faces), dtype=bool)
        for name, idx in self.region_masks.items():
            if idx.size and (idx.min() < 0 or idx.max() >= len(self.faces)):
                raise ValueError(f"region {name!r} references invalid faces")
            if np.any(seen[idx]):
                raise ValueError(f"region {name!r} overlaps another region")
            seen[idx] = True

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_areas(self) -> np.ndarray:
        return face_areas(self.vertices, self.faces)

    def face_centroids(self) -> np.ndarray:
        return face_centroids(self.vertices, self.faces)


@dataclass
class FramePose:
    """Posed vertices of one frame plus the rigid head pose that produced them."""

    vertex_positions: np.ndarray  # (V, 3)
    rigid_rotation: np.ndarray  # (4,) unit quaternion, wxyz
    rigid_translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.vertex_positions = np.ascontiguousarray(self.vertex_positions, dtype=np.float64)
        self.rigid_rotation = np.asarray(self.rigid_rotation, dtype=np.float64)
        self.rigid_translation = np.asarray(self.rigid_translation, dtype=np.float64)
        if abs(np.linalg.norm(self.rigid_rotation) - 1.0) > 1e-6:
            raise ValueError("rigid_rotation must be a unit quaternion")


@dataclass
class MeshSequence:
    """A neutral mesh and per-frame posed vertices sharing its topology."""

    neutral: TriMesh
    frames: list[FramePose]

    def __post_init__(self):
        for i, frame in enumerate(self.frames):
            if frame.vertex_positions.shape != self.neutral.vertices.shape:
                raise TopologyMismatch(
                    f"frame {i} has {len(frame.vertex_positions)} vertices, "
                    f"neutral has {self.neutral.n_vertices}"
                )

    @property
    def n_frames(self) -> int:
        return len(self.frames)


@dataclass
class FrameRig:
    """Per-face frame quantities for one posed mesh.

    origins (F, 3), rotations (F, 3, 3) orthonormal, areas (F,), and the
    deformation scale factor k (F,) relative to the neutral areas.
    """

    origins: np.ndarray
    rotations: np.ndarray
    areas: np.ndarray
    k: np.ndarray


def face_frame(mesh_vertices: np.ndarray, face) -> tuple[np.ndarray, np.ndarray]:
    """Local frame (o, R) of a single triangle.

    o is the vertex centroid; R's columns are x = unit(v0 - o), z = face
    normal, y = z × x.

    Raises:
        DegenerateFace: if the triangle area or |v0 - o| is below 1e-12.
    """
    o, rot = face_frames(mesh_vertices, np.asarray(face, dtype=np.int64).reshape(1, 3))
    return o[0], rot[0]


def face_frames(vertices: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized local frames for every face: origins (F, 3), rotations (F, 3, 3)."""
    tri = np.asarray(vertices, dtype=np.float64)[faces]
    o = tri.mean(axis=1)
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    nlen = np.linalg.norm(normal, axis=-1)
    bad = np.nonzero(0.5 * nlen <= MIN_FACE_AREA)[0]
    if bad.size:
        raise DegenerateFace(f"face {bad[0]} has area {0.5 * nlen[bad[0]]:.3e}")
    x = tri[:, 0] - o
    xlen = np.linalg.norm(x, axis=-1)
    bad = np.nonzero(xlen <= MIN_FACE_AREA)[0]
    if bad.size:
        raise DegenerateFace(f"face {bad[0]}: first vertex coincides with centroid")
    v1 = x / xlen[:, None]
    v3 = normal / nlen[:, None]
    v2 = np.cross(v3, v1)
    rot = np.stack([v1, v2, v3], axis=-1)  # columns
    return o, rot


def face_scale_factor(area_t, area_can):
    """Deformation scale k = sqrt(area_t / area_can); k = 1 at the canonical mesh."""
    area_t = np.asarray(area_t, dtype=np.float64)
    area_can = np.asarray(area_can, dtype=np.float64)
    bad = np.nonzero(np.atleast_1d(area_can) <= MIN_FACE_AREA)[0]
    if bad.size:
        raise DegenerateFace(f"canonical face {bad[0]} has area <= {MIN_FACE_AREA}")
    return np.sqrt(area_t / area_can)


def rig_from_vertices(vertices: np.ndarray, faces: np.ndarray, neutral_areas: np.ndarray) -> FrameRig:
    """Build a FrameRig for an arbitrary vertex array over a fixed topology."""
    origins, rotations = face_frames(vertices, faces)
    areas = face_areas(vertices, faces)
    k = face_scale_factor(areas, neutral_areas)
    return FrameRig(origins=origins, rotations=rotations, areas=areas, k=k)


def build_frame_rig(sequence: MeshSequence, frame_index: int) -> FrameRig:
    """FrameRig for one frame of a sequence; k is measured against neutral areas."""
    if not 0 <= frame_index < sequence.n_frames:
        raise IndexError(f"frame_index {frame_index} out of range")
    neutral_areas = sequence.neutral.face_areas()
    try:
        return rig_from_vertices(
            sequence.frames[frame_index].vertex_positions, sequence.neutral.faces, neutral_areas
        )
    except DegenerateFace as exc:
        raise DegenerateFace(f"frame {frame_index}: {exc}") from exc


def neutral_rig(mesh: TriMesh) -> FrameRig:
    """Rig of the neutral mesh itself (every k == 1)."""
    areas = mesh.face_areas()
    return rig_from_vertices(mesh.vertices, mesh.faces, areas)


def apply_rigid(vertices: np.ndarray, rotation_quat: np.ndarray, translation: np.ndarray) -> np.ndarray:
    """v' = R v + t for every vertex."""
    return quat_rotate(rotation_quat, np.asarray(vertices, dtype=np.float64)) + translation


# ---------------------------------------------------------------------------
# File formats: OBJ meshes and flat float32 vertex buffers.


def save_obj(path, vertices: np.ndarray, faces: np.ndarray, vertex_colors: np.ndarray | None = None) -> None:
    """Write a minimal OBJ. vertex_colors, if given, are appended per 'v' line."""
    with open(path, "w") as fh:
        for i, v in enumerate(np.asarray(vertices, dtype=np.float64)):
            if vertex_colors is not None:
                c = vertex_colors[i]
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g} {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}\n")
            else:
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in np.asarray(faces, dtype=np.int64):
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Read vertices and triangular faces from an OBJ file.

    Polygonal faces are fan-triangulated; texture/normal indices after '/'
    are ignored.
    """
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return np.asarray(vertices, dtype=np.float64), np.asarray(faces, dtype=np.int32)


def save_vertex_buffer(path, vertices: np.ndarray) -> None:
    """Write vertices as little-endian float32, row-major xyz."""
    np.asarray(vertices, dtype="<f4").tofile(path)


def load_vertex_buffer(path, n_vertices: int) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    if data.size != 3 * n_vertices:
        raise TopologyMismatch(
            f"{path}: expected {3 * n_vertices} floats, found {data.size}"
        )
    return data.reshape(n_vertices, 3).astype(np.float64)
