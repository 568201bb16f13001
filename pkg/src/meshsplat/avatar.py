"""The splat model: mesh-embedded Gaussians and their world-space realization.

Each splat stores its parameters in the local frame of a parent triangle.
Realizing a frame gathers the per-face frame (origin o, rotation R, scale
factor k) and maps

    xyz_world   = k * R * xyz_em + o
    rot_world   = quat(R) * rot_em
    scale_world = k * exp(log_scale_em)

Opacity and SH color are shared across frames; all animation comes from
the mesh.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import plyio
from .geometry import FrameRig, TriMesh, face_frames
from .quat import quat_left_matrix, quat_multiply, quat_rotate, rotmat_to_quat


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p / (1.0 - p))


PARAM_NAMES = ("xyz_em", "rot_em", "log_scale_em", "opacity_raw", "sh")


@dataclass
class SplatModel:
    """Per-splat local (mesh-embedded) parameters.

    Arrays share a leading splat dimension N:
        parent_face (N,) int32, xyz_em (N, 3), rot_em (N, 4) unit wxyz,
        log_scale_em (N, 3), opacity_raw (N,), sh (N, K, 3) with
        K = (sh_degree + 1)**2.
    """

    parent_face: np.ndarray
    xyz_em: np.ndarray
    rot_em: np.ndarray
    log_scale_em: np.ndarray
    opacity_raw: np.ndarray
    sh: np.ndarray
    sh_degree: int

    def __post_init__(self):
        self.parent_face = np.ascontiguousarray(self.parent_face, dtype=np.int32)
        for name in ("xyz_em", "rot_em", "log_scale_em", "opacity_raw", "sh"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        k = (self.sh_degree + 1) ** 2
        if self.sh.shape != (len(self.parent_face), k, 3):
            raise ValueError(f"sh must be (N, {k}, 3), got {self.sh.shape}")

    @property
    def n_splats(self) -> int:
        return len(self.parent_face)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "SplatModel":
        return SplatModel(
            parent_face=self.parent_face.copy(),
            xyz_em=self.xyz_em.copy(),
            rot_em=self.rot_em.copy(),
            log_scale_em=self.log_scale_em.copy(),
            opacity_raw=self.opacity_raw.copy(),
            sh=self.sh.copy(),
            sh_degree=self.sh_degree,
        )


@dataclass
class SplatWorld:
    """World-space splat parameters for one frame."""

    xyz_world: np.ndarray  # (N, 3)
    rot_world: np.ndarray  # (N, 4) unit wxyz
    scale_world: np.ndarray  # (N, 3) positive
    opacity: np.ndarray  # (N,) in (0, 1)
    sh: np.ndarray  # (N, K, 3), shared with the model

    @property
    def n_splats(self) -> int:
        return len(self.opacity)


@dataclass
class LocalGrads:
    """Gradients of a scalar loss w.r.t. the local splat parameters."""

    xyz_em: np.ndarray
    rot_em: np.ndarray
    log_scale_em: np.ndarray
    opacity_raw: np.ndarray
    sh: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}


def init_splats(neutral: TriMesh, sh_degree: int) -> SplatModel:
    """Six splats per face: the three vertices plus the three edge midpoints.

    These are the vertices of the four sub-triangles obtained by splitting
    each face at its edge midpoints, so initial splats tile the surface.
    Positions are stored in the face's local frame (k = 1 on the neutral
    mesh). Color DC starts at zero (mid gray after the +0.5 shift);
    opacity starts at sigmoid^-1(0.1).
    """
    if not 0 <= sh_degree <= 3:
        raise ValueError("sh_degree must be in [0, 3]")
    verts = neutral.vertices
    faces = neutral.faces
    tri = verts[faces]  # (F, 3, 3)
    origins, rotations = face_frames(verts, faces)

    mids = 0.5 * (tri + np.roll(tri, -1, axis=1))  # edge midpoints (v0v1, v1v2, v2v0)
    candidates = np.concatenate([tri, mids], axis=1)  # (F, 6, 3)

    rel = candidates - origins[:, None, :]
    xyz_em = np.einsum("fji,fcj->fci", rotations, rel)  # R^T (p - o)
    xyz_em = xyz_em.reshape(-1, 3)

    n_faces = len(faces)
    parent_face = np.repeat(np.arange(n_faces, dtype=np.int32), 6)

    edge_len = np.linalg.norm(np.roll(tri, -1, axis=1) - tri, axis=-1)  # (F, 3)
    mean_edge = edge_len.mean(axis=1)
    log_scale = np.log(0.5 * mean_edge)
    log_scale_em = np.repeat(log_scale, 6)[:, None] * np.ones((1, 3))

    n = 6 * n_faces
    rot_em = np.zeros((n, 4))
    rot_em[:, 0] = 1.0
    opacity_raw = np.full(n, logit(0.1))
    sh = np.zeros((n, (sh_degree + 1) ** 2, 3))

    return SplatModel(
        parent_face=parent_face,
        xyz_em=xyz_em,
        rot_em=rot_em,
        log_scale_em=log_scale_em,
        opacity_raw=opacity_raw,
        sh=sh,
        sh_degree=sh_degree,
    )


def _gather_face_quats(rig: FrameRig) -> np.ndarray:
    return rotmat_to_quat(rig.rotations)


def realize_world(model: SplatModel, rig: FrameRig) -> SplatWorld:
    """Map every splat into world space using its parent face's (o, R, k)."""
    pf = model.parent_face
    if pf.size and pf.max() >= len(rig.origins):
        raise IndexError("model references faces beyond the rig's topology")
    face_quats = _gather_face_quats(rig)
    o = rig.origins[pf]
    rot = rig.rotations[pf]
    k = rig.k[pf]
    xyz_world = k[:, None] * np.einsum("nij,nj->ni", rot, model.xyz_em) + o
    rot_world = quat_multiply(face_quats[pf], model.rot_em)
    scale_world = k[:, None] * np.exp(model.log_scale_em)
    opacity = sigmoid(model.opacity_raw)
    return SplatWorld(
        xyz_world=xyz_world,
        rot_world=rot_world,
        scale_world=scale_world,
        opacity=opacity,
        sh=model.sh,
    )


def update_world(world: SplatWorld, model: SplatModel, rig: FrameRig, rows: np.ndarray) -> SplatWorld:
    """Refresh world parameters of a subset of splats in place.

    Used during selective training: frozen splats keep their cached
    realization, trainable rows are re-realized after each step.
    """
    pf = model.parent_face[rows]
    o = rig.origins[pf]
    rot = rig.rotations[pf]
    k = rig.k[pf]
    face_quats = rotmat_to_quat(rot)
    world.xyz_world[rows] = k[:, None] * np.einsum("nij,nj->ni", rot, model.xyz_em[rows]) + o
    world.rot_world[rows] = quat_multiply(face_quats, model.rot_em[rows])
    world.scale_world[rows] = k[:, None] * np.exp(model.log_scale_em[rows])
    world.opacity[rows] = sigmoid(model.opacity_raw[rows])
    world.sh = model.sh
    return world


def chain_world_grads_to_local(
    model: SplatModel,
    rig: FrameRig,
    world: SplatWorld,
    g_xyz_world: np.ndarray,
    g_rot_world: np.ndarray,
    g_scale_world: np.ndarray,
    g_opacity: np.ndarray,
    g_sh: np.ndarray,
) -> LocalGrads:
    """Adjoint of realize_world: pull world-space gradients back to local parameters."""
    pf = model.parent_face
    rot = rig.rotations[pf]
    k = rig.k[pf]
    face_quats = rotmat_to_quat(rot)

    g_xyz_em = k[:, None] * np.einsum("nji,nj->ni", rot, g_xyz_world)  # k R^T g
    left = quat_left_matrix(face_quats)
    g_rot_em = np.einsum("nji,nj->ni", left, g_rot_world)
    g_log_scale_em = g_scale_world * world.scale_world
    opa = world.opacity
    g_opacity_raw = g_opacity * opa * (1.0 - opa)
    return LocalGrads(
        xyz_em=g_xyz_em,
        rot_em=g_rot_em,
        log_scale_em=g_log_scale_em,
        opacity_raw=g_opacity_raw,
        sh=g_sh,
    )


def drift_bound(model: SplatModel, neutral_areas: np.ndarray) -> np.ndarray:
    """Per-splat embedding bound sqrt(2 * area of the parent face)."""
    return np.sqrt(2.0 * neutral_areas[model.parent_face])


def reset_drifting_splats(model: SplatModel, neutral_areas: np.ndarray) -> int:
    """Reset splats that drifted out of their parent triangle's neighborhood.

    A splat whose local offset |xyz_em| strictly exceeds sqrt(2 * area_p)
    is snapped back to the local origin; all other parameters are kept.
    Returns the number of splats reset.
    """
    bound = drift_bound(model, neutral_areas)
    dist = np.linalg.norm(model.xyz_em, axis=1)
    bad = dist > bound
    count = int(bad.sum())
    if count:
        model.xyz_em[bad] = 0.0
    return count


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4
    min_opacity: float = 0.005
    interval: int = 200
    split_scale_bound: float | None = None  # resolved from mesh scale when None
    max_splats: int = 200_000
    enabled: bool = True


@dataclass
class DensifyReport:
    kept_rows: np.ndarray  # indices into the old model that survive, in order
    n_cloned: int
    n_split: int
    n_pruned: int

    @property
    def changed(self) -> bool:
        return bool(self.n_cloned or self.n_split or self.n_pruned)


def densify_and_prune(
    model: SplatModel,
    grad_stats: np.ndarray,
    config: DensifyConfig,
    rng: np.random.Generator | None = None,
) -> SplatModel:
    """Adaptive density control; see densify_and_prune_report for the bookkeeping."""
    new_model, _ = densify_and_prune_report(model, grad_stats, config, rng)
    return new_model


def densify_and_prune_report(
    model: SplatModel,
    grad_stats: np.ndarray,
    config: DensifyConfig,
    rng: np.random.Generator | None = None,
) -> tuple[SplatModel, DensifyReport]:
    """Clone small / split large high-gradient splats, prune transparent ones.

    grad_stats is the accumulated mean 2D positional gradient per splat.
    Children inherit the parent face (and therefore its local frame); split
    children shrink by the usual 1.6 factor and are offset by a sample from
    the parent's own Gaussian, expressed in the local frame.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    n = model.n_splats
    grad_stats = np.asarray(grad_stats, dtype=np.float64).reshape(n)
    bound = config.split_scale_bound
    if bound is None:
        raise ValueError("split_scale_bound must be resolved before densification")

    scale = np.exp(model.log_scale_em)
    hot = grad_stats > config.grad_threshold
    big = scale.max(axis=1) > bound
    split_mask = hot & big
    clone_mask = hot & ~big
    prune_mask = sigmoid(model.opacity_raw) < config.min_opacity

    n_new = int(clone_mask.sum()) + 2 * int(split_mask.sum())
    if n - int(prune_mask.sum()) + n_new > config.max_splats:
        clone_mask = np.zeros(n, dtype=bool)
        split_mask = np.zeros(n, dtype=bool)

    keep_mask = ~(prune_mask | split_mask)
    kept_rows = np.nonzero(keep_mask)[0]

    pieces = {name: [arr[keep_mask]] for name, arr in model.params().items()}
    parents = [model.parent_face[keep_mask]]

    clone_rows = np.nonzero(clone_mask & ~prune_mask)[0]
    if clone_rows.size:
        for name, arr in model.params().items():
            pieces[name].append(arr[clone_rows])
        parents.append(model.parent_face[clone_rows])

    split_rows = np.nonzero(split_mask & ~prune_mask)[0]
    if split_rows.size:
        idx = np.repeat(split_rows, 2)
        offsets = rng.standard_normal((idx.size, 3)) * np.exp(model.log_scale_em[idx])
        child_xyz = model.xyz_em[idx] + quat_rotate(model.rot_em[idx], offsets)
        pieces["xyz_em"].append(child_xyz)
        pieces["rot_em"].append(model.rot_em[idx])
        pieces["log_scale_em"].append(model.log_scale_em[idx] - np.log(1.6))
        pieces["opacity_raw"].append(model.opacity_raw[idx])
        pieces["sh"].append(model.sh[idx])
        parents.append(model.parent_face[idx])

    new_model = SplatModel(
        parent_face=np.concatenate(parents),
        xyz_em=np.concatenate(pieces["xyz_em"]),
        rot_em=np.concatenate(pieces["rot_em"]),
        log_scale_em=np.concatenate(pieces["log_scale_em"]),
        opacity_raw=np.concatenate(pieces["opacity_raw"]),
        sh=np.concatenate(pieces["sh"]),
        sh_degree=model.sh_degree,
    )
    report = DensifyReport(
        kept_rows=kept_rows,
        n_cloned=int(clone_rows.size),
        n_split=int(split_rows.size),
        n_pruned=int(prune_mask.sum()),
    )
    return new_model, report


# ---------------------------------------------------------------------------
# Checkpoints (local parameters) and world-space PLY snapshots.


def save_checkpoint(model: SplatModel, path) -> None:
    """Write all local per-splat fields to a binary PLY."""
    n = model.n_splats
    k = (model.sh_degree + 1) ** 2
    fields = [("parent_face", "<u4")]
    fields += [(f"{axis}_em", "<f4") for axis in "xyz"]
    fields += [(f"rot_em_{i}", "<f4") for i in range(4)]
    fields += [(f"log_scale_em_{i}", "<f4") for i in range(3)]
    fields += [("opacity_raw", "<f4")]
    fields += [(f"f_dc_{c}", "<f4") for c in range(3)]
    fields += [(f"f_rest_{i}", "<f4") for i in range(3 * (k - 1))]
    data = np.empty(n, dtype=np.dtype(fields))
    data["parent_face"] = model.parent_face
    for i, axis in enumerate("xyz"):
        data[f"{axis}_em"] = model.xyz_em[:, i]
    for i in range(4):
        data[f"rot_em_{i}"] = model.rot_em[:, i]
    for i in range(3):
        data[f"log_scale_em_{i}"] = model.log_scale_em[:, i]
    data["opacity_raw"] = model.opacity_raw
    for c in range(3):
        data[f"f_dc_{c}"] = model.sh[:, 0, c]
    rest = model.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, -1)  # channel-major
    for i in range(3 * (k - 1)):
        data[f"f_rest_{i}"] = rest[:, i]
    plyio.write_ply(path, data, comments=[f"sh_degree {model.sh_degree}"])


def load_checkpoint(path) -> SplatModel:
    data, comments = plyio.read_ply(path)
    sh_degree = None
    for comment in comments:
        parts = comment.split()
        if parts[:1] == ["sh_degree"]:
            sh_degree = int(parts[1])
    n_rest = sum(1 for name in data.dtype.names if name.startswith("f_rest_"))
    if sh_degree is None:
        sh_degree = int(round(np.sqrt(n_rest // 3 + 1))) - 1
    k = (sh_degree + 1) ** 2
    n = len(data)
    sh = np.zeros((n, k, 3))
    for c in range(3):
        sh[:, 0, c] = data[f"f_dc_{c}"]
    if k > 1:
        rest = np.stack([data[f"f_rest_{i}"] for i in range(3 * (k - 1))], axis=1)
        sh[:, 1:, :] = rest.reshape(n, 3, k - 1).transpose(0, 2, 1)
    return SplatModel(
        parent_face=data["parent_face"].astype(np.int32),
        xyz_em=np.stack([data[f"{a}_em"] for a in "xyz"], axis=1),
        rot_em=np.stack([data[f"rot_em_{i}"] for i in range(4)], axis=1),
        log_scale_em=np.stack([data[f"log_scale_em_{i}"] for i in range(3)], axis=1),
        opacity_raw=np.asarray(data["opacity_raw"], dtype=np.float64),
        sh=sh,
        sh_degree=sh_degree,
    )


def export_world_ply(world: SplatWorld, path, parent_face: np.ndarray | None = None) -> None:
    """Write a world-space snapshot in the layout common splat viewers read.

    Positions, log scales, rotation quaternion, pre-sigmoid opacity and SH
    coefficients as float properties; parent_face is appended as an integer
    property when given.
    """
    n = world.n_splats
    k = world.sh.shape[1]
    fields = [(name, "<f4") for name in ("x", "y", "z", "nx", "ny", "nz")]
    fields += [(f"f_dc_{c}", "<f4") for c in range(3)]
    fields += [(f"f_rest_{i}", "<f4") for i in range(3 * (k - 1))]
    fields += [("opacity", "<f4")]
    fields += [(f"scale_{i}", "<f4") for i in range(3)]
    fields += [(f"rot_{i}", "<f4") for i in range(4)]
    if parent_face is not None:
        fields.append(("parent_face", "<u4"))
    data = np.zeros(n, dtype=np.dtype(fields))
    for i, name in enumerate(("x", "y", "z")):
        data[name] = world.xyz_world[:, i]
    for c in range(3):
        data[f"f_dc_{c}"] = world.sh[:, 0, c]
    rest = world.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, -1)
    for i in range(3 * (k - 1)):
        data[f"f_rest_{i}"] = rest[:, i]
    opa = np.clip(world.opacity, 1e-7, 1.0 - 1e-7)
    data["opacity"] = logit(opa)
    for i in range(3):
        data[f"scale_{i}"] = np.log(world.scale_world[:, i])
    for i in range(4):
        data[f"rot_{i}"] = world.rot_world[:, i]
    if parent_face is not None:
        data["parent_face"] = parent_face
    plyio.write_ply(path, data)
