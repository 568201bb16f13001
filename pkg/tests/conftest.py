import numpy as np
import pytest

from meshsplat.avatar import SplatModel, SplatWorld, init_splats, logit
from meshsplat.geometry import FramePose, MeshSequence, TriMesh
from meshsplat.quat import quat_normalize
from meshsplat.renderer import Camera


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def single_triangle_mesh():
    return TriMesh(
        vertices=np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
        faces=np.array([[0, 1, 2]]),
    )


@pytest.fixture
def unit_triangle():
    return single_triangle_mesh()


def make_head_like_mesh(frequency=3, with_regions=True):
    """A small icosphere-ish head mesh with labeled regions for selection tests."""
    from meshsplat.synth import icosphere, _region_masks, HEAD_RADII

    sphere_v, faces = icosphere(frequency)  # 20 * frequency**2 faces
    verts = sphere_v * np.asarray(HEAD_RADII)
    masks = _region_masks(sphere_v, faces) if with_regions else {}
    return TriMesh(vertices=verts, faces=faces, region_masks=masks), sphere_v


@pytest.fixture
def head_mesh():
    mesh, _ = make_head_like_mesh()
    return mesh


def random_world(rng, n, sh_degree=1, depth_range=(1.5, 3.5), opacity_range=(-2.5, 0.2)):
    """A random scene safely away from clamp/cutoff discontinuities."""
    k = (sh_degree + 1) ** 2
    xyz = np.column_stack(
        [
            rng.uniform(-0.5, 0.5, size=n),
            rng.uniform(-0.5, 0.5, size=n),
            rng.uniform(*depth_range, size=n),
        ]
    )
    rot = quat_normalize(rng.standard_normal((n, 4)))
    scale = np.exp(rng.uniform(np.log(0.04), np.log(0.35), size=(n, 3)))
    opacity = 1.0 / (1.0 + np.exp(-rng.uniform(*opacity_range, size=n)))
    sh = np.concatenate(
        [rng.uniform(-0.9, 0.9, size=(n, 1, 3)), rng.uniform(-0.12, 0.12, size=(n, k - 1, 3))],
        axis=1,
    )
    return SplatWorld(xyz_world=xyz, rot_world=rot, scale_world=scale, opacity=opacity, sh=sh)


def make_camera(size=8, fx=None):
    return Camera(
        fx=fx or size * 1.25,
        fy=fx or size * 1.25,
        cx=size / 2.0,
        cy=size / 2.0,
        width=size,
        height=size,
        world_to_camera_rot=np.array([1.0, 0.0, 0.0, 0.0]),
        world_to_camera_trans=np.zeros(3),
    )


def random_camera(rng, size=8):
    """A mildly perturbed camera still looking down +z."""
    q = quat_normalize(np.array([1.0, *rng.uniform(-0.08, 0.08, size=3)]))
    return Camera(
        fx=size * rng.uniform(1.0, 1.6),
        fy=size * rng.uniform(1.0, 1.6),
        cx=size / 2.0 + rng.uniform(-0.5, 0.5),
        cy=size / 2.0 + rng.uniform(-0.5, 0.5),
        width=size,
        height=size,
        world_to_camera_rot=q,
        world_to_camera_trans=rng.uniform(-0.05, 0.05, size=3),
    )


def random_embedded_model(rng, mesh, sh_degree=1):
    """init_splats plus parameter jitter, for chain/training tests."""
    model = init_splats(mesh, sh_degree=sh_degree)
    n = model.n_splats
    model.xyz_em += rng.uniform(-0.01, 0.01, size=(n, 3))
    model.rot_em = quat_normalize(model.rot_em + rng.uniform(-0.2, 0.2, size=(n, 4)))
    model.log_scale_em += rng.uniform(-0.3, 0.3, size=(n, 3))
    model.opacity_raw = rng.uniform(-2.0, 0.5, size=n)
    model.sh = rng.uniform(-0.5, 0.5, size=model.sh.shape)
    model.sh[:, 1:] *= 0.2
    return model
