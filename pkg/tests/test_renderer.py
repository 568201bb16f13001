import numpy as np
import pytest

from meshsplat.avatar import SplatWorld
from meshsplat.quat import quat_normalize, random_quat
from meshsplat.renderer import (
    Camera,
    RenderConfig,
    eval_sh,
    project_splat,
    project_splats,
    rasterize,
    rasterize_backward,
    rasterize_reference,
    world_covariance,
)
from meshsplat.sh import SH_C0, SH_C1, sh_basis

from conftest import make_camera, random_camera, random_world


def single_splat_world(xyz, opacity=0.9, scale=0.1, rgb_dc=0.0, sh_degree=0):
    k = (sh_degree + 1) ** 2
    sh = np.zeros((1, k, 3))
    sh[0, 0, :] = rgb_dc
    return SplatWorld(
        xyz_world=np.asarray([xyz], dtype=float),
        rot_world=np.array([[1.0, 0, 0, 0]]),
        scale_world=np.full((1, 3), scale),
        opacity=np.array([opacity]),
        sh=sh,
    )


class TestWorldCovariance:
    def test_identity(self):
        np.testing.assert_allclose(
            world_covariance(np.array([1.0, 0, 0, 0]), np.ones(3)), np.eye(3), atol=1e-12
        )

    def test_axis_scales(self):
        cov = world_covariance(np.array([1.0, 0, 0, 0]), np.array([2.0, 1.0, 1.0]))
        np.testing.assert_allclose(cov, np.diag([4.0, 1.0, 1.0]), atol=1e-12)

    def test_eigenvalues_are_squared_scales(self, rng):
        for _ in range(30):
            q = random_quat(rng)
            s = np.exp(rng.uniform(-2, 1, size=3))
            cov = world_covariance(q, s)
            eig = np.sort(np.linalg.eigvalsh(cov))
            np.testing.assert_allclose(eig, np.sort(s**2), rtol=1e-9, atol=1e-12)

    def test_positive_semidefinite(self, rng):
        q = random_quat(rng, 10)
        s = np.exp(rng.uniform(-2, 1, size=(10, 3)))
        cov = world_covariance(q, s)
        assert (np.linalg.eigvalsh(cov) > -1e-12).all()


class TestProjection:
    def test_on_axis_pinhole_center(self):
        cam = Camera(fx=100.0, fy=100.0, cx=32.0, cy=32.0, width=64, height=64,
                     world_to_camera_rot=np.array([1.0, 0, 0, 0]),
                     world_to_camera_trans=np.zeros(3))
        world = single_splat_world([0.0, 0.0, 1.0])
        proj = project_splat(world, 0, cam)
        assert proj is not None
        np.testing.assert_allclose(proj.mean2d, [32.0, 32.0], atol=1e-5)

    def test_behind_camera_culled(self):
        cam = make_camera(8)
        world = single_splat_world([0.0, 0.0, -1.0])
        assert project_splat(world, 0, cam) is None

    def test_isotropic_cov2d_closed_form(self):
        fx, z, sigma = 120.0, 2.0, 0.05
        cam = Camera(fx=fx, fy=fx, cx=16.0, cy=16.0, width=32, height=32,
                     world_to_camera_rot=np.array([1.0, 0, 0, 0]),
                     world_to_camera_trans=np.zeros(3))
        world = single_splat_world([0.0, 0.0, z], scale=sigma)
        proj = project_splats(world, cam, RenderConfig(dtype=np.float64))
        expected = (fx * sigma / z) ** 2 + 0.3
        np.testing.assert_allclose(proj.cov2d[0, 0], expected, rtol=1e-9)
        np.testing.assert_allclose(proj.cov2d[0, 2], expected, rtol=1e-9)
        np.testing.assert_allclose(proj.cov2d[0, 1], 0.0, atol=1e-9)

    def test_depth_is_camera_z(self, rng):
        cam = random_camera(rng, 16)
        world = random_world(rng, 5)
        proj = project_splats(world, cam, RenderConfig(dtype=np.float64))
        rcw = cam.rotation()
        pc = world.xyz_world @ rcw.T + cam.world_to_camera_trans
        np.testing.assert_allclose(proj.depth, pc[:, 2], rtol=1e-12)


class TestEvalSH:
    def test_degree0_dc_zero_is_mid_gray(self):
        rgb = eval_sh(np.zeros((1, 3)), np.array([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(rgb, 0.5)

    def test_degree0_view_independent(self, rng):
        coeffs = np.zeros((1, 3))
        coeffs[0] = [0.3, -0.2, 0.8]
        dirs = quat_normalize(rng.standard_normal((10, 4)))[:, 1:]
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        vals = [eval_sh(coeffs, d) for d in dirs]
        for v in vals[1:]:
            np.testing.assert_array_equal(v, vals[0])

    def test_degree1_matches_textbook_basis(self, rng):
        # independent oracle: first-order real SH evaluated directly
        for _ in range(10):
            coeffs = rng.uniform(-0.3, 0.3, size=(4, 3))
            d = rng.standard_normal(3)
            d /= np.linalg.norm(d)
            x, y, z = d
            expected = (
                0.5
                + SH_C0 * coeffs[0]
                - SH_C1 * y * coeffs[1]
                + SH_C1 * z * coeffs[2]
                - SH_C1 * x * coeffs[3]
            )
            np.testing.assert_allclose(
                eval_sh(coeffs, d), np.clip(expected, 0, 1), atol=1e-12
            )

    def test_clamped_to_unit_range(self):
        coeffs = np.zeros((1, 3))
        coeffs[0] = [5.0, -5.0, 0.0]
        rgb = eval_sh(coeffs, np.array([0.0, 0.0, 1.0]))
        np.testing.assert_array_equal(rgb, [1.0, 0.0, 0.5])


class TestRasterize:
    def test_empty_scene_is_background(self):
        cam = make_camera(8)
        world = SplatWorld(
            xyz_world=np.zeros((0, 3)),
            rot_world=np.zeros((0, 4)),
            scale_world=np.zeros((0, 3)),
            opacity=np.zeros(0),
            sh=np.zeros((0, 1, 3)),
        )
        bg = np.array([0.2, 0.4, 0.6])
        img = rasterize(world, cam, bg)
        np.testing.assert_allclose(img, np.broadcast_to(bg, img.shape).astype(np.float32))

    def test_single_opaque_splat_center_color(self):
        cam = make_camera(16)
        # nearly opaque, big enough to saturate its center pixel
        world = single_splat_world([0.0, 0.0, 1.0], opacity=0.999, scale=0.6, rgb_dc=(0.9 - 0.5) / SH_C0)
        img = rasterize(world, cam, np.zeros(3))
        center = img[8, 8]
        np.testing.assert_allclose(center, [0.9, 0.9, 0.9], atol=1e-2)

    def test_matches_reference_small_scene(self, rng):
        for seed in range(5):
            r = np.random.default_rng(seed)
            world = random_world(r, 5)
            cam = make_camera(8)
            tiled = rasterize(world, cam, np.array([1.0, 1.0, 1.0]))
            naive = rasterize_reference(world, cam, np.array([1.0, 1.0, 1.0]))
            assert np.abs(tiled.astype(np.float64) - naive.astype(np.float64)).max() < 1e-6

    def test_matches_reference_multi_tile(self, rng):
        world = random_world(rng, 40, depth_range=(1.0, 4.0))
        cam = make_camera(48)
        tiled = rasterize(world, cam, np.array([0.0, 0.5, 1.0]))
        naive = rasterize_reference(world, cam, np.array([0.0, 0.5, 1.0]))
        assert np.abs(tiled.astype(np.float64) - naive.astype(np.float64)).max() < 1e-6

    def test_compositing_weights_partition_unity(self, rng):
        """With all-white splats over a white background every pixel must be 1."""
        world = random_world(rng, 12, opacity_range=(-1.0, 3.0))
        world.sh[:] = 0.0
        world.sh[:, 0, :] = 0.5 / SH_C0  # rgb exactly 1
        cam = make_camera(16)
        img = rasterize(world, cam, np.ones(3), RenderConfig(dtype=np.float64))
        np.testing.assert_allclose(img, 1.0, atol=1e-6)

    def test_input_order_invariance(self, rng):
        world = random_world(rng, 15)
        cam = make_camera(16)
        img1 = rasterize(world, cam, np.ones(3))
        perm = rng.permutation(15)
        shuffled = SplatWorld(
            xyz_world=world.xyz_world[perm],
            rot_world=world.rot_world[perm],
            scale_world=world.scale_world[perm],
            opacity=world.opacity[perm],
            sh=world.sh[perm],
        )
        img2 = rasterize(shuffled, cam, np.ones(3))
        np.testing.assert_array_equal(img1, img2)

    def test_deterministic_across_runs(self, rng):
        world = random_world(rng, 10)
        cam = make_camera(16)
        img1 = rasterize(world, cam, np.zeros(3))
        img2 = rasterize(world, cam, np.zeros(3))
        np.testing.assert_array_equal(img1, img2)

    def test_range_stays_unit(self, rng):
        world = random_world(rng, 25, opacity_range=(-1, 4))
        cam = make_camera(24)
        img = rasterize(world, cam, np.ones(3))
        assert img.min() >= 0.0 and img.max() <= 1.0 + 1e-6

    def test_culled_splats_do_not_contribute(self, rng):
        world = random_world(rng, 6)
        cam = make_camera(8)
        base = rasterize(world, cam, np.ones(3))
        extra = SplatWorld(
            xyz_world=np.vstack([world.xyz_world, [[0.0, 0.0, -2.0]]]),
            rot_world=np.vstack([world.rot_world, [[1.0, 0, 0, 0]]]),
            scale_world=np.vstack([world.scale_world, [[0.5, 0.5, 0.5]]]),
            opacity=np.append(world.opacity, 0.99),
            sh=np.vstack([world.sh, np.zeros((1,) + world.sh.shape[1:])]),
        )
        with_culled = rasterize(extra, cam, np.ones(3))
        np.testing.assert_array_equal(base, with_culled)
