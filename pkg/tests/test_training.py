import numpy as np
import pytest

from meshsplat.avatar import drift_bound, init_splats, realize_world
from meshsplat.errors import NonFiniteLoss
from meshsplat.geometry import TriMesh, neutral_rig
from meshsplat.renderer import RenderConfig, rasterize
from meshsplat.training import (
    LearningRates,
    MaskedAdam,
    TrainConfig,
    Trainer,
    assemble_total,
    effective_update_rows,
    is_global_iteration,
    rgb_loss,
    scaling_loss,
    scaling_loss_grad,
)

from conftest import make_camera, random_embedded_model


def tiny_scene(seed=0, n_faces=3, size=24):
    rng = np.random.default_rng(seed)
    verts = rng.uniform(-0.4, 0.4, size=(3 * n_faces, 3))
    verts[:, 2] += 2.0
    faces = np.arange(3 * n_faces).reshape(n_faces, 3)
    mesh = TriMesh(vertices=verts, faces=faces)
    model = random_embedded_model(rng, mesh)
    cam = make_camera(size)
    return mesh, model, cam, rng


def model_bytes(model, rows):
    return {
        name: np.ascontiguousarray(np.atleast_2d(arr.reshape(len(arr), -1))[rows]).tobytes()
        for name, arr in model.params().items()
    }


class TestLosses:
    def test_rgb_loss_identical(self, rng):
        img = rng.random((16, 16, 3))
        out = rgb_loss(img, img.copy())
        assert out["l1"] == 0.0
        assert out["dssim"] == pytest.approx(0.0, abs=1e-12)

    def test_rgb_loss_constant_offset(self, rng):
        img = rng.uniform(0.3, 0.6, size=(16, 16, 3))
        out = rgb_loss(img + 0.1, img)
        assert out["l1"] == pytest.approx(0.1, abs=1e-12)

    def test_scaling_loss_zero_when_compliant(self, head_mesh):
        model = init_splats(head_mesh, sh_degree=0)
        model.log_scale_em[:] = np.log(1e-4)
        assert scaling_loss(model, head_mesh.face_areas()) == 0.0

    def test_scaling_loss_single_violation(self, head_mesh):
        model = init_splats(head_mesh, sh_degree=0)
        areas = head_mesh.face_areas()
        model.log_scale_em[:] = np.log(1e-4)
        bound = drift_bound(model, areas)
        model.log_scale_em[7, 1] = np.log(bound[7] + 0.1)
        assert scaling_loss(model, areas) == pytest.approx(0.1, rel=1e-9)

    def test_scaling_loss_l2_of_two_violations(self, head_mesh):
        model = init_splats(head_mesh, sh_degree=0)
        areas = head_mesh.face_areas()
        model.log_scale_em[:] = np.log(1e-4)
        bound = drift_bound(model, areas)
        model.log_scale_em[2, 0] = np.log(bound[2] + 0.3)
        model.log_scale_em[9, 2] = np.log(bound[9] + 0.4)
        assert scaling_loss(model, areas) == pytest.approx(0.5, rel=1e-9)

    def test_scaling_loss_grad_fd(self, head_mesh):
        model = init_splats(head_mesh, sh_degree=0)
        areas = head_mesh.face_areas()
        bound = drift_bound(model, areas)
        model.log_scale_em[4] = np.log(bound[4] * 1.3)
        model.log_scale_em[11] = np.log(bound[11] * 1.1)
        _, grad = scaling_loss_grad(model, areas)
        h = 1e-7
        for idx in [(4, 0), (11, 2), (0, 0)]:
            orig = model.log_scale_em[idx]
            model.log_scale_em[idx] = orig + h
            lp = scaling_loss(model, areas)
            model.log_scale_em[idx] = orig - h
            lm = scaling_loss(model, areas)
            model.log_scale_em[idx] = orig
            fd = (lp - lm) / (2 * h)
            assert abs(fd - grad[idx]) < 1e-6 + 1e-5 * abs(fd)

    def test_total_assembly_identities(self):
        l1, ds, sc = 0.37, 0.12, 0.05
        for lam in (0.0, 0.2, 1.0):
            total = assemble_total(l1, ds, sc, lam, 1.0)
            assert total == pytest.approx((1 - lam) * l1 + lam * ds + sc, abs=1e-12)
        assert assemble_total(l1, ds, sc, 0.0, 1.0) == pytest.approx(l1 + sc, abs=1e-9)
        assert assemble_total(l1, ds, sc, 1.0, 1.0) == pytest.approx(ds + sc, abs=1e-9)


class TestMaskedAdam:
    def make(self, n=4):
        params = {
            "a": np.arange(n * 3, dtype=np.float64).reshape(n, 3),
            "b": np.ones(n, dtype=np.float64),
        }
        return MaskedAdam(params), params

    def test_empty_mask_changes_nothing(self):
        opt, params = self.make()
        before = {k: v.copy() for k, v in params.items()}
        grads = {"a": np.ones((4, 3)), "b": np.ones(4)}
        opt.step(grads, {"a": 0.1, "b": 0.1}, rows=np.zeros(4, dtype=bool))
        for k in params:
            np.testing.assert_array_equal(params[k], before[k])
            np.testing.assert_array_equal(opt.m[k], 0.0)
            np.testing.assert_array_equal(opt.t[k], 0)

    def test_full_mask_equals_unmasked(self):
        opt1, params1 = self.make()
        opt2, params2 = self.make()
        rng = np.random.default_rng(0)
        for _ in range(5):
            grads = {"a": rng.standard_normal((4, 3)), "b": rng.standard_normal(4)}
            opt1.step(grads, {"a": 0.05, "b": 0.02}, rows=np.ones(4, dtype=bool))
            opt2.step(grads, {"a": 0.05, "b": 0.02}, rows=None)
        for k in params1:
            np.testing.assert_array_equal(params1[k], params2[k])

    def test_half_mask_only_touches_masked_rows(self):
        opt, params = self.make(2)
        before = {k: v.copy() for k, v in params.items()}
        rows = np.array([True, False])
        grads = {"a": np.ones((2, 3)), "b": np.ones(2)}
        opt.step(grads, {"a": 0.1, "b": 0.1}, rows=rows)
        assert not np.array_equal(params["a"][0], before["a"][0])
        np.testing.assert_array_equal(params["a"][1], before["a"][1])
        np.testing.assert_array_equal(opt.m["a"][1], 0.0)
        np.testing.assert_array_equal(opt.v["a"][1], 0.0)
        assert opt.t["a"][0] == 1 and opt.t["a"][1] == 0

    def test_zero_lr_is_a_true_no_op(self):
        opt, params = self.make()
        before = {k: v.tobytes() for k, v in params.items()}
        grads = {"a": np.ones((4, 3)), "b": np.ones(4)}
        opt.step(grads, {"a": 0.0, "b": 0.0}, rows=None)
        for k in params:
            assert params[k].tobytes() == before[k]

    def test_remap_rows_after_densify(self):
        opt, params = self.make()
        grads = {"a": np.ones((4, 3)), "b": np.ones(4)}
        opt.step(grads, {"a": 0.1, "b": 0.1}, rows=None)
        kept = np.array([0, 2, 3])
        opt.remap_rows(kept, n_new=2)
        assert opt.m["a"].shape == (5, 3)
        np.testing.assert_array_equal(opt.m["a"][3:], 0.0)
        np.testing.assert_array_equal(opt.t["b"][:3], 1)
        np.testing.assert_array_equal(opt.t["b"][3:], 0)


class TestScheduleAndModes:
    def test_global_every_twentieth(self):
        flags = [is_global_iteration(i, 20) for i in range(1, 101)]
        assert sum(flags) == 5
        for start in range(0, 81):
            assert sum(flags[start : start + 20]) == 1

    def test_effective_rows(self):
        rows = effective_update_rows(5, np.array([1, 3]), "selective")
        np.testing.assert_array_equal(rows, [False, True, False, True, False])
        np.testing.assert_array_equal(effective_update_rows(3, None, "global"), True)
        with pytest.raises(ValueError):
            effective_update_rows(3, None, "nonsense")


class TestTrainStep:
    def test_fixed_point_with_zero_lr(self):
        mesh, model, cam, rng = tiny_scene(seed=2)
        rig = neutral_rig(mesh)
        cfg = TrainConfig(
            iterations=10,
            lrs=LearningRates(xyz=0.0, rot=0.0, log_scale=0.0, opacity=0.0, sh=0.0),
            background=(1.0, 1.0, 1.0),
        )
        gt = rasterize(realize_world(model, rig), cam, np.ones(3), cfg.render).astype(np.float64)
        trainer = Trainer(model, mesh.face_areas(), cfg)
        trainer.begin_frame(rig, np.arange(mesh.n_faces), mesh.n_faces)
        before = model_bytes(model, np.arange(model.n_splats))
        trainer.iteration = 1
        terms = trainer.train_step(cam, gt, "global")
        after = model_bytes(model, np.arange(model.n_splats))
        assert before == after
        assert terms.l1 == 0.0
        assert terms.dssim == pytest.approx(0.0, abs=1e-12)
        assert terms.total == pytest.approx(terms.scaling, abs=1e-12)

    def test_loss_decreases_on_toy_scene(self):
        mesh, model, cam, rng = tiny_scene(seed=4)
        rig = neutral_rig(mesh)
        gt_model = random_embedded_model(np.random.default_rng(77), mesh)
        cfg = TrainConfig(iterations=200, background=(1.0, 1.0, 1.0))
        gt = rasterize(realize_world(gt_model, rig), cam, np.ones(3), cfg.render).astype(np.float64)
        trainer = Trainer(model, mesh.face_areas(), cfg)
        trainer.begin_frame(rig, np.arange(mesh.n_faces), mesh.n_faces)
        l1s = []
        for _ in range(200):
            trainer.iteration += 1
            terms = trainer.train_step(cam, gt, "global")
            l1s.append(terms.l1)
        # monotone decrease over 50-step windows
        w = np.array(l1s).reshape(4, 50).mean(axis=1)
        assert (np.diff(w) < 0).all()
        assert l1s[-1] < 0.5 * l1s[0]

    def test_selective_step_freezes_unselected_bytes(self):
        mesh, model, cam, rng = tiny_scene(seed=6)
        rig = neutral_rig(mesh)
        gt_model = random_embedded_model(np.random.default_rng(5), mesh)
        cfg = TrainConfig(iterations=40)
        gt = rasterize(realize_world(gt_model, rig), cam, np.ones(3), cfg.render).astype(np.float64)
        trainer = Trainer(model, mesh.face_areas(), cfg)
        selected_faces = np.array([0])  # only face 0's splats may move
        trainer.begin_frame(rig, selected_faces, mesh.n_faces)
        frozen_rows = np.nonzero(~trainer.trainable)[0]
        hot_rows = np.nonzero(trainer.trainable)[0]
        assert frozen_rows.size and hot_rows.size
        for _ in range(8):
            trainer.iteration += 1
            before = model_bytes(model, frozen_rows)
            before_m = {k: opt_state[frozen_rows].copy() for k, opt_state in trainer.optimizer.m.items()}
            trainer.train_step(cam, gt, "selective")
            assert model_bytes(model, frozen_rows) == before
            for k, snap in before_m.items():
                np.testing.assert_array_equal(trainer.optimizer.m[k][frozen_rows], snap)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_raises(self):
        mesh, model, cam, rng = tiny_scene(seed=8)
        rig = neutral_rig(mesh)
        cfg = TrainConfig(iterations=5)
        gt = np.full((cam.height, cam.width, 3), np.nan)
        trainer = Trainer(model, mesh.face_areas(), cfg)
        trainer.begin_frame(rig, np.arange(mesh.n_faces), mesh.n_faces)
        trainer.iteration = 1
        with pytest.raises(NonFiniteLoss):
            trainer.train_step(cam, gt, "global")


class TestTrainLoop:
    def test_zero_iterations_keeps_model(self, head_mesh):
        from meshsplat.training import train_loop
        from meshsplat.geometry import FramePose, MeshSequence

        model = init_splats(head_mesh, sh_degree=0)
        before = model_bytes(model, np.arange(model.n_splats))
        seq = MeshSequence(
            neutral=head_mesh,
            frames=[
                FramePose(
                    vertex_positions=head_mesh.vertices.copy(),
                    rigid_rotation=np.array([1.0, 0, 0, 0]),
                    rigid_translation=np.zeros(3),
                )
            ],
        )
        cfg = TrainConfig(iterations=0)
        _, log = train_loop(model, seq, iter([]), {}, cfg)
        assert log == []
        assert model_bytes(model, np.arange(model.n_splats)) == before

    def test_schedule_has_one_global_per_window(self):
        """Integration: the mode column over 60 iterations has a global step
        exactly at every 20th iteration."""
        from meshsplat.training import train_loop
        from meshsplat.geometry import FramePose, MeshSequence

        mesh, model, cam, rng = tiny_scene(seed=10, size=16)
        seq = MeshSequence(
            neutral=mesh,
            frames=[
                FramePose(
                    vertex_positions=mesh.vertices.copy(),
                    rigid_rotation=np.array([1.0, 0, 0, 0]),
                    rigid_translation=np.zeros(3),
                )
            ],
        )
        gt = rasterize(realize_world(model, neutral_rig(mesh)), cam, np.ones(3)).astype(np.float64)

        class Batch:
            frame_index = 0
            views = [(cam, gt)] * 10

        cfg = TrainConfig(iterations=60)
        _, log = train_loop(model, seq, iter([Batch(), Batch(), Batch(), Batch(), Batch(), Batch()]), {0: np.arange(mesh.n_faces)}, cfg)
        modes = [row["mode"] for row in log]
        assert len(modes) == 60
        for i, mode in enumerate(modes, start=1):
            assert mode == ("global" if i % 20 == 0 else "selective")
