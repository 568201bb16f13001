import json
import os

import numpy as np
import pytest

from meshsplat.cli import main
from meshsplat.plyio import read_ply


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_data")
    rc = main(
        [
            "synth", "--seed", "3", "--faces", "80", "--frames", "6",
            "--views", "3", "--size", "24", "--out", str(out),
        ]
    )
    assert rc == 0
    return str(out)


@pytest.fixture(scope="module")
def trained(cli_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_train")
    cache = os.path.join(cli_dataset, "selection.json")
    assert main(["select", "--data", f"{cli_dataset}/manifest.json", "--out", cache]) == 0
    rc = main(
        [
            "train", "--data", f"{cli_dataset}/manifest.json", "--selection", cache,
            "--out", str(out), "--iterations", "40", "--seed", "5",
        ]
    )
    assert rc == 0
    return str(out), cache


class TestSynthCommand:
    def test_writes_manifest(self, cli_dataset):
        assert os.path.exists(os.path.join(cli_dataset, "manifest.json"))

    def test_missing_out_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--seed", "1"])
        assert exc.value.code == 2

    def test_determinism(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(
                ["synth", "--seed", "11", "--faces", "20", "--frames", "2",
                 "--views", "2", "--size", "16", "--out", str(out)]
            ) == 0
        for rel in ("manifest.json", "neutral.obj", "images/f0000_v00.png"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes()


class TestSelectCommand:
    def test_cache_and_heatmap(self, cli_dataset, tmp_path):
        cache = tmp_path / "cache.json"
        heat = tmp_path / "heat"
        rc = main(
            ["select", "--data", f"{cli_dataset}/manifest.json",
             "--out", str(cache), "--heatmap", str(heat)]
        )
        assert rc == 0
        payload = json.loads(cache.read_text())
        non_empty = sum(1 for rec in payload["frames"] if rec["faces"])
        assert non_empty >= 3
        assert (heat / "offsets_heatmap.png").exists()
        assert (heat / "offsets_frame0000.obj").exists()

    def test_huge_threshold_empty_cache(self, cli_dataset, tmp_path, capsys):
        cache = tmp_path / "cache.json"
        rc = main(
            ["select", "--data", f"{cli_dataset}/manifest.json",
             "--threshold", "1e9", "--out", str(cache)]
        )
        assert rc == 0
        payload = json.loads(cache.read_text())
        assert all(not rec["faces"] for rec in payload["frames"])
        assert "warning" in capsys.readouterr().out

    def test_neutral_only_dataset_warns(self, tmp_path, capsys):
        out = tmp_path / "neutral"
        assert main(
            ["synth", "--seed", "2", "--faces", "20", "--frames", "1",
             "--views", "2", "--size", "16", "--out", str(out)]
        ) == 0
        cache = tmp_path / "cache.json"
        assert main(["select", "--data", f"{out}/manifest.json", "--out", str(cache)]) == 0
        assert "warning" in capsys.readouterr().out


class TestTrainCommand:
    def test_checkpoint_and_metrics(self, trained):
        out, _ = trained
        assert os.path.exists(os.path.join(out, "checkpoint_final.ply"))
        csv_path = os.path.join(out, "metrics.csv")
        lines = open(csv_path).read().strip().splitlines()
        assert lines[0] == "iteration,mode,frame,l1,dssim,scaling,total"
        assert len(lines) == 41
        first = float(lines[1].split(",")[-1])
        last = float(lines[-1].split(",")[-1])
        assert last < first

    def test_missing_selection_cache_errors(self, cli_dataset, tmp_path, capsys):
        rc = main(
            ["train", "--data", f"{cli_dataset}/manifest.json",
             "--selection", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o"),
             "--iterations", "1"]
        )
        assert rc == 1
        assert "select" in capsys.readouterr().err

    def test_no_selective_flag_runs_global(self, cli_dataset, tmp_path):
        out = tmp_path / "glob"
        rc = main(
            ["train", "--data", f"{cli_dataset}/manifest.json", "--no-selective",
             "--out", str(out), "--iterations", "5", "--seed", "1"]
        )
        assert rc == 0
        lines = open(out / "metrics.csv").read().strip().splitlines()[1:]
        assert all(line.split(",")[1] == "global" for line in lines)


class TestRenderEvalExport:
    def test_render_writes_pngs(self, cli_dataset, trained, tmp_path):
        out, _ = trained
        dest = tmp_path / "renders"
        rc = main(
            ["render", "--data", f"{cli_dataset}/manifest.json",
             "--checkpoint", os.path.join(out, "checkpoint_final.ply"),
             "--frames", "0,1", "--views", "0", "--out", str(dest)]
        )
        assert rc == 0
        assert (dest / "render_f0000_v00.png").exists()
        assert (dest / "render_f0001_v00.png").exists()

    def test_eval_report(self, cli_dataset, trained, tmp_path):
        out, cache = trained
        report = tmp_path / "report.json"
        rc = main(
            ["eval", "--data", f"{cli_dataset}/manifest.json",
             "--checkpoint", os.path.join(out, "checkpoint_final.ply"),
             "--selection", cache, "--out", str(report)]
        )
        assert rc == 0
        payload = json.loads(report.read_text())
        assert "mean_psnr" in payload and payload["mean_psnr"] > 5.0

    def test_export_ply_round_trip(self, cli_dataset, trained, tmp_path):
        out, _ = trained
        ply = tmp_path / "world.ply"
        rc = main(
            ["export-ply", "--checkpoint", os.path.join(out, "checkpoint_final.ply"),
             "--data", f"{cli_dataset}/manifest.json", "--frame", "0", "--out", str(ply)]
        )
        assert rc == 0
        data, _ = read_ply(ply)
        # re-import: world positions match a fresh realization within float32
        from meshsplat.avatar import load_checkpoint, realize_world
        from meshsplat.dataset import load_manifest
        from meshsplat.geometry import build_frame_rig

        manifest = load_manifest(f"{cli_dataset}/manifest.json")
        model = load_checkpoint(os.path.join(out, "checkpoint_final.ply"))
        world = realize_world(model, build_frame_rig(manifest.load_sequence(), 0))
        pos = np.stack([data["x"], data["y"], data["z"]], axis=1)
        np.testing.assert_allclose(pos, world.xyz_world, atol=1e-5)

    def test_reenact_topology_mismatch(self, trained, tmp_path):
        out, _ = trained
        other = tmp_path / "other"
        assert main(
            ["synth", "--seed", "4", "--faces", "20", "--frames", "2",
             "--views", "2", "--size", "16", "--out", str(other)]
        ) == 0
        rc = main(
            ["reenact", "--data", f"{other}/manifest.json",
             "--checkpoint", os.path.join(out, "checkpoint_final.ply"),
             "--out", str(tmp_path / "re")]
        )
        assert rc == 1

    def test_reenact_same_topology_runs(self, cli_dataset, trained, tmp_path):
        out, _ = trained
        # drive the trained avatar with a different sequence of the same topology
        other = tmp_path / "driver"
        assert main(
            ["synth", "--seed", "21", "--faces", "80", "--frames", "3",
             "--views", "3", "--size", "24", "--out", str(other)]
        ) == 0
        dest = tmp_path / "re"
        rc = main(
            ["reenact", "--data", f"{other}/manifest.json",
             "--checkpoint", os.path.join(out, "checkpoint_final.ply"),
             "--frames", "0,2", "--out", str(dest)]
        )
        assert rc == 0
        assert (dest / "reenact_f0000_v00.png").exists()
