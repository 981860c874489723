"""End-to-end command-line pipeline on a desk-scale dataset."""

import csv
import json

import numpy as np
import pytest

from headsdf.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, main

SYNTH_TOML = """\
scan_points = 2000
gt_resolution = 32
"""

PRIOR_TOML = """\
epochs = 3
lr = 1e-3
scenes_per_step = 2
n_surface = 128
n_volume = 128

[geometry]
depth = 4
width = 64
latent_size = 16
skip_layer = 2
"""

RECON_TOML = """\
n_eik = 32
n_ray_samples = 32
rays_per_step = 64
stage_cap_frac = 1.0

[geometry]
depth = 4
width = 64
latent_size = 16
skip_layer = 2

[render]
feature_depth = 3
feature_width = 64
feature_dim = 32
feature_skip_layer = 2
radiance_depth = 3
radiance_width = 64
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synth dataset and one trained prior shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.toml").write_text(SYNTH_TOML)
    (root / "prior.toml").write_text(PRIOR_TOML)
    (root / "recon.toml").write_text(RECON_TOML)
    code = main([
        "synth", "--config", str(root / "synth.toml"),
        "--subjects", "2", "--views", "3", "--width", "24", "--height", "24",
        "--scans", "2", "--seed", "0", "--out", str(root / "data"),
    ])
    assert code == EXIT_OK
    code = main([
        "train-prior", "--config", str(root / "prior.toml"),
        "--data", str(root / "data" / "scans" / "manifest.json"),
        "--out", str(root / "prior"),
    ])
    assert code == EXIT_OK
    return root


class TestSynth:
    def test_outputs(self, workspace):
        data = workspace / "data"
        for i in range(2):
            sub = data / f"subject_{i:02d}"
            for name in ("cameras.json", "landmarks.json", "gt_mesh.obj",
                         "gt_points.ply", "head_params.json"):
                assert (sub / name).exists(), name
            assert len(list((sub / "images").glob("*.png"))) == 3
            assert len(list((sub / "masks").glob("*.png"))) == 3
        scans = data / "scans"
        with open(scans / "manifest.json") as f:
            manifest = json.load(f)
        assert len(manifest["scenes"]) == 2
        for entry in manifest["scenes"]:
            assert (scans / entry["file"]).exists()
        with open(data / "config.json") as f:
            assert json.load(f)["command"] == "synth"

    def test_unsupported_view_count(self, tmp_path, capsys):
        code = main(["synth", "--views", "5", "--out", str(tmp_path / "x")])
        assert code == EXIT_VALIDATION
        err = capsys.readouterr().err
        assert "5" in err and "3" in err and "8" in err

    def test_byte_identical_determinism(self, workspace, tmp_path):
        code = main([
            "synth", "--config", str(workspace / "synth.toml"),
            "--subjects", "1", "--views", "3", "--width", "24",
            "--height", "24", "--seed", "0", "--out", str(tmp_path / "again"),
        ])
        assert code == EXIT_OK
        a = workspace / "data" / "subject_00"
        b = tmp_path / "again" / "subject_00"
        for name in ("images/000.png", "images/001.png", "images/002.png",
                     "masks/000.png", "gt_mesh.obj", "cameras.json",
                     "landmarks.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name


class TestTrainPrior:
    def test_outputs(self, workspace):
        out = workspace / "prior"
        assert (out / "prior.json").exists()
        assert (out / "prior.bin").exists()
        with open(out / "history.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 3
        assert list(rows[0]) == ["epoch", "L_Surf", "L_Emb", "L_Eik",
                                 "loss", "lr"]

    def test_resume_extends_training(self, workspace, tmp_path):
        code = main([
            "train-prior", "--config", str(workspace / "prior.toml"),
            "--data", str(workspace / "data" / "scans" / "manifest.json"),
            "--resume", str(workspace / "prior" / "prior"),
            "--epochs", "5", "--out", str(tmp_path / "resumed"),
        ])
        assert code == EXIT_OK
        with open(tmp_path / "resumed" / "history.csv") as f:
            rows = list(csv.DictReader(f))
        assert [int(r["epoch"]) for r in rows] == [0, 1, 2, 3, 4]

    def test_missing_manifest(self, tmp_path):
        code = main([
            "train-prior", "--data", str(tmp_path / "nope.json"),
            "--out", str(tmp_path / "out"),
        ])
        assert code == EXIT_VALIDATION


@pytest.fixture(scope="module")
def recon_out(workspace):
    out = workspace / "recon"
    code = main([
        "reconstruct", "--config", str(workspace / "recon.toml"),
        "--scene", str(workspace / "data" / "subject_00"),
        "--prior", str(workspace / "prior" / "prior"),
        "--mode", "prior-schedule", "--epochs", "4",
        "--resolution", "24", "--out", str(out),
    ])
    assert code == EXIT_OK
    return out


class TestReconstruct:
    def test_outputs(self, recon_out):
        for name in ("recon.json", "recon.bin", "history.csv", "mesh.obj",
                     "config.json"):
            assert (recon_out / name).exists(), name
        with open(recon_out / "history.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 4
        assert rows[0]["stage"] == "1"

    def test_missing_scene_names_file(self, workspace, tmp_path, capsys):
        (tmp_path / "empty_scene").mkdir()
        code = main([
            "reconstruct", "--scene", str(tmp_path / "empty_scene"),
            "--prior", str(workspace / "prior" / "prior"),
            "--epochs", "1", "--out", str(tmp_path / "out"),
        ])
        assert code == EXIT_VALIDATION
        assert "cameras.json" in capsys.readouterr().err

    def test_prior_mode_without_prior(self, workspace, tmp_path):
        code = main([
            "reconstruct", "--scene", str(workspace / "data" / "subject_00"),
            "--mode", "prior-schedule", "--epochs", "1",
            "--out", str(tmp_path / "out"),
        ])
        assert code == EXIT_VALIDATION

    def test_extract_mesh_from_recon_checkpoint(self, recon_out, tmp_path):
        out = tmp_path / "extracted.obj"
        code = main([
            "extract-mesh", "--checkpoint", str(recon_out / "recon"),
            "--resolution", "24", "--out", str(out),
        ])
        assert code == EXIT_OK
        assert (recon_out / "mesh.obj").read_bytes() == out.read_bytes()


class TestEvaluate:
    def test_ground_truth_scores_zero(self, workspace, tmp_path):
        scene = workspace / "data" / "subject_00"
        out = tmp_path / "eval"
        code = main([
            "evaluate", "--pred", str(scene / "gt_mesh.obj"),
            "--scene", str(scene), "--out", str(out),
        ])
        assert code == EXIT_OK
        with open(out / "report.json") as f:
            report = json.load(f)
        assert report["mean_face_mm"] == 0.0
        assert report["mean_head_mm"] == 0.0
        assert report["subjects"][0]["subject"] == "subject_00"
        with open(out / "report.csv") as f:
            rows = list(csv.DictReader(f))
        assert list(rows[0]) == ["subject", "face_mm", "head_mm"]
        assert rows[-1]["subject"] == "mean"

    def test_pairing_mismatch(self, workspace, tmp_path):
        scene = workspace / "data" / "subject_00"
        code = main([
            "evaluate", "--pred", str(scene / "gt_mesh.obj"),
            "--scene", str(scene), str(workspace / "data" / "subject_01"),
            "--out", str(tmp_path / "out"),
        ])
        assert code == EXIT_VALIDATION

    def test_missing_landmarks(self, workspace, tmp_path, capsys):
        bare = tmp_path / "bare_scene"
        bare.mkdir()
        code = main([
            "evaluate",
            "--pred", str(workspace / "data" / "subject_00" / "gt_mesh.obj"),
            "--scene", str(bare), "--out", str(tmp_path / "out"),
        ])
        assert code == EXIT_VALIDATION
        assert "landmarks.json" in capsys.readouterr().err


class TestLatentTools:
    def test_fit_latent_outputs(self, workspace, tmp_path):
        out = tmp_path / "fit"
        code = main([
            "fit-latent", "--prior", str(workspace / "prior" / "prior"),
            "--scan", str(workspace / "data" / "scans" / "scan_00.ply"),
            "--steps", "3", "--resolution", "24", "--out", str(out),
        ])
        assert code == EXIT_OK
        z = np.load(out / "latent.npy")
        assert z.shape == (16,) and np.isfinite(z).all()
        assert (out / "mesh.obj").exists()

    def test_interpolate_endpoints_match_registry_meshes(self, workspace,
                                                         tmp_path):
        out = tmp_path / "interp"
        code = main([
            "interpolate", "--prior", str(workspace / "prior" / "prior"),
            "--a", "scan_00", "--b", "scan_01", "--use-registry",
            "--alphas", "0,0.5,1", "--resolution", "24", "--out", str(out),
        ])
        assert code == EXIT_OK
        meshes = sorted(out.glob("mesh_*.obj"))
        assert len(meshes) == 3
        ref = tmp_path / "ref.obj"
        code = main([
            "extract-mesh", "--checkpoint", str(workspace / "prior" / "prior"),
            "--scene-id", "scan_00", "--resolution", "24", "--out", str(ref),
        ])
        assert code == EXIT_OK
        assert meshes[0].read_bytes() == ref.read_bytes()

    def test_interpolate_alpha_out_of_range(self, workspace, tmp_path):
        code = main([
            "interpolate", "--prior", str(workspace / "prior" / "prior"),
            "--a", "scan_00", "--b", "scan_01", "--use-registry",
            "--alphas", "0,1.5", "--out", str(tmp_path / "out"),
        ])
        assert code == EXIT_VALIDATION

    def test_unknown_registry_id(self, workspace, tmp_path, capsys):
        code = main([
            "interpolate", "--prior", str(workspace / "prior" / "prior"),
            "--a", "scan_99", "--b", "scan_01", "--use-registry",
            "--out", str(tmp_path / "out"),
        ])
        assert code == EXIT_VALIDATION
        assert "scan_99" in capsys.readouterr().err


def test_config_json_written_everywhere(workspace):
    for sub in ("data", "prior"):
        with open(workspace / sub / "config.json") as f:
            dumped = json.load(f)
        assert "command" in dumped and "config" in dumped
