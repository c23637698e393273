import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from sparse2dense import data_io
from sparse2dense.cli import main
from sparse2dense.geometry import PointCloud

from oracles import kept_bin_count

W, H = "416", "160"

TINY_CONFIG = {
    "model": {"token_dim": 32, "enc_layers": 1, "dec_layers": 1, "heads": 2, "k_out": 8,
              "cnn_widths": [4, 4, 8, 8], "dropout_main": 0.0, "dropout_dec": 0.0},
    "train": {"lr_init": 1e-3, "lr_final": 1e-5, "steps": 200},
    "sampling": {"n": 64, "k": 8},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    events = [json.loads(line) for line in out.splitlines() if line.strip()]
    return code, events, err


def digest(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"}


def test_synth_four_scenes(tmp_path, capsys):
    code, events, _ = run(capsys, "synth", "--out", tmp_path / "a", "--scenes", 4, "--seed", 7)
    assert code == 0 and events == [{"event": "synth", "out": str(tmp_path / "a"), "scenes": 4}]
    for sub, ext in (("image_2", "pgm"), ("velodyne", "bin"), ("calib", "txt"), ("label_2", "txt")):
        assert sorted(p.name for p in (tmp_path / "a" / sub).iterdir()) == [f"00000{i}.{ext}" for i in range(4)]
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["command"] == "synth"
    assert manifest["scene_ids"] == ["000000", "000001", "000002", "000003"]


def test_synth_same_seed_hash_equal(tmp_path, capsys):
    run(capsys, "synth", "--out", tmp_path / "a", "--scenes", 2, "--seed", 3)
    run(capsys, "synth", "--out", tmp_path / "b", "--scenes", 2, "--seed", 3)
    run(capsys, "synth", "--out", tmp_path / "c", "--scenes", 2, "--seed", 4)
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    assert digest(tmp_path / "a") != digest(tmp_path / "c")


def test_synth_zero_scenes(tmp_path, capsys):
    code, _, _ = run(capsys, "synth", "--out", tmp_path / "z", "--scenes", 0)
    assert code == 0
    assert (tmp_path / "z" / "manifest.json").exists()
    assert data_io.scene_ids(tmp_path / "z") == []


def test_downsample_crafted_frame(tmp_path, capsys):
    pts = data_io.lidar_directions() * 10.0
    data_io.write_velodyne_bin(PointCloud(pts), tmp_path / "full.bin")
    code, events, err = run(capsys, "downsample", "--in", tmp_path / "full.bin", "--noise", 0, "--out", tmp_path / "o.bin")
    assert code == 0
    assert events[0]["input_points"] == 64 * 4500
    assert events[0]["output_points"] == kept_bin_count(64, 4500, 8, 8) == 4504
    assert "output 4504" in err
    assert len(data_io.read_velodyne_bin(tmp_path / "o.bin")) == 4504
    assert (tmp_path / "o.bin.manifest.json").exists()


def test_downsample_synthetic_frame_count(tmp_path, capsys):
    run(capsys, "synth", "--out", tmp_path / "d", "--scenes", 1)
    code, events, _ = run(capsys, "downsample", "--in", tmp_path / "d/velodyne/000000.bin",
                          "--calib", tmp_path / "d/calib/000000.txt", "--img-w", W, "--img-h", H,
                          "--out", tmp_path / "s.ply")
    assert code == 0
    assert 700 <= events[0]["output_points"] <= 800
    assert len(data_io.read_ply(tmp_path / "s.ply")) == events[0]["output_points"]


def test_missing_file_exit_2(tmp_path, capsys):
    code, events, err = run(capsys, "downsample", "--in", tmp_path / "nope.bin", "--out", tmp_path / "o.bin")
    assert code == 2 and events == [] and "nope.bin" in err


def test_truncated_file_exit_2(tmp_path, capsys):
    (tmp_path / "t.bin").write_bytes(bytes(17))
    code, _, err = run(capsys, "downsample", "--in", tmp_path / "t.bin", "--out", tmp_path / "o.bin")
    assert code == 2 and "multiple of 16" in err


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run(capsys)[0] == 1
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "synth")[0] == 1
    assert run(capsys, "downsample", "--in", "x", "--out", "y", "--calib", "c")[0] == 1
    assert run(capsys, "sample", "--in", "a", "--dense", "b", "--out", "c", "--method", "nope")[0] == 1
    assert run(capsys, "eval", "--pred", "a", "--gt", "b", "--dets", "d")[0] == 1


@pytest.fixture(scope="module")
def one_scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("one")
    assert main(["synth", "--out", str(root / "data"), "--scenes", "1"]) == 0
    assert main(["downsample", "--in", str(root / "data/velodyne/000000.bin"), "--calib",
                 str(root / "data/calib/000000.txt"), "--img-w", W, "--img-h", H, "--out", str(root / "sparse.bin")]) == 0
    return root


def test_sample_file_layout(one_scene, tmp_path, capsys):
    from sparse2dense.pipeline import read_samples

    code, events, _ = run(capsys, "sample", "--in", one_scene / "sparse.bin", "--dense",
                          one_scene / "data/velodyne/000000.bin", "--n", 512, "--k", 32, "--out", tmp_path / "s.s2dq")
    assert code == 0 and events[0]["groups"] + events[0]["dropped"] == 512
    q, src, groups, valid, radius = read_samples(tmp_path / "s.s2dq")
    assert groups.shape == (events[0]["groups"], 32, 3) and radius == pytest.approx(1.2)
    assert np.all(np.abs(groups) <= 1.0)
    sparse = data_io.read_velodyne_bin(one_scene / "sparse.bin").points
    np.testing.assert_allclose(q, sparse[src], atol=1e-5)


def test_sample_fps_and_rps_differ(one_scene, tmp_path, capsys):
    common = ["--in", one_scene / "sparse.bin", "--dense", one_scene / "data/velodyne/000000.bin", "--n", 64, "--k", 8]
    _, fps, _ = run(capsys, "sample", *common, "--method", "fps", "--out", tmp_path / "f.s2dq")
    _, rps, _ = run(capsys, "sample", *common, "--method", "rps", "--out", tmp_path / "r.s2dq")
    assert fps[0]["first_indices"][0] == 0
    assert fps[0]["first_indices"] != rps[0]["first_indices"]


def test_sample_too_many_queries(one_scene, tmp_path, capsys):
    code, _, err = run(capsys, "sample", "--in", one_scene / "sparse.bin", "--dense",
                       one_scene / "data/velodyne/000000.bin", "--n", 100000, "--out", tmp_path / "x.s2dq")
    assert code == 2 and err


def test_eval_identical(one_scene, capsys):
    gt = one_scene / "sparse.bin"
    code, events, err = run(capsys, "eval", "--pred", gt, "--gt", gt)
    assert code == 0
    rep = events[0]
    assert rep["event"] == "reconstruction_report" and rep["chamfer"] == 0.0 and rep["psnr"] == "inf"
    assert "chamfer" in err and "psnr" in err


def test_eval_ap(tmp_path, capsys):
    from sparse2dense.evaluation import format_kitti_object

    cloud = tmp_path / "c.ply"
    data_io.write_ply(PointCloud(np.eye(3)), cloud)
    gt = [(1.5, 1.6, 3.9, 0.0, 1.7, 10.0, 0.0), (1.5, 1.6, 3.9, 5.0, 1.7, 20.0, 0.5)]
    (tmp_path / "labels.txt").write_text("\n".join(format_kitti_object("Car", *g) for g in gt) + "\n")
    (tmp_path / "dets.txt").write_text(format_kitti_object("Car", *gt[0], score=0.9) + "\n")
    code, events, _ = run(capsys, "eval", "--pred", cloud, "--gt", cloud, "--dets", tmp_path / "dets.txt",
                          "--labels", tmp_path / "labels.txt", "--manifest", tmp_path / "m.json")
    assert code == 0
    assert events[1]["event"] == "average_precision" and events[1]["ap"] == pytest.approx(0.5)
    assert json.loads((tmp_path / "m.json").read_text())["ap"] == pytest.approx(0.5)


def test_gradcheck_exit_0(capsys):
    code, events, _ = run(capsys, "gradcheck")
    assert code == 0
    assert events[0]["ok"] is True and events[0]["max_rel_error"] < 1e-3


def test_bad_checkpoint_exit_2(tmp_path, capsys):
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    code, _, err = run(capsys, "reconstruct", "--ckpt", tmp_path / "bad.ckpt", "--scene", tmp_path, "--out", tmp_path / "o.ply")
    assert code == 2 and err


def test_json_lines_on_stdout_only(one_scene):
    proc = subprocess.run([sys.executable, "-m", "sparse2dense.cli", "eval", "--pred", str(one_scene / "sparse.bin"),
                           "--gt", str(one_scene / "data/velodyne/000000.bin")], capture_output=True, text=True)
    assert proc.returncode == 0
    lines = proc.stdout.splitlines()
    assert lines and all(isinstance(json.loads(line), dict) for line in lines)
    assert "chamfer" in proc.stderr and "{" not in proc.stderr


# ---------------------------------------------------------------- end to end

@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    data = root / "data"
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    crop = ["--calib", str(data / "calib/000000.txt"), "--img-w", W, "--img-h", H]
    steps = [
        ["synth", "--out", str(data), "--scenes", "1", "--seed", "0"],
        ["downsample", "--in", str(data / "velodyne/000000.bin"), *crop, "--out", str(root / "sparse.bin")],
        ["sample", "--in", str(root / "sparse.bin"), "--dense", str(data / "velodyne/000000.bin"), *crop,
         "--n", "64", "--k", "8", "--out", str(data / "samples/000000.s2dq")],
        ["train", "--data", str(data), "--config", str(cfg), "--steps", "0", "--out", str(root / "init.ckpt")],
        ["train", "--data", str(data), "--config", str(cfg), "--out", str(root / "trained.ckpt"), "--log-every", "50"],
    ]
    (data / "samples").mkdir(parents=True)
    for argv in steps:
        assert main(argv) == 0, argv
    reports = {}
    for name in ("init", "trained"):
        assert main(["reconstruct", "--ckpt", str(root / f"{name}.ckpt"), "--scene", str(data),
                     "--out", str(root / f"{name}.ply"), "--queries-out", str(root / "queries.ply")]) == 0
        for scope, extra in (("scene", []), ("support", ["--support", str(root / "queries.ply")])):
            m = root / f"{name}.{scope}.json"
            assert main(["eval", "--pred", str(root / f"{name}.ply"), "--gt", str(data / "velodyne/000000.bin"),
                         *crop, *extra, "--manifest", str(m)]) == 0
            reports[name, scope] = json.loads(m.read_text())["report"]
    return root, reports


def test_end_to_end_training_improves_reconstruction(pipeline_run):
    root, reports = pipeline_run
    assert reports["trained", "support"]["n_points_pred"] == 64 * 8
    assert reports["trained", "support"]["chamfer"] < reports["init", "support"]["chamfer"]
    assert reports["trained", "support"]["psnr"] > reports["init", "support"]["psnr"]
    loss = np.loadtxt(root / "trained.ckpt.loss.csv", delimiter=",", skiprows=1)
    assert loss.shape == (200, 3) and loss[-1, 2] < loss[0, 2]


def test_end_to_end_manifests(pipeline_run):
    root, _ = pipeline_run
    m = json.loads((root / "trained.ckpt.manifest.json").read_text())
    assert m["command"] == "train" and m["config"]["sampling"]["n"] == 64
    assert any(k.endswith("000000.s2dq") for k in m["inputs"])
    assert all(len(h) == 64 for h in m["inputs"].values())
    for f in ("sparse.bin.manifest.json", "init.ply.manifest.json", "data/manifest.json"):
        assert (root / f).exists()


def test_replay_reproduces_training_bit_exactly(pipeline_run, capsys):
    root, _ = pipeline_run
    before = hashlib.sha256((root / "trained.ckpt").read_bytes()).hexdigest()
    csv_before = (root / "trained.ckpt.loss.csv").read_bytes()
    (root / "trained.ckpt").unlink()
    code, events, _ = run(capsys, "replay", root / "trained.ckpt.manifest.json")
    assert code == 0 and events[-1]["event"] == "train"
    assert hashlib.sha256((root / "trained.ckpt").read_bytes()).hexdigest() == before
    assert (root / "trained.ckpt.loss.csv").read_bytes() == csv_before


def test_resume_via_cli_matches(pipeline_run, tmp_path, capsys):
    root, _ = pipeline_run
    data, cfg = root / "data", root / "cfg.json"
    assert run(capsys, "train", "--data", data, "--config", cfg, "--steps", 200, "--out", tmp_path / "full.ckpt")[0] == 0
    # a checkpoint written at step 100 of a 200-step schedule, then resumed
    from sparse2dense import pipeline as pl
    from sparse2dense.model import init_weights
    from sparse2dense.training import save_checkpoint, train
    from sparse2dense.cli import _load_samples

    pc = pl.load_config(cfg)
    res = train(_load_samples(data, pc), init_weights(pc.model, pc.train.seed), pc.train, stop_step=100)
    save_checkpoint(tmp_path / "half.ckpt", res.weights, res.state, 100, pc.train)
    assert run(capsys, "train", "--data", data, "--config", cfg, "--resume", tmp_path / "half.ckpt",
               "--out", tmp_path / "resumed.ckpt")[0] == 0
    from sparse2dense.training import load_checkpoint

    a, b = load_checkpoint(tmp_path / "full.ckpt"), load_checkpoint(tmp_path / "resumed.ckpt")
    for name, p in a.weights.params.items():
        np.testing.assert_array_equal(b.weights[name].data, p.data)
