import filecmp
import os
import subprocess
import sys

import numpy as np
import pytest

from stpool import tensorio
from stpool.cli import main
from stpool.correspond import read_correspondence_csv
from stpool.synth import read_truth_csv

SCENE = """
frames = 7
height = 12
width = 16
channels = 3
background_class = 0
noise_std = 0.0
seed = 5
class_mean_0 = 0.0, 0.0, 0.0
class_mean_1 = 3.0, 1.0, -2.0
class_mean_2 = -1.0, 4.0, 2.0
object_0 = x=2, y=1, h=4, w=5, vx=0, vy=1, cls=1, g=2
object_1 = x=7, y=9, h=4, w=5, vx=0, vy=-1, cls=2, g=1
"""


def write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return str(path)


def run_pipeline(root):
    """Generate, match, train, infer, eval, sweep under one root; returns dirs."""
    root = str(root)
    dirs = {name: os.path.join(root, name) for name in
            ("bundle", "match", "model", "infer", "eval", "sweep")}
    scene = write(os.path.join(root, "scene.cfg"), SCENE)
    base = f"scene = scene.cfg\ninterval = 1\nsample_size = 7\nepochs = 60\nlr = 0.05\nweight_decay = 0.0\n"
    cfgs = {
        "generate": base + f"out = {dirs['bundle']}\n",
        "match": base + f"out = {dirs['match']}\n",
        "train": base + f"out = {dirs['model']}\n",
        "infer": base + f"model = {dirs['model']}\nout = {dirs['infer']}\n",
        "eval": base + (
            f"pred = {dirs['infer']}/prediction.imap\nout = {dirs['eval']}\noracle = true\n"
        ),
        "sweep": base + f"model = {dirs['model']}\nout = {dirs['sweep']}\n",
    }
    for command, text in cfgs.items():
        cfg = write(os.path.join(root, f"{command}.cfg"), text)
        assert main([command, "--config", cfg]) == 0, command
    return dirs


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    return str(root), run_pipeline(root)


def test_generate_writes_full_bundle(pipeline):
    _, dirs = pipeline
    assert sorted(os.listdir(dirs["bundle"])) == [
        "bundle.cfg", "features.tnsr", "flow_backward.tnsr", "flow_forward.tnsr",
        "labels.imap", "superpixels.imap", "truth.csv",
    ]


def test_generate_single_frame_has_no_flows(tmp_path):
    scene = write(tmp_path / "scene.cfg", SCENE.replace("frames = 7", "frames = 1"))
    cfg = write(tmp_path / "gen.cfg", f"scene = {scene}\nout = {tmp_path}/bundle\n")
    assert main(["generate", "--config", cfg]) == 0
    assert sorted(os.listdir(tmp_path / "bundle")) == [
        "bundle.cfg", "features.tnsr", "labels.imap", "superpixels.imap", "truth.csv",
    ]


def test_match_recovers_ground_truth_correspondences(pipeline):
    _, dirs = pipeline
    rows = read_correspondence_csv(os.path.join(dirs["match"], "correspondences.csv"))
    truth = read_truth_csv(os.path.join(dirs["bundle"], "truth.csv"))
    assert {(f, s, t) for t, f, s, _, _ in rows} == set(truth)
    assert os.path.exists(os.path.join(dirs["match"], "canonical.imap"))
    assert os.path.exists(os.path.join(dirs["match"], "stats.csv"))


def test_infer_noiseless_prediction_matches_labels(pipeline):
    _, dirs = pipeline
    pred = tensorio.read_index_map(os.path.join(dirs["infer"], "prediction.imap"))
    labels = tensorio.read_index_map(os.path.join(dirs["bundle"], "labels.imap"))
    assert np.array_equal(pred, labels[3])  # default target is frames // 2
    scores = tensorio.read_tensor(os.path.join(dirs["infer"], "scores.tnsr"))
    assert scores.shape == (3, 12, 16)


def test_train_writes_resumable_model(pipeline):
    _, dirs = pipeline
    names = sorted(os.listdir(dirs["model"]))
    assert names == [
        "head.cfg", "head_bias.tnsr", "head_vel_bias.tnsr",
        "head_vel_weights.tnsr", "head_weights.tnsr", "loss.csv",
    ]
    loss_lines = open(os.path.join(dirs["model"], "loss.csv")).read().splitlines()
    assert loss_lines[0] == "epoch,loss"
    assert len(loss_lines) == 61
    assert float(loss_lines[-1].split(",")[1]) < float(loss_lines[1].split(",")[1])


def test_eval_reports_perfect_metrics_and_oracle_rows(pipeline):
    _, dirs = pipeline
    lines = open(os.path.join(dirs["eval"], "metrics.csv")).read().splitlines()
    assert lines[0] == "metric,value"
    table = dict(line.split(",") for line in lines[1:])
    for key in ("pixel_acc", "mean_acc", "mean_iou", "fw_iou",
                "oracle_current_pixel_acc", "oracle_next_coverage"):
        assert key in table
    assert float(table["pixel_acc"]) == 1.0
    assert float(table["oracle_current_pixel_acc"]) == 1.0
    assert float(table["bpr_f"]) == 1.0
    bpr = open(os.path.join(dirs["eval"], "bpr.csv")).read().splitlines()
    assert bpr[0] == "tolerance,precision,recall,f"
    assert len(bpr) > 1


def test_sweep_covers_both_directions(pipeline):
    _, dirs = pipeline
    lines = open(os.path.join(dirs["sweep"], "sweep.csv")).read().splitlines()
    assert lines[0] == "direction,max_distance,pixel_acc,mean_acc,mean_iou,fw_iou"
    rows = [line.split(",") for line in lines[1:]]
    assert len(rows) == 10  # 2 directions x 5 distances
    assert {r[0] for r in rows} == {"both", "past"}
    assert all(float(r[2]) == 1.0 for r in rows)


def test_pipeline_reruns_byte_identical(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    dirs_a = run_pipeline(tmp_path / "a")
    dirs_b = run_pipeline(tmp_path / "b")
    for name, dir_a in dirs_a.items():
        dir_b = dirs_b[name]
        files = sorted(os.listdir(dir_a))
        assert files == sorted(os.listdir(dir_b))
        match, mismatch, errors = filecmp.cmpfiles(dir_a, dir_b, files, shallow=False)
        assert mismatch == [] and errors == [], (name, mismatch, errors)


def test_ingest_paths_reproduce_scene_mode_match(pipeline, tmp_path):
    root, dirs = pipeline
    bundle = dirs["bundle"]
    cfg = write(tmp_path / "ingest.cfg", (
        f"features = {bundle}/features.tnsr\n"
        f"superpixels = {bundle}/superpixels.imap\n"
        f"labels = {bundle}/labels.imap\n"
        f"flow_forward = {bundle}/flow_forward.tnsr\n"
        f"flow_backward = {bundle}/flow_backward.tnsr\n"
        "interval = 1\nsample_size = 7\n"
        f"out = {tmp_path}/match\n"
    ))
    assert main(["match", "--config", cfg]) == 0
    a = open(os.path.join(dirs["match"], "correspondences.csv")).read()
    b = open(tmp_path / "match" / "correspondences.csv").read()
    assert a == b


def test_out_flag_overrides_config(pipeline, tmp_path):
    root, _ = pipeline
    cfg = os.path.join(root, "match.cfg")
    out = str(tmp_path / "elsewhere")
    assert main(["match", "--config", cfg, "--out", out]) == 0
    assert os.path.exists(os.path.join(out, "correspondences.csv"))


def test_tau_flag_controls_matching(pipeline, tmp_path):
    root, dirs = pipeline
    cfg = os.path.join(root, "match.cfg")
    out = str(tmp_path / "strict")
    # moving objects uncover background pixels, so the background's overlap
    # decays with distance; a near-1.0 threshold must drop those rows
    assert main(["match", "--config", cfg, "--tau", "0.99", "--out", out]) == 0
    default = read_correspondence_csv(os.path.join(dirs["match"], "correspondences.csv"))
    strict = read_correspondence_csv(os.path.join(out, "correspondences.csv"))
    assert len(strict) < len(default)
    assert all(min(fwd, bwd) > 0.99 for _, _, _, fwd, bwd in strict)
    assert set(strict) <= set(default)


def test_exit_codes(tmp_path):
    scene = write(tmp_path / "scene.cfg", SCENE)
    good = write(tmp_path / "gen.cfg", f"scene = {scene}\nout = {tmp_path}/bundle\n")
    assert main([]) == 1
    assert main(["bogus", "--config", good]) == 1
    assert main(["generate"]) == 1  # --config is required
    assert main(["generate", "--config", str(tmp_path / "missing.cfg")]) == 2
    bad_key = write(tmp_path / "bad.cfg", "scene = scene.cfg\nshenanigans = 1\n")
    assert main(["generate", "--config", bad_key]) == 1
    both = write(tmp_path / "both.cfg", f"scene = {scene}\nfeatures = f.tnsr\nout = {tmp_path}/x\n")
    assert main(["generate", "--config", both]) == 1
    assert main(["generate", "--config", good, "--tau", "1.0"]) == 1
    no_out = write(tmp_path / "noout.cfg", f"scene = {scene}\n")
    assert main(["generate", "--config", no_out]) == 1


def test_corrupt_tensor_is_an_io_error(tmp_path):
    write(tmp_path / "features.tnsr", "not a tensor")
    cfg = write(tmp_path / "ingest.cfg", (
        f"features = {tmp_path}/features.tnsr\n"
        f"superpixels = {tmp_path}/features.tnsr\n"
        f"labels = {tmp_path}/features.tnsr\n"
        f"out = {tmp_path}/out\n"
    ))
    assert main(["match", "--config", cfg]) == 2


def test_console_entrypoint(tmp_path):
    scene = write(tmp_path / "scene.cfg", SCENE.replace("frames = 7", "frames = 2"))
    cfg = write(tmp_path / "gen.cfg", f"scene = {scene}\nout = {tmp_path}/bundle\n")
    proc = subprocess.run(
        [sys.executable, "-m", "stpool", "generate", "--config", cfg],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "wrote" in proc.stdout
    assert os.path.isdir(tmp_path / "bundle")


def test_single_view_mode_flag(pipeline, tmp_path):
    root, dirs = pipeline
    cfg = os.path.join(root, "infer.cfg")
    out = str(tmp_path / "single")
    assert main(["infer", "--config", cfg, "--view-mode", "single", "--out", out]) == 0
    pred = tensorio.read_index_map(os.path.join(out, "prediction.imap"))
    labels = tensorio.read_index_map(os.path.join(dirs["bundle"], "labels.imap"))
    # noiseless features are constant per class, so one frame already suffices
    assert np.array_equal(pred, labels[3])
