"""End-to-end runs of the command line pipeline on small scenes."""

import hashlib
import json

import numpy as np
import pytest

from lamoco import cli, io, metrics

SCENE = {
    "resolution": [48, 64], "frames": 5, "seed": 7,
    "background": {"texture_scale": 3.0, "motion": {"kind": "static"}},
    "objects": [
        {"shape": {"kind": "rect", "center": [-0.5, 0.0],
                   "half": [0.125, 0.25]},
         "depth": 1, "texture_scale": 5.0, "class_name": "box",
         "motion": {"kind": "translation", "velocity": [0.125, 0.0]}},
    ],
}

STATIC_SCENE = {
    "resolution": [48, 64], "frames": 5, "seed": 19,
    "background": {"texture_scale": 3.0, "motion": {"kind": "static"}},
    "objects": [
        {"shape": {"kind": "disk", "center": [0.0, 0.0], "radius": 0.3},
         "depth": 1, "texture_scale": 5.0, "class_name": "disk",
         "motion": {"kind": "static"}},
    ],
}


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_hash(root):
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(path.relative_to(root).as_posix().encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One gen + fit + forecast + synth run shared by the read-only tests."""
    root = tmp_path_factory.mktemp("pipeline")
    spec_path = root / "scene.json"
    spec_path.write_text(json.dumps(SCENE))
    assert run("gen", "--out", root / "clip", "--config", spec_path) == 0
    assert run("fit", root / "clip" / "flows", root / "clip" / "segs",
               "--out", root / "fit.json", "--layers", 2,
               "--iterations", 25, "--seed", 3) == 0
    assert run("forecast", root / "fit.json", "--out", root / "future.json",
               "--k", 2, "--model", "linear") == 0
    assert run("synth", root / "future.json", root / "clip" / "frames",
               "--out", root / "pred",
               "--segs", root / "clip" / "segs") == 0
    return root


def test_gen_writes_expected_tree(pipeline):
    clip = pipeline / "clip"
    assert sorted(p.name for p in (clip / "frames").iterdir()) == [
        f"frame_{t:04d}.png" for t in range(5)]
    assert sorted(p.name for p in (clip / "flows").iterdir()) == [
        f"flow_{k:04d}.flo" for k in range(4)]
    segs = sorted(p.name for p in (clip / "segs").iterdir())
    assert "classes.json" in segs
    assert [n for n in segs if n.endswith(".png")] == [
        f"seg_{t:04d}.png" for t in range(5)]
    spec = json.loads((clip / "spec.json").read_text())
    assert spec["resolution"] == [48, 64]


def test_gen_is_deterministic(tmp_path):
    spec_path = tmp_path / "scene.json"
    spec_path.write_text(json.dumps(SCENE))
    assert run("gen", "--out", tmp_path / "a", "--config", spec_path) == 0
    assert run("gen", "--out", tmp_path / "b", "--config", spec_path) == 0
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")


def test_gen_seed_flag_changes_output(tmp_path):
    spec_path = tmp_path / "scene.json"
    spec_path.write_text(json.dumps(SCENE))
    assert run("gen", "--out", tmp_path / "a", "--config", spec_path) == 0
    assert run("gen", "--out", tmp_path / "b", "--config", spec_path,
               "--seed", 99) == 0
    a = io.read_frame_png(tmp_path / "a" / "frames" / "frame_0000.png")
    b = io.read_frame_png(tmp_path / "b" / "frames" / "frame_0000.png")
    assert not np.array_equal(a, b)


def test_fit_outputs_and_echoed_hyperparameters(pipeline):
    manifest = io.load_manifest(pipeline / "fit.json")
    weights = manifest.hyperparameters["weights"]
    assert (weights["lambda_o"], weights["lambda_f"],
            weights["lambda_r"]) == (1.0, 100.0, 1.0)
    assert weights["tau_m"] == 0.005
    settings = manifest.hyperparameters["settings"]
    assert settings["num_layers"] == 2
    assert settings["grid_obj"] == [4, 4]
    assert settings["grid_bg"] == [8, 16]
    assert settings["seed"] == 3
    losses = [float(line) for line in
              (pipeline / "fit.loss.txt").read_text().splitlines()]
    assert len(losses) == len(manifest.loss_history)
    assert losses == [e["total"] for e in manifest.loss_history]
    # totals are only comparable once the flow-weight ramp has finished
    lam = [e["lambda_f"] for e in manifest.loss_history]
    tail = [l for l, f in zip(losses, lam) if f == max(lam)]
    assert tail[-1] <= tail[0]
    for i in range(manifest.num_layers):
        assert (pipeline / f"fit.mask{i}.png").is_file()


def test_fit_missing_inputs_fail_with_named_path(tmp_path, capsys):
    code = run("fit", tmp_path / "nowhere", tmp_path / "nowhere",
               "--out", tmp_path / "m.json")
    assert code != 0
    assert "nowhere" in capsys.readouterr().err


def test_fit_flag_overrides_config(pipeline, tmp_path):
    cfg = tmp_path / "fit.json"
    cfg.write_text(json.dumps({"weights": {"lambda_f": 50.0},
                               "settings": {"iterations": 4}}))
    out = tmp_path / "m.json"
    assert run("fit", pipeline / "clip" / "flows", pipeline / "clip" / "segs",
               "--out", out, "--layers", 1, "--config", cfg,
               "--lambda-f", 80.0) == 0
    manifest = io.load_manifest(out)
    assert manifest.hyperparameters["weights"]["lambda_f"] == 80.0
    assert manifest.hyperparameters["settings"]["iterations"] == 4


def test_fit_rejects_unknown_config_section(pipeline, tmp_path):
    cfg = tmp_path / "fit.json"
    cfg.write_text(json.dumps({"wights": {}}))
    assert run("fit", pipeline / "clip" / "flows", pipeline / "clip" / "segs",
               "--out", tmp_path / "m.json", "--config", cfg) != 0


def test_flow_same_step_near_zero(pipeline, tmp_path):
    out = tmp_path / "same.flo"
    assert run("flow", pipeline / "fit.json", "--t1", 2, "--t2", 2,
               "--out", out) == 0
    flow = io.read_flo(out)
    assert np.max(np.abs(flow.u)) < 1e-6
    assert np.max(np.abs(flow.v)) < 1e-6


def test_flow_matches_generated_truth(pipeline, tmp_path):
    out = tmp_path / "pair.flo"
    assert run("flow", pipeline / "fit.json", "--t1", 0, "--t2", 1,
               "--out", out) == 0
    fitted = io.read_flo(out)
    truth = io.read_flo(pipeline / "clip" / "flows" / "flow_0000.flo")
    assert metrics.epe(fitted, truth) < 0.5


def test_flow_resolution_flag(pipeline, tmp_path):
    out = tmp_path / "big.flo"
    assert run("flow", pipeline / "fit.json", "--t1", 0, "--t2", 1,
               "--out", out, "--resolution", "96x128") == 0
    flow = io.read_flo(out)
    assert flow.shape == (96, 128)


def test_flow_missing_manifest(tmp_path, capsys):
    assert run("flow", tmp_path / "ghost.json", "--t1", 0, "--t2", 1,
               "--out", tmp_path / "x.flo") != 0
    assert "ghost.json" in capsys.readouterr().err


def test_forecast_extends_manifest(pipeline):
    base = io.load_manifest(pipeline / "fit.json")
    future = io.load_manifest(pipeline / "future.json")
    assert base.predicted_count == 0
    assert future.predicted_count == 2
    assert future.observed_count == base.observed_count
    for states in future.trajectories:
        assert len(states) == base.observed_count + 2


def test_forecast_jitter_samples(pipeline, tmp_path):
    out = tmp_path / "ens.json"
    assert run("forecast", pipeline / "fit.json", "--out", out,
               "--k", 2, "--sigma", 0.01, "--samples", 3, "--seed", 5) == 0
    for i in range(3):
        sample = io.load_manifest(tmp_path / f"ens.s{i:02d}.json")
        assert sample.predicted_count == 2
    a = io.load_manifest(tmp_path / "ens.s00.json")
    b = io.load_manifest(tmp_path / "ens.s01.json")
    assert not np.array_equal(a.trajectories[0][-1].points,
                              b.trajectories[0][-1].points)


def test_forecast_samples_need_sigma(pipeline, tmp_path):
    assert run("forecast", pipeline / "fit.json",
               "--out", tmp_path / "e.json",
               "--k", 1, "--samples", 2) != 0


def test_synth_writes_predicted_frames(pipeline):
    names = sorted(p.name for p in (pipeline / "pred").iterdir())
    assert names == ["pred_0005.png", "pred_0006.png"]
    img = io.read_frame_png(pipeline / "pred" / "pred_0005.png")
    assert img.shape == (48, 64, 3)


def test_synth_requires_forecast(pipeline, tmp_path, capsys):
    assert run("synth", pipeline / "fit.json", pipeline / "clip" / "frames",
               "--out", tmp_path / "x") != 0
    assert "forecast" in capsys.readouterr().err


def test_synth_prediction_quality(pipeline, tmp_path):
    spec = dict(SCENE)
    spec["frames"] = 7
    spec_path = tmp_path / "long.json"
    spec_path.write_text(json.dumps(spec))
    assert run("gen", "--out", tmp_path / "long", "--config", spec_path) == 0
    pred = io.read_frame_png(pipeline / "pred" / "pred_0005.png")
    truth = io.read_frame_png(
        tmp_path / "long" / "frames" / "frame_0005.png")
    assert metrics.psnr(pred, truth) > 27.0


def test_eval_reports_metrics(pipeline, tmp_path):
    out = tmp_path / "metrics.json"
    assert run("eval", "--pred", pipeline / "clip" / "frames",
               "--truth", pipeline / "clip" / "frames",
               "--pred-flows", pipeline / "clip" / "flows",
               "--truth-flows", pipeline / "clip" / "flows",
               "--pred-segs", pipeline / "clip" / "segs",
               "--truth-segs", pipeline / "clip" / "segs",
               "--out", out) == 0
    report = json.loads(out.read_text())
    assert report["summary"]["ssim_mean"] == 1.0
    assert report["summary"]["l1_mean"] == 0.0
    assert report["summary"]["epe_mean"] == 0.0
    assert report["summary"]["iou_mean"] == 1.0
    assert len(report["frames"]) == 5
    assert len(report["flows"]) == 4


def test_eval_count_mismatch_fails(pipeline, tmp_path, capsys):
    assert run("eval", "--pred", pipeline / "pred",
               "--truth", pipeline / "clip" / "frames",
               "--out", tmp_path / "m.json") != 0
    err = capsys.readouterr().err
    assert "2" in err and "5" in err


def test_render_flow_file_and_directory(pipeline, tmp_path):
    one = tmp_path / "one.png"
    assert run("render-flow", pipeline / "clip" / "flows" / "flow_0000.flo",
               "--out", one) == 0
    assert io.read_frame_png(one).shape == (48, 64, 3)
    out_dir = tmp_path / "viz"
    assert run("render-flow", pipeline / "clip" / "flows",
               "--out", out_dir) == 0
    assert sorted(p.name for p in out_dir.iterdir()) == [
        f"flow_{k:04d}.png" for k in range(4)]


def test_unknown_subcommand_exits(capsys):
    with pytest.raises(SystemExit):
        cli.main(["frobnicate"])
    capsys.readouterr()


def test_thread_cap_must_be_integer(monkeypatch, pipeline, tmp_path):
    monkeypatch.setenv("LAMOCO_THREADS", "many")
    assert run("flow", pipeline / "fit.json", "--t1", 0, "--t2", 1,
               "--out", tmp_path / "x.flo") != 0


def test_full_pipeline_deterministic_under_fixed_seed(tmp_path):
    spec_path = tmp_path / "scene.json"
    spec_path.write_text(json.dumps(SCENE))
    for name in ("r1", "r2"):
        root = tmp_path / name
        assert run("gen", "--out", root / "clip", "--config", spec_path) == 0
        assert run("fit", root / "clip" / "flows", root / "clip" / "segs",
                   "--out", root / "fit.json", "--layers", 2,
                   "--iterations", 10, "--seed", 3) == 0
        assert run("forecast", root / "fit.json", "--out",
                   root / "future.json", "--k", 2) == 0
        assert run("synth", root / "future.json", root / "clip" / "frames",
                   "--out", root / "pred") == 0
    assert tree_hash(tmp_path / "r1") == tree_hash(tmp_path / "r2")


def test_static_scene_constant_forecast_is_exact(tmp_path):
    """A fully static clip forecast by the constant model reproduces the
    observed frame bit for bit, so SSIM against the truth comes out 1."""
    spec_path = tmp_path / "static.json"
    spec_path.write_text(json.dumps(STATIC_SCENE))
    assert run("gen", "--out", tmp_path / "clip", "--config", spec_path) == 0
    assert run("fit", tmp_path / "clip" / "flows", tmp_path / "clip" / "segs",
               "--out", tmp_path / "fit.json", "--layers", 1,
               "--iterations", 6, "--seed", 0) == 0
    assert run("forecast", tmp_path / "fit.json",
               "--out", tmp_path / "future.json",
               "--k", 1, "--model", "constant") == 0
    assert run("synth", tmp_path / "future.json", tmp_path / "clip" / "frames",
               "--out", tmp_path / "pred") == 0
    truth_dir = tmp_path / "truth"
    truth_dir.mkdir()
    src = tmp_path / "clip" / "frames" / "frame_0000.png"
    (truth_dir / "pred_0005.png").write_bytes(src.read_bytes())
    out = tmp_path / "metrics.json"
    assert run("eval", "--pred", tmp_path / "pred", "--truth", truth_dir,
               "--out", out) == 0
    report = json.loads(out.read_text())
    assert abs(report["summary"]["ssim_mean"] - 1.0) <= 1e-6
