import json
import sys

import numpy as np
import pytest

from viewmt import cli
from viewmt.field import default_field, load_checkpoint
from viewmt.geometry import Box

SMALL = ["--intrinsics.width=40", "--intrinsics.height=24", "--trajectory.n_frames=20"]
FAST_FIT = ["--train.steps=20", "--train.rays_per_step=256", "--field.resolution=[12,12,12]",
            "--render.samples_per_ray=16"]
FAST_TEST = ["--test.resolution=[40,24]", "--render.samples_per_ray=16", "--suts.reference=[\"harris\"]"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root / "ds")] + SMALL) == 0
    assert cli.main(["fit", "--dataset", str(root / "ds"), "--out", str(root / "fit")] + FAST_FIT) == 0
    return root


def test_overrides_and_config_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"steps": 5}, "seed": 3}))
    cfg = cli.load_config(tmp_path / "c.json", ["--train.learning_rate=0.1", "--scene.kind=object",
                                                 "--test.resolution=[8,8]"])
    assert cfg["train"] == {"steps": 5, "rays_per_step": 4096, "learning_rate": 0.1}
    assert cfg["seed"] == 3 and cfg["scene"]["kind"] == "object" and cfg["test"]["resolution"] == [8, 8]
    with pytest.raises(cli.UsageError):
        cli.load_config(None, ["--epsilons=[0.5,0.2]"])
    with pytest.raises(cli.UsageError):
        cli.load_config(None, ["stray"])


def test_usage_errors_exit_1(capsys):
    assert cli.main([]) == 1
    assert cli.main(["synth", "--out", "x", "--epsilons=[2]"]) == 1


def test_synth_two_frames(tmp_path, capsys):
    assert cli.main(["synth", "--out", str(tmp_path / "d"), "--trajectory.n_frames=2"] + SMALL[:2]) == 0
    out = capsys.readouterr().out
    assert out.split("\n")[1].split() == ["2", "1", "1"]
    assert json.loads((tmp_path / "d" / "config.json").read_text())["trajectory"]["n_frames"] == 2


def test_synth_default_split(tmp_path):
    cfg = cli.load_config(None, ["--intrinsics.width=8", "--intrinsics.height=8"])
    assert cli.cmd_synth(cfg, tmp_path / "d") == {"total": 300, "train": 270, "eval": 30}


def test_synth_bad_output_dir(tmp_path, capsys):
    (tmp_path / "f").write_text("")
    assert cli.main(["synth", "--out", str(tmp_path / "f" / "d")] + SMALL) == 2
    assert str(tmp_path / "f") in capsys.readouterr().err


def test_fit_outputs(run_dir):
    m = json.loads((run_dir / "fit" / "metrics.json").read_text())
    assert m["steps"] == 20 and m["eval_frames"] == 2 and np.isfinite(m["heldout_psnr"])
    lines = (run_dir / "fit" / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 21


def test_fit_zero_steps_equals_init(tmp_path, run_dir):
    assert cli.main(["fit", "--dataset", str(run_dir / "ds"), "--out", str(tmp_path / "f0"), "--train.steps=0",
                     "--field.resolution=[12,12,12]", "--render.samples_per_ray=16"]) == 0
    side = json.loads((run_dir / "ds" / "scene.json").read_text())["box"]
    init = default_field(Box(tuple(side["lo"]), tuple(side["hi"])), (12, 12, 12), 0.1, 0.5, (0.5, 0.5, 0.5))
    got = load_checkpoint(tmp_path / "f0" / "field.n2rf")
    assert np.array_equal(got.sigma, init.sigma.astype(np.float32).astype(float))
    assert np.array_equal(got.background, init.background)
    assert "heldout_psnr" in json.loads((tmp_path / "f0" / "metrics.json").read_text())


def test_fit_repeatable(tmp_path, run_dir):
    assert cli.main(["fit", "--dataset", str(run_dir / "ds"), "--out", str(tmp_path / "again")] + FAST_FIT) == 0
    assert (tmp_path / "again" / "loss.csv").read_bytes() == (run_dir / "fit" / "loss.csv").read_bytes()


def test_fit_missing_dataset(tmp_path):
    assert cli.main(["fit", "--dataset", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2


def test_test_without_suts(run_dir, tmp_path, capsys):
    rc = cli.main(["test", "--dataset", str(run_dir / "ds"), "--checkpoint", str(run_dir / "fit" / "field.n2rf"),
                   "--out", str(tmp_path / "t"), "--suts.reference=[]"])
    assert rc == 1 and "no SUTs configured" in capsys.readouterr().err


def test_test_report_and_determinism(run_dir, tmp_path):
    args = ["test", "--dataset", str(run_dir / "ds"), "--checkpoint", str(run_dir / "fit" / "field.n2rf")]
    assert cli.main(args + ["--out", str(tmp_path / "a")] + FAST_TEST) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")] + FAST_TEST) == 0
    a = (tmp_path / "a" / "report.json").read_bytes()
    assert a == (tmp_path / "b" / "report.json").read_bytes()
    rep = json.loads(a)
    assert {r["test"] for r in rep["records"]} == {f"tau{i}" for i in range(7)} | {"m1_gain0.6", "m1_gain1.4",
                                                                                    "m2", "m3"}
    for f in ("report.csv", "summary.txt", "config.json"):
        assert (tmp_path / "a" / f).exists()
    assert not [p for p in (tmp_path / "a").iterdir() if p.name.startswith(".")]


def test_failure_budget_exit_3(run_dir, tmp_path):
    ext = json.dumps([{"name": "dead", "task": "classify",
                       "command": [sys.executable, "-c", "import sys; sys.exit(1)"]}])
    rc = cli.main(["test", "--dataset", str(run_dir / "ds"), "--checkpoint", str(run_dir / "fit" / "field.n2rf"),
                   "--out", str(tmp_path / "t"), "--suts.reference=[]", f"--suts.external={ext}",
                   "--test.resolution=[40,24]", "--render.samples_per_ray=8", "--mutations=[]"])
    assert rc == 3
    assert (tmp_path / "t" / "report.json").exists()


def test_analyze(run_dir, tmp_path, capsys):
    args = ["test", "--dataset", str(run_dir / "ds"), "--checkpoint", str(run_dir / "fit" / "field.n2rf"),
            "--out", str(tmp_path / "t")] + FAST_TEST
    assert cli.main(args) == 0
    assert cli.main(["analyze", "--report", str(tmp_path / "t" / "report.json"), "--out", str(tmp_path / "t")]) == 0
    table = json.loads((tmp_path / "t" / "correlations.json").read_text())
    assert len(table) == 2 * 3
    assert cli.main(["analyze", "--report", str(tmp_path / "missing.json")]) == 2


def test_render_transform_mutate(run_dir, tmp_path):
    ck = str(run_dir / "fit" / "field.n2rf")
    assert cli.main(["render", "--dataset", str(run_dir / "ds"), "--checkpoint", ck, "--frame", "1", "--tau", "tau3",
                     "--out", str(tmp_path / "v.ppm"), "--test.resolution=[40,24]"]) == 0
    assert cli.main(["render", "--dataset", str(run_dir / "ds"), "--checkpoint", ck, "--tau", "tau9",
                     "--out", str(tmp_path / "w.ppm")]) == 1
    assert cli.main(["transform", "--dataset", str(run_dir / "ds"), "--out", str(tmp_path / "poses")]) == 0
    assert len(list((tmp_path / "poses").glob("poses_tau*.json"))) == 7
    assert cli.main(["mutate", "--image", str(tmp_path / "v.ppm"), "--out", str(tmp_path / "m")]) == 0
    assert sorted(p.name for p in (tmp_path / "m").glob("*.ppm")) == ["m1_gain0.6.ppm", "m1_gain1.4.ppm", "m2.ppm",
                                                                      "m3.ppm"]


def test_bench_single_resolution(run_dir, capsys):
    cfg = cli.load_config(None, ["--bench.resolutions=[[32,18]]", "--bench.frames=2"])
    fps = cli.cmd_bench(cfg, run_dir / "fit" / "field.n2rf", run_dir / "ds")
    assert list(fps) == [(32, 18)]
    out = capsys.readouterr().out.splitlines()
    assert out[0].split() == ["Resolution", "32x18"]


def test_reference_classifier_recognizes_color_casts():
    from viewmt.geometry import CameraIntrinsics
    from viewmt.suts import hist_classify
    from viewmt.synthscene import default_object_scene, default_orbit, raytrace, trajectory_poses

    scene = default_object_scene()
    intr = CameraIntrinsics.from_fov(64, 36, 60)
    poses = trajectory_poses(default_orbit(24))
    model = cli.reference_classifier(scene, intr, poses[::2])
    for c, s in enumerate(cli.color_cast_variants(scene)):
        assert s.background == tuple(np.roll(scene.background, c))
        for p in poses[1::6]:
            assert int(np.argmax(hist_classify(raytrace(s, intr, p), model).probs)) == c
