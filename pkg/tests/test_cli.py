import json

import pytest

from kdtraj.cli import expand_grid, main

TINY = ["--set", "d_model=16", "--set", "n_heads=2", "--set", "n_layers=1", "--set", "batch_size=4",
        "--set", "variant=holistic", "--epochs", "1"]



def cli(tmp_path, command, *args):
    return main([command, "--workdir", str(tmp_path), *args])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    wd = tmp_path_factory.mktemp("cli")
    assert main(["generate-data", "--workdir", str(wd), "--out", "data", "--count", "6", "--seed", "0",
                 "--set", "n_agents=[2,3]"]) == 0
    assert main(["train-teacher", "--workdir", str(wd), "--data", "data", "--out", "teacher", *TINY]) == 0
    return wd


def test_generate_data_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert cli(tmp_path, "generate-data", "--out", name, "--count", "4", "--seed", "0") == 0
    files = sorted(p.name for p in (tmp_path / "a").glob("scene_*.json"))
    assert len(files) == 4
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 0 and len(manifest["scene_seeds"]) == 4
    assert sorted(manifest["artifacts"]) == files


def test_resume_is_noop_and_overwrite_refused(tmp_path, capsys):
    assert cli(tmp_path, "generate-data", "--out", "d", "--count", "2") == 0
    before = (tmp_path / "d" / "manifest.json").read_text()
    assert cli(tmp_path, "generate-data", "--out", "d", "--count", "2", "--resume") == 0
    assert "up to date" in capsys.readouterr().out
    assert (tmp_path / "d" / "manifest.json").read_text() == before
    assert cli(tmp_path, "generate-data", "--out", "d", "--count", "2") == 2
    assert cli(tmp_path, "generate-data", "--out", "d", "--count", "3", "--resume") == 2


def test_malformed_config_exits_2_without_output(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("epochs: [1, 2\n")
    assert cli(tmp_path, "train-teacher", "--config", str(bad), "--data", "x", "--out", "run") == 2
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and "malformed config" in err
    assert not (tmp_path / "run").exists()
    bad.write_text("epochz: 3\n")
    assert cli(tmp_path, "generate-data", "--config", str(bad), "--out", "run") == 2
    assert not (tmp_path / "run").exists()


def test_usage_errors(tmp_path):
    assert main(["frobnicate"]) == 2
    assert cli(tmp_path, "generate-data", "--out", "x", "--bogus") == 2
    assert cli(tmp_path, "train-teacher", "--data", "missing", "--out", "t") == 2
    assert not (tmp_path / "t").exists()


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "gen.yaml"
    cfg.write_text("generator:\n  seed: 5\n  n_agents: [2, 2]\n")
    assert cli(tmp_path, "generate-data", "--config", str(cfg), "--out", "g", "--count", "1", "--set",
               "obstacle_count=1") == 0
    m = json.loads((tmp_path / "g" / "manifest.json").read_text())
    assert m["config"]["generator"]["seed"] == 5 and m["config"]["generator"]["obstacle_count"] == 1


def test_train_teacher_outputs(workspace):
    files = {p.name for p in (workspace / "teacher").iterdir()}
    assert files == {"model.npz", "train_log.jsonl", "manifest.json"}
    m = json.loads((workspace / "teacher" / "manifest.json").read_text())
    assert m["command"] == "train-teacher" and m["config"]["d_model"] == 16 and m["fingerprint"]


def test_distill_evaluate_report(workspace, tmp_path):
    wd = str(workspace)
    assert main(["distill-student", "--workdir", wd, "--teacher", "teacher", "--data", "data",
                 "--out", str(tmp_path / "student"), *TINY]) == 0
    m = json.loads((tmp_path / "student" / "manifest.json").read_text())
    assert m["inputs"]["teacher_fingerprint"]
    assert main(["evaluate", "--workdir", wd, "--model", str(tmp_path / "student"), "--data", "data",
                 "--out", str(tmp_path / "ev_s")]) == 0
    assert main(["evaluate", "--workdir", wd, "--model", "constant-velocity", "--data", "data",
                 "--out", str(tmp_path / "ev_cv")]) == 0
    metrics = json.loads((tmp_path / "ev_s" / "metrics.json").read_text())
    assert set(metrics) >= {"ADE", "ADE2", "ADE1", "FDE", "FDE2", "FDE1"}
    assert main(["report", "--workdir", wd, "--inputs", str(tmp_path / "ev_cv"), str(tmp_path / "ev_s"),
                 "--out", str(tmp_path / "rep")]) == 0
    assert "Avg. +%" in (tmp_path / "rep" / "comparison.md").read_text()
    assert (tmp_path / "rep" / "ADE1.png").is_file()


def test_distill_rejects_uncovered_modalities(workspace, tmp_path):
    rc = main(["distill-student", "--workdir", str(workspace), "--teacher", "teacher", "--data", "data",
               "--out", str(tmp_path / "s"), *TINY, "--set", "teacher_modalities=[X,P]",
               "--set", "student_modalities=[X,S]"])
    assert rc == 2 and not (tmp_path / "s").exists()


def test_expand_grid():
    assert len(expand_grid({"kd_local": [True, False], "kd_global": [True, False]})) == 4
    assert len(expand_grid({"a": [1, 2, 3], "b": [1], "c": [0, 1]})) == 6


def test_ablate_kd_grid(workspace, tmp_path):
    out = tmp_path / "abl"
    args = ["ablate", "--workdir", str(workspace), "--teacher", "teacher", "--data", "data", "--eval-data", "data",
            "--out", str(out), *TINY]
    assert main(args) == 0
    runs = sorted((out / "runs").iterdir())
    assert len(runs) == 4
    assert all((r / "manifest.json").is_file() and (r / "metrics.json").is_file() for r in runs)
    top = json.loads((out / "manifest.json").read_text())
    assert len(top["runs"]) == 4 and top["status"] == "complete"
    table = (out / "report" / "comparison.md").read_text()
    assert table.count("\n") == 6
    stamp = (out / "manifest.json").stat().st_mtime_ns
    assert main(args + ["--resume"]) == 0
    assert (out / "manifest.json").stat().st_mtime_ns == stamp


def test_ablate_trains_teacher_per_teacher_config(workspace, tmp_path):
    out = tmp_path / "abl2"
    assert main(["ablate", "--workdir", str(workspace), "--data", "data", "--out", str(out), *TINY,
                 "--grid", "student_modalities=[[X], [X, P]]", "--grid", "n_modes=[1, 6]"]) == 0
    assert len(list((out / "runs").iterdir())) == 4
    # modality sets share a teacher, mode counts do not
    assert len(list((out / "teachers").iterdir())) == 2
    assert main(["ablate", "--workdir", str(workspace), "--data", "data", "--out", str(tmp_path / "x"),
                 "--grid", "n_modes=1,6"]) == 2
