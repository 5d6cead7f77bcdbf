import json

import pytest

from rowslam.cli import main
from rowslam.evaluation import read_reports_csv
from rowslam.mapping import SemanticMap
from rowslam.simulator import SimulationSpec, write_log


@pytest.fixture(scope="module")
def clean_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("clean")
    spec = SimulationSpec.noise_free()
    (d / "spec.json").write_text(json.dumps(spec.to_dict()))
    assert main(["simulate", str(d / "spec.json"), "--out", str(d / "log.jsonl"), "--seed", "2",
                 "--no-timestamp"]) == 0
    return d


def test_simulate_writes_log_and_scene(clean_files):
    assert (clean_files / "log.jsonl").is_file()
    assert (clean_files / "log.scene.json").is_file()


def test_simulate_same_seed_byte_identical(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"length": 0.3}))
    for name in ("a", "b"):
        assert main(["simulate", str(spec), "--out", str(tmp_path / f"{name}.jsonl"), "--seed", "9",
                     "--no-timestamp"]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a.scene.json").read_bytes() == (tmp_path / "b.scene.json").read_bytes()


def test_simulate_missing_spec(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["simulate", str(missing), "--out", str(tmp_path / "x.jsonl")]) != 0
    assert str(missing) in capsys.readouterr().err


def test_run_and_evaluate_clean(clean_files, capsys):
    d = clean_files
    assert main(["run", str(d / "log.jsonl"), "--out", str(d / "map.json"), "--no-timestamp"]) == 0
    m = SemanticMap.load(d / "map.json")
    assert len(m.landmarks) > 10
    assert main(["evaluate", str(d / "map.json"), str(d / "log.scene.json"), str(d / "log.jsonl"),
                 "--out", str(d / "eval.csv")]) == 0
    (row,) = read_reports_csv(d / "eval.csv")
    assert row.epsilon1_cm < 1e-6 and row.epsilon2_px < 1e-6


def test_run_with_corridor_config(clean_files):
    d = clean_files
    (d / "cfg.json").write_text(json.dumps({"plane_source": "corridor"}))
    assert main(["run", str(d / "log.jsonl"), "--config", str(d / "cfg.json"),
                 "--out", str(d / "corridor.json")]) == 0
    doc = json.loads((d / "corridor.json").read_text())
    assert doc["config"]["plane_source"] == "corridor"
    assert doc["method"] == "corridor"


def test_run_empty_log(tmp_path, capsys):
    write_log([], tmp_path / "empty.jsonl", {"seed": 0})
    assert main(["run", str(tmp_path / "empty.jsonl"), "--out", str(tmp_path / "m.json")]) != 0
    assert "EmptyMap" in capsys.readouterr().err
    assert not (tmp_path / "m.json").exists()


def test_evaluate_warns_on_seed_mismatch(clean_files, tmp_path, capsys):
    d = clean_files
    main(["run", str(d / "log.jsonl"), "--out", str(d / "map2.json")])
    other = tmp_path / "other.jsonl"
    spec = d / "spec.json"
    main(["simulate", str(spec), "--out", str(other), "--seed", "3"])
    capsys.readouterr()
    assert main(["evaluate", str(d / "map2.json"), str(tmp_path / "other.scene.json"),
                 str(d / "log.jsonl"), "--out", str(tmp_path / "e.csv")]) == 0
    assert "does not match" in capsys.readouterr().err


def test_benchmark_writes_six_rows(tmp_path):
    assert main(["simulate", "--out", str(tmp_path / "log.jsonl"), "--seed", "1"]) == 0
    assert main(["benchmark", str(tmp_path / "log.jsonl"), "--out", str(tmp_path / "b.csv")]) == 0
    rows = read_reports_csv(tmp_path / "b.csv")
    assert [r.method_name for r in rows] == ["ours", "corridor", "front_view_slam", "side_view_slam",
                                             "ransac_plane_fitting", "optical_flow"]


def test_print_defaults(capsys):
    assert main(["--print-default-config"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["iou_threshold"] == 0.3 and cfg["redetect_every"] == 200
    assert main(["simulate", "--out", "unused", "--print-default-spec"]) == 0
    assert json.loads(capsys.readouterr().out)["field"]["stalk_count"] == 40


def test_bad_config_key(clean_files, tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps({"bogus": 1}))
    assert main(["run", str(clean_files / "log.jsonl"), "--config", str(tmp_path / "cfg.json"),
                 "--out", str(tmp_path / "m.json")]) == 1
    assert "bogus" in capsys.readouterr().err
