import json

import pytest

from thermoscout.cli import main
from thermoscout.config import ConfigError, load_config, parse_config
from thermoscout.dynamics import DepositionSchedule, LayerSpec

from conftest import SMALL_SCENARIO
from oracles import icosphere, write_obj


def write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


# --- config parsing -----------------------------------------------------------


def test_defaults_materialized():
    cfg = parse_config({})
    assert cfg.model["dt"] == 0.15
    assert cfg.loop["steps_per_measurement"] == 40
    assert cfg.policy["kind"] == "max_uncertainty"
    assert cfg.part["active_window"] == 4
    assert cfg.sensor["noise_std"] == 2.0


def test_defaults_encode_measurement_cadence():
    cfg = parse_config({})
    assert cfg.loop["steps_per_measurement"] * cfg.model["dt"] == pytest.approx(6.0)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown top-level"):
        parse_config({"bogus": 1})
    with pytest.raises(ConfigError, match="unknown keys in 'model'"):
        parse_config({"model": {"dtt": 0.1}})


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        parse_config({"model": {"dt": -1.0}})
    with pytest.raises(ConfigError):
        parse_config({"policy": {"kind": "nope"}})
    with pytest.raises(ConfigError):
        parse_config({"policy": {"standoff_scale": 1.0}})
    with pytest.raises(ConfigError):
        parse_config({"loop": {"slice_fraction": 0.7}})
    with pytest.raises(ConfigError, match="invalid part"):
        parse_config({"part": {"pocket": [30.0, 30.0]}})


def test_config_round_trip_semantically_identical(tmp_path):
    path = write_config(tmp_path, SMALL_SCENARIO)
    cfg = load_config(path)
    dumped = cfg.to_dict()
    again = parse_config(dumped)
    assert again.to_dict() == dumped


def test_mesh_route_requires_grid_and_schedule():
    with pytest.raises(ConfigError, match="grid and schedule"):
        parse_config({"mesh_path": "mesh.obj"})


# --- cli: run -------------------------------------------------------------------


@pytest.fixture()
def small_config_path(tmp_path):
    doc = dict(SMALL_SCENARIO)
    doc["out_dir"] = str(tmp_path / "out")
    doc["loop"] = {"horizon_steps": 120, "steps_per_measurement": 40}
    doc["ground_truth"] = {"resolution_factor": 2, "substeps": 2,
                           "save_table": True}
    return write_config(tmp_path, doc)


def test_run_writes_artifacts(small_config_path, tmp_path, capsys):
    assert main(["run", "--config", str(small_config_path)]) == 0
    out = tmp_path / "out"
    trace = (out / "trace.csv").read_text().splitlines()
    assert len(trace) == 1 + 120 // 40
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_cycles"] == 3
    assert summary["config"]["loop"]["horizon_steps"] == 120
    assert summary["final_avg_cov"] > 0
    fig = (out / "fig5.dat").read_text().splitlines()
    assert fig[0].startswith("#")
    assert len(fig) == 4
    assert (out / "groundtruth.tslut").exists()
    assert not list(out.glob("*.tmp"))


def test_run_trace_states(small_config_path, tmp_path):
    assert main(["run", "--config", str(small_config_path),
                 "--trace-states", "--out", str(tmp_path / "st")]) == 0
    states = sorted((tmp_path / "st" / "states").glob("cycle_*.csv"))
    assert len(states) == 3
    header = states[0].read_text().splitlines()[0]
    assert header == "point_id,mean,variance"


def test_run_deterministic_byte_identical(small_config_path, tmp_path):
    assert main(["run", "--config", str(small_config_path),
                 "--out", str(tmp_path / "r1")]) == 0
    assert main(["run", "--config", str(small_config_path),
                 "--out", str(tmp_path / "r2")]) == 0
    a = (tmp_path / "r1" / "trace.csv").read_bytes()
    b = (tmp_path / "r2" / "trace.csv").read_bytes()
    assert a == b


def test_run_seed_override_changes_trace(small_config_path, tmp_path):
    main(["run", "--config", str(small_config_path), "--out", str(tmp_path / "s1")])
    main(["run", "--config", str(small_config_path), "--seed", "123",
          "--out", str(tmp_path / "s2")])
    assert (tmp_path / "s1" / "trace.csv").read_bytes() != \
        (tmp_path / "s2" / "trace.csv").read_bytes()


def test_run_missing_config_exits_4(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "none.json")]) == 4
    assert "none.json" in capsys.readouterr().err


def test_run_invalid_config_exits_2(tmp_path, capsys):
    path = write_config(tmp_path, {"model": {"dt": 0.0}})
    assert main(["run", "--config", str(path)]) == 2


def test_run_missing_mesh_exits_4(tmp_path, capsys):
    sched = tmp_path / "sched.json"
    DepositionSchedule(
        layers=(LayerSpec(point_ids=(0,), activation_step=0,
                          deposition_temp=10.0),),
        active_window=1,
    ).save(sched)
    doc = {
        "mesh_path": str(tmp_path / "missing.obj"),
        "grid": [2, 2, 2],
        "schedule_path": str(sched),
    }
    path = write_config(tmp_path, doc)
    assert main(["run", "--config", str(path)]) == 4
    assert "missing.obj" in capsys.readouterr().err


def test_run_unstable_model_exits_3(tmp_path, capsys):
    doc = dict(SMALL_SCENARIO)
    doc["model"] = {"dt": 10.0, "diffusivity": 50.0}
    doc["out_dir"] = str(tmp_path / "out")
    path = write_config(tmp_path, doc)
    assert main(["run", "--config", str(path)]) == 3
    assert "max_degree" in capsys.readouterr().err


def test_run_mesh_route(tmp_path):
    verts, faces = icosphere(2)
    mesh_path = tmp_path / "sphere.obj"
    write_obj(mesh_path, verts, faces)
    # schedule over the grid-selected control points of the sphere
    from thermoscout.geometry import load_mesh, select_control_points

    picks = select_control_points(load_mesh(mesh_path), (3, 3, 3))
    n = picks.n_points
    half = n // 2
    sched_path = tmp_path / "sched.json"
    DepositionSchedule(
        layers=(
            LayerSpec(point_ids=tuple(range(half)), activation_step=0,
                      deposition_temp=100.0),
            LayerSpec(point_ids=tuple(range(half, n)), activation_step=40,
                      deposition_temp=100.0),
        ),
        active_window=2,
    ).save(sched_path)
    doc = {
        "mesh_path": str(mesh_path),
        "grid": [3, 3, 3],
        "schedule_path": str(sched_path),
        "model": {"diffusivity": 0.05},
        "loop": {"horizon_steps": 120},
        "sensor": {"noise_std": 0.5},
        "out_dir": str(tmp_path / "out"),
    }
    path = write_config(tmp_path, doc)
    assert main(["run", "--config", str(path)]) == 0
    trace = (tmp_path / "out" / "trace.csv").read_text().splitlines()
    assert len(trace) == 4


# --- cli: other verbs --------------------------------------------------------------


def test_gen_schedule(tmp_path, capsys):
    cfg_path = write_config(tmp_path, SMALL_SCENARIO)
    out = tmp_path / "sched.json"
    assert main(["gen-schedule", "--config", str(cfg_path),
                 "--out", str(out)]) == 0
    sched = DepositionSchedule.load(out)
    assert len(sched.layers) == SMALL_SCENARIO["part"]["n_layers"]
    ids = [pid for layer in sched.layers for pid in layer.point_ids]
    assert sorted(ids) == list(range(len(ids)))


def test_compare_policies_single_seed(tmp_path):
    doc = dict(SMALL_SCENARIO)
    doc["loop"] = {"horizon_steps": 80, "steps_per_measurement": 40}
    doc["out_dir"] = str(tmp_path / "cmp")
    cfg_path = write_config(tmp_path, doc)
    assert main(["compare-policies", "--config", str(cfg_path),
                 "--seeds", "1"]) == 0
    out = tmp_path / "cmp"
    traces = sorted(out.glob("trace_*_seed11.csv"))
    assert len(traces) == 3
    report = json.loads((out / "report.json").read_text())
    assert set(report["final_avg_cov_mean"]) == {
        "max_value", "max_uncertainty", "uniform_random"}
    rows = (out / "report.csv").read_text().splitlines()
    assert rows[0] == "policy,seed,final_avg_cov"
    assert len(rows) == 4


def test_inspect_table(tmp_path, capsys):
    doc = dict(SMALL_SCENARIO)
    doc["loop"] = {"horizon_steps": 80, "steps_per_measurement": 40}
    doc["out_dir"] = str(tmp_path / "out")
    cfg_path = write_config(tmp_path, doc)
    assert main(["run", "--config", str(cfg_path)]) == 0
    capsys.readouterr()
    table = tmp_path / "out" / "groundtruth.tslut"
    assert main(["inspect-table", "--table", str(table)]) == 0
    info = capsys.readouterr().out
    assert "steps:      80" in info
    assert "window:     4" in info
    csv_out = tmp_path / "step.csv"
    assert main(["inspect-table", "--table", str(table), "--step", "40",
                 "--csv", str(csv_out)]) == 0
    assert csv_out.read_text().startswith("point_id,x,y,z,temp,active")


def test_inspect_table_missing_file(tmp_path, capsys):
    assert main(["inspect-table", "--table", str(tmp_path / "no.tslut")]) == 4
