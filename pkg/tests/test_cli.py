import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from vnode.cli import (EXIT_CAPACITY, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_INFEASIBLE, EXIT_OK,
                       main)


@pytest.fixture
def capsys(capsys, caplog):
    """stdout as printed; the log (stderr outside pytest) in place of stderr."""
    class Both:
        def readouterr(self):
            out, err = capsys.readouterr()
            text = err + caplog.text
            caplog.clear()
            return out, text
    return Both()


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write(tmp_path, name, doc):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def read_bytes(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


# -- train ------------------------------------------------------------------------

def test_train_json_and_outputs(capsys, tmp_path, fixtures_dir):
    code, out, _ = run(capsys, "train", "--config", fixtures_dir / "train_4dev.json", "--json",
                       "--out", tmp_path / "a")
    assert code == EXIT_OK
    doc = json.loads(out)
    assert doc["steps"] == 30 and len(doc["devices"]) == 4
    lines = (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 30 and json.loads(lines[-1])["step"] == 29
    assert np.load(tmp_path / "a" / "params.npy").shape == (doc["num_params"],)


def test_train_rerun_is_byte_identical(capsys, tmp_path, fixtures_dir):
    for d in ("a", "b"):
        assert run(capsys, "train", "--config", fixtures_dir / "train_4dev.json",
                   "--out", tmp_path / d)[0] == EXIT_OK
    assert read_bytes(tmp_path / "a") == read_bytes(tmp_path / "b")


def test_train_compare_one_vs_four_devices(capsys, tmp_path, fixtures_dir):
    run(capsys, "train", "--config", fixtures_dir / "train_1dev.json", "--out", tmp_path / "one")
    code, out, _ = run(capsys, "train", "--config", fixtures_dir / "train_4dev.json", "--json",
                       "--compare-against", tmp_path / "one" / "params.npy")
    assert code == EXIT_OK and json.loads(out)["max_divergence"] == 0.0


def test_train_divergence_exit(capsys, tmp_path, fixtures_dir):
    run(capsys, "train", "--config", fixtures_dir / "train_4dev.json", "--out", tmp_path / "a")
    ref = np.load(tmp_path / "a" / "params.npy")
    np.save(tmp_path / "off.npy", ref + 1e-9)
    code, _, err = run(capsys, "train", "--config", fixtures_dir / "train_4dev.json",
                       "--compare-against", tmp_path / "off.npy")
    assert code == EXIT_DIVERGENCE and "exceeds tolerance" in err
    np.save(tmp_path / "short.npy", ref[:-1])
    assert run(capsys, "train", "--config", fixtures_dir / "train_4dev.json",
               "--compare-against", tmp_path / "short.npy")[0] == EXIT_DIVERGENCE


def test_train_resize_matches_static(capsys, tmp_path, fixtures_dir):
    run(capsys, "train", "--config", fixtures_dir / "fig1" / "train_4.json", "--out", tmp_path / "s")
    code, out, _ = run(capsys, "train", "--config", fixtures_dir / "fig1" / "train_resize.json",
                       "--json", "--compare-against", tmp_path / "s" / "params.npy")
    doc = json.loads(out)
    assert code == EXIT_OK and doc["resizes"] == 1 and doc["max_divergence"] == 0.0


def test_train_capacity_exit(capsys, fixtures_dir):
    code, _, err = run(capsys, "train", "--config", fixtures_dir / "train_capacity.json")
    assert code == EXIT_CAPACITY and "capacity" in err


def test_seed_override_changes_result(capsys, tmp_path, fixtures_dir):
    run(capsys, "train", "--config", fixtures_dir / "train_4dev.json", "--out", tmp_path / "a")
    run(capsys, "train", "--config", fixtures_dir / "train_4dev.json", "--seed", 1,
        "--out", tmp_path / "b")
    run(capsys, "train", "--config", fixtures_dir / "train_4dev.json", "--seed", 0,
        "--out", tmp_path / "c")
    a, b, c = (np.load(tmp_path / d / "params.npy") for d in "abc")
    assert not np.array_equal(a, b) and np.array_equal(a, c)


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(bogus=1),
    lambda d: d.pop("steps"),
    lambda d: d.update(global_batch=-4),
    lambda d: d.update(virtual_nodes=7),
    lambda d: d.update(devices=16),
])
def test_train_config_errors(capsys, tmp_path, fixtures_dir, mutate):
    doc = json.loads((fixtures_dir / "train_4dev.json").read_text())
    mutate(doc)
    code, _, err = run(capsys, "train", "--config", write(tmp_path, "c.json", doc))
    assert code == EXIT_CONFIG and err


def test_missing_and_malformed_config(capsys, tmp_path):
    assert run(capsys, "train", "--config", tmp_path / "nope.json")[0] == EXIT_CONFIG
    (tmp_path / "bad.json").write_text("{")
    assert run(capsys, "sched", "--config", tmp_path / "bad.json")[0] == EXIT_CONFIG
    assert run(capsys, "frobnicate")[0] == EXIT_CONFIG
    assert run(capsys, "train", "--config", tmp_path / "x", "--seed", -1)[0] == EXIT_CONFIG


# -- profile ------------------------------------------------------------------------

def test_profile_outputs_and_determinism(capsys, tmp_path, fixtures_dir):
    for d in ("a", "b"):
        code, out, _ = run(capsys, "profile", "--config", fixtures_dir / "profile.json", "--json",
                           "--out", tmp_path / d)
        assert code == EXIT_OK
    assert read_bytes(tmp_path / "a") == read_bytes(tmp_path / "b")
    assert sorted(read_bytes(tmp_path / "a")) == ["profile_P100.json", "profile_V100.json"]
    doc = json.loads(out)
    v100 = next(p for p in doc["profiles"] if p["device_type"] == "V100")
    assert len(v100["points"]) == len(doc["batch_sizes"])


def test_profile_capacity_skips_and_zero_max(capsys, tmp_path, fixtures_dir):
    doc = json.loads((fixtures_dir / "profile.json").read_text())
    doc["device_models"][0]["memory_capacity"] = 8
    code, out, err = run(capsys, "profile", "--config", write(tmp_path, "p.json", doc), "--json")
    assert code == EXIT_OK and "exceeds capacity" in err
    v100 = json.loads(out)["profiles"][0]
    assert max(p["batch_size"] for p in v100["points"]) == 8
    doc["max_batch"] = 0
    code, _, err = run(capsys, "profile", "--config", write(tmp_path, "p.json", doc))
    assert code == EXIT_CONFIG and "smallest candidate" in err


# -- solve ----------------------------------------------------------------------------

def test_solve_fig5(capsys, tmp_path, fixtures_dir):
    code, out, _ = run(capsys, "solve", "--config", fixtures_dir / "hetero" / "fig5.json", "--json",
                       "--out", tmp_path)
    assert code == EXIT_OK
    doc = json.loads(out)
    per = {p["device_type"]: (p["num_devices"], p["batch_size"]) for p in doc["per_type"]}
    assert per == {"P100": (2, 1024), "V100": (2, 3072)}
    assert json.loads((tmp_path / "assignment.json").read_text()) == doc


def test_solve_explain_lists_candidates(capsys, fixtures_dir):
    code, out, _ = run(capsys, "solve", "--config", fixtures_dir / "hetero" / "fig5.json", "--json",
                       "--explain")
    doc = json.loads(out)
    assert code == EXIT_OK and doc["candidates"]
    assert min(r["predicted_step_time_s"] for r in doc["candidates"]) == doc["predicted_step_time_s"]
    code, out, _ = run(capsys, "solve", "--config", fixtures_dir / "hetero" / "fig5.json",
                       "--explain")
    assert f"{len(doc['candidates'])} candidates evaluated" in out


def test_solve_infeasible(capsys, fixtures_dir):
    code, out, err = run(capsys, "solve", "--config", fixtures_dir / "hetero" / "infeasible.json",
                         "--json")
    assert code == EXIT_INFEASIBLE and "infeasible" in json.loads(out) and "infeasible" in err


def test_solve_missing_profile(capsys, tmp_path, fixtures_dir):
    doc = json.loads((fixtures_dir / "hetero" / "fig5.json").read_text())
    doc["profiles"] = [str(fixtures_dir / "hetero" / "profile_V100.json")]
    code, _, err = run(capsys, "solve", "--config", write(tmp_path, "s.json", doc))
    assert code == EXIT_CONFIG and "P100" in err


# -- sched ----------------------------------------------------------------------------

def test_sched_outputs_byte_identical(capsys, tmp_path, fixtures_dir):
    for d in ("a", "b"):
        assert run(capsys, "sched", "--config", fixtures_dir / "sched" / "3job.json",
                   "--out", tmp_path / d)[0] == EXIT_OK
    files = read_bytes(tmp_path / "a")
    assert sorted(files) == ["events.jsonl", "jobs.csv", "summary.json", "utilization.jsonl"]
    assert files == read_bytes(tmp_path / "b")


def test_sched_policy_flag(capsys, fixtures_dir):
    _, wfs, _ = run(capsys, "sched", "--config", fixtures_dir / "sched" / "3job.json", "--json")
    _, static, _ = run(capsys, "sched", "--config", fixtures_dir / "sched" / "3job.json", "--json",
                       "--policy", "static")
    assert json.loads(wfs)["policy"] == "wfs" and json.loads(static)["policy"] == "static"
    assert json.loads(wfs)["makespan_s"] < json.loads(static)["makespan_s"]
    assert run(capsys, "sched", "--config", fixtures_dir / "sched" / "3job.json",
               "--policy", "fifo")[0] == EXIT_CONFIG


def test_sched_bad_trace(capsys, tmp_path, fixtures_dir):
    write(tmp_path, "t.json", [{"job_id": "a", "arrival_s": 0, "priority": 1, "demand": 1,
                                "steps": 1, "workload": "nope"}])
    cfg = json.loads((fixtures_dir / "sched" / "3job.json").read_text())
    cfg["trace"] = "t.json"
    code, _, err = run(capsys, "sched", "--config", write(tmp_path, "c.json", cfg))
    assert code == EXIT_CONFIG and "nope" in err


def test_sched_empty(capsys, fixtures_dir):
    code, out, _ = run(capsys, "sched", "--config", fixtures_dir / "sched" / "empty.json", "--json")
    assert code == EXIT_OK and json.loads(out)["num_jobs"] == 0


# -- the installed entry point ----------------------------------------------------------

def test_console_script_streams(fixtures_dir):
    exe = shutil.which("vnode")
    cmd = [exe] if exe else [sys.executable, "-m", "vnode.cli"]
    p = subprocess.run(cmd + ["solve", "--config", str(fixtures_dir / "hetero" / "infeasible.json"),
                              "--json"], capture_output=True, text=True)
    assert p.returncode == EXIT_INFEASIBLE
    json.loads(p.stdout)
    assert p.stderr.startswith("vnode:")
