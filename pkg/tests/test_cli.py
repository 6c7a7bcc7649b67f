import json

from yardmaster.cli import main
from yardmaster.fixtures import default_fixture_dir


def test_comms_vectors_to_file(tmp_path):
    out = tmp_path / "vectors.jsonl"
    assert main(["comms", "vectors", "-o", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) >= 20
    first = json.loads(lines[0])
    assert {"message", "msg_id", "expected_hex"} <= set(first)


def test_store_load_and_dump(tmp_path, capsys):
    root = tmp_path / "db"
    assert main(["store", "--root", str(root), "load",
                 str(default_fixture_dir())]) == 0
    assert (root / "tasks.jsonl").exists()
    capsys.readouterr()
    assert main(["store", "--root", str(root), "dump"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    records = [json.loads(line) for line in out]
    assert any(r.get("task_id") == 1 for r in records)
    assert any(r.get("record_name") == "Target_unloading_path" for r in records)


def test_fixtures_regeneration_matches(tmp_path):
    out = tmp_path / "fx"
    assert main(["fixtures", "--output", str(out)]) == 0
    assert (out / "tasks.jsonl").read_bytes() == \
        (default_fixture_dir() / "tasks.jsonl").read_bytes()
    assert (out / "parameters.jsonl").read_bytes() == \
        (default_fixture_dir() / "parameters.jsonl").read_bytes()


def test_run_scenario_writes_report_and_events(tmp_path):
    report_path = tmp_path / "report.json"
    events_path = tmp_path / "events.jsonl"
    assert main(["run-scenario", "--cycles", "1", "--seed", "3",
                 "--max-sim-time", "600",
                 "--report", str(report_path),
                 "--events", str(events_path)]) == 0
    report = json.loads(report_path.read_text())
    assert report["cycles_completed"] == 1
    assert abs(report["conservation_residual"]) < 1e-9
    lines = events_path.read_text().splitlines()
    assert len(lines) == report["event_count"]
    kinds = {json.loads(l)["type"] for l in lines[:200]}
    assert "step" in kinds
