import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from hfsense import analytic, cli

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(autouse=True)
def _no_out_dir(monkeypatch):
    monkeypatch.delenv(cli.OUT_DIR_ENV, raising=False)


def _csv(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.mark.parametrize("table", ["capacity", "contention"])
def test_tables_match_golden(table, capsys):
    assert cli.main(["analyze", "--table", table]) == 0
    assert capsys.readouterr().out == (GOLDEN / f"{table}.csv").read_text()


def test_figure_2a(capsys):
    assert cli.main(["analyze", "--figure", "2a"]) == 0
    rows = _csv(capsys.readouterr().out)
    assert len(rows) == 4096 - 8 + 1
    pow2 = [r for r in rows if r["power_of_two"] == "1"]
    assert max(pow2, key=lambda r: float(r["throughput_bps"]))["packet_len"] == "64"
    ref = analytic.packet_length_sweep()
    assert all(float(r["throughput_bps"]) == x["throughput_bps"] for r, x in zip(rows, ref))


def test_figure_2b_and_table_to_a_directory(tmp_path):
    assert cli.main(["analyze", "--figure", "2b", "--table", "capacity", "--out", str(tmp_path)]) == 0
    rows = _csv((tmp_path / "fig2b.csv").read_text())
    assert {r["packet_len"] for r in rows} == {"32", "64"}
    assert {r["ber"] for r in rows} == {"0.01", "0.011"}
    assert (tmp_path / "capacity.csv").read_text() == (GOLDEN / "capacity.csv").read_text()


def test_out_dir_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.OUT_DIR_ENV, str(tmp_path / "env"))
    assert cli.main(["analyze", "--table", "contention"]) == 0
    assert (tmp_path / "env" / "contention.csv").exists()
    assert "wrote" in capsys.readouterr().err


def test_analyze_needs_something_to_do(capsys):
    assert cli.main(["analyze"]) == 2
    assert "--figure" in capsys.readouterr().err


def test_help_documents_columns(capsys):
    with pytest.raises(SystemExit):
        cli.main(["analyze", "--help"])
    out = capsys.readouterr().out
    for col in ("throughput_bps", "failure_prob", "seconds_per_user", "expected_successes"):
        assert col in out


def test_simulate_matches_golden(tmp_path):
    out = tmp_path / "m.json"
    assert cli.main(["simulate", str(GOLDEN / "scenario_small.json"), "--out", str(out)]) == 0
    assert out.read_text() == (GOLDEN / "metrics_small.json").read_text()
    m = json.loads(out.read_text())
    assert all(ep["deadline_met"] for ep in m["episodes"])


def test_simulate_seed_override_and_trace(tmp_path):
    out, trace = tmp_path / "m.json", tmp_path / "t.csv"
    assert cli.main(["simulate", str(GOLDEN / "scenario_small.json"), "--seed", "6",
                     "--out", str(out), "--trace", str(trace)]) == 0
    assert json.loads(out.read_text())["seed"] == 6
    rows = _csv(trace.read_text())
    assert rows and list(rows[0]) == ["t_ns", "event", "detail"]


def test_simulate_prints_a_drawn_seed(tmp_path, capsys):
    sc = tmp_path / "s.json"
    sc.write_text(json.dumps({"sensors": 4, "horizon_s": 2, "contenders": {"count": 0}, "hourly": {"enabled": False}}))
    assert cli.main(["simulate", str(sc), "--out", str(tmp_path)]) == 0
    err = capsys.readouterr().err
    seed = int(err.split("seed: ")[1].split()[0])
    assert (tmp_path / f"metrics-{seed}.json").exists()


def test_simulate_rejects_unknown_keys(tmp_path, capsys):
    sc = tmp_path / "s.json"
    sc.write_text(json.dumps({"sensors": 4, "channel": {"berr": 0.1}}))
    assert cli.main(["simulate", str(sc)]) == 2
    assert "berr" in capsys.readouterr().err


@pytest.mark.parametrize("content", ["{not json", "[1, 2]"])
def test_simulate_rejects_malformed_files(tmp_path, content, capsys):
    sc = tmp_path / "s.json"
    sc.write_text(content)
    assert cli.main(["simulate", str(sc)]) == 2
    assert capsys.readouterr().err


def test_simulate_missing_file(capsys):
    assert cli.main(["simulate", "/nonexistent/s.json"]) == 2


@pytest.mark.parametrize("contenders", [1, 2])
def test_episodes_with_few_contenders(contenders, tmp_path, capsys):
    out = tmp_path / "e.json"
    assert cli.main(["episodes", "--count", "3", "--contenders", str(contenders), "--seed", "1",
                     "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "deadline met" in text
    r = json.loads(out.read_text())
    assert r["count"] == 3 and r["contenders"] == contenders


def test_episodes_prints_drawn_seed(capsys):
    assert cli.main(["episodes", "--count", "0"]) == 0
    assert "seed: " in capsys.readouterr().err


def test_episodes_rejects_bad_counts(capsys):
    assert cli.main(["episodes", "--count", "-1", "--seed", "1"]) == 2


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "hfsense", "analyze", "--table", "capacity"],
                       capture_output=True, text=True, check=True)
    assert r.stdout == (GOLDEN / "capacity.csv").read_text()
