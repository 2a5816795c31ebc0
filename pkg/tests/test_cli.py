import json
import subprocess
import sys

import pytest

from dca.cli import main


def test_help(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    assert "partition file" in capsys.readouterr().out


def test_missing_inputs_exit_2(capsys):
    assert main(["solve"]) == 2
    assert "--fixture" in capsys.readouterr().err


def test_bad_config_exit_2(capsys):
    assert main(["run", "--fixture", "ieee14", "-D", "0"]) == 2


def test_solve(capsys):
    assert main(["solve", "--fixture", "ieee14"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("status Converged")
    assert "theta" in out


def test_screen(tmp_path, capsys):
    assert main(["screen", "--fixture", "ieee30", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split() == ["from_node", "region", "distance", "to_nodes"]
    assert len(out) > 5
    header = (tmp_path / "screening.csv").read_text().splitlines()[0]
    assert header == "from_node,region,distance,to_nodes,violations,stop"


def test_run_writes_report(tmp_path, capsys):
    code = main(["run", "--fixture", "ieee14", "-D", "2", "--out", str(tmp_path)])
    assert code == 1  # the curated fixture has violations
    out = capsys.readouterr().out
    assert "Stop" in out
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["violations"] and not doc["aborted"]
    for name in ("screening.csv", "iterations.csv", "traces.csv"):
        assert (tmp_path / name).is_file()


def test_oracle(tmp_path, capsys):
    assert main(["oracle", "--fixture", "ieee14", "--n1", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    line = next(x for x in out.splitlines() if x.startswith("max abs difference"))
    assert float(line.split()[-1]) <= 4e-4
    assert "BranchActiveFlow:3@1" in out
    assert (tmp_path / "residuals.csv").read_text().startswith("bus,region,")


def test_bench(tmp_path, capsys):
    assert main(["bench", "--fixture", "ieee14", "--d-values", "1,2", "--reps", "1",
                 "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "bench.csv").read_text().splitlines()
    assert rows[0] == "d,T" and [r.split(",")[0] for r in rows[1:]] == ["1", "2"]


def test_serve_and_run_over_tcp(tmp_path):
    procs, peers = [], {}
    try:
        for region in (1, 2):
            p = subprocess.Popen([sys.executable, "-m", "dca", "serve", "--fixture", "ieee14",
                                  "--region", str(region), "--listen", "127.0.0.1:0", "--once"],
                                 stdout=subprocess.PIPE, text=True)
            procs.append(p)
            peers[region] = p.stdout.readline().split()[-1]
        roster = tmp_path / "peers.json"
        roster.write_text(json.dumps(peers))
        code = main(["run", "--fixture", "ieee14", "--peers", str(roster), "--out", str(tmp_path / "tcp")])
        assert code == 1
        for p in procs:
            assert p.wait(timeout=20) == 0
    finally:
        for p in procs:
            if p.poll() is None:
                p.kill()
    assert main(["run", "--fixture", "ieee14", "--out", str(tmp_path / "local")]) == 1
    tcp = json.loads((tmp_path / "tcp" / "report.json").read_text())
    local = json.loads((tmp_path / "local" / "report.json").read_text())
    assert tcp.pop("timing")["transport"] == "tcp"
    local.pop("timing")
    assert tcp == local
