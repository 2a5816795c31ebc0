import json
import sys
from pathlib import Path

import numpy as np
import pytest

from dca.grid import parse_case, parse_partition, partition_system

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "dca" / "fixtures"
NAMES = ["ieee14", "ieee30", "two_area", "ieee118"]
SMALL = ["ieee14", "ieee30", "two_area"]


def fixture_paths(name):
    return str(FIXTURES / f"{name}.case.json"), str(FIXTURES / f"{name}.partition.json")


def load(name):
    case_path, part_path = fixture_paths(name)
    case = parse_case(Path(case_path).read_bytes())
    return case, partition_system(case, parse_partition(Path(part_path).read_bytes()))


def reference(name):
    doc = json.loads((FIXTURES / f"{name}.reference.json").read_text())
    return dict(zip(doc["bus_ids"], np.array(doc["v_mag"]) * np.exp(1j * np.deg2rad(doc["v_ang_deg"]))))


def bus(i, kind="PQ", p=0.0, q=0.0, v=1.0, ang=0.0, **kw):
    d = {"id": i, "name": f"B{i}", "kind": kind, "base_kv": 100.0, "v_mag": v, "v_ang_deg": ang,
         "p_mw": p, "q_mvar": q, "v_min": 0.9, "v_max": 1.1, "g_shunt_mw": 0.0, "b_shunt_mvar": 0.0}
    d.update(kw)
    return d


def branch(i, f, t, r=0.0, x=0.1, b=0.0, tap=1.0, p_max=None, circuit=1):
    return {"id": i, "from": f, "to": t, "r_pu": r, "x_pu": x, "b_pu": b, "tap": tap,
            "p_max_mw": p_max, "circuit": circuit}


def case_doc(buses, branches, name="t", base=100.0):
    return {"name": name, "base_mva": base, "buses": buses, "branches": branches}


def dense_ybus(grid):
    """Stamp-by-stamp dense admittance matrix, independent of the sparse builder."""
    ids = [b.id for b in grid.buses]
    n = len(ids)
    Y = np.zeros((n, n), dtype=complex)
    for k, b in enumerate(grid.buses):
        Y[k, k] += b.shunt_g + 1j * b.shunt_b
    for br in grid.branches:
        i, j = ids.index(br.from_bus), ids.index(br.to_bus)
        y = 1.0 / complex(br.r, br.x)
        a = br.tap_ratio
        Y[i, i] += (y + 0.5j * br.b_charging) / a ** 2
        Y[j, j] += y + 0.5j * br.b_charging
        Y[i, j] -= y / a
        Y[j, i] -= y / a
    return Y


@pytest.fixture(scope="session")
def systems():
    return {n: load(n) for n in NAMES}


def pytest_terminal_summary(terminalreporter):
    lines = getattr(sys.modules.get("test_acceptance"), "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
