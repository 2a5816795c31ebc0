"""Build the shipped case-json fixtures from PYPOWER's public test cases.

Fixture tooling only; PYPOWER is not a runtime dependency of the package.

    python tools/make_fixtures.py            # raw cases, partitions, reference solutions
    python tools/make_fixtures.py --curate   # also curate operating limits

Generator buses that would sit on a region boundary are converted to PQ
buses at their solved reactive output, and a displaced reference bus is
held as PV at its solved active output, so the base-case operating point is
unchanged by the conversion. Stored bus states are rounded so that they
act as an approximate prior operating point rather than the exact solution.
"""
from __future__ import annotations

import argparse
import json
import math
from pathlib import Path

import numpy as np
from pypower.api import case9, case14, case30, case118, ppoption, runpf

OUT = Path(__file__).resolve().parents[1] / "src" / "dca" / "fixtures"

FIXTURES = {
    "ieee14": dict(
        source=case14,
        region2={7, 8, 9, 10, 14},
        slacks={1: 1, 2: 8},
        dominant=1,
    ),
    "ieee30": dict(
        source=case30,
        region2={10, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23, 24},
        slacks={1: 1, 2: 22},
        dominant=1,
    ),
    "ieee118": dict(
        source=case118,
        region2=set(range(1, 23)) - {22} | {30} | set(range(33, 68)) | {117},
        slacks={1: 89, 2: 10},
        dominant=89,
    ),
}


def two_area_case():
    """Two copies of the 9-bus case joined by two double-circuit corridors."""
    a = case9()
    b = case9()
    bus = np.vstack([a["bus"], b["bus"]])
    bus[9:, 0] += 100
    bus[9, 1] = 2  # second copy's reference becomes PV
    gen_b = b["gen"].copy()
    gen_b[:, 0] += 100
    gen_b[0, 1] = 120.0
    gen = np.vstack([a["gen"], gen_b])
    br_b = b["branch"].copy()
    br_b[:, :2] += 100
    link = np.zeros((4, br_b.shape[1]))
    link[:, 2:5] = [0.01, 0.085, 0.176]
    link[:, 10] = 1
    link[:, 5] = 250
    link[0, :2] = link[1, :2] = (5, 107)
    link[2, :2] = link[3, :2] = (9, 105)
    branch = np.vstack([a["branch"], br_b, link])
    return {"version": "2", "baseMVA": 100.0, "bus": bus, "gen": gen, "branch": branch}


FIXTURES["two_area"] = dict(
    source=two_area_case,
    region2=set(range(101, 110)),
    slacks={1: 1, 2: 101},
    dominant=1,
)


def solve(ppc):
    res, ok = runpf(ppc, ppoption(VERBOSE=0, OUT_ALL=0))
    assert ok, "reference power flow failed"
    return res


def build(name: str, spec: dict):
    ppc = spec["source"]()
    res = solve(ppc)
    base = float(res["baseMVA"])
    bus, gen, branch = res["bus"], res["gen"], res["branch"]
    ids = [int(i) for i in bus[:, 0]]
    region_of = {i: (2 if i in spec["region2"] else 1) for i in ids}

    branches = []
    seen: dict[tuple[int, int], int] = {}
    links = []
    for k, row in enumerate(branch, start=1):
        f, t = int(row[0]), int(row[1])
        pair = (min(f, t), max(f, t))
        seen[pair] = seen.get(pair, 0) + 1
        rate = float(row[5])
        branches.append({
            "id": k, "from": f, "to": t, "r_pu": float(row[2]), "x_pu": float(row[3]),
            "b_pu": float(row[4]), "tap": float(row[8]) if row[8] else 1.0,
            "p_max_mw": rate if 0 < rate < 9000 else None, "circuit": seen[pair],
        })
        if region_of[f] != region_of[t]:
            links.append(k)
    boundary = {b["from"] for b in branches if b["id"] in links} | \
               {b["to"] for b in branches if b["id"] in links}

    pg = {i: 0.0 for i in ids}
    qg = {i: 0.0 for i in ids}
    vg = {}
    for row in gen:
        i = int(row[0])
        pg[i] += float(row[1])
        qg[i] += float(row[2])
        vg[i] = float(row[5])
    slack_ids = set(spec["slacks"].values())
    buses = []
    for row in bus:
        i = int(row[0])
        typ = {1: "PQ", 2: "PV", 3: "Slack"}[int(row[1])]
        if typ != "PQ" and i in boundary:
            typ = "PQ"
        elif typ == "Slack" and i != spec["dominant"]:
            typ = "PV"
        if i == spec["dominant"]:
            typ = "Slack"
        elif i in slack_ids and typ == "PQ":
            raise SystemExit(f"{name}: region slack {i} is not a generator bus")
        # stored state is an approximate estimate, not the exact solution;
        # voltage setpoints and the reference angle stay exact
        v_mag = vg[i] if typ != "PQ" else round(float(row[7]), 3)
        v_ang = float(row[8]) if i == spec["dominant"] else round(float(row[8]), 1)
        buses.append({
            "id": i, "name": f"Bus {i}", "kind": typ, "base_kv": float(row[9]),
            "v_mag": v_mag, "v_ang_deg": v_ang,
            "p_mw": pg[i] - float(row[2]), "q_mvar": qg[i] - float(row[3]),
            "v_min": 0.9, "v_max": 1.1,
            "g_shunt_mw": float(row[4]), "b_shunt_mvar": float(row[5]),
        })
    case = {"name": name, "base_mva": base, "buses": buses, "branches": branches}
    partition = {
        "regions": {str(i): region_of[i] for i in ids},
        "links": links,
        "dominant_slack": spec["dominant"],
        "region_slacks": {str(k): v for k, v in spec["slacks"].items()},
    }
    reference = {
        "source": "PYPOWER runpf",
        "bus_ids": ids,
        "v_mag": [float(v) for v in bus[:, 7]],
        "v_ang_deg": [float(a) for a in bus[:, 8]],
    }
    return case, partition, reference


def write(path: Path, doc):
    path.write_text(json.dumps(doc, indent=1) + "\n")


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--curate", action="store_true")
    ap.add_argument("names", nargs="*", default=list(FIXTURES))
    args = ap.parse_args(argv)
    OUT.mkdir(parents=True, exist_ok=True)
    for name in args.names:
        case, partition, reference = build(name, FIXTURES[name])
        write(OUT / f"{name}.case.json", case)
        write(OUT / f"{name}.partition.json", partition)
        write(OUT / f"{name}.reference.json", reference)
        print(f"{name}: {len(case['buses'])} buses, {len(case['branches'])} branches, "
              f"{len(partition['links'])} links")
        if args.curate:
            from curate_limits import curate
            curate(OUT / f"{name}.case.json", OUT / f"{name}.partition.json")


if __name__ == "__main__":
    main()
