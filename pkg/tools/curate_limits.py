"""Curate fixture operating limits so screening has a known answer.

For every region with a solvable outage in its first contingency group, one
branch gets a flow limit that only that group's outages exceed. Every other
limit is set with a clear margin above all N-1 outcomes, so the exhaustive
violation set is exactly the designed one and is robust to solver
tolerance.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from dca.grid import parse_case, parse_partition, partition_system
from dca.oracle import exhaustive_n1, solve_base
from dca.powerflow import OperatingLimits, branch_flows
from dca.screening import rank_and_group

FLOW_MARGIN = 1.10     # headroom above the worst outcome for ordinary limits
FLOW_FLOOR = 0.05      # minimum absolute headroom, per unit
TARGET_GAP = 1.03      # designed limit sits this far above the worst other outcome
MIN_RATIO = 1.06       # required separation for a designed violation
V_MARGIN = 0.01


def _flows(case, voltage):
    sf, st = branch_flows(case.branches, voltage)
    return {br.id: max(abs(a.real), abs(b.real)) for br, a, b in zip(case.branches, sf, st)}


def _design(case, flows, worst, members, taken):
    """Branch whose flow limit only outages in ``members`` can exceed."""
    if not members:
        return None
    others = [c for c in flows if c not in members]
    best = None
    for br in case.branches:
        if br.id in taken:
            continue
        inside, outside = worst(br.id, members), worst(br.id, others)
        if outside > 0 and inside / outside >= MIN_RATIO:
            if best is None or inside / outside > best[0]:
                best = (inside / outside, br.id, outside)
    return None if best is None else (best[1], best[2])


def curate(case_path: Path, partition_path: Path):
    doc = json.loads(case_path.read_text())
    for br in doc["branches"]:
        br["p_max_mw"] = None
    case = parse_case(json.dumps(doc))
    system = partition_system(case, parse_partition(partition_path.read_text()))
    base = solve_base(system)
    outcomes = exhaustive_n1(system, OperatingLimits({}, {}), base)

    states = {0: base.voltage_map()}
    states.update({o.branch_id: o.solution.voltage_map() for o in outcomes if o.solution})
    flows = {c: _flows(case, v) for c, v in states.items()}

    def worst(branch, contingencies):
        vals = [flows[c][branch] for c in contingencies if c in flows and c != branch]
        return max(vals) if vals else 0.0

    limits_pu = {br.id: max(FLOW_MARGIN * worst(br.id, flows), worst(br.id, flows) + FLOW_FLOOR)
                 for br in case.branches}
    targets = {}
    for region in system.regions:
        _, groups = rank_and_group(region)
        # a sweep always reaches its second group, so either may carry the design
        for group in groups[:2]:
            chosen = _design(case, flows, worst, [b for b in group.branch_ids if b in flows],
                             set(targets.values()))
            if chosen:
                targets[region.region_index] = chosen[0]
                limits_pu[chosen[0]] = TARGET_GAP * chosen[1]
                break

    vm = np.array([[abs(v[b]) for b in case.bus_ids] for v in states.values()])
    lo, hi = vm.min(axis=0), vm.max(axis=0)
    for k, bus in enumerate(doc["buses"]):
        bus["v_min"] = min(0.9, math.floor((lo[k] - V_MARGIN) * 100) / 100)
        bus["v_max"] = max(1.1, math.ceil((hi[k] + V_MARGIN) * 100) / 100)
    for br in doc["branches"]:
        br["p_max_mw"] = round(limits_pu[br["id"]] * case.base_mva, 4)
    case_path.write_text(json.dumps(doc, indent=1) + "\n")
    print(f"  curated {case_path.name}: designed flow limits on {targets}")
    return targets
