import json

import numpy as np
import pytest

from conftest import SMALL, branch, bus, case_doc, load, reference
from dca.boundary import (
    BoundaryLayout, LayoutMismatchError, LocalResidual, RegionSolveError,
    boundary_vector_from_solution, evaluate_boundary_residual, solve_distributed,
)
from dca.grid import apply_outage, parse_case, parse_partition, partition_system
from dca.jfng import JfngParams
from dca.powerflow import TOL_REGION, full_mismatch, solve_centralized_power_flow


def symmetric_pair(b_link=0.0):
    buses = [bus(1, "Slack"), bus(2), bus(3, "PV"), bus(4)]
    branches = [branch(1, 1, 2, r=0.01), branch(2, 3, 4, r=0.01), branch(3, 2, 4, b=b_link)]
    case = parse_case(json.dumps(case_doc(buses, branches)))
    spec = parse_partition(json.dumps({"regions": {"1": 1, "2": 1, "3": 2, "4": 2}, "links": [3],
                                       "dominant_slack": 1, "region_slacks": {"1": 1, "2": 3}}))
    return partition_system(case, spec)


def oracle(name):
    case, system = load(name)
    return case, system, solve_centralized_power_flow(case, system.spec.dominant_slack_bus)


def test_layout_shape_and_descriptor():
    _, system = load("ieee14")
    layout = BoundaryLayout.from_system(system)
    nb = sum(len(v) for v in layout.boundary.values())
    assert layout.size == 2 * nb + len(layout.angle_regions)
    desc = layout.descriptor()
    assert len(desc) == layout.size
    assert desc[-1][2] == "theta"
    assert layout.hash() == BoundaryLayout.from_system(system).hash()
    assert layout.flat_vector()[-1] == layout.reference_angle


def test_split_slices():
    system = symmetric_pair()
    layout = BoundaryLayout.from_system(system)
    parts = layout.split([0.1, 0.2, 0.3, 0.4, 0.5])
    assert parts[1][0].tolist() == [0.1] and parts[1][1].tolist() == [0.2]
    assert parts[2][0].tolist() == [0.3] and parts[2][2] == 0.5
    assert parts[1][2] == layout.reference_angle


@pytest.mark.parametrize("name", SMALL)
def test_oracle_projection_has_small_residual(name):
    _, system, sol = oracle(name)
    layout = BoundaryLayout.from_system(system)
    x = boundary_vector_from_solution(system, layout, sol)
    assert np.max(np.abs(evaluate_boundary_residual(x, system))) <= 5 * TOL_REGION


def test_symmetric_regions_zero_exchange():
    system = symmetric_pair()
    f = evaluate_boundary_residual(np.zeros(5), system)
    np.testing.assert_allclose(f, 0.0, atol=1e-12)


def test_symmetric_regions_link_charging():
    system = symmetric_pair(b_link=0.04)
    f = evaluate_boundary_residual(np.zeros(5), system)
    # flat boundary voltages: each end injects only half the charging
    np.testing.assert_allclose(f[[1, 3]], -0.02, atol=1e-10)
    np.testing.assert_allclose(f[[0, 2, 4]], 0.0, atol=1e-10)


def test_layout_mismatch():
    system = symmetric_pair()
    with pytest.raises(LayoutMismatchError):
        evaluate_boundary_residual(np.zeros(4), system)


def test_region_failure_surfaces_with_region_and_point():
    system = symmetric_pair()
    x = np.array([-50.0, 0.0, 0.0, 0.0, 0.0])
    with pytest.raises(RegionSolveError) as info:
        evaluate_boundary_residual(x, system)
    assert info.value.region == 1
    np.testing.assert_array_equal(info.value.x, x)


@pytest.mark.parametrize("name", ["ieee14", "ieee30", "two_area"])
def test_flat_start_matches_centralized(name):
    case, system, sol = oracle(name)
    result, F = solve_distributed(system)
    assert result.converged
    got = F.stitched_voltages()
    ref = sol.voltage_map()
    vm = max(abs(abs(got[b]) - abs(ref[b])) for b in ref)
    va = max(abs(np.angle(got[b]) - np.angle(ref[b])) for b in ref)
    assert max(vm, va) <= 4e-4
    # stitched state satisfies the whole-system equations
    mis = np.max(np.abs(full_mismatch(case, got, system.spec.dominant_slack_bus)))
    assert mis <= JfngParams().tol_boundary + 5 * TOL_REGION


def test_matches_reference_file():
    _, system = load("ieee14")
    _, F = solve_distributed(system)
    got = F.stitched_voltages()
    ref = reference("ieee14")
    assert max(abs(got[b] - ref[b]) for b in ref) <= 4e-4


def test_finite_difference_fidelity():
    _, system, sol = oracle("ieee14")
    layout = BoundaryLayout.from_system(system)
    x = boundary_vector_from_solution(system, layout, sol)
    F = LocalResidual(system)
    f0 = F(x)
    eps0 = JfngParams().fd_epsilon
    rng = np.random.default_rng(0)
    for _ in range(5):
        v = rng.standard_normal(x.size)
        v /= np.linalg.norm(v)
        eps = eps0 * max(1.0, np.linalg.norm(x))
        forward = (F(x + eps * v) - f0) / eps
        h = 1e-5
        central = (F(x + h * v) - F(x - h * v)) / (2 * h)
        assert np.linalg.norm(forward - central) <= 1e-4 * np.linalg.norm(central)


def test_double_circuit_warm_not_worse_than_cold():
    _, system = load("two_area")
    first, _ = solve_distributed(apply_outage(system, 19))
    assert first.converged
    second = apply_outage(system, 20)
    cold, _ = solve_distributed(second)
    warm, _ = solve_distributed(second, x0=first.solution, M0=first.preconditioner)
    assert cold.converged and warm.converged
    assert warm.total_iterations <= cold.total_iterations
