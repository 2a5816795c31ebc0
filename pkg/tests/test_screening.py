import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import NAMES, load
from dca.grid import Branch, Bus, RegionGrid, build_admittance_matrix
from dca.screening import (
    CcsState, SingularMatrixError, UnknownNodeError, build_impedance_matrix,
    electrical_distance, pair_distance, rank_and_group, should_stop,
)


def mkbus(i, kind="PQ"):
    return Bus(i, f"B{i}", kind, 100.0, 1.0, 0.0, 0.0, 0.0, 0.9, 1.1)


def chain():
    buses = (mkbus(1, "Slack"), mkbus(2), mkbus(3))
    branches = (Branch(1, 1, 2, 0.0, 0.1), Branch(2, 2, 3, 0.0, 0.1))
    return RegionGrid(1, buses, branches, (3,), 1, True)


def reduced_y(region):
    y = build_admittance_matrix(region).toarray()
    keep = [i for i, b in enumerate(region.bus_ids) if b != region.slack_bus]
    return y[np.ix_(keep, keep)]


def test_chain_impedance_matrix():
    zm = build_impedance_matrix(chain())
    assert zm.node_ids == (2, 3)
    np.testing.assert_allclose(zm.z, [[0.1j, 0.1j], [0.1j, 0.2j]], atol=1e-12)


@pytest.mark.parametrize("name", NAMES)
def test_z_times_y_is_identity(name, systems):
    _, system = systems[name]
    for region in system.regions:
        zm = build_impedance_matrix(region)
        y = reduced_y(region)
        assert np.max(np.abs(zm.z @ y - np.eye(len(y)))) <= 1e-9


def test_island_off_slack_is_singular():
    buses = (mkbus(1, "Slack"), mkbus(2), mkbus(3))
    region = RegionGrid(1, buses, (Branch(1, 1, 2, 0.0, 0.1),), (2,), 1, True)
    with pytest.raises(SingularMatrixError):
        build_impedance_matrix(region)


def test_chain_distances():
    zm = build_impedance_matrix(chain())
    assert pair_distance(zm, 2, 2) == 0.0
    assert pair_distance(zm, 2, 3) == pytest.approx(0.1)
    assert pair_distance(zm, 1, 3) == pytest.approx(0.2)
    assert pair_distance(zm, 2, 3, thevenin=False) == pytest.approx(0.1)
    assert electrical_distance(zm, 2, [3]) == pytest.approx(0.1)
    assert electrical_distance(zm, 2, [3, 1]) == pytest.approx(0.1)


def test_distance_errors():
    zm = build_impedance_matrix(chain())
    with pytest.raises(UnknownNodeError):
        electrical_distance(zm, 99, [3])
    with pytest.raises(ValueError):
        electrical_distance(zm, 2, [])


def test_distance_symmetric_and_nonnegative(systems):
    _, system = systems["ieee14"]
    for region in system.regions:
        zm = build_impedance_matrix(region)
        ids = region.bus_ids
        for i in ids:
            for j in ids:
                d = pair_distance(zm, i, j)
                assert d >= 0
                assert d == pytest.approx(pair_distance(zm, j, i), abs=1e-12)


def test_chain_ranking_and_groups():
    ranking, groups = rank_and_group(chain())
    assert [n for n, _ in ranking.entries] == [3, 2, 1]
    assert ranking.entries[1][1] == pytest.approx(0.1)
    assert [(g.anchor, g.branch_ids) for g in groups] == [(3, (2,)), (2, (1,))]
    assert groups[0].to_nodes == ("2",)


def test_parallel_circuit_label():
    buses = (mkbus(1, "Slack"), mkbus(2), mkbus(3))
    branches = (Branch(1, 1, 2, 0.0, 0.1), Branch(2, 2, 3, 0.0, 0.2),
                Branch(3, 2, 3, 0.0, 0.2, circuit_id=2))
    _, groups = rank_and_group(RegionGrid(1, buses, branches, (3,), 1, True))
    assert groups[0].anchor == 3
    assert groups[0].branch_ids == (2, 3)
    assert groups[0].to_nodes == ("2*", "2*")


@pytest.mark.parametrize("name", NAMES)
def test_groups_partition_lines(name, systems):
    _, system = systems[name]
    for region in system.regions:
        ranking, groups = rank_and_group(region)
        claimed = [b for g in groups for b in g.branch_ids]
        assert sorted(claimed) == sorted(br.id for br in region.branches)
        assert sorted(n for n, _ in ranking.entries) == sorted(region.bus_ids)
        dists = [d for _, d in ranking.entries]
        assert dists == sorted(dists) and min(dists) >= 0
        for b in region.boundary_bus_ids:
            assert dict(ranking.entries)[b] == 0.0


@pytest.mark.parametrize("name", NAMES)
def test_groups_follow_ranking_prefix(name, systems):
    _, system = systems[name]
    for region in system.regions:
        ranking, groups = rank_and_group(region)
        order = {n: k for k, (n, _) in enumerate(ranking.entries)}
        ranks = [order[g.anchor] for g in groups]
        assert ranks == sorted(ranks)
        for g in groups:
            # a branch sits under its earlier-ranked endpoint
            for bid in g.branch_ids:
                br = next(b for b in region.branches if b.id == bid)
                assert order[g.anchor] == min(order[br.from_bus], order[br.to_bus])


def run_trace(seq):
    state = CcsState()
    stops = [should_stop(state, 1, s) for s in seq]
    return state.trace[1], stops


def test_stop_after_two_empty_groups():
    trace, stops = run_trace([{"A"}, set(), set()])
    assert trace == [0, 1, 2] and stops == [False, False, True]


def test_repeat_is_not_new():
    trace, stops = run_trace([{"A"}, set(), {"A"}])
    assert trace == [0, 1, 2] and stops[-1]


def test_new_violation_resets_counter():
    trace, stops = run_trace([{"A"}, set(), {"B"}])
    assert trace == [0, 1, 0] and not any(stops)


def test_regions_stop_independently():
    state = CcsState()
    should_stop(state, 1, [])
    should_stop(state, 2, [("x", 1, 2)])
    assert should_stop(state, 1, [])
    assert not state.is_stopped(2)
    # a key seen in another region is still not new
    assert not should_stop(state, 2, [("x", 1, 2)])
    assert state.trace[2] == [0, 1]


def test_violation_objects_use_key():
    class V:
        def __init__(self, key):
            self.key = key
    state = CcsState(k_stop=1)
    assert not should_stop(state, 1, [V(("k", 1, 1))])
    assert should_stop(state, 1, [V(("k", 1, 1))])


@given(st.lists(st.sets(st.sampled_from("ABCDE"), max_size=3), min_size=1, max_size=12))
def test_counter_resets_exactly_on_new(groups):
    state = CcsState()
    seen = set()
    for k, g in enumerate(groups):
        should_stop(state, 1, g)
        if g - seen:
            assert state.trace[1][-1] == 0
        else:
            prev = state.trace[1][-2] if k else 0
            assert state.trace[1][-1] == prev + 1
        seen |= g
    assert state.is_stopped(1) == (max(state.trace[1]) >= 2)
