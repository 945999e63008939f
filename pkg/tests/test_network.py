import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from digit.errors import NoRoute, ParseError, ValidationError
from digit.network import (
    Phase,
    Route,
    SignalPlan,
    free_flow_weights,
    load_network,
    shortest_route,
    validate_signal_plan,
)


def test_load_minimal_two_node_network(tmp_path):
    doc = {
        "nodes": ["A", "B"],
        "segments": [{"id": "s1", "from": "A", "to": "B", "length_m": 100.0,
                      "lanes": 1, "vf_mps": 10.0, "sat_flow_vps": 0.5,
                      "jam_density_vpm": 0.15}],
        "signals": [],
        "sensors": [],
    }
    path = tmp_path / "net.json"
    path.write_text(json.dumps(doc))
    net = load_network(path)
    assert len(net.segments) == 1
    assert len(net.signals) == 0


def test_load_grid_fixture_counts(grid_file):
    net = load_network(grid_file)
    # counted by hand from the fixture definition
    assert len(net.segments) == 12
    assert len(net.signals) == 4
    assert len(net.sensors) == 6
    assert net.nodes == {"S1", "S2", "A", "B", "C", "D", "T1", "T2"}


def test_load_rejects_bad_phase_sum(tmp_path):
    doc = {
        "nodes": ["A", "B", "C"],
        "segments": [
            {"id": "s1", "from": "A", "to": "B", "length_m": 100.0, "lanes": 1,
             "vf_mps": 10.0, "sat_flow_vps": 0.5, "jam_density_vpm": 0.15},
            {"id": "s2", "from": "C", "to": "B", "length_m": 100.0, "lanes": 1,
             "vf_mps": 10.0, "sat_flow_vps": 0.5, "jam_density_vpm": 0.15},
        ],
        "signals": [{"node": "B", "cycle_s": 60.0, "min_green_s": 10.0,
                     "max_green_s": 120.0,
                     "phases": [{"serves": ["s1"], "green_s": 30.0},
                                {"serves": ["s2"], "green_s": 29.0}]}],
        "sensors": [],
    }
    path = tmp_path / "net.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ValidationError) as err:
        load_network(path)
    assert "B" in str(err.value)
    assert "phase sum != cycle" in str(err.value)


def test_load_rejects_malformed_json(tmp_path):
    path = tmp_path / "net.json"
    path.write_text("{not json")
    with pytest.raises(ParseError):
        load_network(path)


def test_load_rejects_dangling_node(tmp_path):
    doc = {
        "nodes": ["A"],
        "segments": [{"id": "s1", "from": "A", "to": "B", "length_m": 100.0,
                      "lanes": 1, "vf_mps": 10.0, "sat_flow_vps": 0.5,
                      "jam_density_vpm": 0.15}],
    }
    path = tmp_path / "net.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ValidationError) as err:
        load_network(path)
    assert "s1" in str(err.value)


# -- shortest_route ------------------------------------------------------------


def test_single_segment_route(line_doc=None):
    from tests.conftest import single_segment_net
    net = single_segment_net()
    route = shortest_route(net, {"s1": 10.0}, "A", "B")
    assert route.segments == ("s1",)


def test_parallel_segments_choose_cheaper():
    from digit.network import RoadNetwork, RoadSegment
    segs = [
        RoadSegment(id="sa", from_node="A", to_node="B", length=100, lanes=1,
                    free_flow_speed=10, saturation_flow=0.5, jam_density=0.15),
        RoadSegment(id="sb", from_node="A", to_node="B", length=100, lanes=1,
                    free_flow_speed=10, saturation_flow=0.5, jam_density=0.15),
    ]
    net = RoadNetwork(nodes={"A", "B"}, segments=segs, signals={}, sensors={})
    assert shortest_route(net, {"sa": 5.0, "sb": 7.0}, "A", "B").segments == ("sa",)
    assert shortest_route(net, {"sa": 7.0, "sb": 5.0}, "A", "B").segments == ("sb",)


def _all_simple_paths(net, origin, dest):
    """Brute-force enumeration of simple paths (the routing oracle)."""
    paths = []

    def walk(node, visited, path):
        if node == dest:
            paths.append(tuple(path))
            return
        for seg in net.outgoing(node):
            if seg.to_node in visited:
                continue
            walk(seg.to_node, visited | {seg.to_node}, path + [seg.id])

    walk(origin, {origin}, [])
    return paths


def test_grid_corner_to_corner_against_enumeration(grid_net):
    w = 3.0
    weights = {seg.id: w for seg in grid_net.segments}
    route = shortest_route(grid_net, weights, "S1", "T2")
    paths = _all_simple_paths(grid_net, "S1", "T2")
    best = min(len(p) for p in paths) * w
    # 2 x per-segment-weight x grid dimension (2)
    assert best == 2 * w * 2
    assert len(route.segments) * w == best
    ties = sorted(p for p in paths if len(p) * w == best)
    assert route.segments == ties[0]  # lexicographic tie-break


def test_route_adjacency_invariant_on_all_pairs(grid_net):
    weights = free_flow_weights(grid_net)
    for origin, dest in itertools.permutations(sorted(grid_net.nodes), 2):
        try:
            route = shortest_route(grid_net, weights, origin, dest)
        except NoRoute:
            continue
        assert grid_net.route_is_valid(route)
        assert grid_net.by_id[route.segments[0]].from_node == origin
        assert grid_net.by_id[route.segments[-1]].to_node == dest


def _bfs_hops(net, origin, dest):
    from collections import deque
    seen = {origin: 0}
    q = deque([origin])
    while q:
        node = q.popleft()
        if node == dest:
            return seen[node]
        for seg in net.outgoing(node):
            if seg.to_node not in seen:
                seen[seg.to_node] = seen[node] + 1
                q.append(seg.to_node)
    return None


def test_uniform_weights_match_bfs_distance(grid_net):
    weights = {seg.id: 1.0 for seg in grid_net.segments}
    for origin, dest in itertools.permutations(sorted(grid_net.nodes), 2):
        hops = _bfs_hops(grid_net, origin, dest)
        if hops is None:
            with pytest.raises(NoRoute):
                shortest_route(grid_net, weights, origin, dest)
        else:
            assert len(shortest_route(grid_net, weights, origin, dest)) == hops


def test_unreachable_raises(grid_net):
    with pytest.raises(NoRoute):
        shortest_route(grid_net, {}, "T1", "S1")  # sinks have no outgoing segments


# -- validate_signal_plan --------------------------------------------------------


def _plan(greens, cycle, min_green=10.0, max_green=60.0):
    phases = tuple(Phase(serves=frozenset({f"s{i}"}), green=g)
                   for i, g in enumerate(greens))
    return SignalPlan(intersection="X", cycle_length=cycle, phases=phases,
                      min_green=min_green, max_green=max_green)


def test_valid_plan_is_ok():
    assert validate_signal_plan(_plan([30.0, 30.0], 60.0)) == []


def test_below_min_green_names_phase():
    violations = validate_signal_plan(_plan([5.0, 55.0], 60.0))
    assert any("phase 0 below min_green" in v for v in violations)


def test_wrong_cycle_sum():
    violations = validate_signal_plan(_plan([50.0, 20.0], 60.0))
    assert any("phase sum != cycle" in v for v in violations)


def test_coverage_check_names_segment():
    plan = _plan([30.0, 30.0], 60.0)
    violations = validate_signal_plan(plan, incoming={"s0", "s1", "s9"})
    assert any("s9" in v for v in violations)


@settings(max_examples=100, deadline=None)
@given(
    greens=st.lists(st.floats(min_value=1.0, max_value=80.0), min_size=1, max_size=4),
    min_green=st.floats(min_value=1.0, max_value=20.0),
    max_green=st.floats(min_value=20.0, max_value=80.0),
    cycle_matches=st.booleans(),
    offset=st.floats(min_value=0.5, max_value=10.0),
)
def test_validation_is_definitional(greens, min_green, max_green, cycle_matches, offset):
    """Empty violations <=> every invariant holds, both directions."""
    total = sum(greens)
    cycle = total if cycle_matches else total + offset
    plan = _plan(greens, cycle, min_green, max_green)
    violations = validate_signal_plan(plan)
    invariants_hold = (
        abs(sum(g for g in greens) - cycle) <= 1e-9
        and all(min_green <= g <= max_green for g in greens)
    )
    assert (violations == []) == invariants_hold


def test_route_must_be_nonempty():
    with pytest.raises(ValidationError):
        Route(())
