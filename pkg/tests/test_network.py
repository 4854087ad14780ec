from collections import deque

import pytest
import yaml

from conftest import SCENARIOS, highway_network, linear_network, partition_of
from hybrid_traffic.network import (
    OUTSIDE,
    NetworkError,
    PartitionError,
    build_network,
    derive_sensor_graph,
    merge_clusters,
    minimal_cut,
    shift_boundary,
    split_cluster,
)


def y_merge() -> dict:
    return {
        "nodes": [
            {"id": "e1", "kind": "network_entry"},
            {"id": "e2", "kind": "network_entry"},
            {"id": "m", "kind": "highway_insertion"},
            {"id": "x", "kind": "network_exit"},
        ],
        "roads": [
            {"id": "a", "from": "e1", "to": "m", "length": 500, "lanes": 2},
            {"id": "b", "from": "e2", "to": "m", "length": 500, "lanes": 1, "connections": {"c": [2]}},
            {"id": "c", "from": "m", "to": "x", "length": 1000, "lanes": 3},
        ],
        "sensors": [
            {"id": "A", "road": "a", "position": 0},
            {"id": "B", "road": "b", "position": 0},
            {"id": "C", "road": "c", "position": 1000},
        ],
    }


def walk_arcs(net) -> set[tuple[str, str]]:
    """Independent oracle: breadth-first walk from each sensor to the next ones."""
    arcs = set()
    for s in net.sensors.values():
        todo = deque([(s.road, s.position, True)])
        while todo:
            road, x, strict = todo.popleft()
            hits = [(p, sid) for sid, t in net.sensors.items() if t.road == road for p in [t.position]]
            ahead = sorted((p, sid) for p, sid in hits if p > x or (p == x and not strict))
            if ahead:
                arcs.add((s.id, ahead[0][1]))
                continue
            for nxt in net.out_roads(net.roads[road].to_node):
                todo.append((nxt, 0.0, False))
    return arcs


# -- build_network ---------------------------------------------------------


def test_single_road_without_sensors():
    net = build_network(
        {
            "nodes": [{"id": "a", "kind": "crossroads"}, {"id": "b", "kind": "crossroads"}],
            "roads": [{"id": "r", "from": "a", "to": "b", "length": 100, "lanes": 1}],
        }
    )
    assert list(net.roads) == ["r"]
    assert net.sensors == {}


def test_highway_layout_with_ramps_is_valid():
    raw = yaml.safe_load((SCENARIOS / "highway_11.yaml").read_text())
    net = build_network(raw["network"])
    mainline = [r for r in net.roads.values() if r.id.startswith("M")]
    assert sum(r.length for r in mainline) == pytest.approx(4780.0)
    assert net.nodes_of_kind("highway_insertion") and net.nodes_of_kind("highway_extraction")


def test_sensor_beyond_road_end_is_rejected():
    with pytest.raises(NetworkError, match="outside"):
        build_network(linear_network(4780, (0, 5000)))


def test_every_violation_is_reported():
    bad = linear_network()
    bad["roads"][0]["lanes"] = 9
    bad["sensors"].append({"id": "S9", "road": "nowhere", "position": 0})
    with pytest.raises(NetworkError) as info:
        build_network(bad)
    assert len(info.value.errors) >= 2


def test_lane_count_and_sign_bounds():
    bad = linear_network()
    bad["roads"][0]["signs"] = [{"kind": "speed_limit", "position": 4000, "value": 20}]
    with pytest.raises(NetworkError, match="sign"):
        build_network(bad)
    bad = linear_network()
    bad["roads"][0]["signs"] = [{"kind": "yield", "position": 10}]
    with pytest.raises(NetworkError, match="unsupported sign"):
        build_network(bad)


def test_unknown_node_kind():
    bad = linear_network()
    bad["nodes"][0]["kind"] = "tunnel"
    with pytest.raises(NetworkError, match="unknown kind"):
        build_network(bad)


def test_aggregation_interval_must_be_step_multiple():
    d = linear_network()
    d["sensors"][1]["interval"] = 45
    with pytest.raises(NetworkError, match="multiple"):
        build_network(d, base_step=10)


def test_definition_round_trip():
    raw = yaml.safe_load((SCENARIOS / "highway_11.yaml").read_text())
    net = build_network(raw["network"])
    again = build_network(net.to_definition())
    assert again.to_definition() == net.to_definition()


# -- derive_sensor_graph ---------------------------------------------------


def test_linear_sensor_graph():
    net = build_network(linear_network(4000, (0, 2000, 4000)))
    g = derive_sensor_graph(net)
    assert {(a.source, a.target) for a in g.arcs} == walk_arcs(net) == {("S0", "S1"), ("S1", "S2")}


def test_single_sensor_graph():
    net = build_network(
        {
            "nodes": [{"id": "a", "kind": "crossroads"}, {"id": "b", "kind": "crossroads"}],
            "roads": [{"id": "r", "from": "a", "to": "b", "length": 100, "lanes": 1}],
            "sensors": [{"id": "only", "road": "r", "position": 50}],
        }
    )
    g = derive_sensor_graph(net)
    assert g.vertices == ("only",)
    assert g.arcs == ()


def test_y_merge_sensor_graph():
    net = build_network(y_merge())
    g = derive_sensor_graph(net)
    arcs = {(a.source, a.target) for a in g.arcs}
    assert arcs == walk_arcs(net) == {("A", "C"), ("B", "C")}


def test_arcs_contain_no_interior_sensor():
    raw = yaml.safe_load((SCENARIOS / "highway_11.yaml").read_text())
    net = build_network(raw["network"])
    g = derive_sensor_graph(net)
    for arc in g.arcs:
        for iv in arc.path:
            for p, sid in net.sensors_on(iv.road):
                assert not iv.start < p < iv.end, (arc, sid)


def test_entry_road_needs_sensor():
    d = linear_network(3000, (500, 3000))
    with pytest.raises(NetworkError, match="entry road"):
        derive_sensor_graph(build_network(d))


# -- minimal_cut -------------------------------------------------------------


def test_three_sensor_road_cut():
    net = build_network(linear_network(4000, (0, 2000, 4000)))
    g = derive_sensor_graph(net)
    part = minimal_cut(g)
    assert len(part.inner()) == len(g.arcs) == 2
    assert OUTSIDE in part.clusters


def test_entry_exit_only_cut():
    part = partition_of(linear_network(3000, (0, 3000)))
    assert len(part.inner()) == 1


def test_eleven_region_highway_cut():
    part = partition_of(highway_network())
    assert len(part.inner()) == 11
    assert all(c.minimal for c in part.inner())


def test_highway_scenario_cut_has_eleven_mainline_clusters():
    raw = yaml.safe_load((SCENARIOS / "highway_11.yaml").read_text())
    part = minimal_cut(derive_sensor_graph(build_network(raw["network"])))
    assert len(part.inner()) == 11
    # ramps belong to the unit holding their junction
    ramp_units = {part.topology.unit_at(r, 0.0) for r in ("ramp_a", "ramp_b", "ramp_c", "ramp_d")}
    assert ramp_units == {"R2", "R5", "R8", "R10"}


# -- merge / split / shift -----------------------------------------------------


def test_merge_adjacent():
    part = partition_of(linear_network())
    merged = merge_clusters(part, "R1", "R2")
    c = merged.clusters["R1"]
    assert c.units == part.clusters["R1"].units | part.clusters["R2"].units
    assert c.interior == frozenset({"S1"})
    assert len(merged.inner()) == 2


def test_merge_errors():
    part = partition_of(linear_network())
    with pytest.raises(PartitionError, match="itself"):
        merge_clusters(part, "R1", "R1")
    with pytest.raises(PartitionError, match="contiguous"):
        merge_clusters(part, "R1", "R3")


def test_split_inverts_merge():
    part = partition_of(linear_network())
    again = split_cluster(merge_clusters(part, "R1", "R2"), "R1", "S1")
    assert again == part


def test_split_minimal_cluster_fails():
    part = partition_of(linear_network())
    with pytest.raises(PartitionError, match="not interior"):
        split_cluster(part, "R2", "S1")


def test_split_eleven_unit_aggregate_at_fifth_sensor():
    part = partition_of(highway_network())
    agg = part
    for uid in [f"R{i}" for i in range(2, 12)]:
        agg = merge_clusters(agg, "R1", uid)
    assert len(agg.inner()) == 1
    halves = split_cluster(agg, "R1", "S5")
    sizes = sorted(len(c.units) for c in halves.inner())
    assert sizes == [5, 6]


def test_shift_matches_split_then_merge():
    part = partition_of(linear_network(4000, (0, 1000, 2000, 3000, 4000)))
    part = merge_clusters(merge_clusters(part, "R1", "R2"), "R3", "R4")
    shifted = shift_boundary(part, "R1", "R3", "downstream")
    oracle = merge_clusters(split_cluster(part, "R3", "S3", new_id="X"), "R1", "R3")
    assert shifted.layout() == oracle.layout()
    assert sorted(len(c.units) for c in shifted.inner()) == [1, 3]


def test_shift_that_empties_a_cluster_fails():
    part = partition_of(linear_network())
    with pytest.raises(PartitionError, match="empty"):
        shift_boundary(part, "R1", "R2", "downstream")


def test_repeated_shifts_track_a_moving_window():
    part = partition_of(linear_network(5000, tuple(float(x) for x in range(0, 5001, 1000))))
    part = merge_clusters(merge_clusters(part, "R3", "R4"), "R3", "R5")
    part = part.with_representation("R2", "micro")
    window = []
    for _ in range(2):
        part = shift_boundary(part, "R2", "R3", "downstream")
        part = shift_boundary(part, "R1", "R2", "downstream")
        window.append(part.topology.sort_units(part.clusters["R2"].units))
    assert window == [["R3"], ["R4"]]
    assert part.clusters["R2"].representation == "micro"


def test_cluster_boundaries_are_sensors():
    part = partition_of(highway_network())
    part = merge_clusters(part, "R3", "R4")
    owner = part.unit_owner()
    for sid in part.boundary_sensors():
        assert owner.get(part.topology.up[sid], OUTSIDE) != owner.get(part.topology.down[sid], OUTSIDE)
