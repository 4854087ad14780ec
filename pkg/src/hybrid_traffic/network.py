"""Semantic road network, the sensor graph and the dynamic cluster partition.

Positions along a road are measured in metres from its upstream end.  A
sensor at position ``p`` is crossed by a vehicle whose front bumper moves
from ``x < p`` to ``x' >= p``; road pieces are therefore half-open
``[start, end)`` intervals.
"""

from __future__ import annotations

import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

NODE_KINDS = frozenset(
    {
        "crossroads",
        "roundabout",
        "highway_insertion",
        "highway_extraction",
        "network_entry",
        "network_exit",
    }
)
SIGN_KINDS = frozenset({"speed_limit", "stop"})
REPRESENTATIONS = frozenset({"micro", "macro", "replay", "outside"})
OUTSIDE = "outside"
MAX_LANES = 5


class NetworkError(ValueError):
    """Invalid network definition.  ``errors`` lists every problem found."""

    def __init__(self, errors: Sequence[str] | str):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    id: str
    kind: str


@dataclass(frozen=True)
class Sign:
    kind: str
    position: float
    value: float | None = None  # m/s for speed limits
    lanes: tuple[int, ...] | None = None  # None: all lanes

    def applies_to(self, lane: int) -> bool:
        return self.lanes is None or lane in self.lanes


@dataclass(frozen=True)
class Lane:
    index: int
    # (next road id, lane index on that road); empty for a lane that ends
    successors: tuple[tuple[str, int], ...] = ()

    def successor_on(self, road_id: str) -> int | None:
        for rid, lane in self.successors:
            if rid == road_id:
                return lane
        return None


@dataclass(frozen=True)
class Road:
    id: str
    from_node: str
    to_node: str
    length: float
    lanes: tuple[Lane, ...]
    signs: tuple[Sign, ...] = ()

    @property
    def n_lanes(self) -> int:
        return len(self.lanes)


@dataclass(frozen=True)
class Sensor:
    id: str
    road: str
    position: float
    aggregation_interval: float = 60.0


@dataclass(frozen=True)
class Interval:
    road: str
    start: float
    end: float

    @property
    def length(self) -> float:
        return self.end - self.start

    def contains(self, road: str, x: float) -> bool:
        return road == self.road and self.start <= x < self.end


class RoadNetwork:
    """Immutable road graph with lookup tables used by the simulators."""

    def __init__(
        self,
        nodes: Iterable[Node],
        roads: Iterable[Road],
        sensors: Iterable[Sensor] = (),
    ):
        self.nodes: dict[str, Node] = {n.id: n for n in nodes}
        self.roads: dict[str, Road] = {r.id: r for r in roads}
        self.sensors: dict[str, Sensor] = {s.id: s for s in sensors}
        self.road_order = {rid: i for i, rid in enumerate(self.roads)}
        self._out: dict[str, list[str]] = defaultdict(list)
        self._in: dict[str, list[str]] = defaultdict(list)
        self._between: dict[tuple[str, str], str] = {}
        for r in self.roads.values():
            self._out[r.from_node].append(r.id)
            self._in[r.to_node].append(r.id)
            self._between.setdefault((r.from_node, r.to_node), r.id)
        by_road: dict[str, list[tuple[float, str]]] = defaultdict(list)
        for s in self.sensors.values():
            by_road[s.road].append((s.position, s.id))
        self._sensors_on = {k: tuple(sorted(v)) for k, v in by_road.items()}

    def out_roads(self, node: str) -> list[str]:
        return self._out.get(node, [])

    def in_roads(self, node: str) -> list[str]:
        return self._in.get(node, [])

    def successors(self, road: str) -> list[str]:
        return self.out_roads(self.roads[road].to_node)

    def road_between(self, from_node: str, to_node: str) -> str | None:
        return self._between.get((from_node, to_node))

    def sensors_on(self, road: str) -> tuple[tuple[float, str], ...]:
        """``(position, sensor id)`` pairs sorted by position."""
        return self._sensors_on.get(road, ())

    def nodes_of_kind(self, kind: str) -> list[str]:
        return [n.id for n in self.nodes.values() if n.kind == kind]

    def next_road(self, road: str, route: Sequence[str]) -> str | None:
        """Road following ``road`` along a node route, or None at route end."""
        to_node = self.roads[road].to_node
        try:
            i = route.index(to_node)
        except ValueError:
            return None
        if i + 1 >= len(route):
            return None
        return self.road_between(to_node, route[i + 1])

    def speed_limit(self, road: str, lane: int, x: float) -> float:
        limit = math.inf
        for sign in self.roads[road].signs:
            if sign.kind == "speed_limit" and sign.position <= x and sign.applies_to(lane):
                limit = min(limit, sign.value)
        return limit

    def to_definition(self) -> dict:
        """Inverse of :func:`build_network` (plain data)."""
        roads = []
        for r in self.roads.values():
            entry: dict = {
                "id": r.id,
                "from": r.from_node,
                "to": r.to_node,
                "length": r.length,
                "lanes": r.n_lanes,
            }
            conns: dict[str, list] = {}
            for nxt in self.successors(r.id):
                conns[nxt] = [lane.successor_on(nxt) for lane in r.lanes]
            if conns:
                entry["connections"] = conns
            if r.signs:
                entry["signs"] = [
                    {
                        k: v
                        for k, v in (
                            ("kind", s.kind),
                            ("position", s.position),
                            ("value", s.value),
                            ("lanes", list(s.lanes) if s.lanes is not None else None),
                        )
                        if v is not None
                    }
                    for s in r.signs
                ]
            roads.append(entry)
        return {
            "nodes": [{"id": n.id, "kind": n.kind} for n in self.nodes.values()],
            "roads": roads,
            "sensors": [
                {
                    "id": s.id,
                    "road": s.road,
                    "position": s.position,
                    "interval": s.aggregation_interval,
                }
                for s in self.sensors.values()
            ],
        }


def build_network(definition: Mapping, base_step: float | None = None) -> RoadNetwork:
    """Build and validate a :class:`RoadNetwork` from the scenario section.

    ``connections`` on a road map each successor road to a per-lane list of
    target lane indices (``null`` for a lane that does not continue there).
    Missing entries default to lane ``i -> i`` where the target lane exists.
    All violations are collected before raising :class:`NetworkError`.
    """
    errors: list[str] = []
    nodes = []
    for i, nd in enumerate(definition.get("nodes") or []):
        kind = nd.get("kind")
        if kind not in NODE_KINDS:
            errors.append(f"nodes[{i}] ({nd.get('id')}): unknown kind {kind!r}")
        nodes.append(Node(str(nd.get("id")), kind))
    node_ids = {n.id for n in nodes}
    if len(node_ids) != len(nodes):
        errors.append("duplicate node ids")

    raw_roads = list(definition.get("roads") or [])
    lane_counts = {}
    for rd in raw_roads:
        try:
            lane_counts[str(rd["id"])] = int(rd.get("lanes", 1))
        except (KeyError, TypeError, ValueError):
            pass
    out_of: dict[str, list[str]] = defaultdict(list)
    for rd in raw_roads:
        if "from" in rd and "id" in rd:
            out_of[str(rd["from"])].append(str(rd["id"]))

    roads = []
    for i, rd in enumerate(raw_roads):
        rid = str(rd.get("id"))
        where = f"roads[{i}] ({rid})"
        length = float(rd.get("length", 0.0))
        n_lanes = lane_counts.get(rid, 0)
        src, dst = str(rd.get("from")), str(rd.get("to"))
        for end, nid in (("from", src), ("to", dst)):
            if nid not in node_ids:
                errors.append(f"{where}: {end} node {nid!r} does not exist")
        if not length > 0:
            errors.append(f"{where}: length must be > 0, got {length}")
        if not 1 <= n_lanes <= MAX_LANES:
            errors.append(f"{where}: lane count {n_lanes} outside [1, {MAX_LANES}]")
            n_lanes = max(1, min(n_lanes, MAX_LANES))
        conns = dict(rd.get("connections") or {})
        per_lane: list[list[tuple[str, int]]] = [[] for _ in range(n_lanes)]
        for nxt in out_of.get(dst, []):
            nxt_lanes = lane_counts.get(nxt, 0)
            mapping = conns.pop(nxt, None)
            if mapping is None:
                mapping = [j if j < nxt_lanes else None for j in range(n_lanes)]
            if len(mapping) != n_lanes:
                errors.append(f"{where}: connection to {nxt} lists {len(mapping)} lanes, road has {n_lanes}")
                continue
            for j, target in enumerate(mapping):
                if target is None:
                    continue
                if not 0 <= int(target) < nxt_lanes:
                    errors.append(f"{where}: lane {j} connects to missing lane {target} of {nxt}")
                    continue
                per_lane[j].append((nxt, int(target)))
        for extra in conns:
            errors.append(f"{where}: connection to {extra!r} which does not leave node {dst!r}")
        signs = []
        for j, sg in enumerate(rd.get("signs") or []):
            kind, pos = sg.get("kind"), float(sg.get("position", -1))
            if kind not in SIGN_KINDS:
                errors.append(f"{where}.signs[{j}]: unsupported sign kind {kind!r}")
            if not 0 <= pos <= length:
                errors.append(f"{where}.signs[{j}]: position {pos} outside [0, {length}]")
            if kind == "speed_limit" and not (sg.get("value") or 0) > 0:
                errors.append(f"{where}.signs[{j}]: speed limit needs a positive value")
            lanes = sg.get("lanes")
            signs.append(
                Sign(
                    kind,
                    pos,
                    None if sg.get("value") is None else float(sg["value"]),
                    None if lanes is None else tuple(int(x) for x in lanes),
                )
            )
        roads.append(
            Road(
                rid,
                src,
                dst,
                length,
                tuple(Lane(j, tuple(per_lane[j])) for j in range(n_lanes)),
                tuple(signs),
            )
        )
    if len({r.id for r in roads}) != len(roads):
        errors.append("duplicate road ids")

    road_len = {r.id: r.length for r in roads}
    sensors = []
    seen_pos = set()
    for i, sd in enumerate(definition.get("sensors") or []):
        sid, rid = str(sd.get("id")), str(sd.get("road"))
        pos = float(sd.get("position", -1))
        interval = float(sd.get("interval", 60.0))
        where = f"sensors[{i}] ({sid})"
        if rid not in road_len:
            errors.append(f"{where}: road {rid!r} does not exist")
        elif not 0 <= pos <= road_len[rid]:
            errors.append(f"{where}: position {pos} outside [0, {road_len[rid]}] on road {rid}")
        if (rid, pos) in seen_pos:
            errors.append(f"{where}: another sensor already sits at {rid}@{pos}")
        seen_pos.add((rid, pos))
        if not interval > 0:
            errors.append(f"{where}: aggregation interval must be > 0")
        elif base_step is not None:
            ratio = interval / base_step
            if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
                errors.append(f"{where}: aggregation interval {interval} is not a multiple of the base step {base_step}")
        sensors.append(Sensor(sid, rid, pos, interval))
    if len({s.id for s in sensors}) != len(sensors):
        errors.append("duplicate sensor ids")

    if errors:
        raise NetworkError(errors)
    net = RoadNetwork(nodes, roads, sensors)
    errors.extend(_connectivity_errors(net))
    if errors:
        raise NetworkError(errors)
    return net


def _connectivity_errors(net: RoadNetwork) -> list[str]:
    entries = net.nodes_of_kind("network_entry")
    exits = net.nodes_of_kind("network_exit")
    if not entries and not exits:
        return []
    errors = []
    fwd = _reach(entries, net.out_roads, lambda r: net.roads[r].to_node)
    bwd = _reach(exits, net.in_roads, lambda r: net.roads[r].from_node)
    for r in net.roads.values():
        if r.from_node not in fwd:
            errors.append(f"road {r.id} is not reachable from any network entry")
        if r.to_node not in bwd:
            errors.append(f"road {r.id} does not lead to any network exit")
    return errors


def _reach(starts, roads_of, other_end) -> set[str]:
    seen = set(starts)
    todo = deque(starts)
    while todo:
        n = todo.popleft()
        for r in roads_of(n):
            m = other_end(r)
            if m not in seen:
                seen.add(m)
                todo.append(m)
    return seen


# ---------------------------------------------------------------------------
# Sensor graph


@dataclass(frozen=True)
class Arc:
    source: str
    target: str
    path: tuple[Interval, ...]


@dataclass
class SensorGraph:
    network: RoadNetwork
    vertices: tuple[str, ...]
    arcs: tuple[Arc, ...]

    def successors(self, sensor: str) -> list[str]:
        return [a.target for a in self.arcs if a.source == sensor]


def derive_sensor_graph(network: RoadNetwork) -> SensorGraph:
    """Directed graph joining sensors by sensor-free downstream paths."""
    errors = []
    for node in network.nodes_of_kind("network_entry"):
        for rid in network.out_roads(node):
            if not any(p == 0.0 for p, _ in network.sensors_on(rid)):
                errors.append(f"entry road {rid} has no sensor at position 0")
    for node in network.nodes_of_kind("network_exit"):
        for rid in network.in_roads(node):
            length = network.roads[rid].length
            if not any(p == length for p, _ in network.sensors_on(rid)):
                errors.append(f"exit road {rid} has no sensor at its downstream end")
    if errors:
        raise NetworkError(errors)

    arcs = []
    for sensor in network.sensors.values():
        for target, path in _walk(network, sensor.road, sensor.position, strict=True, path=()):
            if sum(iv.length for iv in path) <= 0:
                raise NetworkError(f"sensors {sensor.id} and {target} delimit an empty region")
            arcs.append(Arc(sensor.id, target, path))
    return SensorGraph(network, tuple(network.sensors), tuple(arcs))


def _walk(net: RoadNetwork, road: str, x: float, strict: bool, path, depth=0):
    if depth > len(net.roads) + 1:
        raise NetworkError(f"sensor-free cycle through road {road}")
    for p, sid in net.sensors_on(road):
        if p > x or (p == x and not strict):
            yield sid, path + (Interval(road, x, p),)
            return
    tail = path + (Interval(road, x, net.roads[road].length),)
    for nxt in net.successors(road):
        yield from _walk(net, nxt, 0.0, False, tail, depth + 1)


# ---------------------------------------------------------------------------
# Minimal cut and cluster algebra


@dataclass(frozen=True)
class Unit:
    """A minimal cluster: a sensor-free connected region."""

    id: str
    intervals: tuple[Interval, ...]
    inputs: frozenset[str]
    outputs: frozenset[str]

    @property
    def length(self) -> float:
        return sum(iv.length for iv in self.intervals)


@dataclass(frozen=True)
class Cluster:
    id: str
    units: frozenset[str]
    representation: str
    inputs: frozenset[str] = frozenset()
    outputs: frozenset[str] = frozenset()
    interior: frozenset[str] = frozenset()
    intervals: tuple[Interval, ...] = ()

    @property
    def minimal(self) -> bool:
        return self.representation != OUTSIDE and not self.interior


@dataclass
class Topology:
    """Unit table shared by every partition of one network."""

    network: RoadNetwork
    graph: SensorGraph
    units: dict[str, Unit]
    up: dict[str, str | None]  # sensor -> unit upstream of it
    down: dict[str, str | None]  # sensor -> unit downstream of it
    order: dict[str, int] = field(default_factory=dict)
    _locator: dict[str, list[tuple[float, float, str]]] = field(default_factory=dict)

    def unit_at(self, road: str, x: float) -> str | None:
        for start, end, uid in self._locator.get(road, ()):
            if start <= x < end:
                return uid
        return None

    def sort_units(self, units: Iterable[str]) -> list[str]:
        return sorted(units, key=self.order.__getitem__)

    def is_linear(self, units: Iterable[str]) -> bool:
        """True when every unit is a single junction-free chain of intervals."""
        return all(self.chain(uid) is not None for uid in units)

    def chain(self, uid: str) -> list[Interval] | None:
        """Intervals of a unit in travel order, or None if it branches."""
        u = self.units[uid]
        if len(u.inputs) != 1 or len(u.outputs) != 1:
            return None
        net = self.network
        s = net.sensors[next(iter(u.inputs))]
        road, x = s.road, s.position
        if x >= net.roads[road].length:
            succ = net.successors(road)
            if len(succ) != 1:
                return None
            road, x = succ[0], 0.0
        remaining = {(iv.road, iv.start): iv for iv in u.intervals}
        out = []
        while True:
            iv = remaining.pop((road, x), None)
            if iv is None:
                return None
            out.append(iv)
            if not remaining:
                return out
            node = net.roads[road].to_node
            if iv.end < net.roads[road].length or len(net.out_roads(node)) != 1 or len(net.in_roads(node)) != 1:
                return None
            road, x = net.out_roads(node)[0], 0.0


def minimal_cut(graph: SensorGraph) -> "ClusterPartition":
    """Cut the network at every sensor: one cluster per sensor-free region."""
    net = graph.network
    pieces: list[Interval] = []
    first_piece: dict[str, int] = {}
    last_piece: dict[str, int] = {}
    for rid, road in net.roads.items():
        cuts = sorted({0.0, road.length, *(p for p, _ in net.sensors_on(rid))})
        for a, b in zip(cuts, cuts[1:]):
            if b > a:
                if rid not in first_piece:
                    first_piece[rid] = len(pieces)
                last_piece[rid] = len(pieces)
                pieces.append(Interval(rid, a, b))

    parent = list(range(len(pieces)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    sensor_at = {(s.road, s.position) for s in net.sensors.values()}
    node_pieces: dict[str, list[int]] = defaultdict(list)
    for rid, road in net.roads.items():
        if rid in last_piece and (rid, road.length) not in sensor_at:
            node_pieces[road.to_node].append(last_piece[rid])
        if rid in first_piece and (rid, 0.0) not in sensor_at:
            node_pieces[road.from_node].append(first_piece[rid])
    for members in node_pieces.values():
        for m in members[1:]:
            parent[find(m)] = find(members[0])

    groups: dict[int, list[Interval]] = defaultdict(list)
    for i, iv in enumerate(pieces):
        groups[find(i)].append(iv)

    def key(ivs):
        return min((net.road_order[iv.road], iv.start) for iv in ivs)

    ordered = sorted(groups.items(), key=lambda kv: key(kv[1]))
    unit_of_piece = {}
    unit_ivs = {}
    for n, (root, ivs) in enumerate(ordered, start=1):
        uid = f"R{n}"
        unit_ivs[uid] = tuple(sorted(ivs, key=lambda iv: (net.road_order[iv.road], iv.start)))
        for iv in ivs:
            unit_of_piece[(iv.road, iv.start)] = uid
    node_unit = {
        node: unit_of_piece[(pieces[m].road, pieces[m].start)]
        for node, members in node_pieces.items()
        for m in members[:1]
    }

    up: dict[str, str | None] = {}
    down: dict[str, str | None] = {}
    for s in net.sensors.values():
        road = net.roads[s.road]
        if s.position > 0:
            up[s.id] = _piece_ending_at(unit_ivs, s.road, s.position)
        else:
            up[s.id] = node_unit.get(road.from_node)
        if s.position < road.length:
            down[s.id] = unit_of_piece.get((s.road, s.position))
        else:
            down[s.id] = node_unit.get(road.to_node)

    units = {}
    for uid, ivs in unit_ivs.items():
        units[uid] = Unit(
            uid,
            ivs,
            frozenset(s for s, u in down.items() if u == uid),
            frozenset(s for s, u in up.items() if u == uid),
        )
    locator: dict[str, list[tuple[float, float, str]]] = defaultdict(list)
    for uid, u in units.items():
        for iv in u.intervals:
            locator[iv.road].append((iv.start, iv.end, uid))
    topo = Topology(
        net,
        graph,
        units,
        up,
        down,
        {uid: i for i, uid in enumerate(units)},
        dict(locator),
    )
    clusters = [(uid, frozenset([uid]), "macro") for uid in units]
    return ClusterPartition.from_spec(topo, clusters)


def _piece_ending_at(unit_ivs, road, x):
    for uid, ivs in unit_ivs.items():
        for iv in ivs:
            if iv.road == road and iv.start < x <= iv.end:
                return uid
    return None


class ClusterPartition:
    """A set of disjoint clusters covering every unit, plus the outside."""

    def __init__(self, topology: Topology, clusters: Mapping[str, Cluster]):
        self.topology = topology
        self.clusters: dict[str, Cluster] = dict(clusters)

    @classmethod
    def from_spec(cls, topology: Topology, spec: Iterable[tuple[str, Iterable[str], str]]):
        clusters = {}
        for cid, units, rep in spec:
            clusters[cid] = _make_cluster(topology, cid, frozenset(units), rep)
        clusters[OUTSIDE] = _outside(topology)
        part = cls(topology, clusters)
        part.validate()
        return part

    # -- queries ----------------------------------------------------------
    @property
    def outside(self) -> Cluster:
        return self.clusters[OUTSIDE]

    def inner(self) -> list[Cluster]:
        return [c for c in self.clusters.values() if c.representation != OUTSIDE]

    def cluster_of_unit(self, uid: str) -> Cluster:
        for c in self.clusters.values():
            if uid in c.units:
                return c
        raise KeyError(uid)

    def unit_owner(self) -> dict[str, str]:
        return {u: c.id for c in self.inner() for u in c.units}

    def upstream_of(self, sensor: str) -> str:
        u = self.topology.up[sensor]
        return OUTSIDE if u is None else self.cluster_of_unit(u).id

    def downstream_of(self, sensor: str) -> str:
        u = self.topology.down[sensor]
        return OUTSIDE if u is None else self.cluster_of_unit(u).id

    def boundary_sensors(self) -> list[str]:
        owner = self.unit_owner()
        out = []
        for sid in self.topology.network.sensors:
            a = owner.get(self.topology.up[sid], OUTSIDE)
            b = owner.get(self.topology.down[sid], OUTSIDE)
            if a != b:
                out.append(sid)
        return out

    def shared_sensors(self, a: str, b: str) -> list[str]:
        ca, cb = self.clusters[a], self.clusters[b]
        return sorted((ca.outputs & cb.inputs) | (cb.outputs & ca.inputs))

    def layout(self) -> frozenset:
        """Id-free comparison key."""
        return frozenset((c.units, c.representation) for c in self.inner())

    def with_representation(self, cid: str, representation: str) -> "ClusterPartition":
        if representation not in REPRESENTATIONS - {OUTSIDE}:
            raise PartitionError(f"unknown representation {representation!r}")
        c = self.clusters[cid]
        clusters = dict(self.clusters)
        clusters[cid] = _make_cluster(self.topology, cid, c.units, representation)
        return ClusterPartition(self.topology, clusters)

    def __eq__(self, other):
        if not isinstance(other, ClusterPartition):
            return NotImplemented
        return {k: (c.units, c.representation) for k, c in self.clusters.items()} == {
            k: (c.units, c.representation) for k, c in other.clusters.items()
        }

    def __repr__(self):
        body = ", ".join(
            f"{c.id}:{c.representation}[{','.join(self.topology.sort_units(c.units))}]" for c in self.inner()
        )
        return f"ClusterPartition({body})"

    # -- invariants -------------------------------------------------------
    def validate(self) -> None:
        topo = self.topology
        seen: dict[str, str] = {}
        for c in self.inner():
            if not c.units:
                raise PartitionError(f"cluster {c.id} is empty")
            if c.representation not in REPRESENTATIONS - {OUTSIDE}:
                raise PartitionError(f"cluster {c.id}: unknown representation {c.representation!r}")
            for u in c.units:
                if u not in topo.units:
                    raise PartitionError(f"cluster {c.id}: unknown unit {u}")
                if u in seen:
                    raise PartitionError(f"unit {u} in both {seen[u]} and {c.id}")
                seen[u] = c.id
            if not _connected(topo, c.units):
                raise PartitionError(f"cluster {c.id} is not contiguous")
        missing = set(topo.units) - set(seen)
        if missing:
            raise PartitionError(f"units not covered by any cluster: {sorted(missing)}")
        # every boundary between clusters must be a sensor: pieces of
        # different clusters only meet at sensors by construction of units,
        # so it suffices that each cluster's sensor sets are consistent
        for c in self.inner():
            expect = _make_cluster(topo, c.id, c.units, c.representation)
            if (expect.inputs, expect.outputs, expect.interior) != (c.inputs, c.outputs, c.interior):
                raise PartitionError(f"cluster {c.id}: stale boundary sensors")


def _make_cluster(topo: Topology, cid: str, units: frozenset[str], rep: str) -> Cluster:
    inputs, outputs, interior = set(), set(), set()
    for sid in topo.network.sensors:
        u, d = topo.up[sid], topo.down[sid]
        up_in, down_in = u in units, d in units
        if up_in and down_in:
            interior.add(sid)
        elif down_in:
            inputs.add(sid)
        elif up_in:
            outputs.add(sid)
    intervals = tuple(iv for uid in topo.sort_units(units) for iv in topo.units[uid].intervals)
    return Cluster(cid, units, rep, frozenset(inputs), frozenset(outputs), frozenset(interior), intervals)


def _outside(topo: Topology) -> Cluster:
    inputs = frozenset(s for s, d in topo.down.items() if d is None)
    outputs = frozenset(s for s, u in topo.up.items() if u is None)
    return Cluster(OUTSIDE, frozenset(), OUTSIDE, inputs, outputs)


def _components(topo: Topology, units: Iterable[str], skip: str | None = None) -> list[set[str]]:
    units = set(units)
    adj: dict[str, set[str]] = {u: set() for u in units}
    for sid in topo.network.sensors:
        if sid == skip:
            continue
        a, b = topo.up[sid], topo.down[sid]
        if a in units and b in units and a != b:
            adj[a].add(b)
            adj[b].add(a)
    comps = []
    left = set(units)
    while left:
        start = min(left, key=topo.order.__getitem__)
        comp = {start}
        todo = [start]
        while todo:
            for v in adj[todo.pop()]:
                if v not in comp:
                    comp.add(v)
                    todo.append(v)
        comps.append(comp)
        left -= comp
    return comps


def _connected(topo: Topology, units: Iterable[str]) -> bool:
    return len(_components(topo, units)) <= 1


def _check_inner(partition: ClusterPartition, *cids: str) -> None:
    for cid in cids:
        if cid == OUTSIDE:
            raise PartitionError("the outside cluster cannot be merged, split or shifted")
        if cid not in partition.clusters:
            raise PartitionError(f"unknown cluster {cid!r}")


def merge_clusters(
    partition: ClusterPartition, a: str, b: str, representation: str | None = None
) -> ClusterPartition:
    """Merge two contiguous clusters; the result keeps ``a``'s id."""
    _check_inner(partition, a, b)
    if a == b:
        raise PartitionError(f"cannot merge cluster {a} with itself")
    if not partition.shared_sensors(a, b):
        raise PartitionError(f"clusters {a} and {b} are not contiguous")
    ca, cb = partition.clusters[a], partition.clusters[b]
    if representation is None:
        if ca.representation != cb.representation:
            raise PartitionError(
                f"clusters {a} ({ca.representation}) and {b} ({cb.representation}) differ; give a target representation"
            )
        representation = ca.representation
    clusters = {}
    for cid, c in partition.clusters.items():
        if cid == a:
            clusters[a] = _make_cluster(partition.topology, a, ca.units | cb.units, representation)
        elif cid != b:
            clusters[cid] = c
    out = ClusterPartition(partition.topology, clusters)
    out.validate()
    return out


def split_cluster(
    partition: ClusterPartition, c: str, at: str, new_id: str | None = None
) -> ClusterPartition:
    """Split ``c`` at an interior sensor.

    The upstream part keeps ``c``'s id; the downstream part is named
    ``new_id`` or, by default, after its first unit.
    """
    _check_inner(partition, c)
    cl = partition.clusters[c]
    if at not in cl.interior:
        raise PartitionError(f"sensor {at} is not interior to cluster {c}")
    topo = partition.topology
    comps = _components(topo, cl.units, skip=at)
    if len(comps) != 2:
        raise PartitionError(f"splitting {c} at {at} does not yield two clusters")
    upstream = next(comp for comp in comps if topo.up[at] in comp)
    downstream = next(comp for comp in comps if comp is not upstream)
    if topo.down[at] not in downstream:
        raise PartitionError(f"sensor {at} does not separate {c}")
    if new_id is None:
        taken = set(partition.clusters)
        new_id = next((u for u in topo.sort_units(downstream) if u not in taken), None)
        n = 2
        while new_id is None or new_id in taken:
            new_id = f"{topo.sort_units(downstream)[0]}.{n}"
            n += 1
    elif new_id in partition.clusters:
        raise PartitionError(f"cluster id {new_id!r} already in use")
    clusters = {}
    for cid, cc in partition.clusters.items():
        if cid == c:
            clusters[c] = _make_cluster(topo, c, frozenset(upstream), cl.representation)
            clusters[new_id] = _make_cluster(topo, new_id, frozenset(downstream), cl.representation)
        else:
            clusters[cid] = cc
    out = ClusterPartition(topo, clusters)
    out.validate()
    return out


def shift_boundary(partition: ClusterPartition, a: str, b: str, direction: str) -> ClusterPartition:
    """Move one unit across the shared boundary of two adjacent clusters.

    ``direction`` is the direction the boundary sensor moves along the
    road, ``"upstream"`` or ``"downstream"``.  Each cluster keeps its
    representation; the moved unit adopts the receiving cluster's.
    """
    if direction not in ("upstream", "downstream"):
        raise PartitionError(f"direction must be 'upstream' or 'downstream', got {direction!r}")
    _check_inner(partition, a, b)
    if a == b:
        raise PartitionError("shift needs two distinct clusters")
    topo = partition.topology
    ca, cb = partition.clusters[a], partition.clusters[b]
    shared = partition.shared_sensors(a, b)
    if len(shared) != 1:
        raise PartitionError(f"clusters {a} and {b} must share exactly one boundary sensor, found {shared}")
    (s,) = shared
    up_c, down_c = (ca, cb) if topo.up[s] in ca.units else (cb, ca)
    if direction == "downstream":
        moving, donor, receiver = topo.down[s], down_c, up_c
    else:
        moving, donor, receiver = topo.up[s], up_c, down_c
    if len(donor.units) < 2:
        raise PartitionError(f"shift would empty cluster {donor.id}")
    rest = donor.units - {moving}
    if not _connected(topo, rest):
        raise PartitionError(f"shift would disconnect cluster {donor.id}")
    clusters = dict(partition.clusters)
    clusters[donor.id] = _make_cluster(topo, donor.id, rest, donor.representation)
    clusters[receiver.id] = _make_cluster(topo, receiver.id, receiver.units | {moving}, receiver.representation)
    out = ClusterPartition(topo, clusters)
    out.validate()
    return out


def shifted_unit(partition: ClusterPartition, a: str, b: str, direction: str) -> tuple[str, str, str]:
    """``(unit, donor, receiver)`` that :func:`shift_boundary` would move."""
    topo = partition.topology
    (s,) = partition.shared_sensors(a, b)
    ca, cb = partition.clusters[a], partition.clusters[b]
    up_c, down_c = (ca, cb) if topo.up[s] in ca.units else (cb, ca)
    if direction == "downstream":
        return topo.down[s], down_c.id, up_c.id
    return topo.up[s], up_c.id, down_c.id
