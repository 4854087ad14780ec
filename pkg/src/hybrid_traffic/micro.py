"""Microscopic dynamics: IDM car following, MOBIL lane changing, navigation.

Units are SI throughout (m, s, m/s).  A vehicle's ``pos`` is its front
bumper; its rear is at ``pos - length``.
"""

from __future__ import annotations

import bisect
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .network import RoadNetwork

log = logging.getLogger(__name__)

STAY, LEFT, RIGHT = "stay", "change_left", "change_right"
GHOST_LOOKAHEAD = 300.0  # m
GHOST_MIN_DENSITY = 1.0  # veh/km/lane
NAV_LOOKAHEAD = 400.0  # m of route beyond the current road used for lane choice
FORCED_MERGE_RANGE = 15.0  # m before a lane end where a stuck vehicle may force in
FORCED_MERGE_SPEED = 2.0  # m/s
B_EMERGENCY = 9.0  # m/s^2, braking a forced-merge follower must be able to stop with


class MicroStepError(RuntimeError):
    pass


class NavigationError(ValueError):
    pass


def _positive(obj, names):
    bad = [n for n in names if not getattr(obj, n) > 0]
    if bad:
        raise ValueError(f"{type(obj).__name__}: parameters must be > 0: {', '.join(bad)}")


@dataclass(frozen=True)
class IdmParams:
    v0: float = 33.3
    T: float = 1.5
    s0: float = 2.0
    a: float = 1.0
    b: float = 1.5
    delta: float = 4.0

    def __post_init__(self):
        _positive(self, ("v0", "T", "s0", "a", "b", "delta"))


@dataclass(frozen=True)
class MobilParams:
    politeness: float = 0.5
    threshold: float = 0.2
    b_safe: float = 4.0

    def __post_init__(self):
        if not self.politeness >= 0:
            raise ValueError("MobilParams: politeness must be >= 0")
        if not self.b_safe > 0:
            raise ValueError("MobilParams: b_safe must be > 0")


@dataclass(frozen=True)
class IdmInput:
    v: float
    s: float = math.inf
    dv: float = 0.0


def _idm(v, s, dv, p: IdmParams, v0: float) -> float:
    free = 1.0 - (v / v0) ** p.delta
    if s == math.inf:
        return p.a * free
    s_star = p.s0 + max(0.0, v * p.T + v * dv / (2.0 * math.sqrt(p.a * p.b)))
    return p.a * (free - (s_star / s) ** 2)


def idm_acceleration(inp: IdmInput, params: IdmParams, v0: float | None = None) -> float:
    """Acceleration chosen by an IDM driver.

    ``inp.dv`` is the approach rate (own speed minus leader speed).  The
    dynamic part of the desired gap is floored at zero so that a leader
    pulling away never produces extra braking.
    """
    for name in ("v", "dv"):
        if not math.isfinite(getattr(inp, name)):
            raise ValueError(f"non-finite IDM input {name}={getattr(inp, name)}")
    if math.isnan(inp.s) or inp.s <= 0:
        raise ValueError(f"IDM gap must be positive, got {inp.s}")
    return _idm(inp.v, inp.s, inp.dv, params, params.v0 if v0 is None else v0)


def equilibrium_gap(v: float, params: IdmParams) -> float:
    """Gap at which an IDM driver following an equal-speed leader keeps ``v``."""
    if not 0 <= v < params.v0:
        raise ValueError(f"no finite equilibrium gap for v={v} (v0={params.v0})")
    return (params.s0 + v * params.T) / math.sqrt(1.0 - (v / params.v0) ** params.delta)


def equilibrium_speed(gap: float, params: IdmParams) -> float:
    """Inverse of :func:`equilibrium_gap` by bisection."""
    if gap <= params.s0:
        return 0.0
    lo, hi = 0.0, params.v0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if equilibrium_gap(mid, params) < gap:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# MOBIL


@dataclass(frozen=True)
class Neighbor:
    """A leader or follower as seen from the subject vehicle.

    ``gap`` is bumper to bumper.  Followers carry their own driver params.
    """

    gap: float
    speed: float
    params: IdmParams | None = None
    v0: float | None = None


@dataclass(frozen=True)
class LaneContext:
    leader: Neighbor | None = None
    follower: Neighbor | None = None


def _acc_behind(v, params, v0, leader: Neighbor | None):
    if leader is None:
        return _idm(v, math.inf, 0.0, params, v0)
    return _idm(v, max(leader.gap, 1e-3), v - leader.speed, params, v0)


def _evaluate_change(speed, length, idm, mobil, v0, current: LaneContext, target: LaneContext):
    """Return (incentive, safe) for moving into ``target``."""
    lead_t, foll_t = target.leader, target.follower
    if lead_t is not None and lead_t.gap <= 0:
        return -math.inf, False
    if foll_t is not None and foll_t.gap <= 0:
        return -math.inf, False

    a_c = _acc_behind(speed, idm, v0, current.leader)
    a_c_new = _acc_behind(speed, idm, v0, lead_t)

    gain_n = 0.0
    # the changer must not have to brake harder than b_safe either
    safe = a_c_new >= -mobil.b_safe
    if foll_t is not None:
        fp = foll_t.params or idm
        fv0 = foll_t.v0 or fp.v0
        if lead_t is None:
            a_n = _idm(foll_t.speed, math.inf, 0.0, fp, fv0)
        else:
            a_n = _idm(foll_t.speed, foll_t.gap + length + lead_t.gap, foll_t.speed - lead_t.speed, fp, fv0)
        a_n_new = _idm(foll_t.speed, foll_t.gap, foll_t.speed - speed, fp, fv0)
        safe = safe and a_n_new >= -mobil.b_safe
        gain_n = a_n_new - a_n

    gain_o = 0.0
    foll_c = current.follower
    if foll_c is not None:
        op = foll_c.params or idm
        ov0 = foll_c.v0 or op.v0
        a_o = _idm(foll_c.speed, max(foll_c.gap, 1e-3), foll_c.speed - speed, op, ov0)
        lead_c = current.leader
        if lead_c is None:
            a_o_new = _idm(foll_c.speed, math.inf, 0.0, op, ov0)
        else:
            a_o_new = _idm(
                foll_c.speed, foll_c.gap + length + lead_c.gap, foll_c.speed - lead_c.speed, op, ov0
            )
        gain_o = a_o_new - a_o

    incentive = a_c_new - a_c + mobil.politeness * (gain_n + gain_o)
    return incentive, safe


def _forced_ok(target: LaneContext, s0: float) -> bool:
    """A stuck vehicle may squeeze in if the new follower can still stop."""
    lead, foll = target.leader, target.follower
    if lead is not None and lead.gap < 1.0:
        return False
    if foll is None:
        return True
    return foll.gap >= s0 and foll.speed**2 / (2.0 * B_EMERGENCY) <= foll.gap - 1.0


def mobil_decision(
    speed: float,
    current: LaneContext,
    idm: IdmParams,
    mobil: MobilParams,
    left: LaneContext | None = None,
    right: LaneContext | None = None,
    *,
    length: float = 5.0,
    v0: float | None = None,
    mandatory: str | None = None,
    forced: bool = False,
) -> str:
    """Lane-change decision for one vehicle.

    ``left``/``right`` are None when that lane does not exist or is not
    allowed.  With ``mandatory`` set to ``"left"`` or ``"right"`` only
    the safety criterion is applied, in that direction only; ``forced``
    further relaxes it for a vehicle stuck at the end of its lane.
    """
    v0 = idm.v0 if v0 is None else v0
    if mandatory is not None:
        target = left if mandatory == "left" else right
        if target is None:
            return STAY
        _, safe = _evaluate_change(speed, length, idm, mobil, v0, current, target)
        if not safe and forced:
            safe = _forced_ok(target, idm.s0)
        return (LEFT if mandatory == "left" else RIGHT) if safe else STAY

    best, best_gain = STAY, mobil.threshold
    for decision, target in ((LEFT, left), (RIGHT, right)):
        if target is None:
            continue
        gain, safe = _evaluate_change(speed, length, idm, mobil, v0, current, target)
        if safe and gain > best_gain:
            best, best_gain = decision, gain
    return best


# ---------------------------------------------------------------------------
# Vehicles and navigation


@dataclass(slots=True, eq=False)
class Vehicle:
    id: int
    road: str
    lane: int
    pos: float
    speed: float
    length: float = 5.0
    idm: IdmParams = field(default_factory=IdmParams)
    mobil: MobilParams = field(default_factory=MobilParams)
    route: tuple[str, ...] = ()
    cleared_stops: tuple[float, ...] = ()

    def copy(self) -> "Vehicle":
        return Vehicle(
            self.id,
            self.road,
            self.lane,
            self.pos,
            self.speed,
            self.length,
            self.idm,
            self.mobil,
            self.route,
            self.cleared_stops,
        )


def navigation_target(vehicle: Vehicle, network: RoadNetwork, lookahead: float = NAV_LOOKAHEAD) -> frozenset[int]:
    """Lanes of the current road that lead to the next road of the route.

    Roads within ``lookahead`` metres further along the route are taken
    into account: the lanes kept are those needing the fewest lane changes
    later on, so exits and lane drops are approached early.
    """
    road = network.roads[vehicle.road]
    if not vehicle.route:
        return frozenset(range(road.n_lanes))
    if road.to_node not in vehicle.route:
        raise NavigationError(f"vehicle {vehicle.id}: route does not pass node {road.to_node}")
    chain = [road]
    i = vehicle.route.index(road.to_node)
    ahead = 0.0
    while i + 1 < len(vehicle.route) and ahead <= lookahead:
        nxt = network.road_between(vehicle.route[i], vehicle.route[i + 1])
        if nxt is None:
            raise NavigationError(f"vehicle {vehicle.id}: no road from {vehicle.route[i]} to {vehicle.route[i + 1]}")
        chain.append(network.roads[nxt])
        ahead += network.roads[nxt].length
        i += 1
    # backwards: usable lanes of each road given the usable lanes of the next
    usable = frozenset(range(chain[-1].n_lanes))
    for rd, nxt in zip(reversed(chain[:-1]), reversed(chain[1:])):
        leads = frozenset(l.index for l in rd.lanes if l.successor_on(nxt.id) is not None)
        if not leads:
            raise NavigationError(f"vehicle {vehicle.id}: no lane of {rd.id} leads to {nxt.id}")
        # fewest lane changes still needed on the next road
        cost = {
            l.index: min(abs(l.successor_on(nxt.id) - u) for u in usable)
            for l in rd.lanes
            if l.successor_on(nxt.id) is not None
        }
        best = min(cost.values())
        usable = frozenset(k for k, c in cost.items() if c == best)
    return usable


# ---------------------------------------------------------------------------
# Cluster stepping


@dataclass(frozen=True)
class CrossingEvent:
    vehicle: int
    sensor: str
    speed: float
    time: float


@dataclass
class Arrival:
    """A vehicle waiting to enter the network or a cluster."""

    time: float
    vehicle: Vehicle
    lane: int | None = None  # None: pick the freest lane at injection
    deferred: bool = False  # offered for insertion at least once and refused


@dataclass
class EntryQueue:
    """Injection point; arrivals are kept in time order."""

    id: str
    road: str
    position: float
    sensor: str | None = None
    lane: int | None = None
    arrivals: list[Arrival] = field(default_factory=list)
    deferrals: int = 0

    def push(self, arrivals: Iterable[Arrival]) -> None:
        self.arrivals.extend(arrivals)
        self.arrivals.sort(key=lambda a: (a.time, a.vehicle.id))

    def due(self, t_end: float) -> list[Arrival]:
        """Pop every arrival with ``time < t_end``."""
        i = 0
        while i < len(self.arrivals) and self.arrivals[i].time < t_end - 1e-9:
            i += 1
        out, self.arrivals = self.arrivals[:i], self.arrivals[i:]
        return out

    def __len__(self):
        return len(self.arrivals)

    def backlog(self) -> int:
        """Arrivals already refused at least once, as opposed to in transit."""
        return sum(a.deferred for a in self.arrivals)


@dataclass(frozen=True)
class BoundaryState:
    """Barrier-published traffic state just downstream of a sensor."""

    density: float  # veh/km/lane
    speed: float  # m/s
    epoch: int
    backlog: float = 0.0  # vehicles per lane waiting to enter there


@dataclass
class MicroCluster:
    id: str
    network: RoadNetwork
    intervals: tuple  # Interval objects
    outputs: frozenset[str]
    vehicles: list[Vehicle] = field(default_factory=list)
    queues: list[EntryQueue] = field(default_factory=list)
    downstream: dict[str, BoundaryState] = field(default_factory=dict)
    time: float = 0.0
    epoch: int = 0
    exits: list[tuple[CrossingEvent, Vehicle]] = field(default_factory=list)

    def __post_init__(self):
        spans = defaultdict(list)
        for iv in self.intervals:
            spans[iv.road].append((iv.start, iv.end))
        self._spans = dict(spans)

    def contains(self, road: str, x: float) -> bool:
        return any(a <= x < b for a, b in self._spans.get(road, ()))

    def covers_road_start(self, road: str) -> bool:
        return any(a == 0.0 for a, _ in self._spans.get(road, ()))

    def vehicle_count(self) -> int:
        return len(self.vehicles)

    def publish_entry(self, sensor: str, probe: float = 250.0) -> BoundaryState:
        """Density and mean speed over ``probe`` metres after an input sensor."""
        s = self.network.sensors[sensor]
        road = self.network.roads[s.road]
        x0 = s.position
        road_id = s.road
        if x0 >= road.length:
            nxt = [r for r in self.network.successors(s.road) if self.covers_road_start(r)]
            road_id, x0 = (nxt[0], 0.0) if nxt else (s.road, x0)
            road = self.network.roads[road_id]
        x1 = min(road.length, x0 + probe)
        sel = [v for v in self.vehicles if v.road == road_id and x0 <= v.pos < x1]
        span_km = max(x1 - x0, 1.0) / 1000.0
        density = len(sel) / (span_km * road.n_lanes)
        speed = sum(v.speed for v in sel) / len(sel) if sel else math.nan
        return BoundaryState(density, speed, self.epoch)


def _lane_lists(vehicles: Iterable[Vehicle]) -> dict[tuple[str, int], list[Vehicle]]:
    lanes: dict[tuple[str, int], list[Vehicle]] = defaultdict(list)
    for v in vehicles:
        lanes[(v.road, v.lane)].append(v)
    for lst in lanes.values():
        lst.sort(key=lambda v: (v.pos, v.id))
    return lanes


class _Stepper:
    """One substep of a micro cluster; holds per-step caches."""

    def __init__(self, state: MicroCluster, dt: float):
        self.s = state
        self.net = state.network
        self.dt = dt
        self.t = state.time
        self._nav: dict[tuple[str, tuple], frozenset[int]] = {}
        self._outs_on: dict[str, list[float]] = {}
        for rid in state._spans:
            self._outs_on[rid] = [p for p, sid in self.net.sensors_on(rid) if sid in state.outputs]

    # -- lookups ----------------------------------------------------------
    def v0(self, veh: Vehicle) -> float:
        road = self.net.roads[veh.road]
        if not road.signs:
            return veh.idm.v0
        return min(veh.idm.v0, self.net.speed_limit(veh.road, veh.lane, veh.pos))

    def required(self, veh: Vehicle) -> frozenset[int]:
        key = (veh.road, veh.route)
        got = self._nav.get(key)
        if got is None:
            got = navigation_target(veh, self.net)
            self._nav[key] = got
        return got

    def leader(self, veh: Vehicle, road: str, lane: int, x: float, lst, j_next: int) -> Neighbor | None:
        """The obstacle ahead of position ``x`` in ``(road, lane)`` that
        demands the strongest braking."""
        best: Neighbor | None = None
        if j_next < len(lst):
            ld = lst[j_next]
            best = Neighbor(ld.pos - ld.length - x, ld.speed)
        net = self.net
        rd = net.roads[road]
        to_end = rd.length - x
        nxt = net.next_road(road, veh.route) if veh.route else None
        if nxt is not None:
            succ = rd.lanes[lane].successor_on(nxt)
            if succ is None:
                # this lane does not continue along the route: its end is a wall
                cand = Neighbor(to_end, 0.0)
                best = self._tighter(veh, best, cand)
            elif best is None or best.gap > to_end:
                if self.s.covers_road_start(nxt):
                    nl = self.lanes.get((nxt, succ))
                    if nl:
                        ld = nl[0]
                        cand = Neighbor(to_end + ld.pos - ld.length, ld.speed)
                        best = self._tighter(veh, best, cand)
        # stop signs
        if rd.signs:
            for sign in rd.signs:
                if (
                    sign.kind == "stop"
                    and sign.position > x
                    and sign.applies_to(lane)
                    and sign.position not in veh.cleared_stops
                ):
                    best = self._tighter(veh, best, Neighbor(sign.position - x, 0.0))
        # downstream cluster seen through the boundary
        ghost = self.ghost(veh, road, x)
        if ghost is not None:
            best = self._tighter(veh, best, ghost)
        return best

    def _tighter(self, veh: Vehicle, a: Neighbor | None, b: Neighbor) -> Neighbor:
        if a is None:
            return b
        v0 = self.v0(veh)
        acc_a = _idm(veh.speed, max(a.gap, 1e-3), veh.speed - a.speed, veh.idm, v0)
        acc_b = _idm(veh.speed, max(b.gap, 1e-3), veh.speed - b.speed, veh.idm, v0)
        return b if acc_b < acc_a else a

    def ghost(self, veh: Vehicle, road: str, x: float) -> Neighbor | None:
        if not self.s.downstream:
            return None
        rd = self.net.roads[road]
        for p, sid in self.net.sensors_on(road):
            if p > x and p - x <= GHOST_LOOKAHEAD:
                if sid in self.s.outputs:
                    return self._ghost_at(sid, p - x, veh)
                return None
        to_end = rd.length - x
        if to_end > GHOST_LOOKAHEAD or not veh.route:
            return None
        nxt = self.net.next_road(road, veh.route)
        if nxt is None:
            return None
        for p, sid in self.net.sensors_on(nxt):
            if p == 0.0 and sid in self.s.outputs:
                return self._ghost_at(sid, to_end, veh)
            break
        return None

    def _ghost_at(self, sensor: str, dist: float, veh: Vehicle) -> Neighbor | None:
        bs = self.s.downstream.get(sensor)
        if bs is None or not bs.density > GHOST_MIN_DENSITY or math.isnan(bs.speed):
            return None
        spacing = 1000.0 / bs.density
        # vehicles still waiting to enter stand in front of the sensor
        queue = bs.backlog * (veh.length + veh.idm.s0)
        return Neighbor(max(dist + max(spacing - veh.length, veh.idm.s0) - queue, 0.0), bs.speed)

    # -- phases -----------------------------------------------------------
    def inject(self, events: list[CrossingEvent]) -> None:
        """Insert arrivals due by the end of the substep.

        Runs after motion: a vehicle entering at time ``tau`` inside the
        substep is placed where it would be at its end, pulled back as far
        as the entry point when the gap ahead requires it.
        """
        t_end = self.t + self.dt
        for q in self.s.queues:
            if not q.arrivals or q.arrivals[0].time >= t_end - 1e-9:
                continue
            blocked: set[int] = set()
            keep = []
            for arr in q.arrivals:
                if arr.time >= t_end - 1e-9:
                    keep.append(arr)
                    continue
                lane = arr.lane if arr.lane is not None else q.lane
                if lane is None:
                    lane = self._freest_lane(q, blocked)
                if lane is not None:
                    lane = self._route_lane(q, arr.vehicle, lane)
                if lane is None or lane in blocked:
                    arr.deferred = True
                    keep.append(arr)
                    continue
                if not self._try_inject(q, arr, lane, events):
                    blocked.add(lane)
                    q.deferrals += 1
                    arr.deferred = True
                    log.debug("cluster %s: entry %s lane %d blocked, vehicle %d deferred", self.s.id, q.id, lane, arr.vehicle.id)
                    keep.append(arr)
            q.arrivals = keep

    def _entry_gap(self, q: EntryQueue, lane: int) -> tuple[float, float | None]:
        lst = self.lanes.get((q.road, lane), [])
        j = bisect.bisect_left([v.pos for v in lst], q.position)
        if j < len(lst):
            ld = lst[j]
            return ld.pos - ld.length - q.position, ld.speed
        return math.inf, None

    def _freest_lane(self, q: EntryQueue, blocked) -> int | None:
        best, best_gap = None, -math.inf
        for lane in range(self.net.roads[q.road].n_lanes):
            if lane in blocked:
                continue
            gap, _ = self._entry_gap(q, lane)
            if gap > best_gap:
                best, best_gap = lane, gap
        return best

    def _route_lane(self, q: EntryQueue, veh: Vehicle, lane: int) -> int:
        """Nearest lane to ``lane`` from which ``veh`` can follow its route;
        upstream traffic is assumed to have sorted itself already."""
        if not veh.route:
            return lane
        veh.road = q.road
        req = self.required(veh)
        if lane in req:
            return lane
        return min(req, key=lambda l: (abs(l - lane), l))

    def _entry_room(self, q: EntryQueue) -> float:
        """How far past the entry point a vehicle may be placed."""
        room = self.net.roads[q.road].length - q.position
        for p, _ in self.net.sensors_on(q.road):
            if p > q.position:
                room = min(room, p - q.position)
                break
        for a, b in self.s._spans.get(q.road, ()):
            if a <= q.position < b:
                room = min(room, b - q.position)
        return max(0.0, room - 1e-6)

    def _try_inject(self, q: EntryQueue, arr: Arrival, lane: int, events) -> bool:
        veh = arr.vehicle
        p = veh.idm
        gap, lead_speed = self._entry_gap(q, lane)
        # an interior entry point may have traffic behind it
        lst = self.lanes.get((q.road, lane), [])
        j = bisect.bisect_left([v.pos for v in lst], q.position)
        if j > 0 and lst[j - 1].pos > q.position - veh.length - lst[j - 1].idm.s0:
            return False
        speed = max(0.0, arr.vehicle.speed)
        v0 = p.v0
        if self.net.roads[q.road].signs:
            v0 = min(v0, self.net.speed_limit(q.road, lane, q.position))
        if lead_speed is not None and _idm(speed, max(gap, 1e-3), speed - lead_speed, p, v0) < -p.b:
            speed = min(speed, lead_speed)
        # unsafe unless the gap covers the desired gap at the injection speed
        need = p.s0 + speed * p.T
        if gap < need:
            return False
        t_end = self.t + self.dt
        tau = max(arr.time, self.t)
        ahead = min(speed * (t_end - tau), gap - need, self._entry_room(q))
        if speed > 0.0 and ahead > 0.0:
            tau = t_end - ahead / speed
        else:
            ahead, tau = 0.0, t_end
        veh.road, veh.lane, veh.pos, veh.speed = q.road, lane, q.position + ahead, speed
        self.s.vehicles.append(veh)
        bisect.insort(self.lanes.setdefault((q.road, lane), []), veh, key=lambda v: (v.pos, v.id))
        if q.sensor is not None:
            events.append(CrossingEvent(veh.id, q.sensor, veh.speed, min(tau, t_end)))
        return True

    def _context(self, veh: Vehicle, lane: int, lanes) -> LaneContext:
        lst = lanes.get((veh.road, lane), [])
        keys = [v.pos for v in lst]
        if lane == veh.lane:
            j = lst.index(veh)
            j_next, j_prev = j + 1, j - 1
        else:
            j_next = bisect.bisect_left(keys, veh.pos)
            j_prev = j_next - 1
        leader = self.leader(veh, veh.road, lane, veh.pos, lst, j_next)
        follower = None
        if j_prev >= 0:
            f = lst[j_prev]
            follower = Neighbor(veh.pos - veh.length - f.pos, f.speed, f.idm, self.v0(f))
        else:
            follower = self._upstream_follower(veh, lane, lanes)
        return LaneContext(leader, follower)

    def _upstream_follower(self, veh: Vehicle, lane: int, lanes) -> Neighbor | None:
        """Nearest vehicle on a road feeding ``(veh.road, lane)``."""
        net = self.net
        best = None
        for rid in net.in_roads(net.roads[veh.road].from_node):
            rd = net.roads[rid]
            for ln in rd.lanes:
                if ln.successor_on(veh.road) != lane:
                    continue
                lst = lanes.get((rid, ln.index))
                if not lst:
                    continue
                f = lst[-1]
                gap = rd.length - f.pos + veh.pos - veh.length
                if best is None or gap < best.gap:
                    best = Neighbor(gap, f.speed, f.idm, self.v0(f))
        return best

    def _stuck(self, veh: Vehicle) -> bool:
        """Nearly stopped just before the end of a lane that does not go on."""
        rd = self.net.roads[veh.road]
        if veh.speed >= FORCED_MERGE_SPEED or rd.length - veh.pos > FORCED_MERGE_RANGE:
            return False
        nxt = self.net.next_road(veh.road, veh.route) if veh.route else None
        return nxt is not None and rd.lanes[veh.lane].successor_on(nxt) is None

    def decide(self, veh: Vehicle, lanes) -> int | None:
        n_lanes = self.net.roads[veh.road].n_lanes
        if n_lanes == 1:
            return None
        required = self.required(veh)
        current = self._context(veh, veh.lane, lanes)
        mandatory = None
        if veh.lane not in required:
            mandatory = "left" if min(required) > veh.lane else "right"
        ok = (lambda l: 0 <= l < n_lanes) if mandatory else (lambda l: 0 <= l < n_lanes and l in required)
        left = self._context(veh, veh.lane + 1, lanes) if ok(veh.lane + 1) else None
        right = self._context(veh, veh.lane - 1, lanes) if ok(veh.lane - 1) else None
        decision = mobil_decision(
            veh.speed,
            current,
            veh.idm,
            veh.mobil,
            left,
            right,
            length=veh.length,
            v0=self.v0(veh),
            mandatory=mandatory,
            forced=mandatory is not None and self._stuck(veh),
        )
        if decision == LEFT:
            return veh.lane + 1
        if decision == RIGHT:
            return veh.lane - 1
        return None

    def run(self) -> list[CrossingEvent]:
        s = self.s
        events: list[CrossingEvent] = []
        self.lanes = _lane_lists(s.vehicles)

        # lane changes: decided on the pre-step state, applied in a fixed order
        pre = {k: list(v) for k, v in self.lanes.items()}
        wanted = []
        for veh in s.vehicles:
            target = self.decide(veh, pre)
            if target is not None:
                wanted.append((veh, target))
        wanted.sort(key=lambda c: (-c[0].pos, c[0].id))
        for veh, target in wanted:
            direction = "left" if target > veh.lane else "right"
            ctx_now = self._context(veh, veh.lane, self.lanes)
            tgt_now = self._context(veh, target, self.lanes)
            ok = mobil_decision(
                veh.speed,
                ctx_now,
                veh.idm,
                veh.mobil,
                tgt_now if direction == "left" else None,
                tgt_now if direction == "right" else None,
                length=veh.length,
                v0=self.v0(veh),
                mandatory=direction,
                forced=veh.lane not in self.required(veh) and self._stuck(veh),
            )
            if ok == STAY:
                continue
            self.lanes[(veh.road, veh.lane)].remove(veh)
            veh.lane = target
            bisect.insort(self.lanes[(veh.road, target)], veh, key=lambda v: (v.pos, v.id))

        # accelerations from the post-change positions
        acc: dict[int, float] = {}
        for (road, lane), lst in self.lanes.items():
            for j, veh in enumerate(lst):
                ld = self.leader(veh, road, lane, veh.pos, lst, j + 1)
                v0 = self.v0(veh)
                if ld is None:
                    acc[veh.id] = _idm(veh.speed, math.inf, 0.0, veh.idm, v0)
                else:
                    acc[veh.id] = _idm(veh.speed, max(ld.gap, 1e-3), veh.speed - ld.speed, veh.idm, v0)

        survivors = []
        dt = self.dt
        for veh in s.vehicles:
            a = acc[veh.id]
            v = veh.speed
            v_new = v + a * dt
            if v_new < 0.0:
                dx = -v * v / (2.0 * a) if a < 0 else 0.0
                v_new = 0.0
            else:
                dx = (v + v_new) * 0.5 * dt
            if not self._advance(veh, dx, v_new, a, events):
                survivors.append(veh)
        s.vehicles = survivors
        self._clear_stops()
        self.lanes = _lane_lists(s.vehicles)
        self.inject(events)
        self._check_overlaps()
        s.time = self.t + dt
        return events

    def _advance(self, veh: Vehicle, dx: float, v_new: float, a: float, events) -> bool:
        """Move ``veh`` by ``dx``; return True when it left the cluster."""
        net = self.net
        x_from = veh.pos
        x_to = veh.pos + dx
        travelled = 0.0
        v_old = veh.speed
        veh.speed = v_new
        while True:
            rd = net.roads[veh.road]
            for p, sid in net.sensors_on(veh.road):
                if x_from < p <= x_to:
                    frac = (travelled + p - x_from) / dx if dx > 0 else 1.0
                    tc = self.t + frac * self.dt
                    vc = max(0.0, v_old + a * frac * self.dt)
                    ev = CrossingEvent(veh.id, sid, vc, tc)
                    events.append(ev)
                    if sid in self.s.outputs:
                        veh.pos = p
                        self.s.exits.append((ev, veh))
                        return True
            if x_to < rd.length:
                veh.pos = x_to
                return False
            nxt = net.next_road(veh.road, veh.route) if veh.route else None
            succ = rd.lanes[veh.lane].successor_on(nxt) if nxt is not None else None
            if nxt is None or succ is None or not self.s.contains(nxt, 0.0):
                # lane or route ends here without a boundary sensor: hold at the end
                veh.pos = math.nextafter(rd.length, 0.0)
                veh.speed = 0.0
                return False
            travelled += rd.length - x_from
            x_to -= rd.length
            x_from = -1.0
            veh.road, veh.lane = nxt, succ

    def _clear_stops(self):
        for veh in self.s.vehicles:
            rd = self.net.roads[veh.road]
            if not rd.signs:
                if veh.cleared_stops:
                    veh.cleared_stops = ()
                continue
            for sign in rd.signs:
                if (
                    sign.kind == "stop"
                    and sign.position not in veh.cleared_stops
                    and 0 <= sign.position - veh.pos <= veh.idm.s0 + 1.0
                    and veh.speed < 0.5
                ):
                    veh.cleared_stops = veh.cleared_stops + (sign.position,)

    def _check_overlaps(self):
        for (road, lane), lst in _lane_lists(self.s.vehicles).items():
            for f, ld in zip(lst, lst[1:]):
                if ld.pos - ld.length - f.pos < -1e-9:
                    raise MicroStepError(
                        f"cluster {self.s.id}: vehicles {f.id} and {ld.id} overlap on {road}/{lane} at t={self.t + self.dt:.3f}"
                    )


def step_micro_cluster(state: MicroCluster, dt: float) -> tuple[MicroCluster, list[CrossingEvent]]:
    """Advance a micro cluster by ``dt`` seconds.

    Lane changes (navigation, then MOBIL) are decided on the pre-step
    state, then IDM accelerations, motion and finally injection of the
    arrivals due by the end of the step.  Vehicles crossing an output
    sensor are moved to ``state.exits``.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    events = _Stepper(state, dt).run()
    return state, events


def vehicles_in(vehicles: Sequence[Vehicle], road: str, start: float, end: float) -> list[Vehicle]:
    return [v for v in vehicles if v.road == road and start <= v.pos < end]
