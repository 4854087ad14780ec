"""Barrier-synchronised hybrid simulation of a clustered road network.

Every base step ``T`` runs in four phases:

1. input agents queue the arrivals of ``[t, t + T)``;
2. boundary data is read from the step-``k`` state of every cluster
   (macro flows and densities, micro entry densities, macro-to-micro
   vehicle generation);
3. clusters advance independently, possibly on worker threads: micro
   clusters take ``m`` substeps, macro clusters one METANET step;
4. at the barrier, vehicles that left a micro cluster are handed to the
   downstream queue with arrival time ``t_c + T``, sensor readings and
   the conservation ledger are updated, and the controller may act.

Random draws happen only in phases 1, 2 and 4, on per-entity streams
derived from the seed, so worker scheduling cannot change the result.
"""

from __future__ import annotations

import logging
import math
import zlib
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .control import ClusterMetrics, Controller, Snapshot, SwitchCommand
from .coupling import (
    MS_TO_KMH,
    GeometryError,
    SensorReading,
    aggregate_micro_to_macro,
    disaggregate_macro_to_micro,
    macro_shell,
    schedule_generation,
)
from .inputs import ReplayFeeder, flow_mass_generate, ingest_sensor_series, scripted_generate
from .macro import MacroClusterState, capacity, equilibrium_speed, step_macro_cluster
from .micro import Arrival, BoundaryState, EntryQueue, MicroCluster, Vehicle, step_micro_cluster
from .network import OUTSIDE, ClusterPartition, Interval, PartitionError
from .scenario import Scenario

log = logging.getLogger(__name__)

LEDGER_TOLERANCE = 1e-6
ENTRY_PROBE_M = 250.0  # length behind a micro entry used as downstream boundary data


class EngineError(RuntimeError):
    """A runtime failure, with the step at which it happened."""

    def __init__(self, msg: str, step: int, dump: dict | None = None):
        super().__init__(f"step {step}: {msg}")
        self.step = step
        self.dump = dump or {}


class ConfigurationError(ValueError):
    pass


@dataclass
class ReplayCluster:
    id: str
    feeders: dict[str, ReplayFeeder]
    epoch: int = 0


@dataclass
class LedgerRow:
    t: float
    micro: int
    macro: float
    queued: int
    fractional: float
    departed: float
    injected: float
    rounding: float

    @property
    def residual(self) -> float:
        return self.micro + self.macro + self.queued + self.fractional + self.departed - self.injected - self.rounding

    @property
    def balanced(self) -> bool:
        return abs(self.residual) <= LEDGER_TOLERANCE * max(1.0, self.injected)


@dataclass
class UnitRow:
    t: float
    density: float  # veh/km/lane
    speed: float  # km/h
    flow: float  # veh/h
    vehicles: float
    representation: str


@dataclass(frozen=True)
class ControlRecord:
    """What the controller saw and did in one control period."""

    t: float
    snapshot: Snapshot
    applied: tuple[SwitchCommand, ...]


@dataclass
class RunOutput:
    sensors: dict[str, list[SensorReading]] = field(default_factory=dict)
    units: dict[str, list[UnitRow]] = field(default_factory=dict)
    commands: list[tuple[float, SwitchCommand]] = field(default_factory=list)
    failed_commands: list[tuple[float, SwitchCommand, str]] = field(default_factory=list)
    ledger: list[LedgerRow] = field(default_factory=list)
    control: list[ControlRecord] = field(default_factory=list)
    deferrals: dict[str, int] = field(default_factory=dict)
    clamps: int = 0

    @property
    def conserved(self) -> bool:
        return all(r.balanced for r in self.ledger)


class _SensorAccumulator:
    def __init__(self, sensor: str, interval: float):
        self.sensor = sensor
        self.interval = interval
        self.t0 = 0.0
        self.count = 0.0
        self.speed_sum = 0.0
        self.last_speed = math.nan

    def add(self, count: float, speed_ms: float) -> None:
        if count > 0 and not math.isnan(speed_ms):
            self.count += count
            self.speed_sum += count * speed_ms

    def flush(self, t: float, epoch: int) -> SensorReading | None:
        if t - self.t0 < self.interval - 1e-9:
            return None
        speed = self.speed_sum / self.count if self.count > 0 else self.last_speed
        r = SensorReading(self.sensor, self.t0, t, self.count * 3600.0 / (t - self.t0), speed, self.count, epoch)
        self.last_speed = speed
        self.t0, self.count, self.speed_sum = t, 0.0, 0.0
        return r


class _UnitAccumulator:
    def __init__(self):
        self.n = 0
        self.vehicles = 0.0
        self.speed_sum = 0.0  # vehicle-weighted, km/h

    def add(self, vehicles: float, speed_sum: float) -> None:
        self.n += 1
        self.vehicles += vehicles
        self.speed_sum += speed_sum

    def flush(self, t, lane_km, length_km, rep, v_free) -> UnitRow:
        veh = self.vehicles / max(self.n, 1)
        speed = self.speed_sum / self.vehicles if self.vehicles > 0 else v_free
        density = veh / lane_km
        flow = density * speed * lane_km / length_km
        self.n, self.vehicles, self.speed_sum = 0, 0.0, 0.0
        return UnitRow(t, density, speed, flow, veh, rep)


def rng_for(seed: int, name: str) -> np.random.Generator:
    """Independent stream for a named entity (agent, sensor, cluster)."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


class World:
    def __init__(self, scenario: Scenario):
        self.sc = scenario
        sim = scenario.simulation
        self.net = scenario.network
        self.topo = scenario.topology
        self.params = scenario.metanet
        self.T = sim.step_s
        self.m = sim.substeps
        self.dt = sim.micro_dt
        self.k = 0
        self.time = 0.0
        self._next_id = 1
        self._rngs: dict[str, np.random.Generator] = {}
        self.partition: ClusterPartition = scenario.partition

        # entry points: one handover queue per sensor that has a unit downstream
        self.handover: dict[str, EntryQueue] = {}
        for sid, s in self.net.sensors.items():
            if self.topo.down[sid] is None:
                continue
            road, pos = self._injection_point(sid)
            self.handover[sid] = EntryQueue(f"handover:{sid}", road, pos, sensor=sid)
        self.frac: dict[str, float] = defaultdict(float)
        self.supply_carry: dict[str, float] = defaultdict(float)  # admission allowance, not vehicles

        self.agents = list(scenario.inputs)
        self.agent_queues: dict[str, EntryQueue] = {}
        self.agent_unit: dict[str, str] = {}
        self.feeders: dict[str, ReplayFeeder] = {}
        series_cache: dict[str, dict] = {}
        for a in self.agents:
            sensor = next((sid for p, sid in self.net.sensors_on(a.road) if p == a.position), None)
            self.agent_queues[a.id] = EntryQueue(f"agent:{a.id}", a.road, a.position, sensor=sensor, lane=a.lane)
            self.agent_unit[a.id] = self.topo.unit_at(a.road, a.position)
            if a.kind == "replay":
                data = series_cache.setdefault(a.series, ingest_sensor_series(a.series))
                self.feeders[a.id] = ReplayFeeder(data[a.sensor])

        self.injected = 0.0
        self.departed = 0.0
        self.rounding = 0.0

        self.micro: dict[str, MicroCluster] = {}
        self.macro: dict[str, MacroClusterState] = {}
        self.replay: dict[str, ReplayCluster] = {}
        self._replay_series = None
        if scenario.replay is not None:
            self._replay_series = ingest_sensor_series(scenario.replay.file)
        try:
            for c in self.partition.inner():
                self._install(c, [], None)
        except GeometryError as exc:
            raise ConfigurationError(str(exc)) from exc

        self.corridor = self._main_corridor()
        self._measure: dict[str, list[Interval]] = {}
        for uid, unit in self.topo.units.items():
            on = [iv for iv in unit.intervals if iv.road in self._corridor_roads]
            self._measure[uid] = on or list(unit.intervals)
        self._measure_roads = {uid: {iv.road for iv in ivs} for uid, ivs in self._measure.items()}

        self.out = RunOutput()
        self._sensor_acc = {
            sid: _SensorAccumulator(sid, max(s.aggregation_interval, self.T)) for sid, s in self.net.sensors.items()
        }
        self._unit_acc = {uid: _UnitAccumulator() for uid in self.topo.units}
        self.controller = Controller(scenario.policy)
        self._pool = ThreadPoolExecutor(sim.workers) if sim.workers > 1 else None

    # -- helpers ------------------------------------------------------------
    def rng(self, name: str) -> np.random.Generator:
        g = self._rngs.get(name)
        if g is None:
            g = self._rngs[name] = rng_for(self.sc.simulation.seed, name)
        return g

    def new_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def _injection_point(self, sid: str) -> tuple[str, float]:
        s = self.net.sensors[sid]
        if s.position >= self.net.roads[s.road].length:
            (nxt,) = self.net.successors(s.road)
            return nxt, 0.0
        return s.road, s.position

    def sample_route(self, road: str, rng: np.random.Generator) -> tuple[str, ...]:
        node = self.net.roads[road].to_node
        route = [node]
        for _ in range(len(self.net.roads) + 1):
            outs = self.net.out_roads(node)
            if not outs:
                break
            if len(outs) == 1:
                nxt = outs[0]
            else:
                ratios = self.sc.turn_ratios.get(node)
                w = np.array([ratios.get(r, 0.0) for r in outs]) if ratios else np.ones(len(outs))
                nxt = outs[int(rng.choice(len(outs), p=w / w.sum()))]
            node = self.net.roads[nxt].to_node
            route.append(node)
        return tuple(route)

    def make_vehicle(self, road: str, pos: float, rng, lane=None, speed=0.0, route=None) -> Vehicle:
        sc = self.sc
        return Vehicle(
            self.new_id(),
            road,
            lane if lane is not None else 0,
            pos,
            float(speed),
            sc.simulation.vehicle_length_m,
            sc.idm,
            sc.mobil,
            tuple(route) if route is not None else self.sample_route(road, rng),
        )

    def unit_of(self, road: str, pos: float) -> str | None:
        length = self.net.roads[road].length
        return self.topo.unit_at(road, min(pos, math.nextafter(length, 0.0)))

    def _main_corridor(self) -> tuple[str, ...]:
        """Units along the widest entry-to-exit road path."""
        net = self.net
        entries = [r for n in net.nodes_of_kind("network_entry") for r in net.out_roads(n)]
        if not entries:
            self._corridor_roads = set()
            return ()
        road = max(entries, key=lambda r: (net.roads[r].n_lanes, -net.road_order[r]))
        roads = [road]
        while True:
            succ = net.successors(road)
            if not succ:
                break
            road = max(succ, key=lambda r: (net.roads[r].n_lanes, -net.road_order[r]))
            if road in roads:
                break
            roads.append(road)
        self._corridor_roads = set(roads)
        units = []
        for rid in roads:
            cuts = sorted({0.0, *(p for p, _ in net.sensors_on(rid) if p < net.roads[rid].length)})
            for x in cuts:
                uid = self.topo.unit_at(rid, x)
                if uid is not None and (not units or units[-1] != uid):
                    units.append(uid)
        return tuple(units)

    # -- cluster states -------------------------------------------------------
    def _queues_for(self, units: frozenset[str]) -> list[EntryQueue]:
        qs = [self.agent_queues[a.id] for a in self.agents if self.agent_unit[a.id] in units]
        qs += [q for sid, q in self.handover.items() if self.topo.down[sid] in units]
        return qs

    def _check_macro_agents(self, c) -> None:
        for a in self.agents:
            if self.agent_unit[a.id] in c.units and self.agent_queues[a.id].sensor not in c.inputs:
                raise GeometryError(f"input {a.id} is inside macro cluster {c.id}; macro inflow is only possible at its input sensor")

    def _build_micro(self, c, vehicles) -> MicroCluster:
        st = MicroCluster(c.id, self.net, c.intervals, c.outputs, list(vehicles), self._queues_for(c.units))
        st.time, st.epoch = self.time, self.k
        return st

    def _build_macro(self, c, unit_state: dict) -> MacroClusterState:
        if len(c.inputs) != 1 or len(c.outputs) != 1:
            raise GeometryError(f"macro cluster {c.id} needs exactly one input and one output sensor")
        self._check_macro_agents(c)
        st = macro_shell(c.id, self.topo, c.units, self.params, self.sc.simulation.segment_length_m)
        try:
            self.params.check_cfl(st.lengths)
        except ValueError as exc:
            raise GeometryError(f"macro cluster {c.id}: {exc}") from exc
        for i, seg in enumerate(st.segments):
            got = unit_state.get((seg.road, seg.start))
            if got is not None:
                st.rho[i], st.v[i] = got
        st.epoch = self.k
        return st

    def _install(self, c, vehicles, unit_state) -> None:
        if c.representation == "micro":
            self.micro[c.id] = self._build_micro(c, vehicles)
        elif c.representation == "macro":
            self.macro[c.id] = self._build_macro(c, unit_state or {})
        else:
            binding = dict(self.sc.replay.sensors) if self.sc.replay else {}
            feeders = {s: ReplayFeeder(self._replay_series[binding[s]]) for s in sorted(c.outputs)}
            self.replay[c.id] = ReplayCluster(c.id, feeders, self.k)

    def regroup(self, new: ClusterPartition) -> None:
        """Move cluster states onto a new partition, converting as needed.

        States are decomposed per unit and reassembled.  Nothing is
        committed until every new cluster state has been built.
        """
        old = self.partition
        old_c = {c.id: c for c in old.inner()}
        new_c = {c.id: c for c in new.inner()}

        def sig(c):
            return (c.units, c.representation)

        gone = [cid for cid, c in old_c.items() if cid not in new_c or sig(new_c[cid]) != sig(c)]
        born = [cid for cid, c in new_c.items() if cid not in old_c or sig(old_c[cid]) != sig(c)]
        if any(old_c[c].representation == "replay" for c in gone) or any(
            new_c[c].representation == "replay" for c in born
        ):
            raise PartitionError("replay clusters cannot be changed at run time")

        unit_veh: dict[str, list[Vehicle]] = defaultdict(list)
        unit_macro: dict[str, list] = defaultdict(list)  # uid -> [(segment, rho, v)]
        for cid in gone:
            if cid in self.micro:
                for veh in self.micro[cid].vehicles:
                    unit_veh[self.unit_of(veh.road, veh.pos)].append(veh)
            else:
                st = self.macro[cid]
                for seg, r, v in zip(st.segments, st.rho, st.v):
                    unit_macro[seg.unit].append((seg, float(r), float(v)))

        rounding = 0.0
        built_micro, built_macro = {}, {}
        for cid in born:
            c = new_c[cid]
            if c.representation == "micro":
                vehicles: list[Vehicle] = []
                for uid in self.topo.sort_units(c.units):
                    if uid in unit_macro:
                        rows = unit_macro[uid]
                        shell = MacroClusterState(cid, [r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows])
                        rng = self.rng(f"convert:{cid}")
                        vs, delta = disaggregate_macro_to_micro(
                            shell,
                            rng,
                            self.sc.idm,
                            self.sc.mobil,
                            vehicle_length=self.sc.simulation.vehicle_length_m,
                            warmup_s=self.sc.simulation.warmup_s,
                            dt=self.dt,
                            next_id=self.new_id,
                            make_route=self.sample_route,
                        )
                        rounding += delta
                        vehicles.extend(vs)
                    else:
                        vehicles.extend(unit_veh.get(uid, ()))
                built_micro[cid] = self._build_micro(c, vehicles)
            else:
                unit_state = {}
                for uid in c.units:
                    for seg, r, v in unit_macro.get(uid, ()):
                        unit_state[(seg.road, seg.start)] = (r, v)
                st = self._build_macro(c, unit_state)
                micro_units = [u for u in c.units if u in unit_veh or u not in unit_macro]
                if micro_units:
                    idx = [i for i, s in enumerate(st.segments) if s.unit in micro_units]
                    sub = MacroClusterState(cid, [st.segments[i] for i in idx], st.rho[idx], st.v[idx])
                    vehicles = [v for u in micro_units for v in unit_veh.get(u, ())]
                    agg = aggregate_micro_to_macro(vehicles, sub, self.params)
                    st.rho[idx], st.v[idx] = agg.rho, agg.v
                built_macro[cid] = st

        # commit
        for cid in gone:
            self.micro.pop(cid, None)
            self.macro.pop(cid, None)
        self.micro.update(built_micro)
        self.macro.update(built_macro)
        self.rounding += rounding
        self.partition = new
        self._absorb_pending()

    def _absorb_pending(self) -> None:
        """Fold queued handovers and fractional mass into macro interiors."""
        for cid, st in self.macro.items():
            c = self.partition.clusters[cid]
            for sid, j in st.interior.items():
                q = self.handover.get(sid)
                n = len(q.arrivals) if q is not None else 0
                mass = n + self.frac.pop(sid, 0.0)
                if q is not None:
                    q.arrivals.clear()
                if mass:
                    st.rho[j] += mass / (st.lengths[j] * st.lanes[j])
            (sin,) = c.inputs
            if self.partition.upstream_of(sin) in self.macro and self.frac.get(sin):
                st.rho[0] += self.frac.pop(sin) / (st.lengths[0] * st.lanes[0])

    # -- one base step -------------------------------------------------------------
    def step(self) -> None:
        t0, t1 = self.time, self.time + self.T
        part = self.partition

        # 1. input agents
        for a in self.agents:
            q = self.agent_queues[a.id]
            rng = self.rng(f"agent:{a.id}")

            def factory(t, lane, speed, route, _q=q, _rng=rng):
                return self.make_vehicle(_q.road, _q.position, _rng, lane, speed, route)

            if a.kind == "flow_mass":
                arrivals = flow_mass_generate(a, (t0, t1), rng, factory)
            elif a.kind == "scripted":
                arrivals = scripted_generate(a, (t0, t1), factory)
            else:
                arrivals = self.feeders[a.id].generate((t0, t1), rng, factory, a.lane, a.route)
            self.injected += len(arrivals)
            q.push(arrivals)

        # 2. boundary data from the step-k state
        macro_bc = {}
        for cid in sorted(self.macro):
            st = self.macro[cid]
            c = part.clusters[cid]
            (sin,) = c.inputs
            (sout,) = c.outputs
            up = part.upstream_of(sin)
            if up in self.macro:
                ust = self.macro[up]
                q_in, v_in = float(ust.flow[-1]), float(ust.v[-1])
            elif up in self.replay:
                flow, speed, _ = self.replay[up].feeders[sin].series.value_at(t0)
                q_in = flow
                v_in = None if math.isnan(speed) else speed * MS_TO_KMH
                self.injected += q_in * self.T / 3600.0
            else:
                due = self._admit(st, sin, t1)
                q_in = len(due) * 3600.0 / self.T
                v_in = float(np.mean([d.vehicle.speed for d in due])) * MS_TO_KMH if due else None
            down = part.downstream_of(sout)
            if down in self.macro:
                rho_down = float(self.macro[down].rho[0])
            elif down in self.micro:
                rho_down = self._entry_state(down, sout).density
            else:
                rho_down = None
            macro_bc[cid] = (q_in, v_in, rho_down)

            q_out = float(st.flow[-1])
            mass = q_out * self.T / 3600.0
            if down in self.micro:
                self._emit_vehicles(sout, mass, float(st.v[-1]) / MS_TO_KMH, q_out, t0, t1)
            elif down not in self.macro:
                self.departed += mass

        for cid in sorted(self.replay):
            rc = self.replay[cid]
            for sid, feeder in rc.feeders.items():
                down = part.downstream_of(sid)
                if down in self.micro:
                    q = self.handover[sid]
                    rng = self.rng(f"sensor:{sid}")

                    def factory(t, lane, speed, route, _q=q, _rng=rng):
                        return self.make_vehicle(_q.road, _q.position, _rng, lane, speed, route)

                    arrivals = feeder.generate((t0, t1), rng, factory)
                    self.injected += len(arrivals)
                    q.push(arrivals)

        for cid in sorted(self.micro):
            st = self.micro[cid]
            st.downstream = {}
            for sout in sorted(part.clusters[cid].outputs):
                down = part.downstream_of(sout)
                if down in self.macro:
                    dst = self.macro[down]
                    st.downstream[sout] = BoundaryState(float(dst.rho[0]), float(dst.v[0]) / MS_TO_KMH, dst.epoch)
                elif down in self.micro:
                    st.downstream[sout] = self._entry_state(down, sout)
            for bs in st.downstream.values():
                if bs.epoch != self.k:
                    raise EngineError(f"cluster {cid} would read boundary data of epoch {bs.epoch}", self.k)

        # 3. advance clusters
        tasks = [("micro", cid) for cid in sorted(self.micro)] + [("macro", cid) for cid in sorted(self.macro)]

        def run(task):
            kind, cid = task
            if kind == "micro":
                st = self.micro[cid]
                events = []
                for i in range(self.m):
                    st.time = t0 + i * self.dt
                    _, ev = step_micro_cluster(st, self.dt)
                    events.extend(ev)
                st.time, st.epoch = t1, self.k + 1
                return events
            q_in, v_in, rho_down = macro_bc[cid]
            st = self.macro[cid]
            before = st.vehicles()
            clamps = st.clamps
            _, readings = step_macro_cluster(st, self.params, q_in, v_in, rho_down)
            excess = 0.0
            if st.clamps != clamps:
                expect = before + (q_in - float(readings[-1].flow)) * self.T / 3600.0
                excess = st.vehicles() - expect
            return readings, excess

        try:
            if self._pool is not None:
                results = list(self._pool.map(run, tasks))
            else:
                results = [run(t) for t in tasks]
        except Exception as exc:  # noqa: BLE001
            raise EngineError(f"{type(exc).__name__}: {exc}", self.k, self.state_dump()) from exc
        for rc in self.replay.values():
            rc.epoch = self.k + 1

        # 4. barrier
        reporter = {}
        for sid in self.net.sensors:
            d = part.downstream_of(sid)
            reporter[sid] = d if d != OUTSIDE else part.upstream_of(sid)
        for (kind, cid), res in zip(tasks, results):
            if kind == "micro":
                for ev in res:
                    if reporter[ev.sensor] == cid:
                        self._sensor_acc[ev.sensor].add(1, ev.speed)
                self._hand_over(self.micro[cid])
            else:
                res, excess = res
                self.rounding += excess
                for r in res:
                    if reporter[r.sensor] == cid:
                        self._sensor_acc[r.sensor].add(r.flow * self.T / 3600.0, r.speed / MS_TO_KMH)
        for cid, rc in self.replay.items():
            for sid, feeder in rc.feeders.items():
                if reporter[sid] == cid:
                    flow, speed, _ = feeder.series.value_at(t0)
                    self._sensor_acc[sid].add(flow * self.T / 3600.0, speed)

        self.k += 1
        self.time = t1
        self._record(t1)
        if self.k % self.sc.policy.control_period == 0 and self.sc.policy.mode != "static":
            self._control(t1)

    def _emit_vehicles(self, sensor: str, mass: float, speed: float, flow: float, t0: float, t1: float) -> None:
        total = self.frac[sensor] + mass
        n = int(math.floor(total + 1e-12))
        self.frac[sensor] = total - n
        if n <= 0:
            return
        q = self.handover[sensor]
        rng = self.rng(f"sensor:{sensor}")
        lanes = self.net.roads[q.road].n_lanes
        sched = schedule_generation(SensorReading(sensor, t0, t1, flow, speed, n), lanes)
        arrivals = []
        for t, lane in sched.place(n, t0, t1, rng):
            veh = self.make_vehicle(q.road, q.position, rng, lane, sched.speed)
            arrivals.append(Arrival(t, veh, lane))
        q.push(arrivals)

    def _hand_over(self, st: MicroCluster) -> None:
        for ev, veh in st.exits:
            down = self.partition.downstream_of(ev.sensor)
            if down == OUTSIDE or down in self.replay:
                self.departed += 1
                continue
            q = self.handover[ev.sensor]
            lane = veh.lane
            if q.road != veh.road:
                lane = self.net.roads[veh.road].lanes[veh.lane].successor_on(q.road)
            elif lane >= self.net.roads[q.road].n_lanes:
                lane = None
            veh.speed = ev.speed
            q.push([Arrival(ev.time + self.T, veh, lane)])
        st.exits.clear()

    # -- bookkeeping --------------------------------------------------------------
    def unit_totals(self) -> dict[str, tuple[float, float]]:
        """Per unit: (vehicles on its measuring intervals, speed sum in km/h)."""
        out: dict[str, list[float]] = {uid: [0.0, 0.0] for uid in self.topo.units}
        for st in self.micro.values():
            for veh in st.vehicles:
                uid = self.unit_of(veh.road, veh.pos)
                if uid is None:
                    continue
                if veh.road in self._measure_roads[uid]:
                    out[uid][0] += 1
                    out[uid][1] += veh.speed * MS_TO_KMH
        for st in self.macro.values():
            n = st.rho * st.lengths * st.lanes
            for seg, ni, vi in zip(st.segments, n, st.v):
                out[seg.unit][0] += float(ni)
                out[seg.unit][1] += float(ni * vi)
        return {k: (v[0], v[1]) for k, v in out.items()}

    def lane_km(self, uid: str) -> float:
        return sum(iv.length * self.net.roads[iv.road].n_lanes for iv in self._measure[uid]) / 1000.0

    def length_km(self, uid: str) -> float:
        return sum(iv.length for iv in self._measure[uid]) / 1000.0

    def ledger_row(self, t: float) -> LedgerRow:
        queued = sum(len(q) for q in self.handover.values()) + sum(len(q) for q in self.agent_queues.values())
        return LedgerRow(
            t,
            sum(len(st.vehicles) for st in self.micro.values()),
            float(sum(st.vehicles() for st in self.macro.values())),
            queued,
            float(sum(self.frac.values())),
            self.departed,
            self.injected,
            self.rounding,
        )

    def _record(self, t: float) -> None:
        row = self.ledger_row(t)
        if not row.balanced:
            log.error("conservation ledger off by %.6g vehicles at t=%.1f", row.residual, t)
        self.out.ledger.append(row)
        totals = self.unit_totals()
        for uid, (n, s) in totals.items():
            self._unit_acc[uid].add(n, s)
        agg = self.sc.simulation.aggregation_s
        if abs(t / agg - round(t / agg)) < 1e-9:
            owner = self.partition.unit_owner()
            for uid in self.topo.sort_units(self.topo.units):
                rep = self.partition.clusters[owner[uid]].representation
                self.out.units.setdefault(uid, []).append(
                    self._unit_acc[uid].flush(t, self.lane_km(uid), self.length_km(uid), rep, self.params.v_free)
                )
        for sid, acc in self._sensor_acc.items():
            r = acc.flush(t, self.k)
            if r is not None:
                self.out.sensors.setdefault(sid, []).append(r)

    def snapshot(self) -> Snapshot:
        totals = self.unit_totals()
        dens = {uid: totals[uid][0] / self.lane_km(uid) for uid in self.topo.units}
        metrics = {}
        for c in self.partition.inner():
            if c.id in self.macro:
                st = self.macro[c.id]
                metrics[c.id] = ClusterMetrics(c.id, "macro", st.vehicles(), tuple(float(r) for r in st.rho))
            elif c.id in self.micro:
                vehicles = self.micro[c.id].vehicles
                try:
                    # densities on the segments the cluster would have as macro
                    shell = self._build_macro(c, {})
                    seg_dens = aggregate_micro_to_macro(vehicles, shell, self.params, strict=False).rho
                    capable = True
                except (GeometryError, ValueError):
                    seg_dens = [dens[u] for u in self.topo.sort_units(c.units)]
                    capable = False
                metrics[c.id] = ClusterMetrics(
                    c.id, "micro", float(len(vehicles)), tuple(float(r) for r in seg_dens), capable
                )
        owner = self.partition.unit_owner()
        corridor = tuple((u, owner[u], dens[u]) for u in self.corridor)
        return Snapshot(self.time, metrics, corridor)

    def _admit(self, st: MacroClusterState, sensor: str, t1: float) -> list[Arrival]:
        """Pop the arrivals a macro cluster's first segment can take this
        step; the rest wait in their queues."""
        queues = [self.handover[sensor]] + [
            self.agent_queues[a.id] for a in self.agents if self.agent_queues[a.id].sensor == sensor
        ]
        due = sorted(
            ((arr, q) for q in queues for arr in q.due(t1)), key=lambda p: (p[0].time, p[0].vehicle.id)
        )
        rho0 = float(st.rho[0])
        per_lane = capacity(self.params) if rho0 <= self.params.rho_crit else rho0 * equilibrium_speed(rho0, self.params)
        allowance = self.supply_carry[sensor] + per_lane * st.segments[0].lanes * self.T / 3600.0
        n = min(len(due), int(math.floor(allowance + 1e-12)))
        self.supply_carry[sensor] = min(allowance - n, 1.0)
        for arr, q in due[n:]:
            q.push([arr])
        return [arr for arr, _ in due[:n]]

    def _entry_state(self, cid: str, sensor: str, probe: float = ENTRY_PROBE_M) -> BoundaryState:
        """Density and speed just inside a micro cluster's entry, counting
        vehicles refused insertion there as standing in front."""
        bs = self.micro[cid].publish_entry(sensor, probe)
        n_wait = self.handover[sensor].backlog()
        if not n_wait:
            return bs
        lanes = self.net.roads[self.handover[sensor].road].n_lanes
        density = min(bs.density + n_wait / (lanes * probe / 1000.0), self.params.rho_max)
        speed = 0.0 if math.isnan(bs.speed) else bs.speed
        return BoundaryState(density, speed, bs.epoch, n_wait / lanes)

    def _macro_capable(self, c) -> bool:
        try:
            self._build_macro(c, {})
        except (GeometryError, ValueError):
            return False
        return True

    def _control(self, t: float) -> None:
        snap = self.snapshot()
        result = self.controller.step(snap, self.partition, self)
        self.out.control.append(ControlRecord(t, snap, tuple(result.applied)))
        for cmd in result.applied:
            self.out.commands.append((t, cmd))
        for cmd, why in result.failed:
            self.out.failed_commands.append((t, cmd, why))
        row = self.ledger_row(t)
        if not row.balanced:
            log.error("conservation ledger off by %.6g vehicles after control at t=%.1f", row.residual, t)
        self.out.ledger[-1] = row

    def state_dump(self) -> dict:
        return {
            "time": self.time,
            "step": self.k,
            "partition": repr(self.partition),
            "micro": {cid: len(st.vehicles) for cid, st in self.micro.items()},
            "macro": {cid: st.rho.tolist() for cid, st in self.macro.items()},
        }

    def finish(self) -> RunOutput:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None
        self.out.deferrals = {q.id: q.deferrals for q in [*self.agent_queues.values(), *self.handover.values()] if q.deferrals}
        self.out.clamps = sum(st.clamps for st in self.macro.values())
        return self.out


def run(scenario: Scenario) -> RunOutput:
    world = World(scenario)
    try:
        for _ in range(scenario.simulation.n_steps):
            world.step()
    finally:
        out = world.finish()
    return out
