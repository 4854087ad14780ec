"""Scenario files: YAML loading, validation with line diagnostics, dumping.

The grammar is documented in ``docs/scenario_format.md``.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .control import ControlPolicy
from .coupling import GeometryError, segment_geometry
from .macro import MetanetParams
from .micro import IdmParams, MobilParams
from .network import (
    ClusterPartition,
    NetworkError,
    PartitionError,
    RoadNetwork,
    Topology,
    build_network,
    derive_sensor_graph,
    minimal_cut,
)

INPUT_KINDS = ("flow_mass", "scripted", "replay")
SECTIONS = ("simulation", "idm", "mobil", "metanet", "network", "partition", "turn_ratios", "inputs", "replay", "policy")


class ScenarioError(ValueError):
    """Every problem found in a scenario, one per line."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass(frozen=True)
class SimulationSettings:
    duration_s: float = 3600.0
    step_s: float = 10.0
    substeps: int = 20
    seed: int = 0
    warmup_s: float = 30.0
    aggregation_s: float = 60.0
    segment_length_m: float = 500.0
    workers: int = 1
    vehicle_length_m: float = 5.0

    @property
    def micro_dt(self) -> float:
        return self.step_s / self.substeps

    @property
    def n_steps(self) -> int:
        return int(round(self.duration_s / self.step_s))


@dataclass(frozen=True)
class ScriptedEvent:
    t: float
    lane: int | None = None
    speed: float | None = None
    route: tuple[str, ...] | None = None


@dataclass(frozen=True)
class InputAgent:
    id: str
    kind: str
    road: str
    position: float = 0.0
    lane: int | None = None
    # flow_mass: piecewise-constant (t_start_s, flow_veh_per_h, speed_m_per_s)
    profile: tuple[tuple[float, float, float], ...] = ()
    events: tuple[ScriptedEvent, ...] = ()
    series: str | None = None  # replay: path of an ingested file
    sensor: str | None = None  # replay: sensor id inside the file
    route: tuple[str, ...] | None = None

    def rate_at(self, t: float) -> tuple[float, float]:
        """(flow veh/h, speed m/s) in effect at time ``t``."""
        flow, speed = 0.0, 0.0
        for t0, q, v in self.profile:
            if t0 <= t + 1e-9:
                flow, speed = q, v
        return flow, speed


@dataclass(frozen=True)
class ReplayBinding:
    file: str
    sensors: tuple[tuple[str, str], ...]  # (network sensor, series sensor)


@dataclass
class Scenario:
    simulation: SimulationSettings
    idm: IdmParams
    mobil: MobilParams
    metanet: MetanetParams
    network: RoadNetwork
    topology: Topology
    partition: ClusterPartition
    turn_ratios: dict[str, dict[str, float]]
    inputs: tuple[InputAgent, ...]
    policy: ControlPolicy
    replay: ReplayBinding | None = None
    source: Path | None = None
    _raw_network: dict = field(default_factory=dict, repr=False)

    def with_overrides(self, seed: int | None = None, duration_s: float | None = None, workers: int | None = None):
        sim = self.simulation
        if seed is not None:
            sim = replace(sim, seed=int(seed))
        if duration_s is not None:
            if duration_s <= 0 or not _multiple(duration_s, sim.step_s):
                raise ScenarioError([f"duration {duration_s} s is not a positive multiple of the step {sim.step_s} s"])
            sim = replace(sim, duration_s=float(duration_s))
        if workers is not None:
            sim = replace(sim, workers=int(workers))
        return replace(self, simulation=sim)

    def to_dict(self) -> dict:
        """Validated form as plain data; ``load(dump(s))`` reproduces it."""
        mp = self.metanet
        out: dict[str, Any] = {
            "simulation": asdict(self.simulation),
            "idm": asdict(self.idm),
            "mobil": asdict(self.mobil),
            "metanet": {
                "tau_s": mp.tau_h * 3600.0,
                "eta": mp.eta,
                "nu": mp.nu,
                "kappa": mp.kappa,
                "v_free": mp.v_free,
                "rho_crit": mp.rho_crit,
                "a_fd": mp.a_fd,
                "rho_max": mp.rho_max,
            },
            "network": self.network.to_definition(),
            "partition": {
                "clusters": [
                    {"id": c.id, "units": self.topology.sort_units(c.units), "representation": c.representation}
                    for c in self.partition.inner()
                ]
            },
            "turn_ratios": {n: dict(r) for n, r in self.turn_ratios.items()},
            "inputs": [_agent_dict(a) for a in self.inputs],
            "policy": asdict(self.policy),
        }
        if self.replay is not None:
            out["replay"] = {"file": self.replay.file, "sensors": dict(self.replay.sensors)}
        return out


def _agent_dict(a: InputAgent) -> dict:
    d: dict[str, Any] = {"id": a.id, "kind": a.kind, "road": a.road, "position": a.position, "lane": a.lane}
    if a.kind == "flow_mass":
        d["profile"] = [list(p) for p in a.profile]
    elif a.kind == "scripted":
        d["events"] = [
            {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(e).items() if v is not None}
            for e in a.events
        ]
    else:
        d["series"] = a.series
        d["sensor"] = a.sensor
    if a.route is not None:
        d["route"] = list(a.route)
    return d


# ---------------------------------------------------------------------------
# Loading


def _multiple(x: float, step: float) -> bool:
    r = x / step
    return abs(r - round(r)) < 1e-9


def _line_map(node, path=(), out=None) -> dict[tuple, int]:
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            out[path + (k.value,)] = k.start_mark.line + 1
            _line_map(v, path + (k.value,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, path + (i,), out)
    return out


class _Errors:
    def __init__(self, lines: dict[tuple, int]):
        self.lines = lines
        self.items: list[str] = []

    def add(self, path: tuple, msg: str) -> None:
        line = None
        p = tuple(path)
        while p and line is None:
            line = self.lines.get(p)
            p = p[:-1]
        where = ".".join(str(x) for x in path) or "<root>"
        prefix = f"line {line}: " if line is not None else ""
        self.items.append(f"{prefix}{where}: {msg}")


def load_scenario(path: str | os.PathLike) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError([f"{path}: cannot read scenario ({exc.strerror})"]) from exc
    return parse_scenario(text, base_dir=path.parent, source=path)


def parse_scenario(text: str, base_dir: str | os.PathLike = ".", source: Path | None = None) -> Scenario:
    try:
        root = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}: " if mark else ""
        raise ScenarioError([f"{where}parse error: {getattr(exc, 'problem', exc)}"]) from exc
    lines = _line_map(root) if root is not None else {}
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ScenarioError(["<root>: a scenario must be a mapping of sections"])
    return _validate(raw, _Errors(lines), Path(base_dir), source)


def _section(raw: dict, name: str, err: _Errors) -> dict:
    sec = raw.get(name)
    if sec is None:
        return {}
    if not isinstance(sec, dict):
        err.add((name,), "must be a mapping")
        return {}
    return sec


def _build(cls, data: dict, path: tuple, err: _Errors):
    names = {f.name for f in fields(cls)}
    kwargs = {}
    ok = True
    for key, value in data.items():
        if key not in names:
            err.add(path + (key,), f"unknown field (expected one of {', '.join(sorted(names))})")
            ok = False
            continue
        kwargs[key] = value
    if not ok:
        return None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        err.add(path, str(exc))
        return None


def _number(value, path, err: _Errors, *, positive=False, integer=False, minimum=None):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        err.add(path, f"expected a number, got {value!r}")
        return None
    if integer and int(value) != value:
        err.add(path, f"expected an integer, got {value!r}")
        return None
    if positive and not value > 0:
        err.add(path, f"must be > 0, got {value!r}")
        return None
    if minimum is not None and value < minimum:
        err.add(path, f"must be >= {minimum}, got {value!r}")
        return None
    return int(value) if integer else float(value)


def _validate(raw: dict, err: _Errors, base_dir: Path, source: Path | None) -> Scenario:
    for key in raw:
        if key not in SECTIONS:
            err.add((key,), f"unknown section (expected one of {', '.join(SECTIONS)})")

    # simulation
    sim_raw = _section(raw, "simulation", err)
    sim_kwargs = {}
    spec = {
        "duration_s": dict(positive=True),
        "step_s": dict(positive=True),
        "substeps": dict(integer=True, minimum=1),
        "seed": dict(integer=True, minimum=0),
        "warmup_s": dict(minimum=0),
        "aggregation_s": dict(positive=True),
        "segment_length_m": dict(positive=True),
        "workers": dict(integer=True, minimum=1),
        "vehicle_length_m": dict(positive=True),
    }
    for key, value in sim_raw.items():
        if key not in spec:
            err.add(("simulation", key), "unknown field")
            continue
        v = _number(value, ("simulation", key), err, **spec[key])
        if v is not None:
            sim_kwargs[key] = v
    sim = SimulationSettings(**sim_kwargs)
    if not _multiple(sim.duration_s, sim.step_s):
        err.add(("simulation", "duration_s"), f"{sim.duration_s} s is not a multiple of step_s = {sim.step_s} s")
    if not _multiple(sim.aggregation_s, sim.step_s):
        err.add(("simulation", "aggregation_s"), f"{sim.aggregation_s} s is not a multiple of step_s = {sim.step_s} s")

    idm = _build(IdmParams, _section(raw, "idm", err), ("idm",), err) or IdmParams()
    mobil = _build(MobilParams, _section(raw, "mobil", err), ("mobil",), err) or MobilParams()

    mraw = dict(_section(raw, "metanet", err))
    metanet = None
    tau_s = mraw.pop("tau_s", 18.0)
    if "step_h" in mraw or "tau_h" in mraw:
        err.add(("metanet",), "give tau_s in seconds; the step comes from simulation.step_s")
    else:
        mraw_conv = dict(mraw)
        tau = _number(tau_s, ("metanet", "tau_s"), err, positive=True)
        if tau is not None:
            mraw_conv["tau_h"] = tau / 3600.0
            mraw_conv["step_h"] = sim.step_s / 3600.0
            metanet = _build(MetanetParams, mraw_conv, ("metanet",), err)
    metanet = metanet or MetanetParams(step_h=min(sim.step_s, 17.0) / 3600.0)

    # network
    network = topology = partition = None
    net_raw = _section(raw, "network", err)
    try:
        network = build_network(net_raw, base_step=sim.step_s)
    except NetworkError as exc:
        for e in exc.errors:
            err.add(("network",), e)
    if network is not None:
        try:
            topology = minimal_cut(derive_sensor_graph(network)).topology
        except NetworkError as exc:
            for e in exc.errors:
                err.add(("network", "sensors"), e)
        for sid, s in network.sensors.items():
            road = network.roads[s.road]
            if s.position == road.length and len(network.successors(s.road)) > 1:
                err.add(("network", "sensors"), f"sensor {sid} sits on a diverge; move it before or after the node")

    # partition
    praw = _section(raw, "partition", err)
    if topology is not None:
        partition = _partition(praw, topology, err)
        if partition is not None:
            for c in partition.inner():
                if c.representation == "macro":
                    try:
                        segs = segment_geometry(topology, c.units, sim.segment_length_m)
                        metanet.check_cfl([s.length_km for s in segs])
                        if len(c.inputs) != 1 or len(c.outputs) != 1:
                            raise GeometryError("a macro cluster needs exactly one input and one output sensor")
                    except (GeometryError, ValueError) as exc:
                        err.add(("partition",), f"macro cluster {c.id}: {exc}")

    # turn ratios
    turn_ratios: dict[str, dict[str, float]] = {}
    for node, ratios in _section(raw, "turn_ratios", err).items():
        path = ("turn_ratios", node)
        if network is not None and node not in network.nodes:
            err.add(path, f"unknown node {node!r}")
            continue
        if not isinstance(ratios, dict) or not ratios:
            err.add(path, "must map out-road ids to probabilities")
            continue
        vals = {}
        for rid, p in ratios.items():
            v = _number(p, path + (rid,), err, minimum=0)
            if network is not None and rid not in network.out_roads(node):
                err.add(path + (rid,), f"road {rid!r} does not leave node {node}")
            if v is not None:
                vals[str(rid)] = v
        if vals and abs(sum(vals.values()) - 1.0) > 1e-6:
            err.add(path, f"probabilities sum to {sum(vals.values()):g}, not 1")
        turn_ratios[str(node)] = vals

    inputs = _inputs(raw.get("inputs") or [], network, err, base_dir)
    replay = _replay(raw.get("replay"), network, partition, err, base_dir)

    praw_pol = _section(raw, "policy", err)
    policy = _build(ControlPolicy, praw_pol, ("policy",), err) or ControlPolicy()
    if policy.congestion_on < metanet.rho_crit:
        err.add(("policy", "congestion_on"), f"{policy.congestion_on} is below the critical density {metanet.rho_crit}")

    if err.items:
        raise ScenarioError(err.items)
    return Scenario(
        sim, idm, mobil, metanet, network, topology, partition, turn_ratios, tuple(inputs), policy, replay, source, net_raw
    )


def _partition(praw: dict, topology: Topology, err: _Errors) -> ClusterPartition | None:
    default = praw.get("default", "macro")
    for key in praw:
        if key not in ("clusters", "default"):
            err.add(("partition", key), "unknown field")
    if default not in ("micro", "macro"):
        err.add(("partition", "default"), f"must be micro or macro, got {default!r}")
        default = "macro"
    spec = []
    used: set[str] = set()
    ok = True
    for i, c in enumerate(praw.get("clusters") or []):
        path = ("partition", "clusters", i)
        if not isinstance(c, dict) or "id" not in c or "units" not in c:
            err.add(path, "a cluster needs id and units")
            ok = False
            continue
        units = [str(u) for u in c["units"]]
        for u in units:
            if u not in topology.units:
                err.add(path + ("units",), f"unknown unit {u!r} (known: {', '.join(topology.sort_units(topology.units))})")
                ok = False
        rep = c.get("representation", default)
        spec.append((str(c["id"]), units, rep))
        used.update(units)
    ids = {cid for cid, _, _ in spec}
    for uid in topology.sort_units(set(topology.units) - used):
        if uid in ids:
            err.add(("partition",), f"unit {uid} is unassigned but its id is taken by another cluster")
            ok = False
        spec.append((uid, [uid], default))
    if not ok:
        return None
    try:
        return ClusterPartition.from_spec(topology, spec)
    except PartitionError as exc:
        err.add(("partition",), str(exc))
        return None


def _inputs(raw_inputs, network: RoadNetwork | None, err: _Errors, base_dir: Path) -> list[InputAgent]:
    from .inputs import SeriesError, ingest_sensor_series

    out = []
    if not isinstance(raw_inputs, list):
        err.add(("inputs",), "must be a list")
        return out
    seen = set()
    for i, a in enumerate(raw_inputs):
        path = ("inputs", i)
        if not isinstance(a, dict):
            err.add(path, "must be a mapping")
            continue
        known = {"id", "kind", "road", "position", "lane", "flow", "speed", "profile", "events", "series", "sensor", "route"}
        for k in a:
            if k not in known:
                err.add(path + (k,), "unknown field")
        aid = str(a.get("id", f"input{i}"))
        if aid in seen:
            err.add(path + ("id",), f"duplicate input id {aid!r}")
        seen.add(aid)
        kind = a.get("kind")
        if kind not in INPUT_KINDS:
            err.add(path + ("kind",), f"must be one of {', '.join(INPUT_KINDS)}")
            continue
        road = str(a.get("road"))
        position = _number(a.get("position", 0.0), path + ("position",), err, minimum=0)
        lane = a.get("lane")
        if network is not None:
            if road not in network.roads:
                err.add(path + ("road",), f"unknown road {road!r}")
                continue
            rd = network.roads[road]
            if position is not None and position >= rd.length:
                err.add(path + ("position",), f"must lie inside road {road} (length {rd.length} m)")
            if lane is not None and (not isinstance(lane, int) or not 0 <= lane < rd.n_lanes):
                err.add(path + ("lane",), f"road {road} has no lane {lane!r}")
        route = tuple(str(n) for n in a["route"]) if a.get("route") is not None else None
        profile: tuple = ()
        events: tuple = ()
        series = sensor = None
        if kind == "flow_mass":
            if "profile" in a:
                rows = []
                for j, row in enumerate(a["profile"] or []):
                    if not isinstance(row, (list, tuple)) or len(row) != 3:
                        err.add(path + ("profile", j), "rows are [t_start_s, flow_veh_per_h, speed_m_per_s]")
                        continue
                    vals = [_number(x, path + ("profile", j), err, minimum=0) for x in row]
                    if None not in vals:
                        rows.append(tuple(vals))
                if any(b[0] <= a_[0] for a_, b in zip(rows, rows[1:])):
                    err.add(path + ("profile",), "start times must increase")
                profile = tuple(rows)
            else:
                q = _number(a.get("flow", 0.0), path + ("flow",), err, minimum=0)
                v = _number(a.get("speed", 25.0), path + ("speed",), err, minimum=0)
                if q is not None and v is not None:
                    profile = ((0.0, q, v),)
        elif kind == "scripted":
            evs = []
            for j, e in enumerate(a.get("events") or []):
                epath = path + ("events", j)
                if not isinstance(e, dict) or "t" not in e:
                    err.add(epath, "an event needs t")
                    continue
                t = _number(e["t"], epath + ("t",), err, minimum=0)
                el = e.get("lane")
                if network is not None and road in network.roads and el is not None:
                    if not isinstance(el, int) or not 0 <= el < network.roads[road].n_lanes:
                        err.add(epath + ("lane",), f"road {road} has no lane {el!r}")
                sp = _number(e["speed"], epath + ("speed",), err, minimum=0) if "speed" in e else None
                er = tuple(str(n) for n in e["route"]) if e.get("route") is not None else None
                if t is not None:
                    evs.append(ScriptedEvent(t, el, sp, er))
            if any(b.t < a_.t for a_, b in zip(evs, evs[1:])):
                err.add(path + ("events",), "events must be in time order")
            events = tuple(evs)
        else:
            series = a.get("series")
            sensor = a.get("sensor")
            if not series or not sensor:
                err.add(path, "a replay input needs series and sensor")
            else:
                series = str((base_dir / series).resolve())
                try:
                    data = ingest_sensor_series(series)
                    if str(sensor) not in data:
                        err.add(path + ("sensor",), f"sensor {sensor!r} not found in {series}")
                except (OSError, SeriesError) as exc:
                    err.add(path + ("series",), str(exc))
                sensor = str(sensor)
        out.append(InputAgent(aid, kind, road, position or 0.0, lane, profile, events, series, sensor, route))
    return out


def _replay(raw, network, partition, err: _Errors, base_dir: Path) -> ReplayBinding | None:
    from .inputs import SeriesError, ingest_sensor_series

    if raw is None:
        if partition is not None and any(c.representation == "replay" for c in partition.inner()):
            err.add(("replay",), "replay clusters need a replay section")
        return None
    if not isinstance(raw, dict) or "file" not in raw:
        err.add(("replay",), "needs file and sensors")
        return None
    file = str((base_dir / raw["file"]).resolve())
    sensors = tuple((str(k), str(v)) for k, v in (raw.get("sensors") or {}).items())
    try:
        data = ingest_sensor_series(file)
    except (OSError, SeriesError) as exc:
        err.add(("replay", "file"), str(exc))
        return None
    for net_sid, series_sid in sensors:
        if network is not None and net_sid not in network.sensors:
            err.add(("replay", "sensors", net_sid), "unknown network sensor")
        if series_sid not in data:
            err.add(("replay", "sensors", net_sid), f"series {series_sid!r} not in {file}")
    if partition is not None:
        bound = dict(sensors)
        for c in partition.inner():
            if c.representation == "replay":
                for s in c.outputs:
                    if s not in bound:
                        err.add(("replay", "sensors"), f"replay cluster {c.id} output {s} has no series")
    return ReplayBinding(file, sensors)


def dump_scenario(scenario: Scenario) -> str:
    return yaml.safe_dump(scenario.to_dict(), sort_keys=False, default_flow_style=None)


def save_scenario(scenario: Scenario, path: str | os.PathLike) -> None:
    Path(path).write_text(dump_scenario(scenario))
