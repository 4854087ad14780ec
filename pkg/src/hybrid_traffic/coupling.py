"""Conversions between representations and the sensor-reading currency."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.optimize import least_squares

from .macro import MacroClusterState, MetanetParams, Segment
from .macro import equilibrium_speed as macro_speed
from .micro import CrossingEvent, IdmParams, MobilParams, Vehicle
from .micro import equilibrium_speed as idm_equilibrium_speed
from .network import Topology

MS_TO_KMH = 3.6


class DisaggregationError(ValueError):
    pass


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class SensorReading:
    sensor: str
    t_start: float  # s
    t_end: float  # s
    flow: float  # veh/h
    speed: float  # m/s
    count: float
    epoch: int = -1

    @property
    def speed_kmh(self) -> float:
        return self.speed * MS_TO_KMH


def record_sensor(
    events: Iterable[CrossingEvent],
    sensor: str,
    interval: tuple[float, float],
    previous_speed: float = math.nan,
    epoch: int = -1,
) -> SensorReading:
    """Aggregate crossing events into one reading.

    The mean speed is the arithmetic (time-mean) average of crossing
    speeds; an empty interval carries the previous speed forward.
    """
    t0, t1 = interval
    speeds = [e.speed for e in events if e.sensor == sensor and t0 <= e.time < t1]
    count = len(speeds)
    speed = sum(speeds) / count if count else previous_speed
    return SensorReading(sensor, t0, t1, count * 3600.0 / (t1 - t0), speed, count, epoch)


@dataclass(frozen=True)
class GenerationSchedule:
    lane_rates: tuple[float, ...]  # veh/h per lane
    speed: float  # m/s

    @property
    def total_rate(self) -> float:
        return float(sum(self.lane_rates))

    @property
    def mean_headways(self) -> tuple[float, ...]:
        return tuple(3600.0 / r if r > 0 else math.inf for r in self.lane_rates)

    def sample(self, t0: float, t1: float, rng: np.random.Generator) -> list[tuple[float, int]]:
        """Poisson arrivals ``(time, lane)`` over ``[t0, t1)``."""
        out = []
        for lane, rate in enumerate(self.lane_rates):
            if rate <= 0:
                continue
            n = rng.poisson(rate * (t1 - t0) / 3600.0)
            out.extend((float(t), lane) for t in rng.uniform(t0, t1, n))
        out.sort()
        return out

    def place(self, n: int, t0: float, t1: float, rng: np.random.Generator) -> list[tuple[float, int]]:
        """Exactly ``n`` arrivals: Poisson times conditioned on the count."""
        if n <= 0:
            return []
        total = self.total_rate
        weights = np.asarray(self.lane_rates) / total if total > 0 else np.full(len(self.lane_rates), 1 / len(self.lane_rates))
        times = np.sort(rng.uniform(t0, t1, n))
        lanes = rng.choice(len(weights), size=n, p=weights)
        return [(float(t), int(l)) for t, l in zip(times, lanes)]


def schedule_generation(
    reading: SensorReading, lanes: int, weights: Sequence[float] | None = None
) -> GenerationSchedule:
    if lanes < 1:
        raise ValueError("generation needs at least one lane")
    w = np.ones(lanes) if weights is None else np.asarray(weights, dtype=float)
    if len(w) != lanes or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("lane weights must be non-negative, one per lane, not all zero")
    w = w / w.sum()
    flow = max(reading.flow, 0.0)
    speed = 0.0 if math.isnan(reading.speed) else reading.speed
    return GenerationSchedule(tuple(float(x) for x in flow * w), speed)


# ---------------------------------------------------------------------------
# Geometry


def segment_geometry(topology: Topology, units: Iterable[str], target_length: float = 500.0) -> list[Segment]:
    """Cut linear units into segments of roughly ``target_length`` metres."""
    segs = []
    for uid in topology.sort_units(units):
        chain = topology.chain(uid)
        if chain is None:
            raise GeometryError(f"unit {uid} branches; it cannot be simulated macroscopically")
        for iv in chain:
            lanes = topology.network.roads[iv.road].n_lanes
            k = max(1, int(iv.length // target_length))
            edges = np.linspace(iv.start, iv.end, k + 1)
            for a, b in zip(edges, edges[1:]):
                segs.append(Segment(iv.road, float(a), float(b), lanes, uid))
    return segs


def macro_shell(
    cid: str, topology: Topology, units: Iterable[str], params: MetanetParams, target_length: float = 500.0
) -> MacroClusterState:
    """Empty macro state with geometry and sensor wiring for ``units``."""
    units = frozenset(units)
    segs = segment_geometry(topology, units, target_length)
    n = len(segs)
    state = MacroClusterState(cid, segs, np.zeros(n), np.full(n, params.v_free))
    wire(state, topology, units)
    return state


def wire(state: MacroClusterState, topology: Topology, units: frozenset[str]) -> None:
    """Attach boundary and interior sensors to segment indices."""
    first_of_unit = {}
    for i, seg in enumerate(state.segments):
        first_of_unit.setdefault(seg.unit, i)
    inputs, outputs, interior = [], [], {}
    for sid in topology.network.sensors:
        u, d = topology.up[sid], topology.down[sid]
        if u in units and d in units:
            interior[sid] = first_of_unit[d]
        elif d in units:
            inputs.append(sid)
        elif u in units:
            outputs.append(sid)
    if len(inputs) > 1 or len(outputs) > 1:
        raise GeometryError(f"macro cluster {state.id} must have one input and one output sensor")
    order = sorted(interior, key=interior.get)
    state.inputs, state.outputs = tuple(inputs), tuple(outputs)
    state.interior = {s: interior[s] for s in order}


# ---------------------------------------------------------------------------
# Aggregation / disaggregation


def aggregate_micro_to_macro(
    vehicles: Sequence[Vehicle], shell: MacroClusterState, params: MetanetParams, strict: bool = True
) -> MacroClusterState:
    """Fill ``shell`` with per-segment density and space-mean speed."""
    counts = np.zeros(len(shell.segments))
    speed_sum = np.zeros(len(shell.segments))
    index = {}
    for i, seg in enumerate(shell.segments):
        index.setdefault(seg.road, []).append((seg.start, seg.end, i))
    for veh in vehicles:
        for a, b, i in index.get(veh.road, ()):
            if a <= veh.pos < b:
                counts[i] += 1
                speed_sum[i] += veh.speed
                break
        else:
            if strict:
                raise GeometryError(f"vehicle {veh.id} at {veh.road}@{veh.pos:.1f} lies outside the segment geometry")
    out = shell.copy()
    out.rho = counts / (out.lengths * out.lanes)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, speed_sum / np.maximum(counts, 1) * MS_TO_KMH, params.v_free)
    out.v = mean
    return out


def apportion(masses: Sequence[float]) -> np.ndarray:
    """Largest-remainder rounding of real counts; the total is rounded once."""
    m = np.asarray(masses, dtype=float)
    if m.size == 0:
        return np.zeros(0, dtype=int)
    total = int(round(float(m.sum())))
    base = np.floor(m + 1e-9).astype(int)
    extra = total - int(base.sum())
    if extra > 0:
        rem = m - base
        order = sorted(range(len(m)), key=lambda i: (-rem[i], i))
        for i in order[:extra]:
            base[i] += 1
    elif extra < 0:
        order = sorted(range(len(m)), key=lambda i: (m[i] - base[i], i))
        for i in order:
            if extra == 0:
                break
            if base[i] > 0:
                base[i] -= 1
                extra += 1
    return base


def warm_up_ring(
    positions: np.ndarray,
    speeds: np.ndarray,
    ring_length: float,
    idm: IdmParams,
    vehicle_length: float,
    dt: float,
    steps: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Single-lane IDM on a ring; returns positions in ``[0, L)`` and speeds.

    The ring order is fixed (index ``i + 1`` leads ``i``).  After the run
    the ring is rotated so the seam falls in the middle of the largest gap,
    keeping every vehicle body inside ``[0, L)``.
    """
    x = np.asarray(positions, dtype=float).copy()
    v = np.asarray(speeds, dtype=float).copy()
    n = len(x)
    if n == 0:
        return x, v
    sqrt_ab = 2.0 * math.sqrt(idm.a * idm.b)
    for _ in range(steps):
        if n == 1:
            gap = np.array([ring_length - vehicle_length])
            dv = np.zeros(1)
        else:
            gap = np.mod(np.roll(x, -1) - x, ring_length) - vehicle_length
            dv = v - np.roll(v, -1)
        gap = np.maximum(gap, 1e-3)
        s_star = idm.s0 + np.maximum(0.0, v * idm.T + v * dv / sqrt_ab)
        a = idm.a * (1.0 - (v / idm.v0) ** idm.delta - (s_star / gap) ** 2)
        v_new = v + a * dt
        stop = v_new < 0
        dx = np.where(stop, np.where(a < 0, -v * v / (2.0 * np.where(a < 0, a, -1.0)), 0.0), (v + np.maximum(v_new, 0)) * 0.5 * dt)
        x = x + dx
        v = np.maximum(v_new, 0.0)
    x = np.mod(x, ring_length)
    if n == 1:
        # body centred in the ring
        return np.array([0.5 * (ring_length + vehicle_length)]), v
    gaps = np.mod(np.roll(x, -1) - x, ring_length) - vehicle_length
    j = int(np.argmax(gaps))
    # seam halfway between vehicle j's front and its leader's rear
    seam = x[j] + 0.5 * gaps[j]
    x = np.mod(x - seam, ring_length)
    return x, v


def disaggregate_macro_to_micro(
    state: MacroClusterState,
    rng: np.random.Generator,
    idm: IdmParams | None = None,
    mobil: MobilParams | None = None,
    *,
    vehicle_length: float = 5.0,
    warmup_s: float = 30.0,
    dt: float = 0.5,
    next_id: Callable[[], int] | None = None,
    make_route: Callable[[str, np.random.Generator], tuple[str, ...]] | None = None,
) -> tuple[list[Vehicle], float]:
    """Materialise vehicles from a macro state, then warm them up.

    Returns the vehicles and the rounding delta (integer total minus the
    real-valued total).  Each segment is warmed up as its own periodic
    sandbox, one ring per lane, so per-segment counts are preserved.
    """
    idm = idm or IdmParams()
    mobil = mobil or MobilParams()
    if next_id is None:
        counter = iter(range(1, 1 << 62))
        next_id = lambda: next(counter)  # noqa: E731
    masses = state.rho * state.lengths * state.lanes
    counts = apportion(masses)
    steps = int(round(warmup_s / dt)) if warmup_s > 0 else 0
    vehicles: list[Vehicle] = []
    for i, seg in enumerate(state.segments):
        n = int(counts[i])
        if n == 0:
            continue
        length_m = seg.end - seg.start
        per_lane = [n // seg.lanes + (1 if k < n % seg.lanes else 0) for k in range(seg.lanes)]
        speed = float(state.v[i]) / MS_TO_KMH
        for lane, m in enumerate(per_lane):
            if m == 0:
                continue
            spacing = length_m / m
            slack = spacing - vehicle_length - idm.s0
            if slack < 0:
                raise DisaggregationError(
                    f"segment {i} of {state.id}: {m} vehicles on {length_m:.0f} m of lane {lane} "
                    f"need spacing >= {vehicle_length + idm.s0} m"
                )
            jitter = rng.uniform(-1.0, 1.0, m) * 0.25 * slack
            x0 = (np.arange(m) + 0.5) * spacing + jitter
            x, v = warm_up_ring(x0, np.full(m, speed), length_m, idm, vehicle_length, dt, steps)
            for xi, vi in sorted(zip(x, v)):
                route = make_route(seg.road, rng) if make_route else ()
                vehicles.append(
                    Vehicle(next_id(), seg.road, lane, seg.start + float(xi), float(vi), vehicle_length, idm, mobil, route)
                )
    delta = float(counts.sum()) - float(masses.sum())
    return vehicles, delta


def idm_speed_curve(idm: IdmParams, densities, vehicle_length: float = 5.0) -> np.ndarray:
    """IDM equilibrium speed (km/h) at per-lane densities (veh/km)."""
    out = []
    for rho in np.atleast_1d(np.asarray(densities, dtype=float)):
        gap = 1000.0 / rho - vehicle_length if rho > 0 else math.inf
        out.append(idm.v0 * MS_TO_KMH if gap == math.inf else idm_equilibrium_speed(gap, idm) * MS_TO_KMH)
    return np.array(out)


def calibrate_idm(
    params: MetanetParams,
    idm: IdmParams | None = None,
    densities=None,
    vehicle_length: float = 5.0,
) -> IdmParams:
    """Fit ``v0``, ``T`` and ``s0`` so the IDM equilibrium curve tracks ``V_e``.

    Hybrid runs need both models to agree on speed at a given density;
    otherwise every conversion relaxes toward a different fixed point.
    """
    idm = idm or IdmParams()
    rho = np.linspace(2.0, 1.5 * params.rho_crit, 50) if densities is None else np.asarray(densities, float)
    target = macro_speed(rho, params)

    def residual(x):
        trial = replace(idm, v0=x[0], T=x[1], s0=x[2])
        return idm_speed_curve(trial, rho, vehicle_length) / target - 1.0

    fit = least_squares(residual, (idm.v0, idm.T, idm.s0), bounds=([1.0, 0.3, 0.5], [60.0, 3.0, 5.0]))
    return replace(idm, v0=float(fit.x[0]), T=float(fit.x[1]), s0=float(fit.x[2]))
