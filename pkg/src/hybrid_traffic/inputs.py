"""Traffic generation at network entries and sensor-series ingestion."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .micro import Arrival, Vehicle

log = logging.getLogger(__name__)

SERIES_HEADER = ("sensor_id", "t_seconds", "flow_veh_per_h", "mean_speed_m_per_s")

# (time, lane, speed, route) -> Vehicle
VehicleFactory = Callable[[float, "int | None", float, "tuple[str, ...] | None"], Vehicle]


class SeriesError(ValueError):
    pass


def flow_mass_generate(agent, interval: tuple[float, float], rng: np.random.Generator, make_vehicle: VehicleFactory) -> list[Arrival]:
    """Poisson arrivals from a piecewise-constant flow profile over ``[t0, t1)``."""
    t0, t1 = interval
    cuts = sorted({t0, t1, *(p[0] for p in agent.profile if t0 < p[0] < t1)})
    out = []
    for a, b in zip(cuts, cuts[1:]):
        flow, speed = agent.rate_at(a)
        if flow <= 0:
            continue
        n = rng.poisson(flow * (b - a) / 3600.0)
        for t in np.sort(rng.uniform(a, b, n)):
            out.append(Arrival(float(t), make_vehicle(float(t), agent.lane, speed, agent.route), agent.lane))
    return out


def scripted_generate(agent, interval: tuple[float, float], make_vehicle: VehicleFactory, default_speed: float = 0.0) -> list[Arrival]:
    """The events of ``agent`` with ``t0 <= t < t1``, in order."""
    t0, t1 = interval
    out = []
    for e in agent.events:
        if t0 - 1e-9 <= e.t < t1 - 1e-9:
            lane = e.lane if e.lane is not None else agent.lane
            speed = e.speed if e.speed is not None else default_speed
            route = e.route if e.route is not None else agent.route
            out.append(Arrival(e.t, make_vehicle(e.t, lane, speed, route), lane))
    return out


@dataclass
class SensorSeries:
    sensor: str
    t: np.ndarray  # interval start, s
    flow: np.ndarray  # veh/h
    speed: np.ndarray  # m/s
    interval: float = math.nan
    gaps: list[tuple[float, float]] = field(default_factory=list)  # missing [start, end)

    def __len__(self):
        return len(self.t)

    def value_at(self, t: float) -> tuple[float, float, bool]:
        """``(flow, speed, in_gap)``; gaps carry the last value forward."""
        i = int(np.searchsorted(self.t, t + 1e-9, side="right")) - 1
        if i < 0:
            return 0.0, math.nan, True
        in_gap = any(a <= t < b for a, b in self.gaps)
        if not in_gap and not math.isnan(self.interval) and t >= self.t[-1] + self.interval:
            in_gap = True
        return float(self.flow[i]), float(self.speed[i]), in_gap


def ingest_sensor_series(path: str | os.PathLike) -> dict[str, SensorSeries]:
    """Read ``sensor_id,t_seconds,flow_veh_per_h,mean_speed_m_per_s`` rows.

    The sampling interval of each sensor is its most common time step; a
    longer step is flagged as a gap.
    """
    rows: dict[str, list[tuple[float, float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != SERIES_HEADER:
            raise SeriesError(f"{path}: header must be {','.join(SERIES_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise SeriesError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            try:
                t, q, v = float(row[1]), float(row[2]), float(row[3])
            except ValueError as exc:
                raise SeriesError(f"{path}:{lineno}: {exc}") from exc
            if q < 0 or v < 0:
                raise SeriesError(f"{path}:{lineno}: negative flow or speed")
            sid = row[0].strip()
            prev = rows.setdefault(sid, [])
            if prev and t <= prev[-1][0]:
                raise SeriesError(f"{path}:{lineno}: timestamps of sensor {sid} are not increasing")
            prev.append((t, q, v))
    out = {}
    for sid, data in rows.items():
        arr = np.array(data, dtype=float).reshape(-1, 3)
        s = SensorSeries(sid, arr[:, 0], arr[:, 1], arr[:, 2])
        if len(s) >= 2:
            steps = np.diff(s.t)
            vals, counts = np.unique(np.round(steps, 6), return_counts=True)
            s.interval = float(vals[np.argmax(counts)])
            for a, d in zip(s.t[:-1], steps):
                if d > 1.5 * s.interval:
                    s.gaps.append((float(a + s.interval), float(a + d)))
                    log.info("sensor %s: gap of %.0f s after t=%.0f", sid, d - s.interval, a)
        out[sid] = s
    return out


@dataclass
class ReplayFeeder:
    """Turns a flow series into integer arrivals with a fractional carry."""

    series: SensorSeries
    carry: float = 0.0
    gap_steps: int = 0

    def generate(self, interval: tuple[float, float], rng: np.random.Generator, make_vehicle: VehicleFactory, lane=None, route=None) -> list[Arrival]:
        t0, t1 = interval
        flow, speed, in_gap = self.series.value_at(t0)
        if in_gap:
            self.gap_steps += 1
        mass = self.carry + flow * (t1 - t0) / 3600.0
        n = int(math.floor(mass + 1e-12))
        self.carry = mass - n
        speed = 0.0 if math.isnan(speed) else speed
        times = np.sort(rng.uniform(t0, t1, n))
        return [Arrival(float(t), make_vehicle(float(t), lane, speed, route), lane) for t in times]
