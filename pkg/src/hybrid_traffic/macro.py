"""Second-order macroscopic dynamics (METANET).

Units: km, h, veh/km/lane for density, km/h for speed and veh/h for flow.
Flows are per carriageway (``q = rho * v * lanes``) while densities are per
lane, so the conservation update divides by ``L * lanes``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetanetParams:
    step_h: float = 10.0 / 3600.0
    tau_h: float = 18.0 / 3600.0
    eta: float = 0.6
    nu: float = 35.0  # km^2/h
    kappa: float = 13.0  # veh/km/lane
    v_free: float = 110.0  # km/h
    rho_crit: float = 33.5  # veh/km/lane
    a_fd: float = 1.867
    rho_max: float = 180.0  # veh/km/lane

    def __post_init__(self):
        bad = [k for k, v in self.__dict__.items() if not v > 0]
        if bad:
            raise ValueError(f"MetanetParams must be > 0: {', '.join(bad)}")
        if not self.step_h < self.tau_h:
            raise ValueError(f"step ({self.step_h * 3600:g} s) must be shorter than tau ({self.tau_h * 3600:g} s)")

    def check_cfl(self, lengths_km) -> None:
        shortest = float(np.min(lengths_km))
        if not self.step_h * self.v_free < shortest:
            raise ValueError(
                f"CFL bound violated: T_s*v_f = {self.step_h * self.v_free * 1000:.1f} m "
                f">= shortest segment {shortest * 1000:.1f} m"
            )

    def with_step(self, step_s: float) -> "MetanetParams":
        return replace(self, step_h=step_s / 3600.0)


def equilibrium_speed(rho, params: MetanetParams):
    """Exponential fundamental diagram ``V_e(rho)`` in km/h."""
    rho_arr = np.asarray(rho, dtype=float)
    if np.any(rho_arr < 0):
        raise ValueError("density must be non-negative")
    out = params.v_free * np.exp(-(1.0 / params.a_fd) * (rho_arr / params.rho_crit) ** params.a_fd)
    return float(out) if out.ndim == 0 else out


def capacity(params: MetanetParams) -> float:
    """Per-lane flow at the critical density, veh/h/lane."""
    return params.rho_crit * equilibrium_speed(params.rho_crit, params)


def step_density(rho, v, lengths, lanes, params: MetanetParams, q_in: float):
    """Conservation update for every segment of a chain.

    ``q_in`` is the flow entering the first segment (veh/h).  Returns the
    new densities and the per-segment flows used.
    """
    rho = np.asarray(rho, dtype=float)
    q = rho * np.asarray(v, dtype=float) * lanes
    upstream = np.concatenate(([q_in], q[:-1]))
    new = rho + params.step_h / (lengths * lanes) * (upstream - q)
    return new, q


def step_speed(rho, v, lengths, params: MetanetParams, v_up: float, rho_down: float):
    """Momentum update: relaxation + convection - anticipation.

    ``v_up`` is the speed of the segment upstream of the first one and
    ``rho_down`` the density downstream of the last one.
    """
    rho = np.asarray(rho, dtype=float)
    v = np.asarray(v, dtype=float)
    v_prev = np.concatenate(([v_up], v[:-1]))
    rho_next = np.concatenate((rho[1:], [rho_down]))
    p = params
    relax = (p.step_h / p.tau_h) * (equilibrium_speed(rho, p) - v)
    conv = (p.step_h * p.eta / lengths) * v * (v_prev - v)
    antic = (p.step_h * p.nu / (p.tau_h * lengths)) * (rho_next - rho) / (rho + p.kappa)
    return v + relax + conv - antic


@dataclass
class Segment:
    road: str
    start: float  # m
    end: float  # m
    lanes: int
    unit: str

    @property
    def length_km(self) -> float:
        return (self.end - self.start) / 1000.0


@dataclass
class MacroClusterState:
    """Ordered segments (travel direction) with per-segment density and speed."""

    id: str
    segments: list[Segment]
    rho: np.ndarray
    v: np.ndarray
    inputs: tuple[str, ...] = ()
    outputs: tuple[str, ...] = ()
    # sensor id -> index of the segment downstream of it
    interior: dict[str, int] = field(default_factory=dict)
    v_up: float | None = None  # last known upstream speed
    epoch: int = 0
    clamps: int = 0

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.lengths = np.array([s.length_km for s in self.segments], dtype=float)
        self.lanes = np.array([s.lanes for s in self.segments], dtype=float)

    @property
    def flow(self) -> np.ndarray:
        return self.rho * self.v * self.lanes

    def vehicles(self) -> float:
        return float(np.sum(self.rho * self.lengths * self.lanes))

    def copy(self) -> "MacroClusterState":
        return MacroClusterState(
            self.id,
            list(self.segments),
            self.rho.copy(),
            self.v.copy(),
            self.inputs,
            self.outputs,
            dict(self.interior),
            self.v_up,
            self.epoch,
            self.clamps,
        )


@dataclass(frozen=True)
class VirtualReading:
    sensor: str
    flow: float  # veh/h
    speed: float  # km/h
    density: float  # veh/km/lane of the adjacent segment
    epoch: int


def step_macro_cluster(
    state: MacroClusterState,
    params: MetanetParams,
    q_in: float,
    v_in: float | None,
    rho_down: float | None,
) -> tuple[MacroClusterState, list[VirtualReading]]:
    """One METANET step of length ``params.step_h`` from the k-state.

    ``v_in`` None keeps the last known upstream speed; ``rho_down`` None
    means a free outflow (the last segment's own density).
    Readings describe the flows that moved vehicles during the step.
    """
    if q_in is None or not math.isfinite(q_in):
        raise ValueError(f"cluster {state.id}: missing upstream boundary flow")
    if v_in is not None:
        state.v_up = v_in
    v_up = state.v_up if state.v_up is not None else float(state.v[0])
    rho_dn = float(state.rho[-1]) if rho_down is None else rho_down

    rho_new, q = step_density(state.rho, state.v, state.lengths, state.lanes, params, q_in)
    v_new = step_speed(state.rho, state.v, state.lengths, params, v_up, rho_dn)

    readings = []
    for sid in state.inputs:
        readings.append(VirtualReading(sid, q_in, v_up, float(state.rho[0]), state.epoch))
    for sid, j in state.interior.items():
        readings.append(VirtualReading(sid, float(q[j - 1]), float(state.v[j - 1]), float(state.rho[j]), state.epoch))
    for sid in state.outputs:
        readings.append(VirtualReading(sid, float(q[-1]), float(state.v[-1]), float(state.rho[-1]), state.epoch))

    if np.any(rho_new < 0) or np.any(rho_new > params.rho_max):
        state.clamps += 1
        log.warning("cluster %s: density clamped to [0, %g] at epoch %d", state.id, params.rho_max, state.epoch)
        rho_new = np.clip(rho_new, 0.0, params.rho_max)
    if np.any(v_new < 0):
        v_new = np.maximum(v_new, 0.0)
    state.rho, state.v = rho_new, v_new
    state.epoch += 1
    return state, readings


def uniform_state(cid: str, n: int, length_km: float, lanes: int, rho: float, params: MetanetParams) -> MacroClusterState:
    segs = [Segment(cid, i * length_km * 1000, (i + 1) * length_km * 1000, lanes, cid) for i in range(n)]
    return MacroClusterState(cid, segs, np.full(n, rho), np.full(n, equilibrium_speed(rho, params)))


def step_ring(state: MacroClusterState, params: MetanetParams) -> MacroClusterState:
    """Periodic boundary: the last segment feeds the first."""
    q_last = float(state.rho[-1] * state.v[-1] * state.lanes[-1])
    state, _ = step_macro_cluster(state, params, q_last, float(state.v[-1]), float(state.rho[0]))
    return state
