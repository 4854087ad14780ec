"""Control agent: representation switches and cluster geometry changes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

from .network import (
    OUTSIDE,
    ClusterPartition,
    PartitionError,
    merge_clusters,
    shift_boundary,
    split_cluster,
)

log = logging.getLogger(__name__)

MODES = ("static", "cpu_reduce", "balance", "jam_probe", "shockwave")
COMMAND_KINDS = ("to_micro", "to_macro", "merge", "split", "shift")


@dataclass(frozen=True)
class ControlPolicy:
    mode: str = "static"
    micro_vehicle_budget: int = 1000
    congestion_on: float = 40.0  # veh/km/lane
    congestion_off: float = 25.0
    control_period: int = 10  # base steps
    shockwave_tracking: bool = False
    release_periods: int = 3  # calm periods before a probe is handed back

    def __post_init__(self):
        errors = []
        if self.mode not in MODES:
            errors.append(f"unknown policy mode {self.mode!r}")
        if not self.congestion_off < self.congestion_on:
            errors.append("congestion_off must be below congestion_on")
        if self.congestion_off < 0:
            errors.append("congestion_off must be non-negative")
        if not (isinstance(self.control_period, int) and self.control_period >= 1):
            errors.append("control_period must be an integer >= 1")
        if not (isinstance(self.release_periods, int) and self.release_periods >= 1):
            errors.append("release_periods must be an integer >= 1")
        if self.micro_vehicle_budget < 0:
            errors.append("micro_vehicle_budget must be non-negative")
        if errors:
            raise ValueError("; ".join(errors))


@dataclass(frozen=True)
class SwitchCommand:
    kind: str
    targets: tuple[str, ...]
    sensor: str | None = None
    direction: str | None = None  # shift only

    def __post_init__(self):
        n = {"to_micro": 1, "to_macro": 1, "merge": 2, "split": 1, "shift": 2}.get(self.kind)
        if n is None:
            raise ValueError(f"unknown command kind {self.kind!r}")
        if len(self.targets) != n:
            raise ValueError(f"{self.kind} takes {n} target cluster(s), got {len(self.targets)}")
        if self.kind == "split" and not self.sensor:
            raise ValueError("split needs a sensor")
        if self.kind == "shift" and self.direction not in ("upstream", "downstream"):
            raise ValueError("shift needs direction 'upstream' or 'downstream'")

    def describe(self) -> str:
        extra = self.sensor or self.direction or "-"
        return f"{self.kind} {','.join(self.targets)} {extra}"


@dataclass(frozen=True)
class ClusterMetrics:
    id: str
    representation: str
    vehicles: float
    densities: tuple[float, ...]  # per segment or per unit, veh/km/lane
    macro_capable: bool = True


@dataclass(frozen=True)
class Snapshot:
    time: float
    clusters: Mapping[str, ClusterMetrics]
    # ordered units along the tracked corridor with their owner and density
    corridor: tuple[tuple[str, str, float], ...] = ()

    @property
    def micro_vehicles(self) -> float:
        return sum(m.vehicles for m in self.clusters.values() if m.representation == "micro")


def detect_congestion(densities: Iterable[float], policy: ControlPolicy, previous: bool = False) -> bool:
    """Hysteresis switch: on at any ``rho >= on``, off once all ``rho <= off``."""
    values = list(densities)
    if not values:
        return False
    if not previous:
        return max(values) >= policy.congestion_on
    return not max(values) <= policy.congestion_off


@dataclass(frozen=True)
class FrontTrack:
    front: int | None  # index along the corridor of the first congested unit
    moves: tuple[tuple[str, str], ...] = ()  # (window edge, direction)


def track_front(densities: Sequence[float], window: tuple[int, int], policy: ControlPolicy) -> FrontTrack:
    """Locate the upstream congestion front and keep it inside the window.

    ``window`` is the inclusive index range of the micro window along the
    corridor.  The front is the congested unit with the steepest density
    rise from its upstream neighbour.  The window grows toward a front that
    comes within one unit of an edge and gives a unit back on the far side
    when it holds three or more units beyond the front.  At most one move
    is returned since every move touches the window cluster.
    """
    best, front = 0.0, None
    for i in range(1, len(densities)):
        if densities[i] >= policy.congestion_on:
            rise = densities[i] - densities[i - 1]
            if rise > best:
                best, front = rise, i
    if front is None:
        return FrontTrack(None)
    w0, w1 = window
    if front - w0 <= 1:
        return FrontTrack(front, (("upstream", "upstream"),))
    if w1 - front <= 0:
        return FrontTrack(front, (("downstream", "downstream"),))
    if w1 - front >= 3:
        return FrontTrack(front, (("downstream", "upstream"),))
    return FrontTrack(front)


@dataclass
class ControllerMemory:
    congested: dict[str, bool] = field(default_factory=dict)
    last_switched: dict[str, int] = field(default_factory=dict)
    probing: set[str] = field(default_factory=set)
    calm: dict[str, int] = field(default_factory=dict)  # calm periods per probe
    period: int = 0


def evaluate_policy(
    snapshot: Snapshot, policy: ControlPolicy, memory: ControllerMemory | None = None
) -> list[SwitchCommand]:
    """Commands for one control period; each cluster is touched at most once."""
    memory = memory if memory is not None else ControllerMemory()
    if policy.mode == "static":
        return []
    congested = {
        cid: detect_congestion(m.densities, policy, memory.congested.get(cid, False))
        for cid, m in snapshot.clusters.items()
    }
    touched: set[str] = set()
    out: list[SwitchCommand] = []

    def recently(cid):
        return memory.last_switched.get(cid) == memory.period - 1

    def emit(cmd: SwitchCommand):
        if touched & set(cmd.targets):
            log.info("dropped %s: cluster already commanded this period", cmd.describe())
            return False
        out.append(cmd)
        touched.update(cmd.targets)
        return True

    clusters = snapshot.clusters
    micro_total = snapshot.micro_vehicles

    if policy.mode in ("jam_probe", "shockwave", "balance"):
        new_probes: set[str] = set()
        # accuracy first: probe congested macro clusters
        for cid in sorted(clusters):
            m = clusters[cid]
            if m.representation != "macro" or not congested[cid] or recently(cid):
                continue
            if policy.mode == "balance" and micro_total + m.vehicles > policy.micro_vehicle_budget:
                room = _demotion_candidate(clusters, congested, touched | {cid}, memory, recently)
                if room is None or micro_total - clusters[room].vehicles + m.vehicles > policy.micro_vehicle_budget:
                    log.info("balance: no room to refine %s", cid)
                    continue
                emit(SwitchCommand("to_macro", (room,)))
                micro_total -= clusters[room].vehicles
            if emit(SwitchCommand("to_micro", (cid,))):
                new_probes.add(cid)
                micro_total += m.vehicles
        # hand back probes whose congestion has cleared
        for cid in sorted(memory.probing):
            m = clusters.get(cid)
            if m is None or m.representation != "micro":
                memory.probing.discard(cid)
                memory.calm.pop(cid, None)
                continue
            memory.calm[cid] = 0 if congested[cid] else memory.calm.get(cid, 0) + 1
            if memory.calm[cid] >= policy.release_periods and not recently(cid) and m.macro_capable:
                if emit(SwitchCommand("to_macro", (cid,))):
                    memory.probing.discard(cid)
                    memory.calm.pop(cid, None)
                    micro_total -= m.vehicles
        memory.probing |= new_probes

    if policy.mode == "shockwave" and policy.shockwave_tracking and snapshot.corridor:
        for cmd in _follow_front(snapshot, policy):
            emit(cmd)

    # budget: demote the busiest calm micro cluster
    if micro_total > policy.micro_vehicle_budget:
        cand = _demotion_candidate(clusters, congested, touched, memory, recently)
        if cand is None:
            log.warning(
                "micro vehicle budget exceeded (%.0f > %d) with no demotable cluster",
                micro_total,
                policy.micro_vehicle_budget,
            )
        else:
            emit(SwitchCommand("to_macro", (cand,)))

    memory.congested = congested
    return out


def _demotion_candidate(clusters, congested, exclude, memory, recently) -> str | None:
    options = [
        m
        for m in clusters.values()
        if m.representation == "micro"
        and m.macro_capable
        and not congested[m.id]
        and m.id not in exclude
        and not recently(m.id)
        and m.vehicles > 0
    ]
    if not options:
        return None
    return min(options, key=lambda m: (-m.vehicles, m.id)).id


def _follow_front(snapshot: Snapshot, policy: ControlPolicy) -> list[SwitchCommand]:
    corridor = snapshot.corridor
    owners = [o for _, o, _ in corridor]
    micro_idx = [i for i, o in enumerate(owners) if snapshot.clusters.get(o) and snapshot.clusters[o].representation == "micro"]
    if not micro_idx:
        return []
    # the first contiguous micro window along the corridor
    w0 = micro_idx[0]
    w1 = w0
    while w1 + 1 < len(owners) and owners[w1 + 1] == owners[w0]:
        w1 += 1
    window = owners[w0]
    track = track_front([d for _, _, d in corridor], (w0, w1), policy)
    cmds = []
    for edge, direction in track.moves:
        j = w0 - 1 if edge == "upstream" else w1 + 1
        if not 0 <= j < len(owners) or owners[j] == OUTSIDE:
            continue
        cmds.append(SwitchCommand("shift", (window, owners[j]), direction=direction))
    return cmds


# ---------------------------------------------------------------------------
# Applying commands


class World(Protocol):
    time: float

    def regroup(self, new: ClusterPartition) -> None: ...


def plan(partition: ClusterPartition, cmd: SwitchCommand) -> ClusterPartition:
    """The partition a command would produce (geometry only)."""
    for cid in cmd.targets:
        if cid not in partition.clusters or cid == OUTSIDE:
            raise PartitionError(f"{cmd.kind}: unknown cluster {cid!r}")
    if cmd.kind == "to_micro":
        return partition.with_representation(cmd.targets[0], "micro")
    if cmd.kind == "to_macro":
        return partition.with_representation(cmd.targets[0], "macro")
    if cmd.kind == "merge":
        a, b = cmd.targets
        return merge_clusters(partition, a, b, partition.clusters[a].representation)
    if cmd.kind == "split":
        return split_cluster(partition, cmd.targets[0], cmd.sensor)
    a, b = cmd.targets
    return shift_boundary(partition, a, b, cmd.direction)


@dataclass
class ApplyResult:
    partition: ClusterPartition
    applied: list[SwitchCommand]
    failed: list[tuple[SwitchCommand, str]]


def apply_commands(partition: ClusterPartition, commands: Sequence[SwitchCommand], world: World) -> ApplyResult:
    """Apply commands in order; a failing command is rolled back alone.

    ``world.regroup`` must either convert every affected cluster state or
    raise without side effects.
    """
    applied, failed = [], []
    for cmd in commands:
        try:
            new = plan(partition, cmd)
            world.regroup(new)
        except (PartitionError, ValueError) as exc:
            log.warning("command %s failed and was rolled back: %s", cmd.describe(), exc)
            failed.append((cmd, str(exc)))
            continue
        partition = new
        applied.append(cmd)
    return ApplyResult(partition, applied, failed)


class Controller:
    """Stateful wrapper: hysteresis memory and the ping-pong guard."""

    def __init__(self, policy: ControlPolicy):
        self.policy = policy
        self.memory = ControllerMemory()

    def step(self, snapshot: Snapshot, partition: ClusterPartition, world: World) -> ApplyResult:
        cmds = evaluate_policy(snapshot, self.policy, self.memory)
        result = apply_commands(partition, cmds, world)
        for cmd in result.applied:
            for cid in cmd.targets:
                self.memory.last_switched[cid] = self.memory.period
        self.memory.period += 1
        return result
