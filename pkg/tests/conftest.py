"""Shared builders for small networks and scenarios."""

from __future__ import annotations

import sys
from pathlib import Path

import pytest
import yaml

from hybrid_traffic.network import build_network, derive_sensor_graph, minimal_cut
from hybrid_traffic.scenario import parse_scenario

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"
sys.path.insert(0, str(Path(__file__).resolve().parent))

CALIBRATED_IDM = {"v0": 30.04, "T": 1.164, "s0": 2.685, "a": 1.0, "b": 1.5, "delta": 4}
METANET = {"tau_s": 18, "eta": 0.6, "nu": 35, "kappa": 13, "v_free": 110, "rho_crit": 33.5, "a_fd": 1.867, "rho_max": 180}


def linear_network(length=3000.0, sensors=(0.0, 1000.0, 2000.0, 3000.0), lanes=2) -> dict:
    """One road from an entry to an exit node with sensors S0, S1, ..."""
    return {
        "nodes": [{"id": "in", "kind": "network_entry"}, {"id": "out", "kind": "network_exit"}],
        "roads": [{"id": "main", "from": "in", "to": "out", "length": length, "lanes": lanes}],
        "sensors": [{"id": f"S{i}", "road": "main", "position": p} for i, p in enumerate(sensors)],
    }


def highway_network(n_regions: int = 11, spacing: float = 4780.0 / 11) -> dict:
    length = spacing * n_regions
    return linear_network(length, tuple(i * spacing for i in range(n_regions + 1)))


def partition_of(definition: dict):
    return minimal_cut(derive_sensor_graph(build_network(definition)))


def scenario_text(
    network: dict | None = None,
    clusters=None,
    default: str = "macro",
    inputs=None,
    policy=None,
    **simulation,
) -> str:
    sim = {"duration_s": 600, "step_s": 10, "substeps": 20, "seed": 1, "warmup_s": 30, "aggregation_s": 60}
    sim.update(simulation)
    doc = {
        "simulation": sim,
        "idm": dict(CALIBRATED_IDM),
        "mobil": {"politeness": 0.5, "threshold": 0.2, "b_safe": 4.0},
        "metanet": dict(METANET),
        "network": network or linear_network(),
        "partition": {"default": default, "clusters": clusters or []},
        "inputs": inputs if inputs is not None else [
            {"id": "demand", "kind": "flow_mass", "road": "main", "position": 0, "flow": 1200, "speed": 25}
        ],
        "policy": policy or {"mode": "static"},
    }
    return yaml.safe_dump(doc, sort_keys=False)


def make_scenario(**kw):
    return parse_scenario(scenario_text(**kw))


@pytest.fixture
def corridor_scenario():
    """Micro, macro, micro on a 3 km two-lane road."""
    return make_scenario(
        clusters=[
            {"id": "A", "units": ["R1"], "representation": "micro"},
            {"id": "B", "units": ["R2"], "representation": "macro"},
            {"id": "C", "units": ["R3"], "representation": "micro"},
        ]
    )


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
