import math

import numpy as np
import pytest

from conftest import CALIBRATED_IDM, partition_of, linear_network
from hybrid_traffic.coupling import (
    DisaggregationError,
    GenerationSchedule,
    SensorReading,
    aggregate_micro_to_macro,
    apportion,
    calibrate_idm,
    disaggregate_macro_to_micro,
    idm_speed_curve,
    macro_shell,
    record_sensor,
    schedule_generation,
    warm_up_ring,
)
from hybrid_traffic.macro import MacroClusterState, MetanetParams, Segment, equilibrium_speed
from hybrid_traffic.micro import CrossingEvent, IdmParams, Vehicle

P = MetanetParams()
IDM = IdmParams(**CALIBRATED_IDM)


def one_segment(rho=0.0, v=None, length=500.0, lanes=2, n=1):
    segs = [Segment("r", i * length, (i + 1) * length, lanes, "u") for i in range(n)]
    rho = np.broadcast_to(np.asarray(rho, float), (n,)).copy()
    v = equilibrium_speed(rho, P) if v is None else np.broadcast_to(np.asarray(v, float), (n,)).copy()
    return MacroClusterState("c", segs, rho, np.asarray(v, float))


def segment_counts(vehicles, state):
    out = np.zeros(len(state.segments), dtype=int)
    for veh in vehicles:
        for i, s in enumerate(state.segments):
            if veh.road == s.road and s.start <= veh.pos < s.end:
                out[i] += 1
    return out


# -- aggregate_micro_to_macro ---------------------------------------------------------


def test_aggregate_worked_example():
    shell = one_segment()
    vehicles = [Vehicle(i, "r", i % 2, 20.0 + 45.0 * i, 25.0) for i in range(10)]
    st = aggregate_micro_to_macro(vehicles, shell, P)
    assert st.rho[0] == 10.0
    assert st.v[0] == 90.0
    assert st.flow[0] == 1800.0


def test_aggregate_empty_cluster():
    st = aggregate_micro_to_macro([], one_segment(n=3), P)
    assert np.array_equal(st.rho, np.zeros(3))
    assert np.array_equal(st.v, np.full(3, P.v_free))
    assert np.array_equal(st.flow, np.zeros(3))


def test_aggregate_rejects_vehicle_off_geometry():
    with pytest.raises(ValueError, match="outside"):
        aggregate_micro_to_macro([Vehicle(1, "other", 0, 1.0, 1.0)], one_segment(), P)


def test_shell_tiles_cluster_units():
    part = partition_of(linear_network(3000, (0, 1000, 2000, 3000)))
    shell = macro_shell("R2", part.topology, part.clusters["R2"].units, P)
    assert sum(s.end - s.start for s in shell.segments) == pytest.approx(1000.0)
    assert shell.inputs == ("S1",) and shell.outputs == ("S2",)


# -- disaggregate_macro_to_micro ---------------------------------------------------


def test_zero_density_gives_no_vehicles():
    vehicles, delta = disaggregate_macro_to_micro(one_segment(0.0, n=4), np.random.default_rng(0), IDM)
    assert vehicles == [] and delta == 0.0


def test_infeasible_density_fails():
    # 1000 / 150 = 6.7 m per vehicle < 5 m body + 2.685 m s0
    with pytest.raises(DisaggregationError):
        disaggregate_macro_to_micro(one_segment(150.0, 5.0), np.random.default_rng(0), IDM)


def test_counts_follow_largest_remainder():
    st = one_segment([10.3, 20.4, 5.3], n=3)  # masses 10.3, 20.4, 5.3 veh per km-lane * 1 km
    vehicles, delta = disaggregate_macro_to_micro(st, np.random.default_rng(1), IDM)
    masses = st.rho * st.lengths * st.lanes
    assert list(segment_counts(vehicles, st)) == list(apportion(masses))
    assert delta == pytest.approx(len(vehicles) - masses.sum())


@pytest.mark.parametrize("rho", [8.0, 20.0, 30.0])
def test_warm_up_keeps_equilibrium_speed(rho):
    # start at the IDM fixed point for this density: the sandbox should barely move it
    v = float(idm_speed_curve(IDM, [rho])[0])
    st = one_segment(rho, v, length=1000.0, lanes=1)
    vehicles, _ = disaggregate_macro_to_micro(st, np.random.default_rng(2), IDM, warmup_s=30.0)
    mean = np.mean([x.speed for x in vehicles]) * 3.6
    assert abs(mean - v) / v < 0.02


@pytest.mark.parametrize("seed", range(5))
def test_round_trip(seed):
    rng = np.random.default_rng(seed)
    rho = rng.uniform(5.0, 40.0, 4)
    st = one_segment(rho, n=4)
    vehicles, _ = disaggregate_macro_to_micro(st, rng, IDM, warmup_s=30.0)
    back = aggregate_micro_to_macro(vehicles, st, P)
    expected = apportion(st.rho * st.lengths * st.lanes) / (st.lengths * st.lanes)
    assert np.array_equal(back.rho, expected)
    np.testing.assert_allclose(back.v, st.v, rtol=0.05)


def test_warm_up_ring_is_private():
    x0 = np.array([10.0, 60.0, 120.0])
    v0 = np.array([10.0, 12.0, 8.0])
    xs, vs = x0.copy(), v0.copy()
    x, v = warm_up_ring(x0, v0, 300.0, IDM, 5.0, 0.5, 60)
    assert np.array_equal(x0, xs) and np.array_equal(v0, vs)
    assert len(x) == 3 and np.all((x >= 5.0) & (x < 300.0))


# -- schedule_generation ---------------------------------------------------------------


def reading(flow, speed=25.0):
    return SensorReading("S", 0.0, 60.0, flow, speed, flow / 60.0)


def test_single_lane_headway():
    sched = schedule_generation(reading(1800.0), 1)
    assert sched.mean_headways == (2.0,)
    assert sched.speed == 25.0


def test_zero_flow_is_empty():
    sched = schedule_generation(reading(0.0), 2)
    assert sched.total_rate == 0.0
    assert sched.sample(0.0, 3600.0, np.random.default_rng(0)) == []


def test_equal_lanes_split_evenly():
    assert schedule_generation(reading(1800.0), 2).lane_rates == (900.0, 900.0)


def test_zero_lanes_rejected():
    with pytest.raises(ValueError):
        schedule_generation(reading(1800.0), 0)


def test_empirical_rate_over_many_intervals():
    sched = GenerationSchedule((1200.0, 600.0), 25.0)
    rng = np.random.default_rng(12345)
    n = sum(len(sched.sample(k * 10.0, (k + 1) * 10.0, rng)) for k in range(10_000))
    rate = n / (10_000 * 10.0) * 3600.0
    assert abs(rate - 1800.0) / 1800.0 < 0.02


def test_place_exact_count():
    out = GenerationSchedule((900.0, 900.0), 20.0).place(7, 0.0, 10.0, np.random.default_rng(0))
    assert len(out) == 7
    assert [t for t, _ in out] == sorted(t for t, _ in out)


# -- record_sensor ------------------------------------------------------------------


def test_empty_interval_carries_speed_forward():
    r = record_sensor([], "S", (0.0, 60.0), previous_speed=21.5)
    assert (r.count, r.flow, r.speed) == (0, 0.0, 21.5)


def test_ten_events_in_twenty_seconds():
    events = [CrossingEvent(i, "S", 25.0, 2.0 * i) for i in range(10)]
    r = record_sensor(events, "S", (0.0, 20.0))
    assert r.flow == 1800.0
    assert r.speed == 25.0
    assert r.speed_kmh == 90.0


def test_mean_is_arithmetic_and_filtered():
    events = [CrossingEvent(1, "S", 20.0, 1.0), CrossingEvent(2, "S", 30.0, 2.0), CrossingEvent(3, "T", 5.0, 3.0)]
    r = record_sensor(events + [CrossingEvent(4, "S", 1.0, 20.0)], "S", (0.0, 20.0))
    assert r.count == 2 and r.speed == 25.0


# -- apportion / calibration ------------------------------------------------------------


def test_apportion_preserves_rounded_total():
    m = [0.4, 0.4, 0.4, 1.8]
    out = apportion(m)
    assert out.sum() == round(sum(m)) == 3
    assert list(out) == [1, 0, 0, 2]  # remainders .4 .4 .4 .8; ties to the lowest index


def test_calibrated_idm_tracks_fundamental_diagram():
    fit = calibrate_idm(P)
    rho = np.linspace(5.0, 45.0, 9)
    err = np.abs(idm_speed_curve(fit, rho) / equilibrium_speed(rho, P) - 1.0)
    assert err.max() < 0.05
    assert math.isclose(fit.v0, CALIBRATED_IDM["v0"], rel_tol=0.01)
