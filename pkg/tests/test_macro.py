import math

import numpy as np
import pytest

from oracles import fd_speed, front_position, metanet_step, rankine_hugoniot
from hybrid_traffic.macro import (
    MacroClusterState,
    MetanetParams,
    Segment,
    capacity,
    equilibrium_speed,
    step_density,
    step_macro_cluster,
    step_ring,
    step_speed,
    uniform_state,
)

P = MetanetParams()


def oracle_kwargs(p: MetanetParams) -> dict:
    return dict(
        T=p.step_h, tau=p.tau_h, eta=p.eta, nu=p.nu, kappa=p.kappa, v_free=p.v_free, rho_crit=p.rho_crit, a_fd=p.a_fd
    )


# -- equilibrium_speed -------------------------------------------------------------


def test_empty_road_free_speed():
    assert equilibrium_speed(0.0, P) == P.v_free


def test_critical_density_speed():
    assert equilibrium_speed(P.rho_crit, P) == pytest.approx(P.v_free * math.exp(-1.0 / P.a_fd), rel=1e-15)


def test_regression_constant_at_60():
    expected = 110.0 * math.exp(-(1 / 1.867) * (60 / 33.5) ** 1.867)
    assert equilibrium_speed(60.0, P) == pytest.approx(expected, rel=1e-14)
    assert equilibrium_speed(60.0, P) == pytest.approx(22.4311, abs=1e-4)


def test_negative_density_rejected():
    with pytest.raises(ValueError):
        equilibrium_speed(-1.0, P)


def test_capacity_is_flow_maximum():
    rho = np.linspace(0, P.rho_max, 20001)
    q = rho * equilibrium_speed(rho, P)
    assert rho[np.argmax(q)] == pytest.approx(P.rho_crit, abs=0.01)
    assert capacity(P) == pytest.approx(q.max(), rel=1e-6)


# -- step_density ---------------------------------------------------------------------


def test_balanced_flows_keep_density():
    rho = np.array([20.0, 20.0, 20.0])
    v = np.full(3, 80.0)
    new, _ = step_density(rho, v, np.full(3, 0.5), 2, P, q_in=20.0 * 80.0 * 2)
    assert np.array_equal(new, rho)


def test_worked_density_update():
    # q_in = 1800, q_out = rho * v = 1440 over 0.5 km, one lane, 10 s
    new, q = step_density([20.0], [72.0], np.array([0.5]), 1, P, q_in=1800.0)
    assert q[0] == 1440.0
    assert new[0] == 22.0


def test_empty_stays_empty():
    new, _ = step_density([0.0, 0.0], [100.0, 100.0], np.full(2, 0.5), 1, P, q_in=0.0)
    assert np.array_equal(new, [0.0, 0.0])


# -- step_speed -------------------------------------------------------------------------


def test_equilibrium_speeds_unchanged():
    rho = np.full(4, 30.0)
    v = np.full(4, equilibrium_speed(30.0, P))
    new = step_speed(rho, v, np.full(4, 0.5), P, v_up=v[0], rho_down=30.0)
    assert np.array_equal(new, v)


def test_relaxation_only():
    p = MetanetParams(tau_h=100.0 / 3600.0)  # T/tau = 0.1
    rho = P.rho_crit * (p.a_fd * math.log(p.v_free / 100.0)) ** (1.0 / p.a_fd)  # V_e = 100
    assert equilibrium_speed(rho, p) == pytest.approx(100.0, rel=1e-12)
    new = step_speed([rho], [80.0], np.array([0.5]), p, v_up=80.0, rho_down=rho)
    assert new[0] == pytest.approx(82.0, rel=1e-12)


def test_anticipation_slows_before_denser_traffic():
    rho = np.array([20.0, 20.0])
    v = np.full(2, equilibrium_speed(20.0, P))
    new = step_speed(rho, v, np.full(2, 0.5), P, v_up=v[0], rho_down=60.0)
    assert new[1] < v[1]
    assert new[0] == v[0]


def test_kernels_match_oracle():
    rng = np.random.default_rng(0)
    rho = rng.uniform(0, 120, 6)
    v = rng.uniform(5, 110, 6)
    L = rng.uniform(0.35, 1.0, 6)
    lanes = rng.integers(1, 4, 6).astype(float)
    r_new, _ = step_density(rho, v, L, lanes, P, 2500.0)
    v_new = step_speed(rho, v, L, P, 70.0, 45.0)
    r_ref, v_ref = metanet_step(rho, v, L, lanes, 2500.0, 70.0, 45.0, **oracle_kwargs(P))
    np.testing.assert_allclose(r_new, r_ref, rtol=1e-12)
    np.testing.assert_allclose(v_new, v_ref, rtol=1e-12)


# -- step_macro_cluster ---------------------------------------------------------------


def test_equilibrium_cluster_is_fixed_point():
    st = uniform_state("c", 4, 0.5, 2, 25.0, P)
    st.inputs, st.outputs = ("in",), ("out",)
    rho0, v0 = st.rho.copy(), st.v.copy()
    q = float(st.flow[0])
    readings = []
    for _ in range(50):
        st, r = step_macro_cluster(st, P, q, float(v0[0]), 25.0)
        readings.append([(x.flow, x.speed) for x in r])
    assert np.array_equal(st.rho, rho0)
    assert np.array_equal(st.v, v0)
    assert all(r == readings[0] for r in readings)


def test_missing_upstream_flow_fails():
    st = uniform_state("c", 2, 0.5, 1, 10.0, P)
    with pytest.raises(ValueError, match="upstream"):
        step_macro_cluster(st, P, float("nan"), None, None)


def test_cluster_conservation_per_step():
    segs = [Segment("r", i * 500.0, (i + 1) * 500.0, 2, "u") for i in range(3)]
    st = MacroClusterState("c", segs, np.full(3, 10.0), np.full(3, 90.0))
    for k in range(200):
        q_in = 3000.0 if 20 <= k < 60 else 1000.0
        before = st.vehicles()
        q_out = float(st.flow[-1])
        st, _ = step_macro_cluster(st, P, q_in, 90.0, None)
        assert st.vehicles() - before == pytest.approx(P.step_h * (q_in - q_out), rel=1e-9, abs=1e-12)


def ring_front_speed(r1=20.0, r2=60.0, n=240, seg_km=0.5, j0=60, jam=140, steps=240, skip=30):
    """Upstream front speed (km/h) of a long jam on a ring, by linear fit.

    The jam is long enough that the rarefaction from its downstream end
    never reaches the tracked front within ``steps``.
    """
    st = uniform_state("ring", n, seg_km, 1, r1, P)
    st.rho[j0 : j0 + jam] = r2
    st.v[:] = equilibrium_speed(st.rho, P)
    ts, xs = [], []
    for k in range(steps):
        st = step_ring(st, P)
        if k >= skip:
            ts.append((k + 1) * P.step_h)
            xs.append(front_position(st.rho, 0.5 * (r1 + r2), j0 - 50, j0 + 20, seg_km))
    return float(np.polyfit(ts, xs, 1)[0])


@pytest.mark.parametrize("r1, r2", [(20.0, 60.0), (15.0, 50.0), (25.0, 70.0)])
def test_ring_shock_speed(r1, r2):
    assert ring_front_speed(r1, r2) == pytest.approx(rankine_hugoniot(r1, r2), rel=0.15)


def test_oracle_fd_matches_package():
    for rho in (0.0, 12.0, 33.5, 80.0):
        assert fd_speed(rho) == pytest.approx(equilibrium_speed(rho, P), rel=1e-14)


def test_parameter_validation():
    with pytest.raises(ValueError, match="tau"):
        MetanetParams(step_h=20 / 3600, tau_h=18 / 3600)
    with pytest.raises(ValueError, match="> 0"):
        MetanetParams(kappa=0.0)
    with pytest.raises(ValueError, match="CFL"):
        P.check_cfl([0.25])
