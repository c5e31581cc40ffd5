import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carbonmorl.env import physics
from carbonmorl.env.physics import Dispatch, OutageError


# -- workload / compute ------------------------------------------------------

def test_workload_two_users_one_packet_each():
    w = physics.compute_workload(1e7, np.array([1000.0, 1000.0]), np.array([1, 1]))
    assert w == pytest.approx(2e10, rel=1e-15)


def test_workload_empty_and_linear():
    assert physics.compute_workload(1e7, np.array([1000.0]), np.array([0])) == 0.0
    a = physics.compute_workload(1e7, np.array([1000.0, 500.0]), np.array([2, 3]))
    b = physics.compute_workload(1e7, np.array([2000.0, 1000.0]), np.array([2, 3]))
    assert b == pytest.approx(2 * a, rel=1e-15)


def test_compute_delay_hand_example():
    tau_o, tau_c, tau_g = physics.compute_delay(0.5, 4e9, 2e10, 1e9)
    assert tau_c == pytest.approx(0.125)
    assert tau_g == pytest.approx(0.025)
    assert tau_o == pytest.approx(0.125)


def test_compute_delay_all_gpu_and_equalized():
    tau_o, tau_c, _ = physics.compute_delay(0.0, 4e9, 2e10, 1e9)
    assert tau_c == 0.0 and tau_o == pytest.approx(1e9 / 2e10)
    k = physics.optimal_split(4e9, 2e10)
    assert k == pytest.approx(1 / 6)
    tau_o, tau_c, tau_g = physics.compute_delay(k, 4e9, 2e10, 1e9)
    assert tau_c == pytest.approx(tau_g) and tau_o == pytest.approx(1e9 / 2.4e10, rel=1e-12)
    assert tau_o == pytest.approx(0.04167, abs=1e-5)


def test_compute_delay_conventions_and_errors():
    assert physics.compute_delay(0.3, 1e9, 1e9, 0.0)[0] == 0.0
    assert physics.compute_delay(1.0, 1e9, 1e9, 1e9)[2] == 0.0
    with pytest.raises(ValueError):
        physics.compute_delay(1.2, 1e9, 1e9, 1.0)
    with pytest.raises(ValueError):
        physics.compute_delay(-0.1, 1e9, 1e9, 1.0)
    with pytest.raises(ValueError):
        physics.compute_delay(0.5, 0.0, 1e9, 1.0)


def test_compute_energy_examples():
    assert physics.compute_energy(1, 2, 1, 3, 4, 1.0, 2.0) == pytest.approx(18.0)
    assert physics.compute_energy(0, 2, 0, 3, 0, 5.0, 2.0) == 0.0
    e1 = physics.compute_energy(0.5, 1e-28, 0.5, 1, 1e-10, 2.5e9, 0.1)
    e2 = physics.compute_energy(0.5, 1e-28, 0.5, 1, 1e-10, 2.5e9, 0.2)
    assert e2 == pytest.approx(2 * e1, rel=1e-15)
    with pytest.raises(ValueError):
        physics.compute_energy(0.5, -1.0, 0.5, 1, 1, 1.0, 1.0)


# -- rates and transmission energy --------------------------------------------

def test_rate_examples():
    assert physics.downlink_rate(np.array([1.0]), np.array([0.0]), 5e6, 0.1)[0] == 0.0
    # single user with SNR 1
    assert physics.downlink_rate(np.array([1.0]), np.array([1.0]), 5e6, 1.0)[0] == pytest.approx(5e6)
    r = physics.downlink_rate(np.array([1.0, 1.0]), np.array([1.0, 1.0]), 7.0, 1.0)
    np.testing.assert_allclose(r, 7.0 * math.log2(1.5), rtol=1e-15)


def test_rate_interference_uses_own_coefficient():
    h = np.array([2.0, 0.5, 1.0])
    p = np.array([0.2, 0.3, 0.5])
    r = physics.downlink_rate(h, p, 1.0, 0.1)
    for u in range(3):
        g = h[u] ** 2
        expected = math.log2(1 + p[u] * g / (g * (p.sum() - p[u]) + 0.1))
        assert r[u] == pytest.approx(expected, rel=1e-14)


def test_transmission_energy_examples():
    e = physics.transmission_energy(np.array([1.0]), np.array([0.0]), np.array([1.0]), 1.0, 1.0, 1.0)
    assert e[0] == pytest.approx(1.0)
    assert physics.transmission_energy(np.array([1.0]), np.array([1.0]), np.array([0.0]),
                                       1.0, 1.0, 1.0)[0] == 0.0
    with pytest.raises(OutageError):
        physics.transmission_energy(np.array([0.0]), np.array([1.0]), np.array([1.0]), 1.0, 1.0, 1.0)
    # outage with zero rate costs nothing
    assert physics.transmission_energy(np.array([0.0]), np.array([1.0]), np.array([0.0]),
                                       1.0, 1.0, 1.0)[0] == 0.0


@settings(max_examples=200, deadline=None)
@given(h=st.floats(0.05, 3.0), p=st.floats(1e-4, 1.0), others=st.floats(0.0, 2.0),
       noise=st.floats(1e-3, 1.0))
def test_rate_energy_round_trip(h, p, others, noise):
    hs = np.array([h, 1.0])
    ps = np.array([p, others])
    r = physics.downlink_rate(hs, ps, 5e6, noise)
    e = physics.transmission_energy(hs, ps, r, 5e6, noise, 1e-2)
    assert e[0] == pytest.approx(p * 1e-2, rel=1e-9)


def test_total_energy():
    A = np.array([[1, 1, 0], [0, 0, 1]])
    tot = physics.total_energy(np.array([1.0, 2.0, 5.0]), A, np.array([2.0, 0.0]), np.array([1.0, 0.0]))
    np.testing.assert_allclose(tot, [6.0, 5.0])
    assert physics.total_energy(np.zeros(3), A, np.zeros(2), np.zeros(2)).sum() == 0.0


# -- dispatch / battery ----------------------------------------------------------

def _dispatch(e, rho_ren, rho_bat, battery, budget=1e9, cr=0.0, cg=0.0):
    one = np.ones(1)
    return physics.dispatch_energy(np.array([e]), rho_ren * one, rho_bat * one, cr * one,
                                   cg * one, battery * one, budget)


def test_dispatch_rule_example():
    d = _dispatch(10.0, 0.4, 0.5, 100.0)
    assert d.u[0] - d.u_b[0] == pytest.approx(4.0)
    assert d.d[0] == pytest.approx(3.0)
    assert d.g[0] - d.g_b[0] == pytest.approx(3.0)
    assert d.residual(np.array([10.0]))[0] == pytest.approx(0.0, abs=1e-12)


def test_dispatch_full_renewable_and_empty_battery():
    d = _dispatch(7.0, 1.0, 0.3, 100.0)
    assert d.u[0] - d.u_b[0] == 7.0 and d.g[0] - d.g_b[0] == 0.0 and d.d[0] == 0.0
    d = _dispatch(7.0, 0.0, 1.0, 0.0)
    assert d.d[0] == 0.0 and d.g[0] == pytest.approx(7.0)


def test_dispatch_shared_pool_in_server_order():
    e = np.array([5.0, 5.0, 5.0])
    d = physics.dispatch_energy(e, np.ones(3), np.zeros(3), np.ones(3), np.zeros(3), np.zeros(3), 8.0)
    np.testing.assert_allclose(d.u - d.u_b, [5.0, 3.0, 0.0])
    np.testing.assert_allclose(d.u_b, 0.0)     # pool exhausted before charging
    np.testing.assert_allclose(d.g, [0.0, 2.0, 5.0])


@settings(max_examples=300, deadline=None)
@given(e=st.lists(st.floats(0.0, 50.0), min_size=1, max_size=5),
       seed=st.integers(0, 2**31 - 1), budget=st.floats(0.0, 100.0))
def test_dispatch_balance_and_bounds(e, seed, budget):
    rng = np.random.default_rng(seed)
    e = np.array(e)
    M = len(e)
    battery = rng.uniform(0, 20, M)
    d = physics.dispatch_energy(e, rng.uniform(size=M), rng.uniform(size=M),
                                rng.uniform(0, 3, M), rng.uniform(0, 3, M), battery, budget)
    assert np.all(np.abs(d.residual(e)) <= 1e-9 * np.maximum(1.0, e))
    assert d.u.sum() <= budget + 1e-9
    assert np.all(d.d <= battery) and np.all(d.d >= 0)
    for part in d:
        assert np.all(part >= 0)


def test_battery_examples():
    keep = Dispatch(*(np.zeros(1) for _ in range(5)))
    new, waste = physics.battery_step(np.array([123.0]), keep, 1.0, 1.0, 1e4)
    assert new[0] == 123.0 and waste[0] == 0.0
    disp = Dispatch(u=np.array([50.0]), u_b=np.array([50.0]), g=np.zeros(1), g_b=np.zeros(1),
                    d=np.array([100.0]))
    new, _ = physics.battery_step(np.array([1000.0]), disp, 0.9999, 0.9, 1e4)
    assert new[0] == pytest.approx(944.91, rel=1e-12)
    full = Dispatch(u=np.zeros(1), u_b=np.zeros(1), g=np.array([500.0]), g_b=np.array([500.0]),
                    d=np.zeros(1))
    new, waste = physics.battery_step(np.array([900.0]), full, 1.0, 1.0, 1000.0)
    assert new[0] == 1000.0 and waste[0] == pytest.approx(400.0)
    with pytest.raises(ValueError):
        physics.battery_step(np.array([1.0]), disp, 1.0, 1.0, 1e4)


# -- queue / delays ------------------------------------------------------------------

def test_queue_examples():
    cap, served, new = physics.queue_step(np.array([0]), np.array([2e6]), np.array([2]),
                                          np.array([1000.0]), 1.0, np.array([0]))
    assert cap[0] == 1000
    cap, served, new = physics.queue_step(np.array([5]), np.array([3000.0]), np.array([1]),
                                          np.array([1000.0]), 1.0, np.array([2]))
    assert cap[0] == 3 and served[0] == 3 and new[0] == 4
    _, served, new = physics.queue_step(np.array([3]), np.array([1e4]), np.array([1]),
                                        np.array([1000.0]), 1.0, np.array([0]))
    assert new[0] == 0 and served[0] == 3


def test_delay_examples():
    A = np.array([[1.0]])
    tq, _, _ = physics.delays(np.array([10.0]), np.array([5.0]), np.array([1000.0]),
                              np.array([1e6]), A, np.array([0.0]), 1.0)
    assert tq[0] == pytest.approx(2.0)
    # tau_q = 1 s, L/R = 0.5 s, tau_o = 0.25 s
    _, _, tau = physics.delays(np.array([4.0]), np.array([4.0]), np.array([1000.0]),
                               np.array([2000.0]), A, np.array([0.25]), 1.0)
    assert tau[0] == pytest.approx(1.75)
    tq, _, _ = physics.delays(np.array([0.0]), np.array([4.0]), np.array([1000.0]),
                              np.array([2000.0]), A, np.array([0.0]), 1.0)
    assert tq[0] == 0.0


def test_delay_cap_for_zero_rate():
    _, comm, _ = physics.delays(np.array([0.0]), np.array([1.0]), np.array([1000.0]),
                                np.array([0.0]), np.array([[1.0]]), np.array([0.0]), 0.1)
    assert comm[0] == 0.1


# -- emissions / sustainability --------------------------------------------------------

def test_emissions_example():
    d = Dispatch(u=np.array([4.0]), u_b=np.zeros(1), g=np.array([3.0]), g_b=np.zeros(1),
                 d=np.array([3.0]))
    assert physics.emissions(d, 0.1, 1.0, 0.2)[0] == pytest.approx(4.0)
    assert physics.emissions(d, 0.0, 0.0, 0.0)[0] == 0.0
    grid = Dispatch(u=np.zeros(1), u_b=np.zeros(1), g=np.array([5.0]), g_b=np.array([1.0]),
                    d=np.zeros(1))
    assert physics.emissions(grid, 0.3, 2.0, 0.7)[0] == pytest.approx(8.0)


def _score(c, rate, e, w_g=1.0, T=1.0, **kw):
    return physics.sustainability(np.array(c, float), np.array(rate, float), np.array(e, float),
                                  np.array(w_g), T, **kw)


def test_sustainability_single_server_identities():
    # all grid: c = w_g * E
    _, S, _ = _score([3.0], [2.0], [3.0])
    assert S == 0.0
    _, S, _ = _score([0.0], [2.0], [3.0])
    assert S == 1.0
    _, S, _ = _score([1.5], [2.0], [3.0])     # half grid, half renewable with w_u = 0
    assert S == pytest.approx(0.25)
    c_bit, _, _ = _score([4.0], [2.0], [3.0], T=0.5)
    assert c_bit[0] == pytest.approx(4.0)


def test_sustainability_network_reference_matches_formula():
    c, rate, e = [1.0, 2.0], [1.0, 3.0], [2.0, 2.0]
    c_bit, S, _ = _score(c, rate, e, reference="network")
    ref = 1.0 * 4.0 / 4.0
    assert S == pytest.approx((1 - (1.0 + 2.0 / 3.0) / ref) ** 2)


def test_sustainability_zero_rate_conventions():
    c_bit, S, deg = _score([0.0, 1.0], [0.0, 2.0], [0.0, 2.0])
    assert c_bit[0] == 0.0 and not deg
    _, S, deg = _score([1.0, 1.0], [0.0, 2.0], [1.0, 2.0], previous=np.array(0.42))
    assert deg and S == 0.42
    _, S, _ = _score([0.0], [0.0], [0.0])
    assert S == 1.0


@settings(max_examples=200, deadline=None)
@given(wg=st.floats(0.1, 10.0), scale=st.floats(1.01, 5.0), seed=st.integers(0, 10**6))
def test_emissions_per_bit_monotone_in_grid_factor(wg, scale, seed):
    rng = np.random.default_rng(seed)
    d = Dispatch(*(rng.uniform(0, 5, 3) for _ in range(5)))
    d = d._replace(u_b=np.minimum(d.u_b, d.u), g_b=np.minimum(d.g_b, d.g))
    rates = rng.uniform(1, 5, 3)
    lo = physics.emissions(d, 0.1, wg, 0.2) / rates
    hi = physics.emissions(d, 0.1, wg * scale, 0.2) / rates
    assert np.all(hi >= lo)


@settings(max_examples=100, deadline=None)
@given(a=st.floats(0.0, 1.0), b=st.floats(0.0, 1.0))
def test_score_nonincreasing_below_reference(a, b):
    lo, hi = sorted((a, b))
    _, s_lo, _ = _score([lo * 3.0], [1.0], [3.0])
    _, s_hi, _ = _score([hi * 3.0], [1.0], [3.0])
    assert s_hi <= s_lo + 1e-15
