"""Per-slot physical, queueing, energy and emissions relations.

All functions are numpy-vectorized: leading dimensions are batch axes and
the trailing axis indexes servers (or users where noted), so the same code
serves a single environment, a batch of episodes and a batch of planning
clones.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

LN2 = np.log(2.0)


class OutageError(ArithmeticError):
    """Transmission energy requested for a zero-gain channel at nonzero rate."""


def compute_workload(flops_per_bit, packet_bits, packets):
    """FLOPs needed to process ``packets`` (per user along the last axis)."""
    packets = np.asarray(packets, dtype=float)
    return np.asarray(flops_per_bit, dtype=float) * np.sum(
        np.asarray(packet_bits, dtype=float) * packets, axis=-1)


def compute_delay(kappa, cpu_speed, gpu_speed, workload):
    """Split ``workload`` between CPU (share kappa) and GPU.

    Speeds are in FLOPs/s. Returns ``(tau_o, tau_cpu, tau_gpu)`` where the
    slot's compute delay ``tau_o`` is the slower of the two sides.
    """
    kappa = np.asarray(kappa, dtype=float)
    workload = np.asarray(workload, dtype=float)
    cpu_speed = np.asarray(cpu_speed, dtype=float)
    gpu_speed = np.asarray(gpu_speed, dtype=float)
    if np.any((kappa < 0) | (kappa > 1)) or np.any(np.isnan(kappa)):
        raise ValueError("kappa must lie in [0, 1]")
    cpu_work = kappa * workload
    gpu_work = (1.0 - kappa) * workload
    if np.any((cpu_work > 0) & (cpu_speed <= 0)) or np.any((gpu_work > 0) & (gpu_speed <= 0)):
        raise ValueError("zero compute speed with a nonzero assigned share")
    with np.errstate(divide="ignore", invalid="ignore"):
        tau_c = np.where(cpu_work > 0, cpu_work / np.where(cpu_speed > 0, cpu_speed, 1.0), 0.0)
        tau_g = np.where(gpu_work > 0, gpu_work / np.where(gpu_speed > 0, gpu_speed, 1.0), 0.0)
    return np.maximum(tau_c, tau_g), tau_c, tau_g


def optimal_split(cpu_speed, gpu_speed):
    """CPU share that equalizes both sides' busy time."""
    return cpu_speed / (cpu_speed + gpu_speed)


def compute_energy(alpha, A, beta, B, C, freq, tau):
    """Energy of one compute side busy for ``tau`` seconds at clock ``freq``.

    (alpha*A*f^3 + beta*B + C*f) * tau: dynamic core power, memory power and
    static loss power.
    """
    for name, value in (("alpha", alpha), ("A", A), ("beta", beta), ("B", B), ("C", C)):
        if np.any(np.asarray(value) < 0):
            raise ValueError(f"negative compute-energy parameter {name}")
    freq = np.asarray(freq, dtype=float)
    return (alpha * A * freq ** 3 + beta * B + C * freq) * np.asarray(tau, dtype=float)


def _interference(gain, powers):
    # Every interfering stream reaches user u through u's own coefficient.
    others = np.sum(powers, axis=-1, keepdims=True) - powers
    return gain * np.maximum(others, 0.0)


def downlink_rate(h, powers, bandwidth, noise):
    """Achievable rate (bit/s) of every user; users on the last axis."""
    h = np.asarray(h, dtype=float)
    powers = np.asarray(powers, dtype=float)
    if np.any(powers < 0):
        raise ValueError("transmit powers must be nonnegative")
    gain = h * h
    sinr = powers * gain / (_interference(gain, powers) + noise)
    return bandwidth * np.log2(1.0 + sinr)


def transmission_energy(h, powers, rates, bandwidth, noise, T):
    """Energy spent sending at ``rates``, from inverting the rate expression."""
    h = np.asarray(h, dtype=float)
    powers = np.asarray(powers, dtype=float)
    rates = np.asarray(rates, dtype=float)
    gain = h * h
    if np.any((gain == 0) & (rates > 0)):
        raise OutageError("zero channel gain with nonzero rate")
    safe = np.where(gain > 0, gain, 1.0)
    energy = (_interference(gain, powers) + noise) * T / safe * np.expm1(rates * LN2 / bandwidth)
    return np.where(rates > 0, energy, 0.0)


def total_energy(tx_energy, assignment, e_gpu, e_cpu):
    """Per-server total: transmission of its users plus both compute sides.

    ``assignment`` is the (M, U) 0/1 membership matrix.
    """
    return np.asarray(tx_energy) @ np.asarray(assignment, dtype=float).T + e_gpu + e_cpu


class Dispatch(NamedTuple):
    u: np.ndarray      # renewable drawn (incl. charging)
    u_b: np.ndarray    # renewable used to charge the battery
    g: np.ndarray      # grid drawn (incl. charging)
    g_b: np.ndarray    # grid used to charge the battery
    d: np.ndarray      # battery discharge

    def residual(self, e_tot):
        return self.u - self.u_b + self.g - self.g_b + self.d - e_tot


def dispatch_energy(e_tot, rho_ren, rho_bat, charge_ren, charge_grid, battery, renewable_budget):
    """Split each server's demand across renewable pool, battery and grid.

    Servers draw from the shared renewable pool in index order, asking for
    ``rho_ren`` of their demand; the battery covers ``rho_bat`` of what is
    left (never more than its stored level) and the grid the remainder.
    Renewable charging requests are then served from whatever is left of the
    pool, grid charging requests in full.
    """
    e_tot = np.asarray(e_tot, dtype=float)
    remaining = np.array(renewable_budget, dtype=float) * np.ones(e_tot.shape[:-1])
    M = e_tot.shape[-1]
    ren = np.zeros_like(e_tot)
    u_b = np.zeros_like(e_tot)
    for k in range(M):
        take = np.minimum(rho_ren[..., k] * e_tot[..., k], remaining)
        ren[..., k] = take
        remaining = remaining - take
    residual = e_tot - ren
    d = np.minimum(rho_bat * residual, battery)
    grid = residual - d
    for k in range(M):
        take = np.minimum(charge_ren[..., k], np.maximum(remaining, 0.0))
        u_b[..., k] = take
        remaining = remaining - take
    g_b = np.asarray(charge_grid, dtype=float) * np.ones_like(e_tot)
    return Dispatch(u=ren + u_b, u_b=u_b, g=grid + g_b, g_b=g_b, d=d)


def battery_step(level, dispatch, eta, mu, capacity):
    """Advance battery levels; returns ``(new_level, discarded_charge)``."""
    level = np.asarray(level, dtype=float)
    if np.any(dispatch.d > level * (1 + 1e-12) + 1e-12):
        raise ValueError("battery discharge exceeds stored energy")
    new = eta * (level - dispatch.d) + mu * (dispatch.u_b + dispatch.g_b)
    new = np.maximum(new, 0.0)
    waste = np.maximum(new - capacity, 0.0)
    return np.minimum(new, capacity), waste


def queue_step(omega, rate_sum, n_users, packet_bits, T, arrivals):
    """One slot of a server queue.

    Returns ``(capacity_packets, served, new_omega)``; the server can send
    floor(T * sum-rate / (|M_k| * L_k)) packets this slot.
    """
    omega = np.asarray(omega)
    capacity = np.floor(T * np.asarray(rate_sum) / (np.asarray(n_users) * np.asarray(packet_bits)))
    capacity = capacity.astype(np.int64)
    served = np.minimum(omega, capacity)
    return capacity, served, np.maximum(0, omega - capacity) + np.asarray(arrivals)


def delays(omega_mean, arrival_rate, packet_bits, mean_rates, assignment, tau_o, cap):
    """Per-server queueing, communication and total delay (seconds).

    ``omega_mean`` is the running mean queue length, ``arrival_rate`` the
    server's mean arrival rate in packets/s (Little's law), ``mean_rates``
    the per-user smoothed rates; a zero smoothed rate costs ``cap`` seconds.
    """
    omega_mean = np.asarray(omega_mean, dtype=float)
    arrival_rate = np.asarray(arrival_rate, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        tau_q = np.where(arrival_rate > 0, omega_mean / np.where(arrival_rate > 0, arrival_rate, 1.0), 0.0)
    mean_rates = np.asarray(mean_rates, dtype=float)
    with np.errstate(divide="ignore"):
        per_user = np.where(mean_rates > 0, np.asarray(packet_bits) / np.where(mean_rates > 0, mean_rates, 1.0), cap)
    tau_comm = per_user @ np.asarray(assignment, dtype=float).T
    return tau_q, tau_comm, tau_q + tau_comm + tau_o


def emissions(dispatch, w_u, w_g, w_d):
    """Carbon mass emitted for the energy actually consumed this slot."""
    return (w_u * (dispatch.u - dispatch.u_b) + w_g * (dispatch.g - dispatch.g_b)
            + w_d * dispatch.d)


def sustainability(c, rate_sum, e_tot, w_g, T, previous=None, reference="per_server"):
    """Emissions per bit per server and the network sustainability score.

    Returns ``(c_bit, S, degenerate)`` with S = (1 - sum(c_bit) / ref)^2.
    ``reference="per_server"`` takes ref as the same per-server sum evaluated
    with every joule priced at the grid factor; ``"network"`` uses grid
    factor times network energy over network bits, which only matches the
    numerator when M = 1.

    A server with zero rate and zero emissions contributes zero; zero rate
    with positive emissions marks the slot degenerate and S is carried over
    from ``previous`` (0 if absent). With no energy consumed S is 1.
    """
    c = np.asarray(c, dtype=float)
    rate_sum = np.asarray(rate_sum, dtype=float)
    e_tot = np.asarray(e_tot, dtype=float)
    w_g = np.asarray(w_g, dtype=float)
    bits = T * rate_sum
    has_bits = bits > 0
    safe_bits = np.where(has_bits, bits, 1.0)
    c_bit = np.where(has_bits, c / safe_bits, 0.0)
    degenerate = np.any(~has_bits & (c > 0), axis=-1)
    total_bits = np.sum(bits, axis=-1)
    total_energy = np.sum(e_tot, axis=-1)
    if reference == "per_server":
        ref = np.sum(np.where(has_bits, (w_g[..., None] * e_tot) / safe_bits, 0.0), axis=-1)
    elif reference == "network":
        ref = w_g * total_energy / np.where(total_bits > 0, total_bits, 1.0)
    else:
        raise ValueError(f"unknown reference {reference!r}")
    ratio = np.sum(c_bit, axis=-1) / np.where(ref > 0, ref, 1.0)
    score = (1.0 - ratio) ** 2
    prev = np.zeros_like(score) if previous is None else np.asarray(previous, dtype=float)
    carry = degenerate | (total_bits <= 0)
    score = np.where(carry, prev, score)
    score = np.where((total_energy <= 0) | (ref <= 0) & ~carry, 1.0, score)
    return c_bit, score, degenerate & (total_energy > 0)
