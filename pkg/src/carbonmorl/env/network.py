"""Discrete-time downlink network with CPU/GPU servers and mixed energy supply.

``NetworkEnv`` owns the random streams; ``transition`` is the pure slot
update and is reused by the planner on cloned states. State arrays carry a
leading batch axis (independent episodes or planning clones).
"""
from __future__ import annotations

import csv
import dataclasses
from collections import deque
from dataclasses import dataclass

import numpy as np

from ..config import Config
from . import physics

BLOCKS = ("charge_ren", "charge_grid", "power", "f_cpu", "kappa", "rho_ren", "rho_bat")

TRAJECTORY_COLUMNS = ("t", "k", "C_k_b", "S", "E_tot", "u", "u_b", "g", "g_b", "d",
                      "b_level", "omega", "N_k", "tau_q", "tau_o", "tau_total",
                      "rates_sum", "slack_D1", "slack_D3")


class Network:
    """Static parameters of one network instance, drawn once from the seed."""

    def __init__(self, config: Config, rng=None):
        config.validate()
        self.config = config
        sim, traffic, srv = config.sim, config.traffic, config.servers
        rng = rng if rng is not None else np.random.default_rng(sim.seed)
        self.U, self.M, self.T = sim.U, sim.M, sim.T
        self.sets = config.topology.resolve(sim.U, sim.M)
        self.assignment = np.zeros((self.M, self.U))
        for k, users in enumerate(self.sets):
            self.assignment[k, users] = 1.0
        self.server_of = np.argmax(self.assignment, axis=0)
        self.n_users = self.assignment.sum(axis=1)

        lo, hi = sim.channel_var
        self.channel_var = rng.uniform(lo, hi, size=self.U)

        if traffic.arrival_rate is None:
            rate = rng.uniform(*traffic.rate_range, size=self.U)
        else:
            rate = np.broadcast_to(np.asarray(traffic.arrival_rate, dtype=float), (self.U,)).copy()
        if np.any(rate < 0):
            raise ValueError("arrival rates must be nonnegative")
        self.arrival_rate = rate if traffic.rate_unit == "per_second" else rate / self.T
        self.arrival_mean = self.arrival_rate * self.T   # packets per slot
        self.server_rate = self.assignment @ self.arrival_rate

        self.packet_bits = np.full(self.U, float(traffic.packet_bits))
        self.server_bits = (self.assignment @ self.packet_bits) / self.n_users

        if traffic.flops_per_bit is None:
            self.flops_per_bit = rng.uniform(*traffic.flops_range, size=self.M)
        else:
            self.flops_per_bit = np.broadcast_to(
                np.asarray(traffic.flops_per_bit, dtype=float), (self.M,)).copy()

        self.f_cpu_range = tuple(srv.f_cpu_range)
        self.f_gpu = rng.uniform(*srv.f_gpu_range, size=self.M)
        self.n_cpu, self.n_gpu = srv.flops_per_cycle_cpu, srv.flops_per_cycle_gpu
        self.gpu_speed = self.n_gpu * self.f_gpu
        self.cpu_energy = (srv.A_cpu, srv.B_cpu, srv.C_cpu)
        self.gpu_energy = tuple(srv.gpu_scale * x for x in self.cpu_energy)
        self.alpha, self.beta = srv.alpha, srv.beta

        em = config.emissions
        self.w_renewable = em.renewable_ratio * em.grid_mean
        self.w_battery = em.battery_ratio * em.grid_mean
        self.actions = ActionSpace(self)


@dataclass
class Action:
    charge_ren: np.ndarray
    charge_grid: np.ndarray
    power: np.ndarray
    f_cpu: np.ndarray
    kappa: np.ndarray
    rho_ren: np.ndarray
    rho_bat: np.ndarray


class ActionSpace:
    """Box bounds of the flattened action and its [0, 1] normalization."""

    def __init__(self, net: Network):
        cfg = net.config
        sizes = {"charge_ren": net.M, "charge_grid": net.M, "power": net.U,
                 "f_cpu": net.M, "kappa": net.M, "rho_ren": net.M, "rho_bat": net.M}
        bounds = {"charge_ren": (0.0, cfg.battery.max_charge),
                  "charge_grid": (0.0, cfg.battery.max_charge),
                  "power": (0.0, cfg.sim.P),
                  "f_cpu": net.f_cpu_range,
                  "kappa": (0.0, 1.0), "rho_ren": (0.0, 1.0), "rho_bat": (0.0, 1.0)}
        self.slices, lows, highs, start = {}, [], [], 0
        for name in BLOCKS:
            n = sizes[name]
            self.slices[name] = slice(start, start + n)
            lows.append(np.full(n, bounds[name][0]))
            highs.append(np.full(n, bounds[name][1]))
            start += n
        self.dim = start
        self.low = np.concatenate(lows)
        self.high = np.concatenate(highs)
        self.U = net.U

    def initial_normalized(self):
        """Starting point of a fresh policy: light charging, P/U per user."""
        x = np.full(self.dim, 0.5)
        x[self.slices["charge_ren"]] = 0.05
        x[self.slices["charge_grid"]] = 0.05
        x[self.slices["power"]] = 1.0 / self.U
        return x

    def to_action(self, x01):
        x = np.clip(np.asarray(x01, dtype=float), 0.0, 1.0)
        values = self.low + (self.high - self.low) * x
        return Action(**{name: values[..., sl] for name, sl in self.slices.items()})

    def to_normalized(self, action: Action):
        values = np.concatenate([np.asarray(getattr(action, n), dtype=float) for n in BLOCKS], axis=-1)
        span = np.where(self.high > self.low, self.high - self.low, 1.0)
        return np.clip((values - self.low) / span, 0.0, 1.0)

    def block(self, x, name):
        return np.asarray(x)[..., self.slices[name]]


@dataclass
class EnvState:
    battery: np.ndarray     # (E, M) J
    omega: np.ndarray       # (E, M) packets
    omega_sum: np.ndarray   # (E, M) running sum of queue lengths
    rbar: np.ndarray        # (E, U) smoothed rates
    slot: np.ndarray        # (E,) slots elapsed in episode
    clock: np.ndarray       # (E,) emission-process time index
    phase: np.ndarray       # (E,) hidden diurnal phase offset
    score: np.ndarray       # (E,) last sustainability score
    obs: np.ndarray         # (E, M) emissions per bit

    @property
    def batch(self):
        return self.battery.shape[0]

    def take(self, index):
        return EnvState(**{f.name: getattr(self, f.name)[index].copy()
                           for f in dataclasses.fields(self)})

    def repeat(self, n):
        return EnvState(**{f.name: np.repeat(getattr(self, f.name), n, axis=0)
                           for f in dataclasses.fields(self)})

    def copy(self):
        return self.take(slice(None))


@dataclass
class Exogenous:
    h: np.ndarray         # (E, U) channel coefficients
    arrivals: np.ndarray  # (E, U) packets arriving this slot
    factors: np.ndarray   # (E, 3) emission factors (renewable, grid, battery)

    def repeat(self, n):
        return Exogenous(np.repeat(self.h, n, axis=0), np.repeat(self.arrivals, n, axis=0),
                         np.repeat(self.factors, n, axis=0))


@dataclass
class Slot:
    """Everything measured during one slot (arrays with leading batch axis)."""
    S: np.ndarray
    c_bit: np.ndarray
    emissions: np.ndarray
    e_tot: np.ndarray
    e_tx: np.ndarray
    e_cpu: np.ndarray
    e_gpu: np.ndarray
    rates: np.ndarray
    rate_sum: np.ndarray
    workload: np.ndarray
    capacity: np.ndarray
    served: np.ndarray
    omega: np.ndarray
    arrivals: np.ndarray
    tau_q: np.ndarray
    tau_comm: np.ndarray
    tau_o: np.ndarray
    tau: np.ndarray
    u: np.ndarray
    u_b: np.ndarray
    g: np.ndarray
    g_b: np.ndarray
    d: np.ndarray
    battery: np.ndarray
    waste: np.ndarray
    power_sum: np.ndarray
    slack_D1: np.ndarray
    slack_D2: np.ndarray
    slack_D3: np.ndarray
    slack_D4: np.ndarray
    slack_deadline: np.ndarray
    degenerate: np.ndarray
    factors: np.ndarray
    T: float = 1e-3

    @property
    def emissions_per_bit(self):
        """Network emissions per delivered-capacity bit."""
        return _ratio(self.emissions.sum(-1), self.rate_sum.sum(-1) * self.T)

    @property
    def energy_per_bit(self):
        return _ratio(self.e_tot.sum(-1), self.rate_sum.sum(-1) * self.T)

    @property
    def mean_delay(self):
        return self.tau.mean(-1)


def _ratio(num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def initial_state(net: Network, batch, rng):
    cfg = net.config
    zeros_m = np.zeros((batch, net.M))
    return EnvState(
        battery=np.full((batch, net.M), cfg.battery.initial_fraction * cfg.battery.capacity),
        omega=np.zeros((batch, net.M), dtype=np.int64),
        omega_sum=zeros_m.copy(),
        rbar=np.zeros((batch, net.U)),
        slot=np.zeros(batch, dtype=np.int64),
        clock=np.zeros(batch),
        phase=rng.uniform(0.0, cfg.emissions.period_slots, size=batch),
        score=np.zeros(batch),
        obs=zeros_m.copy(),
    )


def emission_factors(net: Network, clock, phase, noise):
    """Renewable/grid/battery factors for the given process time."""
    em = net.config.emissions
    wave = 1.0 + em.diurnal_amplitude * np.sin(2.0 * np.pi * (clock + phase) / em.period_slots)
    grid = em.grid_mean * np.maximum(wave, 0.0) * np.maximum(1.0 + em.noise * noise, 0.0)
    ones = np.ones_like(grid)
    return np.stack([net.w_renewable * ones, grid, net.w_battery * ones], axis=-1)


def sample_exogenous(net: Network, rngs, state: EnvState):
    """Channels, arrivals and emission factors for the coming slot.

    ``rngs`` maps 'channel', 'arrival' and 'emission' to generators so that
    each process keeps its own stream regardless of the others' parameters.
    """
    E = state.batch
    h = rngs["channel"].standard_normal((E, net.U)) * np.sqrt(net.channel_var)
    arrivals = rngs["arrival"].poisson(net.arrival_mean, size=(E, net.U))
    noise = rngs["emission"].standard_normal(E)
    return Exogenous(h, arrivals, emission_factors(net, state.clock, state.phase, noise))


def transition(net: Network, state: EnvState, action: Action, exo: Exogenous):
    """Advance every batch row one slot. Returns ``(next_state, Slot)``."""
    cfg = net.config
    T, B, N0B = cfg.sim.T, cfg.sim.B, cfg.sim.N0B
    A = net.assignment

    power = np.asarray(action.power, dtype=float)
    rates = physics.downlink_rate(exo.h, power, B, N0B)
    rate_sum = rates @ A.T
    arrivals_k = exo.arrivals @ A.T.astype(np.int64)

    capacity, served, omega_next = physics.queue_step(
        state.omega, rate_sum, net.n_users, net.server_bits, T, arrivals_k)
    workload = physics.compute_workload(net.flops_per_bit, net.server_bits[:, None],
                                        served[..., None])

    f_cpu = np.clip(action.f_cpu, *net.f_cpu_range)
    kappa = np.clip(action.kappa, 0.0, 1.0)
    tau_o, tau_c, tau_g = physics.compute_delay(kappa, net.n_cpu * f_cpu, net.gpu_speed, workload)
    e_cpu = physics.compute_energy(net.alpha, net.cpu_energy[0], net.beta, net.cpu_energy[1],
                                   net.cpu_energy[2], f_cpu, tau_c)
    e_gpu = physics.compute_energy(net.alpha, net.gpu_energy[0], net.beta, net.gpu_energy[1],
                                   net.gpu_energy[2], net.f_gpu, tau_g)

    e_tx = physics.transmission_energy(exo.h, power, rates, B, N0B, T)
    e_tot = physics.total_energy(e_tx, A, e_gpu, e_cpu)

    disp = physics.dispatch_energy(e_tot, action.rho_ren, action.rho_bat, action.charge_ren,
                                   action.charge_grid, state.battery, cfg.sim.Umax)
    battery, waste = physics.battery_step(state.battery, disp, cfg.battery.eta, cfg.battery.mu,
                                          cfg.battery.capacity)

    first = (state.slot == 0)[:, None]
    s = cfg.sim.rate_smoothing
    rbar = np.where(first, rates, (1.0 - s) * state.rbar + s * rates)
    omega_sum = state.omega_sum + state.omega
    slots = state.slot + 1
    tau_q, tau_comm, tau = physics.delays(omega_sum / slots[:, None], net.server_rate,
                                          net.packet_bits, rbar, A, tau_o,
                                          cfg.sim.delay_cap_slots * T)

    w = exo.factors
    c = physics.emissions(disp, w[:, :1], w[:, 1:2], w[:, 2:3])
    c_bit, score, degenerate = physics.sustainability(c, rate_sum, e_tot, w[:, 1], T, state.score,
                                                      cfg.sim.sustainability_reference)

    scale = np.maximum(1.0, e_tot)
    slot = Slot(
        S=score, c_bit=c_bit, emissions=c, e_tot=e_tot, e_tx=e_tx, e_cpu=e_cpu, e_gpu=e_gpu,
        rates=rates, rate_sum=rate_sum, workload=workload, capacity=capacity, served=served,
        omega=state.omega, arrivals=arrivals_k, tau_q=tau_q, tau_comm=tau_comm, tau_o=tau_o,
        tau=tau, u=disp.u, u_b=disp.u_b, g=disp.g, g_b=disp.g_b, d=disp.d, battery=battery,
        waste=waste, power_sum=power.sum(-1),
        slack_D1=disp.u.sum(-1) - cfg.sim.Umax,
        slack_D2=np.abs(disp.residual(e_tot)) - 1e-9 * scale,
        slack_D3=power.sum(-1) - cfg.sim.P,
        slack_D4=np.abs(T * (power @ A.T) + e_gpu + e_cpu - e_tot) - 1e-9 * scale,
        slack_deadline=tau_o - T,
        degenerate=degenerate, factors=w, T=T,
    )
    nxt = EnvState(battery=battery, omega=omega_next, omega_sum=omega_sum, rbar=rbar,
                   slot=slots, clock=state.clock + 1.0, phase=state.phase, score=score,
                   obs=c_bit)
    return nxt, slot


class NetworkEnv:
    """Seeded batch of independent episodes over one network instance."""

    def __init__(self, config: Config, batch=1, seed=None):
        seed = config.sim.seed if seed is None else seed
        streams = np.random.SeedSequence(seed).spawn(5)
        self.net = Network(config, np.random.default_rng(streams[0]))
        self.config = config
        self.batch = batch
        self.rngs = {name: np.random.default_rng(s)
                     for name, s in zip(("channel", "arrival", "emission", "reset"), streams[1:])}
        self.state = None

    @property
    def actions(self):
        return self.net.actions

    def reset(self, carry_clock=True):
        """Fresh episodes; the emission clock keeps running across resets."""
        state = initial_state(self.net, self.batch, self.rngs["reset"])
        if carry_clock and self.state is not None:
            state.clock = self.state.clock.copy()
            state.phase = self.state.phase.copy()
        self.state = state
        return state

    def step(self, action, exo=None):
        if not isinstance(action, Action):
            x = np.broadcast_to(np.asarray(action, dtype=float), (self.batch, self.actions.dim))
            action = self.actions.to_action(x)
        if exo is None:
            exo = sample_exogenous(self.net, self.rngs, self.state)
        self.state, slot = transition(self.net, self.state, action, exo)
        return self.state, slot


class PacketTracker:
    """FIFO bookkeeping of individual packets to measure per-packet sojourn."""

    def __init__(self, M):
        self.queues = [deque() for _ in range(M)]   # [arrival_slot, count]
        self.sojourn_sum = np.zeros(M)
        self.departed = np.zeros(M, dtype=np.int64)
        self.t = 0

    def update(self, served, arrivals):
        """Record one slot: ``served`` leave first, then ``arrivals`` join."""
        for k, q in enumerate(self.queues):
            n = int(served[k])
            while n > 0:
                head = q[0]
                take = min(n, head[1])
                self.sojourn_sum[k] += take * (self.t - head[0])
                self.departed[k] += take
                head[1] -= take
                n -= take
                if head[1] == 0:
                    q.popleft()
            if arrivals[k] > 0:
                q.append([self.t, int(arrivals[k])])
        self.t += 1

    def mean_sojourn_slots(self):
        with np.errstate(invalid="ignore"):
            return self.sojourn_sum / self.departed


def write_trajectory(path, slots, row=0, t0=0):
    """Write one CSV record per slot per server for batch row ``row``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for t, s in enumerate(slots, start=t0):
            for k in range(s.e_tot.shape[-1]):
                writer.writerow([
                    t, k, _fmt(s.c_bit[row, k]), _fmt(s.S[row]), _fmt(s.e_tot[row, k]),
                    _fmt(s.u[row, k]), _fmt(s.u_b[row, k]), _fmt(s.g[row, k]),
                    _fmt(s.g_b[row, k]), _fmt(s.d[row, k]), _fmt(s.battery[row, k]),
                    int(s.omega[row, k]), int(s.capacity[row, k]), _fmt(s.tau_q[row, k]),
                    _fmt(s.tau_o[row, k]), _fmt(s.tau[row, k]), _fmt(s.rate_sum[row, k]),
                    _fmt(s.slack_D1[row]), _fmt(s.slack_D3[row]),
                ])


def _fmt(x):
    return repr(float(x))
