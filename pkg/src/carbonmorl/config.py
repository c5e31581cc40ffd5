"""Simulation configuration.

Defaults reproduce the reference parameter table (battery coefficients,
renewable capacity, power budget, user/server counts, bandwidth, clock
ranges and FLOPs-per-bit range). Everything else is a documented desk-scale
choice and can be overridden from a YAML file whose sections mirror the
dataclasses below.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

KWH = 3.6e6  # J


class ConfigError(ValueError):
    """Raised for invalid or unreadable configuration."""


@dataclass
class SimConfig:
    T: float = 1e-2              # slot duration (s)
    U: int = 10                  # users
    M: int = 4                   # compute servers
    B: float = 5e6               # bandwidth (Hz)
    N0B: float = 0.1             # noise power (W): 10 dB SNR at unit channel gain
    P: float = 1.0               # total transmit power budget (W)
    Umax: float = 1.00 * KWH     # shared renewable capacity per slot (J)
    horizon: int = 200           # slots per episode
    seed: int = 0
    channel_var: tuple = (0.8, 1.2)
    rate_smoothing: float = 0.05
    delay_cap_slots: float = 10.0
    sustainability_reference: str = "per_server"   # or "network"

    def validate(self):
        if self.T <= 0:
            raise ConfigError("sim.T must be positive")
        if self.U < 1 or self.M < 1:
            raise ConfigError("sim.U and sim.M must be >= 1")
        if self.M > self.U:
            raise ConfigError(f"sim.M ({self.M}) must not exceed sim.U ({self.U})")
        for name in ("B", "N0B", "P"):
            if getattr(self, name) < 0:
                raise ConfigError(f"sim.{name} must be nonnegative")
        if self.Umax <= 0:
            raise ConfigError("sim.Umax must be positive")
        lo, hi = self.channel_var
        if not 0 < lo <= hi:
            raise ConfigError("sim.channel_var must be a positive range")
        if self.sustainability_reference not in ("per_server", "network"):
            raise ConfigError("sim.sustainability_reference must be 'per_server' or 'network'")


@dataclass
class TopologyConfig:
    # assignment[k] = users served by server k; None -> contiguous blocks
    assignment: list | None = None

    def resolve(self, U, M):
        if self.assignment is None:
            return [list(map(int, b)) for b in np.array_split(np.arange(U), M)]
        sets = [list(map(int, s)) for s in self.assignment]
        if len(sets) != M:
            raise ConfigError(f"topology.assignment has {len(sets)} sets, expected {M}")
        flat = [u for s in sets for u in s]
        if any(len(s) == 0 for s in sets):
            raise ConfigError("topology.assignment: every server needs at least one user")
        if sorted(flat) != list(range(U)):
            raise ConfigError("topology.assignment must partition users 0..U-1")
        return sets


@dataclass
class TrafficConfig:
    # Per-user mean arrival rate. A scalar fixes every user; None draws each
    # user's rate uniformly from rate_range at construction.
    arrival_rate: float | list | None = None
    rate_range: tuple = (1.0, 30.0)
    rate_unit: str = "per_second"    # or "per_slot"
    packet_bits: int = 1000
    flops_per_bit: float | list | None = None
    flops_range: tuple = (5e6, 15e6)

    def validate(self):
        if self.rate_unit not in ("per_second", "per_slot"):
            raise ConfigError("traffic.rate_unit must be 'per_second' or 'per_slot'")
        if int(self.packet_bits) != self.packet_bits or self.packet_bits <= 0:
            raise ConfigError("traffic.packet_bits must be a positive integer")


@dataclass
class ServerConfig:
    flops_per_cycle_cpu: float = 8.0
    flops_per_cycle_gpu: float = 64.0
    f_cpu_range: tuple = (2e9, 3e9)
    f_gpu_range: tuple = (10e9, 12e9)
    A_cpu: float = 1e-28
    B_cpu: float = 1.0
    C_cpu: float = 1e-10
    gpu_scale: float = 4.0       # GPU constants = gpu_scale * CPU constants
    alpha: float = 0.5
    beta: float = 0.5

    def validate(self):
        for name in ("A_cpu", "B_cpu", "C_cpu", "gpu_scale",
                     "flops_per_cycle_cpu", "flops_per_cycle_gpu"):
            if getattr(self, name) < 0:
                raise ConfigError(f"servers.{name} must be nonnegative")
        for name in ("alpha", "beta"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"servers.{name} must lie in [0, 1]")
        for name in ("f_cpu_range", "f_gpu_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"servers.{name} must be a positive, nonempty range")


@dataclass
class BatteryConfig:
    eta: float = 0.9999
    mu: float = 0.900
    capacity: float = 2.0 * KWH
    initial_fraction: float = 0.5
    max_charge: float = 1.0      # per-slot charging request bound (J)

    def validate(self):
        if not 0 < self.eta <= 1 or not 0 < self.mu <= 1:
            raise ConfigError("battery.eta and battery.mu must lie in (0, 1]")
        if self.capacity < 0 or self.max_charge < 0:
            raise ConfigError("battery.capacity and battery.max_charge must be nonnegative")
        if not 0 <= self.initial_fraction <= 1:
            raise ConfigError("battery.initial_fraction must lie in [0, 1]")


@dataclass
class EmissionConfig:
    grid_mean: float = 1.4e-7        # kg CO2 / J
    diurnal_amplitude: float = 0.3
    noise: float = 0.05
    period_slots: float = 2000.0
    renewable_ratio: float = 0.05    # w_u as a fraction of grid_mean
    battery_ratio: float = 0.15      # w_d as a fraction of grid_mean

    def validate(self):
        if min(self.grid_mean, self.diurnal_amplitude, self.noise,
               self.renewable_ratio, self.battery_ratio) < 0:
            raise ConfigError("emissions parameters must be nonnegative")
        if self.period_slots <= 0:
            raise ConfigError("emissions.period_slots must be positive")


@dataclass
class Config:
    sim: SimConfig = field(default_factory=SimConfig)
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    servers: ServerConfig = field(default_factory=ServerConfig)
    battery: BatteryConfig = field(default_factory=BatteryConfig)
    emissions: EmissionConfig = field(default_factory=EmissionConfig)
    training: dict = field(default_factory=dict)

    def validate(self):
        self.sim.validate()
        self.topology.resolve(self.sim.U, self.sim.M)
        self.traffic.validate()
        self.servers.validate()
        self.battery.validate()
        self.emissions.validate()
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **sections):
        """Copy with some fields overridden, e.g. ``replace(sim={"U": 2})``."""
        data = self.to_dict()
        for name, updates in sections.items():
            if name == "training":
                data[name] = {**data[name], **updates}
            else:
                data[name].update(updates)
        return Config.from_dict(data)

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        sections = {"sim": SimConfig, "topology": TopologyConfig, "traffic": TrafficConfig,
                    "servers": ServerConfig, "battery": BatteryConfig,
                    "emissions": EmissionConfig}
        unknown = set(data) - set(sections) - {"training"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, klass in sections.items():
            body = data.get(name) or {}
            if not isinstance(body, dict):
                raise ConfigError(f"config section '{name}' must be a mapping")
            names = {f.name for f in dataclasses.fields(klass)}
            bad = set(body) - names
            if bad:
                raise ConfigError(f"unknown keys in '{name}': {sorted(bad)}")
            body = {k: tuple(v) if isinstance(v, list) and k.endswith(("range", "_var")) else v
                    for k, v in body.items()}
            kwargs[name] = klass(**body)
        kwargs["training"] = dict(data.get("training") or {})
        return cls(**kwargs).validate()


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return Config.from_dict(data)


def dump_config(config, path):
    data = config.to_dict()

    def plain(obj):
        if isinstance(obj, dict):
            return {k: plain(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [plain(v) for v in obj]
        return obj

    Path(path).write_text(yaml.safe_dump(plain(data), sort_keys=False))
