"""Training loop: episode collection, predictor fitting, model-based scoring
of sampled actions and the constrained multi-objective policy update.

Scores come from short planning rollouts. Each sampled state is cloned once
per candidate action; the candidate is applied in the first slot and the
current policy's mean action afterwards, chosen from predictor-forecast
emission states. All candidates of a state see the same channel, arrival and
emission-noise draws. Emission factors are hidden from the controller, so
the rollouts use factors fitted by nonnegative least squares to the recent
emissions the controller observed and the dispatch it chose.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import nnls

from .baselines import BaselineSpec, rer_metric
from .config import Config
from .env import EnvState, Exogenous, NetworkEnv, transition
from .morl import (GaussianPolicy, LocalPolicySample, Rollout, evaluate_objectives, fit_global_policy,
                   local_weights, mixture_weights, squash, standardize, update_multipliers)
from .predictor import LSTMPredictor, TrajectoryBuffer

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("epoch", "mean_S", "energy_per_bit", "emissions_per_bit", "mean_delay",
                 "viol_D1", "viol_D3", "lambda_1", "lambda_2", "lambda_3", "lambda_4",
                 "zeta_1", "zeta_2", "zeta_3", "Q_1", "Q_2", "Q_3")


class DivergenceError(FloatingPointError):
    """Raised when objective scores stop being finite."""


@dataclass
class TrainSettings:
    episodes: int = 20
    slots: int = 200
    states_per_epoch: int = 32
    samples: int = 64
    horizon: int = 10
    temperature: float = 0.5
    trust_region: float = 0.1
    inner_iters: int = 5
    lambda_max: float = 1e3
    lambda_tol: float = 1e-3
    deadline_weight: float = 1.0
    factor_window: int = 50
    init_std: float = 1.0
    min_std: float = 0.05
    standardize: bool = True
    predictor_hidden: int = 32
    predictor_context: int = 10
    predictor_steps: int = 10
    predictor_lr: float = 3e-3
    buffer_capacity: int = 20000

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names - {"epochs", "method", "zeta", "chi", "weights"}
        if unknown:
            raise ValueError(f"unknown training settings: {sorted(unknown)}")
        return cls(**{k: v for k, v in data.items() if k in names})


# -- emission-factor inference ----------------------------------------------

def dispatch_features(slot):
    """Per-server energy drawn from each source, (E, M, 3)."""
    return np.stack([slot.u - slot.u_b, slot.g - slot.g_b, slot.d], axis=-1)


def observed_emissions(slot):
    """Emissions the controller can reconstruct from C^b and its own rates."""
    return slot.c_bit * slot.T * slot.rate_sum


def estimate_factors(X, y, valid, prior):
    """NNLS fit of (renewable, grid, battery) factors.

    ``X``: (K, M, 3) energy by source, ``y``: (K, M) emissions, ``valid``:
    (K, M) rows usable for the fit. A weak ridge toward ``prior`` keeps
    unexcited sources (e.g. an idle battery) at their previous estimate.
    """
    A = X[valid]
    b = y[valid]
    if len(b) < 3:
        return prior.copy()
    scale = max(np.max(np.abs(b)), 1e-300)
    col = np.maximum(np.sqrt(np.mean(A * A, axis=0)), 1e-12)
    eps = 1e-3 * np.sqrt(len(b))
    A_aug = np.vstack([A / col, eps * np.eye(3)])
    b_aug = np.concatenate([b / scale, eps * prior * col / scale])
    sol, _ = nnls(A_aug, b_aug)
    return sol * scale / col


# -- planning rollouts -------------------------------------------------------

class Planner:
    """Scores candidate actions with short rollouts from cloned states."""

    def __init__(self, env: NetworkEnv, predictor, horizon=10, chi=1.0, deadline_weight=1.0):
        self.env, self.net = env, env.net
        self.predictor = predictor
        self.horizon = horizon
        self.chi = chi
        self.deadline_weight = deadline_weight

    def rollouts(self, snapshots: EnvState, carry, factors, candidates, policy, rng):
        """Simulate ``candidates`` (B, N, A) from ``snapshots`` (batch B).

        Returns ``(Rollout with arrays (n, B, N), first-slot slacks (B, N, 4))``.
        """
        B, N, A = candidates.shape
        net = self.net
        state = snapshots.repeat(N)
        fac = np.repeat(factors, N, axis=0)
        if carry is not None:
            carry = tuple(np.repeat(c, N, axis=0) for c in carry)
        x = candidates.reshape(B * N, A)
        obs = state.obs
        keys = ("S", "rer", "energy_per_bit", "delay_sum", "overrun",
                "slack_D1", "slack_D2", "slack_D3", "slack_D4")
        out = {k: [] for k in keys}
        first = None
        for r in range(self.horizon):
            if r > 0:
                obs, carry = self.predictor.advance(carry, obs, x)
                obs = np.maximum(np.nan_to_num(obs, nan=0.0, posinf=0.0), 0.0)
                x = policy.mean_action(obs)
            else:
                _, carry = self.predictor.advance(carry, obs, x)
            h = rng.standard_normal((B, net.U)) * np.sqrt(net.channel_var)
            arrivals = rng.poisson(net.arrival_mean, size=(B, net.U))
            exo = Exogenous(h, arrivals, fac[::N]).repeat(N)
            exo.factors = fac
            state, slot = transition(net, state, net.actions.to_action(x), exo)
            out["S"].append(slot.S)
            out["rer"].append(rer_metric(slot.u, slot.u_b, slot.d, slot.e_tot, self.chi))
            out["energy_per_bit"].append(slot.energy_per_bit)
            out["delay_sum"].append(slot.tau.sum(-1))
            out["overrun"].append(np.maximum(slot.slack_deadline, 0.0).sum(-1))
            out["slack_D1"].append(np.maximum(slot.slack_D1, 0.0))
            out["slack_D2"].append(np.maximum(slot.slack_D2, 0.0).sum(-1))
            out["slack_D3"].append(np.maximum(slot.slack_D3, 0.0))
            out["slack_D4"].append(np.maximum(slot.slack_D4, 0.0).sum(-1))
            if r == 0:
                first = np.stack([slot.slack_D1, slot.slack_D2.max(-1), slot.slack_D3,
                                  slot.slack_D4.max(-1)], axis=-1).reshape(B, N, 4)
        arrays = {k: np.stack(v).reshape(self.horizon, B, N) for k, v in out.items()}
        return Rollout(**arrays), first


# -- evaluation ----------------------------------------------------------------

def evaluate_policy(config: Config, policy, seed, slots=None, episodes=1, deterministic=True,
                    record=False):
    """Run ``policy`` on fresh episodes; returns summary metrics (and slots)."""
    env = NetworkEnv(config, batch=episodes, seed=seed)
    env.reset()
    rng = np.random.default_rng([seed, 7])
    slots = config.sim.horizon if slots is None else slots
    acc = {k: [] for k in ("emissions", "energy", "bits", "S", "delay", "D1", "D3")}
    trace = []
    for _ in range(slots):
        obs = env.state.obs
        x = policy.mean_action(obs) if deterministic else policy.act(obs, rng)
        _, slot = env.step(x)
        bits = slot.rate_sum.sum(-1) * slot.T
        acc["emissions"].append(slot.emissions.sum(-1))
        acc["energy"].append(slot.e_tot.sum(-1))
        acc["bits"].append(bits)
        acc["S"].append(slot.S)
        acc["delay"].append(slot.mean_delay)
        acc["D1"].append(slot.slack_D1 > 0)
        acc["D3"].append(slot.slack_D3 > 0)
        if record:
            trace.append(slot)
    a = {k: np.asarray(v) for k, v in acc.items()}
    bits = a["bits"].sum()
    metrics = {
        "emissions_per_bit": float(a["emissions"].sum() / bits) if bits > 0 else float("nan"),
        "mean_S": float(a["S"].mean()),
        "energy_per_bit": float(a["energy"].sum() / bits) if bits > 0 else float("nan"),
        "mean_delay": float(a["delay"].mean()),
        "viol_D1": float(a["D1"].mean()),
        "viol_D3": float(a["D3"].mean()),
    }
    return (metrics, trace) if record else metrics


# -- trainer ---------------------------------------------------------------------

class Trainer:
    """Owns the environment, policy, predictor and multipliers of one run."""

    def __init__(self, config: Config, zeta=(1 / 3, 1 / 3, 1 / 3), method="proposed", seed=0,
                 settings: TrainSettings | None = None, spec: BaselineSpec | None = None,
                 dump_dir=None):
        self.config = config
        self.settings = settings or TrainSettings.from_dict(config.training)
        st = self.settings
        self.spec = spec or BaselineSpec(kind=method)
        self.zeta = np.asarray(zeta, dtype=float)
        self.seed = seed
        self.env = NetworkEnv(config, batch=st.episodes, seed=seed)
        self.net = self.env.net
        self.rng = np.random.default_rng([seed, 1])
        M, A = self.net.M, self.net.actions.dim
        self.policy = GaussianPolicy(M, A, self.net.actions.initial_normalized(),
                                     init_std=st.init_std, min_std=st.min_std)
        self.predictor = LSTMPredictor(M, A, hidden=st.predictor_hidden, horizon=st.horizon,
                                       context=st.predictor_context, lr=st.predictor_lr,
                                       log_states=True, seed=seed)
        self.buffer = TrajectoryBuffer(st.buffer_capacity, M, A)
        self.planner = Planner(self.env, self.predictor, st.horizon, self.spec.chi,
                               st.deadline_weight)
        self.multipliers = np.zeros(4)
        self.factor_prior = np.full(3, 1e-7)   # uninformed: factors are hidden
        self.epoch = 0
        self.normalized = False
        self.curves = []
        self.dump_dir = dump_dir

    # -- collection -------------------------------------------------------------
    def collect(self):
        st, net = self.settings, self.net
        env = self.env
        E, S, ctx = st.episodes, st.slots, st.predictor_context
        env.reset()
        obs = np.zeros((S + 1, E, net.M))
        acts = np.zeros((S, E, net.actions.dim))
        X = np.zeros((S, E, net.M, 3))
        y = np.zeros((S, E, net.M))
        valid = np.zeros((S, E, net.M), dtype=bool)
        lo = min(ctx, S - 1)
        pick_t = self.rng.integers(lo, S, size=st.states_per_epoch)
        pick_e = self.rng.integers(0, E, size=st.states_per_epoch)
        snaps = [None] * st.states_per_epoch
        stats = {k: [] for k in ("S", "energy", "emissions", "bits", "delay", "D1", "D3")}
        obs[0] = env.state.obs
        for t in range(S):
            for j in np.flatnonzero(pick_t == t):
                snaps[j] = env.state.take([pick_e[j]])
            x = self.policy.act(obs[t], self.rng)
            _, slot = env.step(x)
            acts[t] = x
            obs[t + 1] = env.state.obs
            X[t] = dispatch_features(slot)
            y[t] = observed_emissions(slot)
            valid[t] = (slot.rate_sum > 0) & ~np.asarray(slot.degenerate, dtype=bool).reshape(E, -1)
            stats["S"].append(slot.S)
            stats["energy"].append(slot.e_tot.sum(-1))
            stats["emissions"].append(slot.emissions.sum(-1))
            stats["bits"].append(slot.rate_sum.sum(-1) * slot.T)
            stats["delay"].append(slot.mean_delay)
            stats["D1"].append(slot.slack_D1 > 0)
            stats["D3"].append(slot.slack_D3 > 0)
        base = self.epoch * E
        for e in range(E):
            self.buffer.record_batch(obs[:-1, e], acts[:, e], obs[1:, e], np.full(S, base + e))
        snapshots = EnvState(**{f.name: np.concatenate([getattr(s, f.name) for s in snaps])
                                for f in dataclasses.fields(EnvState)})
        hist_obs = np.stack([obs[t - lo:t, e] for t, e in zip(pick_t, pick_e)])
        hist_act = np.stack([acts[t - lo:t, e] for t, e in zip(pick_t, pick_e)])
        factors = np.empty((st.states_per_epoch, 3))
        for j, (t, e) in enumerate(zip(pick_t, pick_e)):
            w0 = max(0, t - st.factor_window)
            factors[j] = estimate_factors(X[w0:t, e], y[w0:t, e], valid[w0:t, e], self.factor_prior)
        self.factor_prior = np.median(factors, axis=0)
        a = {k: np.asarray(v) for k, v in stats.items()}
        bits = a["bits"].sum()
        summary = {
            "mean_S": float(a["S"].mean()),
            "energy_per_bit": float(a["energy"].sum() / bits) if bits > 0 else float("nan"),
            "emissions_per_bit": float(a["emissions"].sum() / bits) if bits > 0 else float("nan"),
            "mean_delay": float(a["delay"].mean()),
            "viol_D1": float(a["D1"].mean()),
            "viol_D3": float(a["D3"].mean()),
        }
        return snapshots, hist_obs, hist_act, factors, obs, summary

    # -- one improvement step ---------------------------------------------------
    def score(self, snapshots, carry, factors, actions):
        """Objective scores (R, B, N) for this method and first-slot slacks."""
        roll, slacks = self.planner.rollouts(snapshots, carry, factors, actions, self.policy,
                                             np.random.default_rng(self.rng.integers(2**63)))
        q = evaluate_objectives(roll, np.zeros(4), sustainability=self.spec.sustainability,
                                deadline_weight=self.settings.deadline_weight).Q
        if not np.all(np.isfinite(q)):
            raise DivergenceError(f"non-finite objective scores at epoch {self.epoch}")
        return q, slacks

    def improve(self, snapshots, hist_obs, hist_act, factors):
        st = self.settings
        states = snapshots.obs
        carry = self.predictor.warm_up(hist_obs, hist_act) if hist_obs.shape[1] else None
        z = self.policy.sample(states, st.samples, self.rng)
        actions = squash(z)
        q, slacks = self.score(snapshots, carry, factors, actions)
        objectives, zeta = self.spec.objectives(q, self.zeta, st.standardize)
        scores = standardize(objectives) if st.standardize else objectives
        base = mixture_weights(local_weights(scores, st.temperature), zeta)
        self.multipliers = update_multipliers(base, slacks, st.lambda_max, st.lambda_tol)
        weights = local_weights(scores, st.temperature, slacks, self.multipliers)
        local = LocalPolicySample(states, z, actions, weights, scores, slacks,
                                  np.full(len(scores), st.temperature))
        self.policy, trace = fit_global_policy(self.policy, local, zeta, st.trust_region,
                                               st.inner_iters)
        return q, trace

    def dump(self):
        """Write the policy and multipliers for post-mortem inspection."""
        if self.dump_dir is None:
            return
        out = Path(self.dump_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.policy.save(out / "diverged_policy.txt")
        state = {"epoch": self.epoch, "multipliers": self.multipliers.tolist(),
                 "zeta": self.zeta.tolist(), "method": self.spec.kind, "seed": self.seed}
        (out / "diverged_state.json").write_text(json.dumps(state, indent=1))
        log.error("training diverged at epoch %d; state written to %s", self.epoch, out)

    def run(self, epochs):
        """Train for ``epochs`` epochs; returns the list of curve rows."""
        st = self.settings
        for _ in range(epochs):
            snapshots, hist_obs, hist_act, factors, obs, summary = self.collect()
            if not self.normalized:
                self.policy.fit_normalizer(obs.reshape(-1, self.net.M))
                self.normalized = True
            self.predictor.train(self.buffer, epochs=1, steps_per_epoch=st.predictor_steps)
            try:
                q, _ = self.improve(snapshots, hist_obs, hist_act, factors)
            except DivergenceError:
                self.dump()
                raise
            row = {"epoch": self.epoch, **summary}
            for i in range(4):
                row[f"lambda_{i + 1}"] = float(self.multipliers[i])
            for i in range(3):
                row[f"zeta_{i + 1}"] = float(self.zeta[i])
                row[f"Q_{i + 1}"] = float(q[i].mean())
            self.curves.append(row)
            self.epoch += 1
        return self.curves


def train(config: Config, zeta=(1 / 3, 1 / 3, 1 / 3), epochs=None, method="proposed", seed=0,
          settings=None):
    """Train one policy; returns ``(policy, curves, trainer)``."""
    epochs = config.training.get("epochs", 300) if epochs is None else epochs
    trainer = Trainer(config, zeta, method, seed, settings)
    trainer.run(epochs)
    return trainer.policy, trainer.curves, trainer


def write_curves(path, curves):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        writer.writeheader()
        for row in curves:
            writer.writerow({k: repr(float(row[k])) if k != "epoch" else int(row[k])
                             for k in CURVE_COLUMNS})
