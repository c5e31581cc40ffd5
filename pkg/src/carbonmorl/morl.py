"""Constrained multi-objective policy improvement.

One epoch of improvement works on a frozen sample set: for each sampled
state, N actions are drawn from the current policy and scored on every
objective. Each objective turns its scores into a nonparametric local
policy (softmax over the samples, tilted by constraint penalties); the
preference-weighted mixture of those local policies is then projected onto
the parametric Gaussian policy by weighted maximum likelihood, inside a
trust region.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CONSTRAINTS = ("D1", "D2", "D3", "D4")


def _logit(p):
    p = np.clip(p, 1e-6, 1 - 1e-6)
    return np.log(p / (1 - p))


def squash(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class GaussianPolicy:
    """Diagonal Gaussian over pre-squash actions with a state-linear mean.

    Features are ``[1, standardized log-state]``; actions in [0, 1] are
    ``sigmoid(z)``.
    """

    def __init__(self, state_dim, action_dim, init_action=None, init_std=1.0, min_std=0.05):
        self.state_dim, self.action_dim = state_dim, action_dim
        self.W = np.zeros((action_dim, state_dim + 1))
        if init_action is not None:
            self.W[:, 0] = _logit(np.asarray(init_action, dtype=float))
        self.log_std = np.full(action_dim, np.log(init_std))
        self.min_log_std = np.log(min_std)
        self.s_mean = np.zeros(state_dim)
        self.s_std = np.ones(state_dim)
        self.floor = 1e-30

    def copy(self):
        other = GaussianPolicy.__new__(GaussianPolicy)
        other.__dict__ = {k: (v.copy() if isinstance(v, np.ndarray) else v)
                          for k, v in self.__dict__.items()}
        return other

    def fit_normalizer(self, states):
        states = np.asarray(states, dtype=float).reshape(-1, self.state_dim)
        pos = states[states > 0]
        self.floor = float(1e-3 * np.median(pos)) if pos.size else 1e-30
        t = np.log(np.maximum(states, 0.0) + self.floor)
        self.s_mean = t.mean(axis=0)
        self.s_std = np.maximum(t.std(axis=0), 1e-6)

    def features(self, states):
        states = np.asarray(states, dtype=float)
        t = (np.log(np.maximum(states, 0.0) + self.floor) - self.s_mean) / self.s_std
        t = np.clip(t, -5.0, 5.0)
        return np.concatenate([np.ones(states.shape[:-1] + (1,)), t], axis=-1)

    @property
    def std(self):
        return np.exp(self.log_std)

    def mean(self, states):
        return self.features(states) @ self.W.T

    def mean_action(self, states):
        return squash(self.mean(states))

    def sample(self, states, n, rng):
        """Pre-squash samples of shape (B, n, A) for states (B, M)."""
        if np.any(~np.isfinite(self.log_std)) or np.any(self.std <= 0):
            raise ValueError("degenerate policy: scale must be positive")
        mu = self.mean(states)
        eps = rng.standard_normal(mu.shape[:-1] + (n, self.action_dim))
        return mu[..., None, :] + self.std * eps

    def act(self, states, rng):
        return squash(self.sample(states, 1, rng)[..., 0, :])

    def log_prob(self, z, states):
        mu = self.mean(states)[..., None, :]
        r = (z - mu) / self.std
        return -0.5 * np.sum(r * r, axis=-1) - np.sum(self.log_std) - 0.5 * self.action_dim * np.log(2 * np.pi)

    # -- checkpoint -------------------------------------------------------
    def save(self, path):
        header = {"format": "carbonmorl-policy", "version": CHECKPOINT_VERSION,
                  "state_dim": self.state_dim, "action_dim": self.action_dim,
                  "floor": self.floor, "s_mean": self.s_mean.tolist(),
                  "s_std": self.s_std.tolist(), "min_log_std": self.min_log_std}
        with open(path, "w") as fh:
            fh.write("# " + json.dumps(header) + "\n")
            np.savetxt(fh, np.concatenate([self.W.ravel(), self.log_std]), fmt="%.17g")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            header = json.loads(fh.readline()[2:])
            flat = np.loadtxt(fh, ndmin=1)
        if header.get("format") != "carbonmorl-policy" or header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported policy checkpoint")
        pol = cls(header["state_dim"], header["action_dim"])
        n = pol.W.size
        pol.W = flat[:n].reshape(pol.W.shape)
        pol.log_std = flat[n:]
        pol.floor = header["floor"]
        pol.s_mean = np.asarray(header["s_mean"])
        pol.s_std = np.asarray(header["s_std"])
        pol.min_log_std = header["min_log_std"]
        return pol


# -- objectives -------------------------------------------------------------

@dataclass
class Rollout:
    """Per-step measurements of a horizon, each shaped (n, ...)."""
    S: np.ndarray
    energy_per_bit: np.ndarray
    delay_sum: np.ndarray
    slack_D1: np.ndarray
    slack_D2: np.ndarray
    slack_D3: np.ndarray
    slack_D4: np.ndarray
    overrun: np.ndarray = None
    rer: np.ndarray = None


@dataclass
class ObjectiveVector:
    Q: np.ndarray                 # (3, ...) sustainability, efficiency, -delay
    multipliers: np.ndarray
    penalties: dict = field(default_factory=dict)


def hinge(x):
    return np.maximum(np.asarray(x, dtype=float), 0.0)


def evaluate_objectives(rollout: Rollout, multipliers=(0, 0, 0, 0), horizon=None,
                        sustainability="S", deadline_weight=0.0):
    """Augmented-Lagrangian objective values of a rollout.

    Penalties are one-sided: a constraint contributes ``lambda * slack`` for
    every slot where its slack is positive and nothing otherwise.
    """
    S = np.asarray(rollout.rer if sustainability == "rer" else rollout.S, dtype=float)
    if S.shape[0] == 0:
        raise ValueError("empty rollout")
    if horizon is not None and S.shape[0] != horizon:
        raise ValueError(f"rollout has {S.shape[0]} steps, expected {horizon}")
    lam = np.asarray(multipliers, dtype=float)
    pen = {
        "D1": lam[0] * hinge(rollout.slack_D1).sum(axis=0),
        "D2": lam[1] * hinge(rollout.slack_D2).sum(axis=0),
        "D3": lam[2] * hinge(rollout.slack_D3).sum(axis=0),
        "D4": lam[3] * hinge(rollout.slack_D4).sum(axis=0),
    }
    q1 = S.mean(axis=0) - pen["D1"] - pen["D2"]
    q2 = -np.asarray(rollout.energy_per_bit).mean(axis=0) - pen["D3"] - pen["D4"]
    q3 = -np.asarray(rollout.delay_sum).sum(axis=0) - pen["D3"] - pen["D4"]
    if deadline_weight and rollout.overrun is not None:
        q3 = q3 - deadline_weight * hinge(rollout.overrun).sum(axis=0)
    return ObjectiveVector(np.stack([q1, q2, q3]), lam, pen)


def standardize(q, axis=-1):
    """Zero-mean unit-variance scores across the sampled actions of a state."""
    q = np.asarray(q, dtype=float)
    mu = q.mean(axis=axis, keepdims=True)
    sd = q.std(axis=axis, keepdims=True)
    return np.where(sd > 0, (q - mu) / np.where(sd > 0, sd, 1.0), 0.0)


def improvement_probability(q, temperature):
    """Softmax of ``q / temperature`` over the last (sample) axis."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    q = np.asarray(q, dtype=float)
    logits = (q - q.max(axis=-1, keepdims=True)) / temperature
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def _softmax(logits):
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def penalty(slacks, multipliers):
    """sum_i lambda_i * max(0, slack_i); ``slacks`` has constraints last."""
    return hinge(slacks) @ np.asarray(multipliers, dtype=float)


def local_weights(q, temperatures, slacks=None, multipliers=None):
    """Nonparametric local policies for every objective.

    ``q``: (R, B, N) scores; ``slacks``: (B, N, C). Weights are
    improvement probabilities tilted by exp(-sum lambda * violation).
    """
    q = np.asarray(q, dtype=float)
    temps = np.broadcast_to(np.asarray(temperatures, dtype=float), (q.shape[0],))
    pen = 0.0 if slacks is None or multipliers is None else penalty(slacks, multipliers)
    out = np.empty_like(q)
    for r in range(q.shape[0]):
        if np.all(np.asarray(pen) == 0):
            out[r] = improvement_probability(q[r], temps[r])
        else:
            if temps[r] <= 0:
                raise ValueError("temperature must be positive")
            out[r] = _softmax(q[r] / temps[r] - pen)
    return out


@dataclass
class LocalPolicySample:
    states: np.ndarray        # (B, M)
    z: np.ndarray             # (B, N, A) pre-squash actions (shared support)
    actions: np.ndarray       # (B, N, A) squashed
    weights: np.ndarray       # (R, B, N)
    q: np.ndarray             # (R, B, N) scores used for weighting
    slacks: np.ndarray        # (B, N, C)
    temperatures: np.ndarray


def fit_local_policies(policy, states, evaluator, n_samples, rng, temperatures=0.5,
                       multipliers=(0, 0, 0, 0), standardize_scores=True):
    """Sample actions from ``policy`` and weight them per objective.

    ``evaluator(states, actions)`` returns ``(q, slacks)`` with q (R, B, N)
    and slacks (B, N, C).
    """
    if n_samples < 2:
        raise ValueError("need at least two action samples")
    states = np.asarray(states, dtype=float)
    z = policy.sample(states, n_samples, rng)
    actions = squash(z)
    q, slacks = evaluator(states, actions)
    q = np.asarray(q, dtype=float)
    scores = standardize(q) if standardize_scores else q
    temps = np.broadcast_to(np.asarray(temperatures, dtype=float), (q.shape[0],)).copy()
    w = local_weights(scores, temps, slacks, multipliers)
    return LocalPolicySample(states, z, actions, w, scores, np.asarray(slacks), temps)


def mixture_weights(weights, zeta):
    """Preference-weighted mixture sum_r zeta_r q_r over a shared support."""
    zeta = check_simplex(zeta)
    weights = np.asarray(weights, dtype=float)
    if len(zeta) != weights.shape[0]:
        raise ValueError("one preference weight per objective is required")
    m = zeta[0] * weights[0]
    for r in range(1, len(zeta)):
        m = m + zeta[r] * weights[r]
    return m


def check_simplex(zeta, atol=1e-9):
    zeta = np.asarray(zeta, dtype=float)
    if zeta.ndim != 1 or np.any(zeta < 0) or abs(zeta.sum() - 1.0) > atol:
        raise ValueError(f"preference weights must lie on the simplex, got {zeta}")
    return zeta


# -- multipliers ------------------------------------------------------------

def bisect_multiplier(slack_fn, lam_max=1e3, tol=1e-3):
    """Smallest lambda in [0, lam_max] whose expected slack is <= 0.

    ``slack_fn`` should be nonincreasing in lambda. Returns ``lam_max`` (and
    logs a warning) when even ``lam_max`` leaves the constraint violated.
    """
    if slack_fn(0.0) <= 0:
        return 0.0
    if slack_fn(lam_max) > 0:
        log.warning("constraint unsatisfiable within lambda_max=%g", lam_max)
        return float(lam_max)
    lo, hi = 0.0, float(lam_max)
    s_lo = slack_fn(lo)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        s = slack_fn(mid)
        if s > s_lo + 1e-12:
            log.warning("non-monotone slack response at lambda=%g", mid)
            break
        if s > 0:
            lo, s_lo = mid, s
        else:
            hi = mid
    return hi


def update_multipliers(base_weights, slacks, lam_max=1e3, tol=1e-3, active=None):
    """Per-constraint bisection on the expected slack of the tilted mixture.

    ``base_weights``: (B, N) mixture weights before penalties; ``slacks``:
    (B, N, C). A constraint whose batch-average slack is strictly negative
    gets lambda = 0.
    """
    base_weights = np.asarray(base_weights, dtype=float)
    slacks = np.asarray(slacks, dtype=float)
    C = slacks.shape[-1]
    active = np.ones(C, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    logw = np.log(np.maximum(base_weights, 1e-300))
    lams = np.zeros(C)
    for i in range(C):
        s = slacks[..., i]
        if not active[i] or s.mean() < 0:
            continue
        viol = hinge(s)

        def expected(lam, s=s, viol=viol):
            w = _softmax(logw - lam * viol)
            return float(np.mean(np.sum(w * s, axis=-1)))

        lams[i] = bisect_multiplier(expected, lam_max, tol)
    return lams


# -- global policy ----------------------------------------------------------

def projection_objective(policy, states, z, m):
    """Weighted negative log-likelihood: the cross-entropy part of
    sum_r zeta_r KL(q_r || pi), averaged over states."""
    return float(-np.mean(np.sum(m * policy.log_prob(z, states), axis=-1)))


def _trust_step(current, target, origin, delta):
    """Largest step from ``current`` toward ``target`` staying within
    ``delta`` (max-norm) of ``origin``; the result lies on the segment."""
    step = target - current
    off = current - origin
    with np.errstate(divide="ignore", invalid="ignore"):
        limit = np.where(step > 0, (delta - off) / step,
                         np.where(step < 0, (-delta - off) / step, np.inf))
    alpha = float(np.clip(np.min(limit), 0.0, 1.0)) if limit.size else 1.0
    return current + alpha * step


def fit_global_policy(policy, local: LocalPolicySample, zeta, trust_region=0.1,
                      inner_iters=5, ridge=1e-6):
    """Project the preference mixture of local policies onto ``policy``.

    Alternates closed-form weighted-ML updates of the mean map and of the
    log-scales, each moved only as far as the trust region around the
    incoming policy allows. Returns ``(new_policy, objective_trace)``.
    """
    m = mixture_weights(local.weights, zeta)
    new = policy.copy()
    states, z = local.states, local.z
    phi = new.features(states)                         # (B, F)
    zbar = np.einsum("bn,bna->ba", m, z)               # per-state weighted mean
    G = phi.T @ phi
    W0, ls0 = policy.W.copy(), policy.log_std.copy()
    trace = [projection_objective(new, states, z, m)]
    for _ in range(inner_iters):
        # mean map: minimize sum_b sum_n m (z - W phi_b)^2, ridge toward current W
        reg = ridge * max(np.trace(G), 1.0)
        target = np.linalg.solve(G + reg * np.eye(len(G)), phi.T @ zbar + reg * new.W.T).T
        new.W = _trust_step(new.W, target, W0, trust_region)
        trace.append(projection_objective(new, states, z, m))
        # log-scales given the mean
        mu = new.mean(states)[:, None, :]
        var = np.mean(np.einsum("bn,bna->ba", m, (z - mu) ** 2), axis=0)
        target = np.maximum(0.5 * np.log(np.maximum(var, 1e-300)), new.min_log_std)
        new.log_std = _trust_step(new.log_std, target, ls0, trust_region)
        trace.append(projection_objective(new, states, z, m))
    return new, trace
