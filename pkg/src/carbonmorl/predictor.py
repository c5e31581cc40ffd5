"""Multi-step predictor of the emissions-per-bit state trajectory.

The model is a single-layer LSTM written directly in numpy and trained on
open-loop rollouts: after a teacher-forced context window it is fed its own
predictions for ``horizon`` steps and the squared error of those steps is
minimized by backpropagation through time.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any

import numpy as np

CHECKPOINT_VERSION = 1


class InsufficientDataError(RuntimeError):
    pass


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    episode: int = 0
    info: Any = None

    def __eq__(self, other):
        if not isinstance(other, Transition):
            return NotImplemented
        return (np.array_equal(self.state, other.state)
                and np.array_equal(self.action, other.action)
                and np.array_equal(self.next_state, other.next_state)
                and self.episode == other.episode and self.info == other.info)


class TrajectoryBuffer:
    """Fixed-capacity ring of transitions, evicting the oldest first."""

    def __init__(self, capacity, state_dim, action_dim):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.state_dim, self.action_dim = state_dim, action_dim
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.episodes = np.full(capacity, -1, dtype=np.int64)
        self.steps = np.zeros(capacity, dtype=np.int64)
        self.order = np.zeros(capacity, dtype=np.int64)   # insertion counter
        self.infos = [None] * capacity
        self.cursor = 0
        self.inserted = 0
        self._steps_seen = {}

    def __len__(self):
        return min(self.inserted, self.capacity)

    def record(self, transition: Transition):
        s = np.asarray(transition.state, dtype=float)
        a = np.asarray(transition.action, dtype=float)
        s2 = np.asarray(transition.next_state, dtype=float)
        if s.shape != (self.state_dim,) or s2.shape != (self.state_dim,) or a.shape != (self.action_dim,):
            raise ValueError(f"transition shapes {s.shape}, {a.shape}, {s2.shape} do not match "
                             f"state_dim={self.state_dim}, action_dim={self.action_dim}")
        i = self.cursor
        ep = int(transition.episode)
        self.states[i], self.actions[i], self.next_states[i] = s, a, s2
        self.episodes[i] = ep
        self.steps[i] = self._steps_seen.get(ep, 0)
        self._steps_seen[ep] = self.steps[i] + 1
        self.order[i] = self.inserted
        self.infos[i] = transition.info
        self.cursor = (i + 1) % self.capacity
        self.inserted += 1

    def record_batch(self, states, actions, next_states, episodes):
        for s, a, s2, ep in zip(states, actions, next_states, episodes):
            self.record(Transition(s, a, s2, int(ep)))

    def __getitem__(self, i):
        """i-th oldest stored transition."""
        n = len(self)
        if not -n <= i < n:
            raise IndexError(i)
        j = (self.cursor - n + (i % n)) % self.capacity if self.inserted > self.capacity else i % n
        return Transition(self.states[j].copy(), self.actions[j].copy(),
                          self.next_states[j].copy(), int(self.episodes[j]), self.infos[j])

    def sequences(self):
        """Stored indices grouped into runs of consecutive steps per episode."""
        idx = np.arange(len(self))
        idx = idx[np.lexsort((self.steps[idx], self.episodes[idx]))]
        runs, start = [], 0
        for j in range(1, len(idx) + 1):
            if (j == len(idx) or self.episodes[idx[j]] != self.episodes[idx[j - 1]]
                    or self.steps[idx[j]] != self.steps[idx[j - 1]] + 1):
                runs.append(idx[start:j])
                start = j
        return runs

    def windows(self, length):
        """All index windows of ``length`` consecutive transitions."""
        out = [run[i:i + length] for run in self.sequences()
               for i in range(len(run) - length + 1)]
        return np.array(out, dtype=np.int64).reshape(-1, length)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class LastValuePredictor:
    """Carries the current state forward unchanged."""

    def __init__(self, state_dim, action_dim=0):
        self.state_dim, self.action_dim = state_dim, action_dim

    def init_carry(self, batch):
        return None

    def warm_up(self, states, actions):
        return None

    def advance(self, carry, state, action):
        return np.array(state, dtype=float, copy=True), carry

    def train(self, buffer, epochs=1, steps_per_epoch=1):
        return []

    def predict_rollout(self, state, policy, horizon, history=None):
        return rollout(self, state, policy, horizon, history)


class LSTMPredictor:
    """Residual LSTM: predicted next state = current state + head(h)."""

    def __init__(self, state_dim, action_dim, hidden=32, horizon=10, context=10, lr=1e-3,
                 batch_size=32, clip=1.0, log_states=False, seed=0):
        self.state_dim, self.action_dim, self.hidden = state_dim, action_dim, hidden
        self.horizon, self.context = horizon, context
        self.batch_size, self.clip, self.log_states = batch_size, clip, log_states
        self.rng = np.random.default_rng(seed)
        D, H = state_dim + action_dim, hidden
        scale = 1.0 / np.sqrt(D + H)
        self.params = {
            "Wx": self.rng.normal(0.0, scale, (D, 4 * H)),
            "Wh": self.rng.normal(0.0, scale, (H, 4 * H)),
            "b": np.zeros(4 * H),
            "Wy": self.rng.normal(0.0, 0.01, (H, state_dim)),
            "by": np.zeros(state_dim),
        }
        self.params["b"][H:2 * H] = 1.0   # forget-gate bias
        self.optimizer = Adam(self.params, lr=lr)
        self.s_mean = np.zeros(state_dim)
        self.s_std = np.ones(state_dim)
        self.a_mean = np.zeros(action_dim)
        self.a_std = np.ones(action_dim)
        self.floor = 0.0

    # -- normalization --------------------------------------------------
    def _transform(self, s):
        s = np.asarray(s, dtype=float)
        return np.log(np.maximum(s, 0.0) + self.floor) if self.log_states else s

    def _untransform(self, t):
        return np.exp(t) - self.floor if self.log_states else t

    def norm_state(self, s):
        return (self._transform(s) - self.s_mean) / self.s_std

    def denorm_state(self, z):
        return self._untransform(z * self.s_std + self.s_mean)

    def norm_action(self, a):
        return (np.asarray(a, dtype=float) - self.a_mean) / self.a_std

    def fit_normalizer(self, states, actions):
        states = np.asarray(states, dtype=float)
        if self.log_states:
            pos = states[states > 0]
            self.floor = float(1e-3 * np.median(pos)) if pos.size else 1e-12
        t = self._transform(states)
        self.s_mean = t.mean(axis=0)
        self.s_std = np.maximum(t.std(axis=0), 1e-6 * np.maximum(np.abs(self.s_mean), 1e-6))
        self.a_mean = np.asarray(actions).mean(axis=0)
        self.a_std = np.maximum(np.asarray(actions).std(axis=0), 1e-6)

    # -- core cell --------------------------------------------------------
    def _cell(self, x, h, c):
        p, H = self.params, self.hidden
        z = x @ p["Wx"] + h @ p["Wh"] + p["b"]
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        o = _sigmoid(z[:, 2 * H:3 * H])
        g = np.tanh(z[:, 3 * H:])
        c2 = f * c + i * g
        tc = np.tanh(c2)
        h2 = o * tc
        return h2, c2, (x, h, c, i, f, o, g, tc)

    def init_carry(self, batch):
        return np.zeros((batch, self.hidden)), np.zeros((batch, self.hidden))

    def advance(self, carry, state, action):
        """One predicted step in physical units; ``carry`` is the LSTM memory."""
        state = np.asarray(state, dtype=float)
        lead = state.shape[:-1]
        s = self.norm_state(state.reshape(-1, self.state_dim))
        a = self.norm_action(np.asarray(action, dtype=float).reshape(-1, self.action_dim))
        if carry is None:
            carry = self.init_carry(s.shape[0])
        h, c, _ = self._cell(np.concatenate([s, a], axis=1), *carry)
        pred = s + h @ self.params["Wy"] + self.params["by"]
        return self.denorm_state(pred).reshape(*lead, self.state_dim), (h, c)

    def warm_up(self, states, actions):
        """Run teacher-forced over history (..., L, M) and return the memory."""
        states = np.asarray(states, dtype=float)
        actions = np.asarray(actions, dtype=float)
        s = states.reshape(-1, *states.shape[-2:])
        a = actions.reshape(-1, *actions.shape[-2:])
        carry = self.init_carry(s.shape[0])
        for j in range(s.shape[1]):
            _, carry = self.advance(carry, s[:, j], a[:, j])
        return carry

    # -- training -------------------------------------------------------
    def loss_and_grads(self, states, actions):
        """Open-loop loss on normalized windows.

        ``states``: (B, C+n+1, M), ``actions``: (B, C+n, A). Steps < C are
        teacher forced; from step C on the model consumes its own output.
        """
        p, H, M = self.params, self.hidden, self.state_dim
        Bsz, steps = actions.shape[0], actions.shape[1]
        C = steps - self.horizon
        h, c = self.init_carry(Bsz)
        caches, preds, ins = [], [], []
        cur = states[:, 0]
        for j in range(steps):
            inp = states[:, j] if j <= C else cur
            h, c, cache = self._cell(np.concatenate([inp, actions[:, j]], axis=1), h, c)
            cur = inp + h @ p["Wy"] + p["by"]
            caches.append(cache)
            preds.append(cur)
            ins.append(inp)
        count = Bsz * self.horizon * M
        loss = 0.0
        dloss = [None] * steps
        for j in range(C, steps):
            err = preds[j] - states[:, j + 1]
            loss += np.sum(err * err)
            dloss[j] = 2.0 * err / count
        loss /= count

        grads = {k: np.zeros_like(v) for k, v in p.items()}
        dh_next = np.zeros((Bsz, H))
        dc_next = np.zeros((Bsz, H))
        d_in_next = np.zeros((Bsz, M))
        for j in reversed(range(steps)):
            x, h_prev, c_prev, i, f, o, g, tc = caches[j]
            h_j = o * tc
            dpred = np.zeros((Bsz, M)) if dloss[j] is None else dloss[j].copy()
            if j + 1 > C and j + 1 < steps:
                dpred += d_in_next
            grads["Wy"] += h_j.T @ dpred
            grads["by"] += dpred.sum(axis=0)
            dh = dpred @ p["Wy"].T + dh_next
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_next
            df = dc * c_prev
            di = dc * g
            dg = dc * i
            dc_next = dc * f
            dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o),
                                 dg * (1 - g * g)], axis=1)
            grads["Wx"] += x.T @ dz
            grads["Wh"] += h_prev.T @ dz
            grads["b"] += dz.sum(axis=0)
            dx = dz @ p["Wx"].T
            dh_next = dz @ p["Wh"].T
            d_in_next = dx[:, :M] + dpred
        return loss, grads

    def _batch(self, buffer, windows, idx):
        w = windows[idx]
        states = np.concatenate([buffer.states[w], buffer.next_states[w[:, -1:]]], axis=1)
        return self.norm_state(states), self.norm_action(buffer.actions[w])

    def _window_length(self):
        return self.context + self.horizon

    def train(self, buffer, epochs=1, steps_per_epoch=10):
        """Fit on buffer windows; returns the mean loss of each epoch."""
        if epochs <= 0:
            return []
        windows = buffer.windows(self._window_length())
        if len(windows) == 0:
            raise InsufficientDataError(
                f"buffer holds no run of {self._window_length()} consecutive transitions")
        n = len(buffer)
        self.fit_normalizer(buffer.states[:n], buffer.actions[:n])
        report = []
        for _ in range(epochs):
            losses = []
            for _ in range(steps_per_epoch):
                idx = self.rng.integers(0, len(windows), size=min(self.batch_size, len(windows)))
                loss, grads = self.loss_and_grads(*self._batch(buffer, windows, idx))
                norm = np.sqrt(sum(np.sum(g * g) for g in grads.values()))
                if norm > self.clip:
                    grads = {k: g * (self.clip / norm) for k, g in grads.items()}
                self.optimizer.step(self.params, grads)
                losses.append(loss)
            report.append(float(np.mean(losses)))
        if not all(np.all(np.isfinite(v)) for v in self.params.values()):
            raise FloatingPointError("predictor parameters became non-finite")
        return report

    def evaluate(self, buffer, max_windows=512):
        """Open-loop MSE (normalized units) on buffer windows, no update."""
        windows = buffer.windows(self._window_length())
        if len(windows) == 0:
            raise InsufficientDataError("no evaluation windows")
        idx = np.arange(min(len(windows), max_windows))
        loss, _ = self.loss_and_grads(*self._batch(buffer, windows, idx))
        return float(loss)

    def predict_rollout(self, state, policy, horizon, history=None):
        return rollout(self, state, policy, horizon, history)

    # -- checkpoint -------------------------------------------------------
    def save(self, path):
        header = {
            "format": "carbonmorl-predictor", "version": CHECKPOINT_VERSION,
            "state_dim": self.state_dim, "action_dim": self.action_dim, "hidden": self.hidden,
            "horizon": self.horizon, "context": self.context, "log_states": self.log_states,
            "floor": self.floor, "s_mean": self.s_mean.tolist(), "s_std": self.s_std.tolist(),
            "a_mean": self.a_mean.tolist(), "a_std": self.a_std.tolist(),
            "shapes": {k: list(v.shape) for k, v in self.params.items()},
        }
        flat = np.concatenate([self.params[k].ravel() for k in sorted(self.params)])
        with open(path, "w") as fh:
            fh.write("# " + json.dumps(header) + "\n")
            np.savetxt(fh, flat, fmt="%.17g")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            header = json.loads(fh.readline()[2:])
            flat = np.loadtxt(fh, ndmin=1)
        if header.get("format") != "carbonmorl-predictor" or header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported predictor checkpoint")
        model = cls(header["state_dim"], header["action_dim"], hidden=header["hidden"],
                    horizon=header["horizon"], context=header["context"],
                    log_states=header["log_states"])
        model.floor = header["floor"]
        for name in ("s_mean", "s_std", "a_mean", "a_std"):
            setattr(model, name, np.asarray(header[name], dtype=float))
        offset = 0
        for k in sorted(header["shapes"]):
            shape = tuple(header["shapes"][k])
            size = int(np.prod(shape))
            model.params[k] = flat[offset:offset + size].reshape(shape)
            offset += size
        return model


def rollout(model, state, policy, horizon, history=None):
    """Predict ``horizon`` future states, choosing actions with ``policy``.

    ``policy`` maps a state array to an action array. ``history`` is an
    optional ``(states, actions)`` pair of past steps used to warm up
    recurrent memory. Returns an array of shape (horizon, *state.shape).
    """
    state = np.asarray(state, dtype=float)
    if horizon <= 0:
        return np.zeros((0,) + state.shape)
    carry = model.warm_up(*history) if history is not None else None
    out = []
    cur = state
    for _ in range(horizon):
        cur, carry = model.advance(carry, cur, policy(cur))
        out.append(cur)
    return np.stack(out)


def forecast_errors(model, buffer, context, horizon, stride=1):
    """Open-loop squared errors of ``model`` and of last-value carry-forward.

    Each window warms the model up on ``context`` observed steps, then
    predicts ``horizon`` steps from its own outputs under the recorded
    actions. Returns ``(model_sq_err, last_value_sq_err)`` arrays in state
    units, shaped (windows, horizon, state_dim).
    """
    windows = buffer.windows(context + horizon)[::stride]
    if len(windows) == 0:
        raise InsufficientDataError("no evaluation windows")
    hist = windows[:, :context]
    carry = model.warm_up(buffer.states[hist], buffer.actions[hist]) if context else None
    cur = buffer.states[windows[:, context]]
    last = cur.copy()
    err, base = [], []
    for j in range(horizon):
        idx = windows[:, context + j]
        cur, carry = model.advance(carry, cur, buffer.actions[idx])
        target = buffer.next_states[idx]
        err.append((cur - target) ** 2)
        base.append((last - target) ** 2)
    return np.stack(err, axis=1), np.stack(base, axis=1)
