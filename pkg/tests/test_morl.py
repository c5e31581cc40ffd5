import logging
import math

import numpy as np
import pytest
from scipy.integrate import trapezoid
from hypothesis import given, settings
from hypothesis import strategies as st

from carbonmorl.config import Config
from carbonmorl.morl import (GaussianPolicy, LocalPolicySample, Rollout, bisect_multiplier,
                             evaluate_objectives, fit_global_policy, fit_local_policies,
                             improvement_probability, local_weights, mixture_weights,
                             squash, update_multipliers)
from carbonmorl.predictor import LastValuePredictor
from carbonmorl.training import DivergenceError, TrainSettings, Trainer


def _rollout(n=4, S=0.5, power_slack=-0.2):
    z = np.zeros(n)
    return Rollout(S=np.full(n, S), energy_per_bit=np.full(n, 2.0), delay_sum=np.full(n, 0.1),
                   slack_D1=z - 1.0, slack_D2=z - 1e-9, slack_D3=np.full(n, power_slack),
                   slack_D4=z - 1e-9, overrun=z)


# -- objectives -------------------------------------------------------------------

def test_satisfied_constraints_contribute_nothing():
    ov = evaluate_objectives(_rollout(S=0.3), multipliers=(5, 5, 5, 5), horizon=4)
    assert ov.Q[0] == pytest.approx(0.3)
    assert ov.Q[1] == pytest.approx(-2.0)
    assert ov.Q[2] == pytest.approx(-0.4)
    assert all(np.all(v == 0) for v in ov.penalties.values())


def test_power_violation_costs_lambda_per_slot():
    base = evaluate_objectives(_rollout(), (0, 0, 2, 0))
    roll = _rollout()
    roll.slack_D3 = np.array([1.0, -0.5, 1.0, -0.5])     # sum p = P + 1 in two slots
    hit = evaluate_objectives(roll, (0, 0, 2, 0))
    assert base.Q[1] - hit.Q[1] == pytest.approx(4.0)
    assert base.Q[2] - hit.Q[2] == pytest.approx(4.0)
    assert hit.Q[0] == base.Q[0]


def test_constant_unit_sustainability():
    assert evaluate_objectives(_rollout(S=1.0)).Q[0] == 1.0


def test_empty_rollout_rejected():
    with pytest.raises(ValueError):
        evaluate_objectives(_rollout(n=0))


def test_rer_variant_replaces_sustainability():
    roll = _rollout(S=0.2)
    roll.rer = np.full(4, 0.9)
    assert evaluate_objectives(roll, sustainability="rer").Q[0] == pytest.approx(0.9)


# -- improvement probability --------------------------------------------------------

def test_improvement_probability_examples():
    np.testing.assert_allclose(improvement_probability(np.full(7, 3.0), 0.5), 1 / 7)
    w = improvement_probability(np.array([1.0, 0.0]), 1.0)
    np.testing.assert_allclose(w, [math.e / (math.e + 1), 1 / (math.e + 1)], rtol=1e-15)
    q = np.random.default_rng(0).normal(size=20)
    np.testing.assert_allclose(improvement_probability(q, 1e6), 1 / 20, atol=1e-4)
    np.testing.assert_allclose(improvement_probability(np.zeros(5), 1e-300), 0.2)
    with pytest.raises(ValueError):
        improvement_probability(q, 0.0)


@settings(max_examples=200, deadline=None)
@given(q=st.lists(st.floats(-50, 50), min_size=2, max_size=30), c=st.floats(-1e3, 1e3),
       rho=st.floats(0.05, 10.0))
def test_softmax_shift_invariance(q, c, rho):
    q = np.array(q)
    np.testing.assert_allclose(improvement_probability(q + c, rho), improvement_probability(q, rho),
                               rtol=1e-9, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(q=st.lists(st.floats(-5, 5), min_size=2, max_size=20), r1=st.floats(0.05, 5.0),
       r2=st.floats(0.05, 5.0))
def test_lower_temperature_is_greedier(q, r1, r2):
    q = np.array(q)
    lo, hi = sorted((r1, r2))
    best = np.argmax(q)
    assert improvement_probability(q, lo)[best] >= improvement_probability(q, hi)[best] - 1e-12


# -- local policies ---------------------------------------------------------------------

def _policy(M=2, A=3):
    pol = GaussianPolicy(M, A, init_action=np.full(A, 0.5))
    pol.fit_normalizer(np.random.default_rng(0).uniform(0.5, 2.0, size=(50, M)))
    return pol


def test_local_weights_without_violations_are_improvement_probabilities():
    rng = np.random.default_rng(1)
    pol = _policy()
    states = rng.uniform(0.5, 2, (4, 2))
    q = rng.normal(size=(3, 4, 16))

    def evaluator(s, a):
        return q, np.full((4, 16, 4), -1.0)

    local = fit_local_policies(pol, states, evaluator, 16, rng, 0.5, (3, 3, 3, 3),
                               standardize_scores=False)
    for r in range(3):
        np.testing.assert_array_equal(local.weights[r], improvement_probability(q[r], 0.5))
    assert local.z.shape == (4, 16, 3)
    np.testing.assert_allclose(local.weights.sum(-1), 1.0)


def test_violating_action_suppressed():
    q = np.zeros((1, 1, 16))
    slacks = np.full((1, 16, 4), -1.0)
    slacks[0, 5, 2] = 0.5
    w = local_weights(q, 0.5, slacks, (0, 0, 1e3, 0))
    assert w[0, 0, 5] < 1e-6
    np.testing.assert_allclose(local_weights(q, 0.5)[0, 0], 1 / 16)


def test_degenerate_policy_rejected():
    pol = _policy()
    pol.log_std[:] = -np.inf
    with pytest.raises(ValueError):
        fit_local_policies(pol, np.ones((2, 2)), lambda s, a: None, 16, np.random.default_rng(0))


# -- multipliers -------------------------------------------------------------------------

def test_bisection_examples(caplog):
    assert bisect_multiplier(lambda lam: -0.1) == 0.0
    assert bisect_multiplier(lambda lam: 1 - lam / 2) == pytest.approx(2.0, abs=1e-3)
    with caplog.at_level(logging.WARNING):
        assert bisect_multiplier(lambda lam: 1.0) == 1e3
    assert "unsatisfiable" in caplog.text


def test_update_multipliers_sign_rules():
    rng = np.random.default_rng(0)
    base = rng.dirichlet(np.ones(16), size=8)
    slacks = rng.normal(size=(8, 16, 4))
    slacks[..., 0] = -np.abs(slacks[..., 0]) - 0.1          # always satisfied
    slacks[..., 1] = slacks[..., 1] - slacks[..., 1].mean() - 0.01   # negative mean
    lam = update_multipliers(base, slacks)
    assert np.all(lam >= 0)
    assert lam[0] == 0.0 and lam[1] == 0.0


def test_multiplier_makes_expected_slack_nonpositive():
    rng = np.random.default_rng(2)
    base = rng.dirichlet(np.ones(32), size=4)
    slacks = np.zeros((4, 32, 4)) - 1.0
    slacks[..., 2] = rng.normal(0.3, 1.0, size=(4, 32))
    lam = update_multipliers(base, slacks)
    w = np.exp(np.log(base) - lam[2] * np.maximum(slacks[..., 2], 0))
    w /= w.sum(-1, keepdims=True)
    assert np.mean(np.sum(w * slacks[..., 2], -1)) <= 1e-9
    assert lam[2] > 0


# -- global policy ---------------------------------------------------------------------------

def _local(seed=0, B=8, N=32, M=2, A=3, identical=False):
    rng = np.random.default_rng(seed)
    pol = _policy(M, A)
    states = rng.uniform(0.5, 2.0, (B, M))
    z = pol.sample(states, N, rng)
    q = rng.normal(size=(3, B, N)) * 3
    if identical:
        q[1] = q[2] = q[0]
    w = local_weights(q, 0.5)
    return pol, LocalPolicySample(states, z, squash(z), w, q, np.zeros((B, N, 4)),
                                  np.full(3, 0.5))


def test_mixture_identity():
    _, local = _local()
    np.testing.assert_array_equal(mixture_weights(local.weights, (1, 0, 0)), local.weights[0])
    m = mixture_weights(local.weights, (1 / 3, 1 / 3, 1 / 3))
    direct = (local.weights[0] + local.weights[1] + local.weights[2]) / 3
    np.testing.assert_allclose(m, direct, rtol=1e-15, atol=1e-18)
    with pytest.raises(ValueError):
        mixture_weights(local.weights, (0.5, 0.6, 0.0))
    with pytest.raises(ValueError):
        mixture_weights(local.weights, (1.2, -0.2, 0.0))


def test_identical_objectives_collapse_to_single_fit():
    pol, local = _local(identical=True)
    a, _ = fit_global_policy(pol, local, (0.2, 0.3, 0.5))
    b, _ = fit_global_policy(pol, local, (1.0, 0.0, 0.0))
    np.testing.assert_allclose(a.W, b.W, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(a.log_std, b.log_std, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_projection_objective_nonincreasing(seed):
    pol, local = _local(seed)
    _, trace = fit_global_policy(pol, local, (0.5, 0.3, 0.2), inner_iters=8, trust_region=0.5)
    assert all(b <= a + 1e-12 * abs(a) for a, b in zip(trace, trace[1:]))
    assert trace[-1] < trace[0]


def test_trust_region_bounds_parameter_step():
    pol, local = _local(3)
    new, _ = fit_global_policy(pol, local, (1 / 3, 1 / 3, 1 / 3), trust_region=0.1)
    assert np.max(np.abs(new.W - pol.W)) <= 0.1 + 1e-12
    assert np.max(np.abs(new.log_std - pol.log_std)) <= 0.1 + 1e-12


def test_policy_sampling_and_checkpoint(tmp_path):
    pol = _policy()
    pol.W[:, 1] = [0.3, -0.2, 0.1]
    s = np.array([[1.0, 1.5]])
    z = pol.sample(s, 2000, np.random.default_rng(0))
    assert z.shape == (1, 2000, 3)
    np.testing.assert_allclose(z.mean(axis=1)[0], pol.mean(s)[0], atol=0.1)
    x = squash(z)
    assert np.all((x >= 0) & (x <= 1))
    path = tmp_path / "pol.txt"
    pol.save(path)
    back = GaussianPolicy.load(path)
    np.testing.assert_array_equal(back.mean_action(s), pol.mean_action(s))
    np.testing.assert_array_equal(back.log_std, pol.log_std)


def test_log_prob_is_normalized_density():
    pol = GaussianPolicy(1, 1)
    s = np.array([[1.0]])
    grid = np.linspace(-10, 10, 20001)[None, :, None]
    dens = np.exp(pol.log_prob(grid, s))[0]
    assert trapezoid(dens, grid[0, :, 0]) == pytest.approx(1.0, abs=1e-6)


# -- training loop -----------------------------------------------------------------------------

def _small():
    return TrainSettings(episodes=2, slots=30, states_per_epoch=4, samples=16, horizon=3,
                         predictor_context=3, predictor_steps=1)


def test_zero_epochs_keeps_policy():
    tr = Trainer(Config(), settings=_small())
    before = tr.policy.W.copy()
    assert tr.run(0) == []
    np.testing.assert_array_equal(tr.policy.W, before)


def test_curves_have_one_row_per_epoch():
    tr = Trainer(Config(), settings=_small())
    curves = tr.run(3)
    assert len(curves) == 3
    assert all({"Q_1", "Q_2", "Q_3", "mean_S", "lambda_4", "zeta_3"} <= set(c) for c in curves)


def test_training_runs_with_last_value_predictor():
    tr = Trainer(Config(), settings=_small())
    tr.predictor = tr.planner.predictor = LastValuePredictor(tr.net.M, tr.net.actions.dim)
    assert len(tr.run(2)) == 2


def test_divergence_guard_halts_and_dumps(tmp_path):
    tr = Trainer(Config(), settings=_small(), dump_dir=tmp_path)
    real = tr.planner.rollouts

    def poisoned(*args, **kwargs):
        roll, slacks = real(*args, **kwargs)
        roll.S = roll.S * np.nan
        return roll, slacks

    tr.planner.rollouts = poisoned
    with pytest.raises(DivergenceError):
        tr.run(1)
    assert (tmp_path / "diverged_policy.txt").is_file()
    assert (tmp_path / "diverged_state.json").is_file()


def test_methods_train_end_to_end():
    for method in ("scalarized", "ee_only", "rer"):
        tr = Trainer(Config(), method=method, settings=_small())
        assert len(tr.run(1)) == 1


def _mean_renewable_share(trainer, slots=40):
    env = trainer.env
    env.reset()
    sl = trainer.net.actions.slices["rho_ren"]
    shares = []
    for _ in range(slots):
        x = trainer.policy.mean_action(env.state.obs)
        shares.append(x[:, sl].mean())
        env.step(x)
    return float(np.mean(shares))


def test_single_server_learns_renewable_share():
    cfg = Config().replace(sim={"U": 2, "M": 1}, emissions={"renewable_ratio": 0.0})
    st = TrainSettings(episodes=2, slots=40, states_per_epoch=8, samples=32, horizon=3,
                       predictor_context=3, predictor_steps=1)
    before, after = [], []
    for seed in range(5):
        tr = Trainer(cfg, seed=seed, settings=st)
        before.append(_mean_renewable_share(tr))
        tr.run(200)
        after.append(_mean_renewable_share(tr))
    assert np.mean(after) - np.mean(before) >= 0.2
