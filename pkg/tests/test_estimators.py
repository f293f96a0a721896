import math

import numpy as np
import pytest

from vrer.estimators import (GradientEstimate, clip_ratio, clr_average, clr_individual,
                             discounted_returns, gae_advantages, likelihood_ratio, likelihood_ratios,
                             lr_average, lr_individual, pg_estimate, per_sample_gradients,
                             scenario_gradient)
from vrer.envs import exact_policy_gradient, value_functions
from vrer.policy import forward, init_policy, log_prob, score
from vrer.replay import TrainingSet

from conftest import bandit, make_batch, tabular


def ts_of(*batches):
    return TrainingSet.from_batches(batches)


# --- scenario gradient and GAE -------------------------------------------

def test_scenario_gradient():
    p = tabular(np.zeros((2, 2)))
    assert np.all(scenario_gradient(p, 0.0, 1, 0) == 0)
    assert np.allclose(scenario_gradient(p, 2.0, 1, 0), [0, 0, 1.0, -1.0])
    assert np.allclose(scenario_gradient(p, 4.0, 1, 1), 2 * scenario_gradient(p, 2.0, 1, 1))


def test_gae_lambda_zero_is_td_error():
    r = np.array([1.0, 0.5, -1.0])
    v = np.array([0.2, 0.3, -0.1, 0.4])
    term = np.array([False, False, False])
    adv = gae_advantages(r, v, term, gamma=0.9, lam=0.0)
    assert np.allclose(adv, r + 0.9 * v[1:] - v[:-1], atol=0)


def test_gae_suffix_sums():
    r = np.array([1.0, 2.0, 3.0])
    adv = gae_advantages(r, np.zeros(4), np.array([False, False, True]), gamma=1.0, lam=1.0)
    assert np.array_equal(adv, [6.0, 5.0, 3.0])


def test_gae_terminal_cuts_chain_hand_unrolled():
    g, lam = 0.9, 0.8
    r = np.array([1.0, 1.0, 1.0, 1.0])
    v = np.array([0.5, 0.4, 0.3, 0.2, 0.1])
    term = np.array([False, False, True, False])
    d3 = 1 + g * 0.1 - 0.2
    d2 = 1 - 0.3
    d1 = 1 + g * 0.3 - 0.4
    d0 = 1 + g * 0.4 - 0.5
    expected = [d0 + g * lam * (d1 + g * lam * d2), d1 + g * lam * d2, d2, d3]
    assert np.allclose(gae_advantages(r, v, term, g, lam), expected, atol=1e-15)


def test_gae_length_mismatch():
    with pytest.raises(ValueError):
        gae_advantages([1.0, 2.0], [0.0, 0.0], [False, False])


def test_discounted_returns():
    out = discounted_returns([1.0, 1.0, 1.0], [False, True, False], bootstrap=10.0, gamma=0.5)
    assert np.allclose(out, [1.5, 1.0, 6.0])


# --- ratios -------------------------------------------------------------

def test_ratio_same_policy_is_one(rng):
    p = tabular(rng.normal(size=(3, 2)))
    b = make_batch(p, rng.integers(3, size=50), np.ones(50), 1, rng)
    assert np.all(likelihood_ratios(p, ts_of(b)) == 1.0)


def test_ratio_probability_quotient():
    target = tabular([math.log(0.8), math.log(0.2)])
    assert likelihood_ratio(target, 0, 0, math.log(0.4)) == pytest.approx(2.0, rel=1e-14)


def test_gaussian_ratio_against_densities(rng):
    p = init_policy("mlp_gaussian", 2, 1, hidden=(3,), fixed_std=0.7, rng=rng)
    q = p.with_weights(p.weights + rng.normal(scale=0.2, size=p.dim))
    s = rng.normal(size=2)
    a = rng.normal(size=1)
    mu_p, _ = forward(p, s[None])
    mu_q, _ = forward(q, s[None])
    dens = lambda mu: math.exp(-((a[0] - mu[0, 0]) ** 2) / (2 * 0.49))
    assert likelihood_ratio(p, s, a, log_prob(q, s, a)) == pytest.approx(dens(mu_p) / dens(mu_q), rel=1e-12)


def test_ratio_overflow_sentinel():
    target = tabular([0.0, 0.0])
    with pytest.warns(RuntimeWarning):
        r = likelihood_ratios(target, TrainingSet(np.array([1]), np.array([0]), np.array([0]),
                                                   np.array([-500.0]), np.zeros(1), np.zeros(1)))
    assert np.isfinite(r).all() and r[0] == math.exp(50.0)


def test_clip_ratio():
    assert clip_ratio(5.0, 2.0) == 2.0
    assert clip_ratio(0.5, 2.0) == 0.5
    assert clip_ratio(2.0, 2.0) == 2.0
    assert clip_ratio(7.0, None) == 7.0
    with pytest.raises(ValueError):
        clip_ratio(1.0, 0.0)


# --- estimators ---------------------------------------------------------

def test_pg_single_sample(rng):
    p = tabular(rng.normal(size=(3, 2)))
    b = make_batch(p, np.array([1]), np.array([1.7]), 4, rng)
    est = pg_estimate(p, ts_of(b))
    assert np.allclose(est.vector, scenario_gradient(p, 1.7, 1, b.actions[0]))
    assert est.kind == "PG" and est.source_indices == {4} and est.sample_count == 1


def test_pg_zero_advantages(rng):
    p = tabular(rng.normal(size=(3, 2)))
    b = make_batch(p, rng.integers(3, size=10), np.zeros(10), 1, rng)
    assert np.all(pg_estimate(p, ts_of(b)).vector == 0)


def test_pg_equals_lr_average_bitwise(rng):
    p = init_policy("mlp_softmax", 4, 2, hidden=(8,), rng=rng)
    b = make_batch(p, rng.normal(size=(30, 4)), rng.normal(size=30), 2, rng)
    ts = ts_of(b)
    assert np.array_equal(pg_estimate(p, ts).vector, lr_average(p, ts).vector)
    assert np.array_equal(pg_estimate(p, ts).vector, lr_individual(p, ts).vector)


def test_pg_rejects_mixed_or_empty(rng):
    p = tabular(np.zeros((2, 2)))
    a = make_batch(p, np.array([0, 1]), np.ones(2), 1, rng)
    b = make_batch(p, np.array([0, 1]), np.ones(2), 2, rng)
    with pytest.raises(ValueError):
        pg_estimate(p, ts_of(a, b))
    with pytest.raises(ValueError):
        lr_individual(p, ts_of(a, b))
    with pytest.raises(ValueError):
        pg_estimate(p, ts_of(a).subset(np.array([], dtype=int)))


def test_lr_ratio_two_doubles_mean():
    # behaviour picks action 0 w.p. 0.4, target w.p. 0.8 -> every action-0 ratio is 2
    target = tabular([math.log(0.8), math.log(0.2)])
    adv = np.array([1.0, -0.5, 2.0])
    ts = TrainingSet(np.ones(3, int), np.zeros(3, int), np.zeros(3, int), np.full(3, math.log(0.4)),
                     adv, adv)
    plain = np.mean([a * score(target, 0, 0) for a in adv], axis=0)
    assert np.allclose(lr_individual(target, ts).vector, 2 * plain, atol=1e-15)


def test_lr_average_of_groups(rng):
    target = tabular(rng.normal(size=(3, 2)))
    b1 = make_batch(tabular(rng.normal(size=(3, 2))), rng.integers(3, size=5), rng.normal(size=5), 1, rng)
    b2 = make_batch(tabular(rng.normal(size=(3, 2))), rng.integers(3, size=9), rng.normal(size=9), 2, rng)
    u, v = lr_individual(target, ts_of(b1)).vector, lr_individual(target, ts_of(b2)).vector
    assert np.allclose(lr_average(target, ts_of(b1, b2)).vector, (u + v) / 2, atol=1e-14)
    assert np.allclose(lr_average(target, ts_of(b1)).vector, u)
    b1_again = ts_of(b1)
    b1_again.tags = np.full(len(b1_again), 7)
    idem = lr_average(target, TrainingSet(*(np.concatenate([getattr(ts_of(b1), f), getattr(b1_again, f)])
                                             for f in ("tags", "states", "actions", "behavior_log_probs",
                                                       "advantages", "returns"))))
    assert np.allclose(idem.vector, u, atol=1e-14)


def test_clr_infinite_cap_equals_lr(rng):
    target = tabular(rng.normal(size=(3, 2)))
    b = make_batch(tabular(rng.normal(size=(3, 2))), rng.integers(3, size=20), rng.normal(size=20), 1, rng)
    ts = ts_of(b)
    assert np.array_equal(clr_individual(target, ts, math.inf).vector, lr_individual(target, ts).vector)
    assert np.array_equal(clr_average(target, ts, None).vector, lr_average(target, ts).vector)


def test_clr_all_ratios_above_cap():
    target = tabular([math.log(0.8), math.log(0.2)])
    adv = np.array([1.0, 3.0])
    ts = TrainingSet(np.ones(2, int), np.zeros(2, int), np.zeros(2, int), np.full(2, math.log(0.1)), adv, adv)
    plain = np.mean([a * score(target, 0, 0) for a in adv], axis=0)
    assert np.allclose(clr_individual(target, ts, 2.0).vector, 2.0 * plain, atol=1e-15)


def test_clr_mixed_matches_direct(rng):
    target = tabular(rng.normal(size=(3, 3)))
    behaviors = [tabular(rng.normal(size=(3, 3))) for _ in range(3)]
    batches = [make_batch(bp, rng.integers(3, size=7), rng.normal(size=7), i + 1, rng)
               for i, bp in enumerate(behaviors)]
    direct = np.zeros(9)
    for b in batches:
        acc = np.zeros(9)
        for j in range(len(b)):
            f = math.exp(log_prob(target, b.states[j], b.actions[j]) - b.behavior_log_probs[j])
            acc += min(f, 1.5) * b.advantages[j] * score(target, b.states[j], b.actions[j])
        direct += acc / len(b)
    direct /= 3
    assert np.allclose(clr_average(target, ts_of(*batches), 1.5).vector, direct, atol=1e-13)


def test_clr_per_sample_norm_bound(rng):
    target = tabular(rng.normal(size=(3, 2)))
    b = make_batch(tabular(rng.normal(scale=2, size=(3, 2))), rng.integers(3, size=40), rng.normal(size=40), 1, rng)
    ts = ts_of(b)
    clipped = per_sample_gradients(target, ts, 1.3)
    raw = per_sample_gradients(target, ts, weighted=False)
    assert np.all(np.linalg.norm(clipped, axis=1) <= 1.3 * np.linalg.norm(raw, axis=1) + 1e-15)


def test_pg_norm_bound_tabular(rng):
    p = tabular(rng.normal(size=(4, 3)))
    adv = rng.uniform(-2, 2, size=100)
    b = make_batch(p, rng.integers(4, size=100), adv, 1, rng)
    assert pg_estimate(p, ts_of(b)).norm <= 2 * math.sqrt(2)


def test_non_finite_estimate_rejected():
    with pytest.raises(FloatingPointError):
        GradientEstimate(np.array([np.nan]), "PG", frozenset(), 1)


def test_is_identity_exhaustive_bandit():
    rewards = np.array([1.0, -0.5, 0.25])
    mdp = bandit(rewards)
    target = tabular([0.3, -0.2, 0.1])
    V, Q = value_functions(mdp, target)
    adv = Q[0] - V[0]
    exact = exact_policy_gradient(mdp, target)
    for logits in ([0.0, 0.0, 0.0], [1.0, -1.0, 0.5], [-2.0, 0.3, 1.1]):
        behavior = tabular(logits)
        pb = np.exp(log_prob(behavior, np.zeros(3, int), np.arange(3)))
        # E_behavior[lr_individual] = sum_a pi_b(a) * f(a) * A(a) * score(a), enumerated
        expectation = np.zeros(3)
        for a in range(3):
            ts = TrainingSet(np.ones(1, int), np.zeros(1, int), np.array([a]),
                             np.array([math.log(pb[a])]), np.array([adv[a]]), np.zeros(1))
            expectation += pb[a] * lr_individual(target, ts).vector
        assert np.max(np.abs(expectation - exact)) <= 1e-12
