"""Scenario gradients, GAE and the PG / LR / CLR policy-gradient estimators.

Sample containers are :class:`~vrer.replay.TrainingSet` objects: every row
carries its behaviour iteration (``tags``), the behaviour log-probability
recorded at collection time and a frozen advantage.  Scores are always
recomputed under the target parameters.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .policy import PolicyParams, log_prob, score, weighted_score_sum
from .replay import TrainingSet

# exp() of anything above this is treated as an overflow
LOG_RATIO_CAP = 50.0
RATIO_SENTINEL = math.exp(LOG_RATIO_CAP)


@dataclass
class GradientEstimate:
    vector: np.ndarray
    kind: str  # "PG", "LR" or "CLR"
    source_indices: frozenset
    sample_count: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector)):
            raise FloatingPointError(f"{self.kind} gradient estimate has non-finite components")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))


class RatioStats:
    """Counts likelihood ratios that hit the overflow sentinel."""

    capped = 0


def scenario_gradient(params: PolicyParams, advantage, state, action):
    """``advantage * grad log pi(action | state)``."""
    g = score(params, state, action)
    adv = np.asarray(advantage, dtype=np.float64)
    return g * adv[:, None] if adv.ndim else g * adv


def gae_advantages(rewards, values, terminals, gamma=0.99, lam=0.95):
    """Generalised advantage estimates for one contiguous segment.

    ``values`` has one more entry than ``rewards``: the bootstrap value of the
    state following the last transition.  Chains are cut at terminals.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=bool)
    n = len(rewards)
    if len(values) != n + 1 or len(terminals) != n:
        raise ValueError("gae_advantages needs len(values) == len(rewards) + 1 == len(terminals) + 1")
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 0.0 if terminals[t] else 1.0
        delta = rewards[t] + gamma * values[t + 1] * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
    return adv


def discounted_returns(rewards, terminals, bootstrap, gamma=0.99):
    """Returns-to-go, restarted at terminals and bootstrapped at the segment end."""
    out = np.zeros(len(rewards))
    running = bootstrap
    for t in range(len(rewards) - 1, -1, -1):
        if terminals[t]:
            running = 0.0
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def log_ratios(params: PolicyParams, samples: TrainingSet):
    return log_prob(params, samples.states, samples.actions) - samples.behavior_log_probs


def likelihood_ratios(params: PolicyParams, samples: TrainingSet):
    """``pi_target / pi_behavior`` per sample, computed in log space.

    Log-ratios above ``LOG_RATIO_CAP`` are replaced by ``RATIO_SENTINEL`` and counted.
    """
    lr = log_ratios(params, samples)
    over = lr > LOG_RATIO_CAP
    if over.any():
        RatioStats.capped += int(over.sum())
        warnings.warn(f"{int(over.sum())} likelihood ratios capped at {RATIO_SENTINEL:.3g}", RuntimeWarning)
    return np.where(over, RATIO_SENTINEL, np.exp(np.minimum(lr, LOG_RATIO_CAP)))


def likelihood_ratio(target: PolicyParams, state, action, behavior_log_prob) -> float:
    """Single-sample ratio ``exp(log pi_target(a|s) - behavior_log_prob)``."""
    lr = log_prob(target, state, action) - behavior_log_prob
    if lr > LOG_RATIO_CAP:
        RatioStats.capped += 1
        return RATIO_SENTINEL
    return math.exp(lr)


def clip_ratio(ratio, Uf):
    """``min(ratio, Uf)``; ``Uf=None`` or ``inf`` leaves ratios untouched."""
    if Uf is None:
        return ratio
    if Uf <= 0:
        raise ValueError("Uf must be positive")
    return np.minimum(ratio, Uf)


def sample_weights(params, samples: TrainingSet, Uf=None, weighting="group"):
    """Per-sample coefficients ``c_j`` such that the estimator is ``sum_j c_j * score_j``.

    ``weighting="group"`` averages within each behaviour iteration and then across
    iterations; ``"pooled"`` averages over all samples at once.  The two agree
    when every iteration contributes the same number of samples.
    """
    ratios = clip_ratio(likelihood_ratios(params, samples), Uf)
    c = ratios * samples.advantages
    if weighting == "pooled":
        return c / len(samples)
    if weighting != "group":
        raise ValueError(f"unknown weighting {weighting!r}")
    tags, inverse, counts = np.unique(samples.tags, return_inverse=True, return_counts=True)
    return c / counts[inverse] / len(tags)


def _estimate(params, samples, kind, Uf=None, weighting="group"):
    if len(samples) == 0:
        raise ValueError("estimator needs at least one sample")
    coeffs = sample_weights(params, samples, Uf, weighting)
    vec = weighted_score_sum(params, samples.states, samples.actions, coeffs)
    return GradientEstimate(vec, kind, frozenset(int(t) for t in np.unique(samples.tags)), len(samples))


def pg_estimate(params: PolicyParams, samples: TrainingSet) -> GradientEstimate:
    """Classical on-policy estimator: mean of scenario gradients.

    Samples are assumed to come from ``params`` itself, so no ratio is applied.
    """
    if len(np.unique(samples.tags)) > 1:
        raise ValueError("pg_estimate takes samples from the current iteration only")
    if len(samples) == 0:
        raise ValueError("estimator needs at least one sample")
    coeffs = samples.advantages / len(samples)
    vec = weighted_score_sum(params, samples.states, samples.actions, coeffs)
    return GradientEstimate(vec, "PG", frozenset(int(t) for t in np.unique(samples.tags)), len(samples))


def _single_group(samples):
    if len(np.unique(samples.tags)) != 1:
        raise ValueError("individual estimators take samples from a single behaviour iteration")


def lr_individual(params, samples: TrainingSet) -> GradientEstimate:
    _single_group(samples)
    return _estimate(params, samples, "LR")


def lr_average(params, samples: TrainingSet) -> GradientEstimate:
    """Unweighted mean over behaviour iterations of the individual LR estimators."""
    return _estimate(params, samples, "LR")


def clr_individual(params, samples: TrainingSet, Uf) -> GradientEstimate:
    _single_group(samples)
    return _estimate(params, samples, "CLR", Uf)


def clr_average(params, samples: TrainingSet, Uf) -> GradientEstimate:
    return _estimate(params, samples, "CLR", Uf)


def per_sample_gradients(params, samples: TrainingSet, Uf=None, weighted=True):
    """(N, d) matrix of (optionally ratio-weighted) scenario gradients in sample order."""
    g = score(params, samples.states, samples.actions) * samples.advantages[:, None]
    if weighted:
        g *= clip_ratio(likelihood_ratios(params, samples), Uf)[:, None]
    return g
