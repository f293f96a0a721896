"""Gradient-variance estimation: moving-block bootstrap traces and Adam moments."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .estimators import per_sample_gradients
from .replay import IterationBatch, TrainingSet

EPS_GUARD = 1e-12


@dataclass(frozen=True)
class VarianceReport:
    trace_variance: float
    block_length: int
    sample_count: int


def default_block_length(n: int) -> int:
    """``floor(n ** (1/3))``, at least 1."""
    l = int(math.floor(n ** (1.0 / 3.0) + 1e-9))
    return max(1, min(l, n))


def block_means(x: np.ndarray, l: int) -> np.ndarray:
    """Means of all ``n - l + 1`` overlapping blocks of length ``l`` along axis 0."""
    cs = np.concatenate([np.zeros((1,) + x.shape[1:]), np.cumsum(x, axis=0)])
    return (cs[l:] - cs[:-l]) / l


def mbb_trace_variance(gradients, l: int | None = None) -> VarianceReport:
    """Plug-in moving-block-bootstrap estimate of ``Tr Var`` of the sample mean.

    ``(l / n) * [mean_j ||bbar_j||^2 - ||mean_j bbar_j||^2]`` over the block means
    ``bbar_j``.  ``gradients`` must be in collection order.
    """
    g = np.asarray(gradients, dtype=np.float64)
    if g.ndim == 1:
        g = g[:, None]
    n = g.shape[0]
    if l is None:
        l = default_block_length(n)
    if not 1 <= l <= n:
        raise ValueError(f"block length {l} must lie in [1, n={n}]")
    # centring leaves the estimate unchanged but keeps the cumulative sums small
    g = g - g.mean(axis=0)
    bm = block_means(g, l)
    centred = bm - bm.mean(axis=0)
    trace = (l / n) * float(np.mean(np.sum(centred * centred, axis=1)))
    return VarianceReport(trace, l, n)


def rule1_statistics(params, candidate: IterationBatch, current: IterationBatch, Uf=None, l=None):
    """MBB traces of the candidate's LR (or CLR) estimator and the current PG estimator."""
    if len(candidate) == 0 or len(current) == 0:
        raise ValueError("rule1_statistics needs two nonempty batches")
    cand = per_sample_gradients(params, TrainingSet.from_batches([candidate]), Uf, weighted=True)
    cur = per_sample_gradients(params, TrainingSet.from_batches([current]), weighted=False)
    lc = l if l is not None else default_block_length(len(candidate))
    lk = l if l is not None else default_block_length(len(current))
    return mbb_trace_variance(cand, lc).trace_variance, mbb_trace_variance(cur, lk).trace_variance


# ---------------------------------------------------------------------------
# Adam moments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamMoments:
    m_raw: np.ndarray
    v_raw: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999

    @classmethod
    def zeros(cls, dim, beta1=0.9, beta2=0.999) -> "AdamMoments":
        return cls(np.zeros(dim), np.zeros(dim), 0, beta1, beta2)

    def corrected(self):
        """Bias-corrected ``(m, v)``."""
        if self.step == 0:
            return self.m_raw.copy(), self.v_raw.copy()
        return (self.m_raw / (1.0 - self.beta1 ** self.step),
                self.v_raw / (1.0 - self.beta2 ** self.step))


def adam_update(moments: AdamMoments, gradient) -> AdamMoments:
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != moments.m_raw.shape:
        raise ValueError(f"gradient shape {g.shape} does not match moments {moments.m_raw.shape}")
    b1, b2 = moments.beta1, moments.beta2
    return replace(
        moments,
        m_raw=b1 * moments.m_raw + (1.0 - b1) * g,
        v_raw=b2 * moments.v_raw + (1.0 - b2) * g * g,
        step=moments.step + 1,
    )


def relative_variance(moments: AdamMoments) -> float:
    """``sum(max(v - m^2, 0)) / (sum(m^2) + eps)`` from the bias-corrected moments."""
    if moments.step < 1:
        raise ValueError("relative variance needs at least one Adam update")
    m, v = moments.corrected()
    num = np.maximum(v - m * m, 0.0).sum()
    return float(max(num / (np.sum(m * m) + EPS_GUARD), 0.0))


def variance_ratio_approx(mean_kl: float, zeta: float) -> float:
    """``exp(KL) * (1 + 1/zeta) - 1/zeta``: predicted Tr Var[LR] / Tr Var[PG]."""
    if not zeta > 0:
        raise ValueError("zeta must be positive")
    if mean_kl < 0:
        raise ValueError("mean_kl must be nonnegative")
    inv = 0.0 if math.isinf(zeta) else 1.0 / zeta
    return math.exp(mean_kl) * (1.0 + inv) - inv
