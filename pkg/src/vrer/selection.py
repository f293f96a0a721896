"""Choosing which buffered iterations to replay at the current iteration."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .policy import PolicyParams, forward, kl_from_outputs
from .replay import IterationBatch, ReplayBuffer
from .variance import rule1_statistics

RULES = ("bootstrap", "kl", "none")


@dataclass
class SelectionConfig:
    """``rule`` is ``"bootstrap"`` (variance traces), ``"kl"`` (mean-KL bound) or ``"none"`` (on-policy only)."""

    rule: str = "kl"
    c: float = 1.05
    Uf: float | None = 2.0
    block_length: int | None = None
    test_mode: bool = False

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown selection rule {self.rule!r}; expected one of {RULES}")
        if self.Uf is not None and self.Uf <= 0:
            raise ValueError("Uf must be positive")
        if self.c < 1 or (self.c == 1 and not self.test_mode):
            if not self.test_mode:
                raise ValueError(f"selection constant c must exceed 1 (got {self.c})")
            if self.c < 1:
                raise ValueError(f"selection constant c must be at least 1 (got {self.c})")
        if self.c == 1:
            warnings.warn("c = 1 keeps only samples from the current policy", RuntimeWarning)


@dataclass
class Decision:
    index: int
    statistic: float
    threshold: float
    accepted: bool


@dataclass
class ReuseSet:
    members: list[int]
    log: list[Decision] = field(default_factory=list)
    buffer_size: int = 1

    @property
    def reuse_ratio(self) -> float:
        return len(self.members) / self.buffer_size

    def __contains__(self, index) -> bool:
        return index in self.members

    def __len__(self) -> int:
        return len(self.members)


def rule2_threshold(zeta_hat: float, c: float) -> float:
    """``log(1 + (c - 1) * zeta / (zeta + 1))``; tends to ``log c`` as zeta grows."""
    if zeta_hat < 0:
        raise ValueError("zeta_hat must be nonnegative")
    frac = 1.0 if math.isinf(zeta_hat) else zeta_hat / (zeta_hat + 1.0)
    return math.log1p((c - 1.0) * frac)


def rule1_accept(params: PolicyParams, candidate: IterationBatch, current: IterationBatch,
                 config: SelectionConfig) -> bool:
    cand, pg = rule1_statistics(params, candidate, current, config.Uf, config.block_length)
    return cand <= config.c * pg


def rule2_accept(target: PolicyParams, behavior, states, zeta_hat: float, c: float) -> bool:
    """Accept when the mean KL(target || behaviour) over ``states`` is within the threshold."""
    from .policy import mean_kl

    behavior = getattr(behavior, "params", behavior)
    return mean_kl(target, behavior, states) <= rule2_threshold(zeta_hat, c)


def kl_per_batch(params: PolicyParams, batches) -> list[float]:
    """Mean KL of each batch's snapshot from ``params``, using one target forward pass."""
    batches = list(batches)
    states = np.concatenate([b.states for b in batches])
    out_t, _ = forward(params, states)
    out_b = np.concatenate([b.behavior_output() for b in batches])
    starts = np.cumsum([0] + [len(b) for b in batches[:-1]])
    # a single KL evaluation over all rows is valid when every behaviour shares the Gaussian std
    if len({b.snapshot.params.fixed_std for b in batches}) == 1:
        kl = kl_from_outputs(params, out_t, batches[0].snapshot.params, out_b)
    else:
        kl = np.concatenate([kl_from_outputs(params, o, b.snapshot.params, ob) for b, o, ob in
                             zip(batches, np.split(out_t, starts[1:]), np.split(out_b, starts[1:]))])
    sums = np.add.reduceat(kl, starts)
    return [float(s / len(b)) for s, b in zip(sums, batches)]


def build_reuse_set(buffer: ReplayBuffer, params: PolicyParams, config: SelectionConfig,
                    zeta_hat: float | None = None, current_index: int | None = None) -> ReuseSet:
    """Scan the buffer with the configured rule; the current iteration is always kept.

    ``zeta_hat=None`` (no optimizer step taken yet) is treated as an unbounded
    relative variance.
    """
    if len(buffer) == 0:
        raise ValueError("buffer is empty")
    k = buffer.latest.iteration_index if current_index is None else current_index
    current = buffer.get(k)
    batches = list(buffer)
    log = []
    if config.rule == "none":
        log = [Decision(b.iteration_index, math.nan, math.nan, b.iteration_index == k) for b in batches]
    elif config.rule == "kl":
        zeta = math.inf if zeta_hat is None else zeta_hat
        thr = rule2_threshold(zeta, config.c)
        for b, kl in zip(batches, kl_per_batch(params, batches)):
            log.append(Decision(b.iteration_index, kl, thr, b.iteration_index == k or kl <= thr))
    else:
        pg_trace = None
        for b in batches:
            cand, pg = rule1_statistics(params, b, current, config.Uf, config.block_length)
            pg_trace = pg if pg_trace is None else pg_trace
            thr = config.c * pg_trace
            log.append(Decision(b.iteration_index, cand, thr, b.iteration_index == k or cand <= thr))
    members = [d.index for d in log if d.accepted]
    return ReuseSet(members, log, len(buffer))
