"""Iteration batches, the FIFO replay buffer and downsampled training sets.

A batch is stored column-wise (one numpy array per field) because buffers hold
hundreds of iterations; :class:`Transition` is the row view.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .policy import PolicySnapshot, forward


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: object
    reward: float
    next_state: np.ndarray
    terminal: bool
    behavior_log_prob: float
    value_estimate: float


_COLUMNS = ("states", "actions", "rewards", "next_states", "terminals",
            "behavior_log_probs", "values", "advantages", "returns")


@dataclass
class IterationBatch:
    """Transitions gathered under one policy snapshot, in collection order."""

    iteration_index: int
    snapshot: PolicySnapshot | None
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    behavior_log_probs: np.ndarray
    values: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    reward_bound: float | None = None
    # lazily cached forward output of the behaviour policy on ``states``
    _behavior_out: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.rewards)
        for name in _COLUMNS:
            col = getattr(self, name)
            if col is not None and len(col) != n:
                raise ValueError(f"column {name} has length {len(col)}, expected {n}")
        if not np.all(np.isfinite(self.behavior_log_probs)):
            raise ValueError("behaviour log-probabilities must be finite")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")
        if self.reward_bound is not None and np.any(np.abs(self.rewards) > self.reward_bound):
            raise ValueError(f"reward exceeds the configured bound {self.reward_bound}")

    def __len__(self) -> int:
        return len(self.rewards)

    def __getitem__(self, j) -> Transition:
        return Transition(self.states[j], self.actions[j], float(self.rewards[j]), self.next_states[j],
                          bool(self.terminals[j]), float(self.behavior_log_probs[j]), float(self.values[j]))

    def __iter__(self):
        return (self[j] for j in range(len(self)))

    @property
    def transitions(self) -> list[Transition]:
        return list(self)

    @property
    def snapshot_id(self) -> int | None:
        return None if self.snapshot is None else self.snapshot.iteration_index

    def take(self, idx) -> "IterationBatch":
        """Sub-batch with rows ``idx`` (order preserved, repeats allowed)."""
        idx = np.asarray(idx, dtype=np.int64)
        cols = {name: (None if getattr(self, name) is None else getattr(self, name)[idx]) for name in _COLUMNS}
        return IterationBatch(self.iteration_index, self.snapshot, **cols)

    def behavior_output(self):
        """Behaviour-policy forward output (logits or means) on this batch's states, computed once."""
        if self._behavior_out is None:
            if self.snapshot is None:
                raise ValueError("batch has no policy snapshot")
            self._behavior_out, _ = forward(self.snapshot.params, self.states)
        return self._behavior_out

    def to_records(self):
        for j in range(len(self)):
            s = np.atleast_1d(self.states[j])
            yield {
                "iteration_index": self.iteration_index,
                "state": [float(x) for x in s],
                "action": np.asarray(self.actions[j]).tolist(),
                "reward": float(self.rewards[j]),
                "behavior_log_prob": float(self.behavior_log_probs[j]),
                "value_estimate": float(self.values[j]),
                "terminal": bool(self.terminals[j]),
            }


class ReplayBuffer:
    """FIFO store of at most ``capacity`` iteration batches, oldest first.

    With ``xi`` set, capacity follows ``ceil(k * xi)`` for the iteration ``k`` being pushed.
    """

    def __init__(self, capacity: int, xi: float | None = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.xi = xi
        self.batches: deque[IterationBatch] = deque()

    def __len__(self) -> int:
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)

    def __contains__(self, index) -> bool:
        return any(b.iteration_index == index for b in self.batches)

    @property
    def indices(self) -> list[int]:
        return [b.iteration_index for b in self.batches]

    def get(self, index: int) -> IterationBatch:
        for b in self.batches:
            if b.iteration_index == index:
                return b
        raise KeyError(f"iteration {index} is not in the buffer (evicted or never stored)")

    @property
    def latest(self) -> IterationBatch:
        return self.batches[-1]

    def push(self, batch: IterationBatch) -> list[IterationBatch]:
        """Append ``batch`` and return the batches evicted to respect the capacity."""
        if self.batches and batch.iteration_index <= self.batches[-1].iteration_index:
            raise ValueError(
                f"iteration {batch.iteration_index} pushed after {self.batches[-1].iteration_index}; "
                "indices must strictly increase"
            )
        if self.xi is not None:
            self.capacity = max(1, math.ceil(batch.iteration_index * self.xi))
        self.batches.append(batch)
        evicted = []
        while len(self.batches) > self.capacity:
            evicted.append(self.batches.popleft())
        return evicted

    def dump(self, path) -> None:
        """Write every stored transition as one JSON object per line."""
        with open(path, "w") as fh:
            for b in self.batches:
                for rec in b.to_records():
                    fh.write(json.dumps(rec) + "\n")


def buffer_push(buffer: ReplayBuffer, batch: IterationBatch) -> ReplayBuffer:
    buffer.push(batch)
    return buffer


def downsample(batch: IterationBatch, n0: int, rng=None) -> IterationBatch:
    """Draw ``n0`` transitions from ``batch`` uniformly with replacement."""
    if n0 < 1:
        raise ValueError("n0 must be at least 1")
    if len(batch) == 0:
        raise ValueError("cannot downsample an empty batch")
    rng = np.random.default_rng(rng)
    return batch.take(rng.integers(len(batch), size=n0))


@dataclass
class TrainingSet:
    """Concatenated samples from several batches, each row tagged with its behaviour iteration."""

    tags: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    behavior_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.tags)

    def subset(self, idx) -> "TrainingSet":
        return TrainingSet(*(getattr(self, f)[idx] for f in
                             ("tags", "states", "actions", "behavior_log_probs", "advantages", "returns")))

    @classmethod
    def from_batches(cls, batches) -> "TrainingSet":
        batches = list(batches)
        if not batches:
            raise ValueError("training set needs at least one batch")
        for b in batches:
            if b.advantages is None or b.returns is None:
                raise ValueError(f"batch {b.iteration_index} has no advantages attached")
        return cls(
            np.concatenate([np.full(len(b), b.iteration_index) for b in batches]),
            np.concatenate([b.states for b in batches]),
            np.concatenate([b.actions for b in batches]),
            np.concatenate([b.behavior_log_probs for b in batches]),
            np.concatenate([b.advantages for b in batches]),
            np.concatenate([b.returns for b in batches]),
        )

    def groups(self):
        """Yield ``(iteration_index, row indices)`` in order of first appearance."""
        _, first = np.unique(self.tags, return_index=True)
        for tag in self.tags[np.sort(first)]:
            yield int(tag), np.flatnonzero(self.tags == tag)


def build_training_set(buffer: ReplayBuffer, reuse, n0: int, rng=None, full=()) -> TrainingSet:
    """Downsample ``n0`` transitions from every batch in ``reuse`` and tag them.

    Iteration indices listed in ``full`` contribute their whole batch instead.
    """
    members = sorted(reuse)
    if not members:
        raise ValueError("reuse set is empty")
    if n0 < 1:
        raise ValueError("n0 must be at least 1")
    rng = np.random.default_rng(rng)
    by_index = {b.iteration_index: b for b in buffer}
    parts = []
    for i in members:
        if i not in by_index:
            raise KeyError(f"iteration {i} is not in the buffer (evicted or never stored)")
        b = by_index[i]
        if b.advantages is None or b.returns is None:
            raise ValueError(f"batch {i} has no advantages attached")
        # same draws as downsample(), without building an intermediate batch
        idx = np.arange(len(b)) if i in full else rng.integers(len(b), size=n0)
        parts.append((i, b, idx))
    return TrainingSet(
        np.concatenate([np.full(len(idx), i) for i, _, idx in parts]),
        *(np.concatenate([getattr(b, f)[idx] for _, b, idx in parts])
          for f in ("states", "actions", "behavior_log_probs", "advantages", "returns")),
    )
