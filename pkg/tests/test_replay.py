import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vrer.replay import (IterationBatch, ReplayBuffer, TrainingSet, buffer_push, build_training_set,
                         downsample)

from conftest import make_batch, tabular


def simple_batch(index, n=4):
    s = np.arange(n)
    return IterationBatch(index, None, s, s % 2, np.ones(n), s + 1, np.zeros(n, bool), np.full(n, -0.5),
                          np.zeros(n), np.arange(n, dtype=float), np.zeros(n))


def test_fifo_eviction():
    buf = ReplayBuffer(2)
    for i in (1, 2):
        buffer_push(buf, simple_batch(i))
    evicted = buf.push(simple_batch(3))
    assert buf.indices == [2, 3] and [b.iteration_index for b in evicted] == [1]


def test_push_to_empty():
    buf = buffer_push(ReplayBuffer(5), simple_batch(1))
    assert buf.indices == [1]


def test_default_capacity_400():
    buf = ReplayBuffer(400)
    for i in range(1, 402):
        buf.push(simple_batch(i, 1))
    assert len(buf) == 400 and buf.indices[0] == 2
    with pytest.raises(KeyError):
        buf.get(1)


def test_out_of_order_rejected():
    buf = ReplayBuffer(3)
    buf.push(simple_batch(5))
    with pytest.raises(ValueError):
        buf.push(simple_batch(5))
    with pytest.raises(ValueError):
        buf.push(simple_batch(2))


def test_dynamic_capacity():
    buf = ReplayBuffer(1, xi=0.5)
    for i in range(1, 11):
        buf.push(simple_batch(i))
        assert len(buf) <= math.ceil(i * 0.5)
    assert len(buf) == 5


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.lists(st.integers(1, 3), min_size=1, max_size=30))
def test_buffer_invariants_random_pushes(capacity, gaps):
    buf = ReplayBuffer(capacity)
    index = 0
    for g in gaps:
        index += g
        buf.push(simple_batch(index, 1))
        assert len(buf) <= capacity
        assert all(a < b for a, b in zip(buf.indices, buf.indices[1:]))
    assert buf.latest.iteration_index == index


def test_column_validation():
    with pytest.raises(ValueError):
        IterationBatch(0, None, np.zeros(3), np.zeros(2), np.zeros(3), np.zeros(3), np.zeros(3, bool),
                       np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        IterationBatch(0, None, np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1, bool),
                       np.array([-np.inf]), np.zeros(1))
    with pytest.raises(ValueError):
        IterationBatch(0, None, np.zeros(1), np.zeros(1), np.array([5.0]), np.zeros(1), np.zeros(1, bool),
                       np.zeros(1), np.zeros(1), reward_bound=1.0)


def test_transition_view():
    b = simple_batch(3)
    t = b[2]
    assert t.state == 2 and t.action == 0 and t.next_state == 3 and t.behavior_log_prob == -0.5
    assert len(b.transitions) == 4


def test_downsample_basic():
    b = simple_batch(1, 128)
    d = downsample(b, 3, 0)
    assert len(d) == 3 and set(d.states) <= set(b.states)
    assert np.array_equal(d.states, downsample(b, 3, 0).states)


def test_downsample_single_repeats():
    d = downsample(simple_batch(1, 1), 3, 0)
    assert list(d.states) == [0, 0, 0]


def test_downsample_errors():
    with pytest.raises(ValueError):
        downsample(simple_batch(1, 0), 3, 0)
    with pytest.raises(ValueError):
        downsample(simple_batch(1), 0, 0)


def test_duplicate_frequency_matches_with_replacement():
    n, n0, trials = 10, 3, 20_000
    expected = 1 - math.perm(n, n0) / n ** n0
    rng = np.random.default_rng(0)
    b = simple_batch(1, n)
    dup = np.mean([len(set(downsample(b, n0, rng).states)) < n0 for _ in range(trials)])
    assert abs(dup - expected) <= 4 * math.sqrt(expected * (1 - expected) / trials)


def test_training_set_cardinality_and_tags():
    buf = ReplayBuffer(10)
    for i in range(1, 6):
        buf.push(simple_batch(i, 20))
    ts = build_training_set(buf, [1, 2, 3, 4, 5], 3, 0)
    assert len(ts) == 15
    for tag, rows in ts.groups():
        assert len(rows) == 3
        assert set(ts.states[rows]) <= set(buf.get(tag).states)
    only = build_training_set(buf, [5], 3, 0)
    assert len(only) == 3 and set(only.tags) == {5}


def test_training_set_full_batches():
    buf = ReplayBuffer(10)
    for i in range(1, 4):
        buf.push(simple_batch(i, 20))
    ts = build_training_set(buf, [1, 3], 3, 0, full={3})
    assert np.sum(ts.tags == 3) == 20 and np.sum(ts.tags == 1) == 3


def test_training_set_evicted_index():
    buf = ReplayBuffer(1)
    buf.push(simple_batch(1))
    buf.push(simple_batch(2))
    with pytest.raises(KeyError):
        build_training_set(buf, [1, 2], 3, 0)
    with pytest.raises(ValueError):
        build_training_set(buf, [], 3, 0)


def test_dump_records(tmp_path, rng):
    buf = ReplayBuffer(3)
    p = tabular(np.zeros((4, 2)))
    buf.push(make_batch(p, np.array([0, 1, 2]), np.zeros(3), 1, rng))
    buf.dump(tmp_path / "buf.ndjson")
    lines = (tmp_path / "buf.ndjson").read_text().splitlines()
    assert len(lines) == 3
    rec = json.loads(lines[1])
    assert rec["iteration_index"] == 1 and rec["state"] == [1.0]
    assert rec["behavior_log_prob"] == pytest.approx(math.log(0.5))
    assert set(rec) == {"iteration_index", "state", "action", "reward", "behavior_log_prob",
                        "value_estimate", "terminal"}
