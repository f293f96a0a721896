import numpy as np
import pytest

from vrer.envs import ChainMDP
from vrer.policy import PolicyParams, PolicySnapshot, log_prob, sample_action
from vrer.replay import IterationBatch


def bandit(rewards, gamma=0.99):
    """Single-state MDP whose actions pay ``rewards``."""
    r = np.asarray(rewards, dtype=np.float64)[None, :]
    return ChainMDP(np.ones((1, r.shape[1], 1)), r, gamma=gamma, eps=0.0)


def tabular(logits):
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    return PolicyParams("tabular_softmax", logits.ravel(), logits.shape)


def make_batch(params, states, advantages, index, rng, returns=None):
    """Batch of actions sampled from ``params`` at ``states`` with the given advantages."""
    states = np.asarray(states)
    actions = sample_action(params, states, rng)
    n = len(states)
    adv = np.asarray(advantages(actions) if callable(advantages) else advantages, dtype=np.float64)
    return IterationBatch(
        index, PolicySnapshot.take(params, index), states, actions, np.zeros(n), states.copy(),
        np.zeros(n, dtype=bool), np.atleast_1d(log_prob(params, states, actions)), np.zeros(n),
        adv, adv if returns is None else returns,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, when those tests ran."""
    import re
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    outcome = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            m = re.search(r"test_acceptance\.py::test_c(\d+)_", rep.nodeid)
            if m is None or rep.when != "call" and status == "passed":
                continue
            n = int(m.group(1))
            outcome[n] = outcome.get(n, True) and status == "passed"
    if not outcome:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(outcome):
        verdict = "PASS" if outcome[n] else "FAIL"
        detail = mod.MEASURED.get(n, "")
        terminalreporter.write_line(f"criterion {n:2d} {verdict}  {mod.CRITERIA[n]}: {detail}")
