"""Actor-critic training loop with variance-reduction experience replay.

Each iteration collects ``n`` steps from every environment, pushes the batch to
the replay buffer, picks the reuse set, trains on the current batch plus ``n0``
resampled transitions from each reused historical batch, and snapshots the
updated policy for the next iteration.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import ChainMDP, VecCartPole, VecChain, exact_policy_gradient
from .estimators import discounted_returns, gae_advantages, per_sample_gradients, sample_weights
from .policy import (CriticParams, PolicyParams, PolicySnapshot, critic_loss_and_grad, critic_value,
                     entropy_grad, init_critic, init_policy, log_prob, sample_action, save_params,
                     weighted_score_sum)
from .replay import IterationBatch, ReplayBuffer, TrainingSet, build_training_set
from .selection import ReuseSet, SelectionConfig, build_reuse_set
from .variance import (AdamMoments, adam_update, default_block_length, mbb_trace_variance,
                       relative_variance)

ADAM_EPS = 1e-8

METRIC_COLUMNS = ("k", "steps", "mean_return", "reuse_ratio", "pg_trace_var", "lr_trace_var",
                  "zeta_hat", "mean_kl_min", "mean_kl_max", "wall_ms")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    env: str = "cartpole"  # "cartpole" or "chain"
    chain_file: str = ""  # empty -> random chain built from chain_states/chain_actions/chain_seed
    chain_states: int = 3
    chain_actions: int = 2
    chain_seed: int = 0
    policy: str = ""  # empty -> mlp_softmax for cartpole, tabular_softmax for chain
    hidden: tuple = (64, 64)
    n: int = 128
    num_envs: int = 12
    K: int = 195
    K_off: int = 4
    minibatch_size: int = 128
    n0: int = 3
    learning_rate: float = 3e-4
    gamma: float = 0.99
    lam: float = 0.95
    entropy_coef: float = 0.01
    value_loss_coef: float = 0.5
    grad_norm_clip: float = 0.5
    normalize_advantages: bool = False
    optimizer: str = "adam"  # "adam" or "sgd"
    lr_decay: float = 0.0  # sgd step size is learning_rate * k ** -lr_decay
    buffer_capacity: int = 400
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    seed: int = 0
    diagnostics: bool = True
    wall_clock: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        for name in ("n", "num_envs", "K", "minibatch_size", "n0", "buffer_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.K_off < 0:
            raise ValueError("K_off must be nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.gamma <= 1 or not 0 <= self.lam <= 1:
            raise ValueError("gamma and lam must lie in [0, 1]")
        if self.grad_norm_clip is not None and self.grad_norm_clip <= 0:
            raise ValueError("grad_norm_clip must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.env not in ("cartpole", "chain"):
            raise ValueError(f"unknown env {self.env!r}")

    @property
    def baseline(self) -> bool:
        return self.selection.rule == "none"

    @property
    def policy_kind(self) -> str:
        if self.policy:
            return self.policy
        return "mlp_softmax" if self.env == "cartpole" else "tabular_softmax"


@dataclass
class IterationMetrics:
    k: int
    steps: int
    mean_return: float
    reuse_ratio: float
    pg_trace_var: float | None = None
    lr_trace_var: float | None = None
    zeta_hat: float | None = None
    mean_kl_min: float | None = None
    mean_kl_max: float | None = None
    wall_ms: float = 0.0

    def row(self):
        return [_fmt(getattr(self, c)) for c in METRIC_COLUMNS]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


@dataclass
class OptimizerState:
    policy: AdamMoments
    critic: AdamMoments


# ---------------------------------------------------------------------------
# environments
# ---------------------------------------------------------------------------


def make_mdp(config: TrainConfig) -> ChainMDP:
    if config.chain_file:
        return ChainMDP.from_file(config.chain_file)
    return ChainMDP.random(config.chain_states, config.chain_actions, rng=config.chain_seed, gamma=config.gamma)


def make_envs(config: TrainConfig, seed):
    if config.env == "cartpole":
        return VecCartPole(config.num_envs, seed)
    return VecChain(make_mdp(config), config.num_envs, seed)


# ---------------------------------------------------------------------------
# step 1: rollout
# ---------------------------------------------------------------------------


def collect_rollout(envs, params: PolicyParams, critic: CriticParams, n: int, rng,
                    iteration_index=0, gamma=0.99, lam=0.95, snapshot=None):
    """Run ``n`` steps in every environment and return ``(batch, finished)``.

    The batch is ordered env-major (all of env 0's steps, then env 1, ...) so each
    environment's trajectory is a contiguous segment.  ``finished`` lists
    ``(t, return)`` for episodes that ended at step ``t`` of the rollout.
    Episodes cut by a time limit have the discounted value of their final state
    folded into the last reward when computing advantages and returns.
    """
    E = envs.num_envs
    obs, act, rew, adj, nxt_l, done_l, logp, val = [], [], [], [], [], [], [], []
    finished = []
    for t in range(n):
        s = envs.obs.copy()
        a = sample_action(params, s, rng)
        obs.append(s)
        act.append(a)
        logp.append(np.atleast_1d(log_prob(params, s, a)))
        val.append(np.atleast_1d(critic_value(critic, s)))
        nxt, r, done, fin = envs.step(a)
        r = np.asarray(r, dtype=np.float64)
        r_adj = r.copy()
        if envs.truncated.any():
            tr = envs.truncated
            r_adj[tr] += gamma * np.atleast_1d(critic_value(critic, nxt[tr]))
        rew.append(r)
        adj.append(r_adj)
        nxt_l.append(nxt)
        done_l.append(np.asarray(done, dtype=bool))
        finished.extend((t, ret) for ret in fin)
    last_v = np.atleast_1d(critic_value(critic, envs.obs))

    def env_major(cols):
        x = np.stack(cols)  # (n, E, ...)
        return np.swapaxes(x, 0, 1).reshape((n * E,) + x.shape[2:])

    R_adj = np.stack(adj)
    D = np.stack(done_l)
    V = np.stack(val)
    adv = np.empty((E, n))
    ret = np.empty((E, n))
    for e in range(E):
        adv[e] = gae_advantages(R_adj[:, e], np.append(V[:, e], last_v[e]), D[:, e], gamma, lam)
        ret[e] = discounted_returns(R_adj[:, e], D[:, e], last_v[e], gamma)
    batch = IterationBatch(
        iteration_index, snapshot, env_major(obs), env_major(act), env_major(rew), env_major(nxt_l),
        env_major(done_l), env_major(logp), env_major(val), adv.reshape(-1), ret.reshape(-1),
    )
    return batch, finished


# ---------------------------------------------------------------------------
# step 3: offline optimisation
# ---------------------------------------------------------------------------


def adam_step(params, moments: AdamMoments, gradient, lr):
    """One bias-corrected Adam *ascent* step; ``params`` is an array or a parameter object."""
    moments = adam_update(moments, gradient)
    m, v = moments.corrected()
    delta = lr * m / (np.sqrt(v) + ADAM_EPS)
    if isinstance(params, np.ndarray):
        return params + delta, moments
    new = params.copy()
    new.weights = new.weights + delta
    return new, moments


def clip_by_global_norm(grads, max_norm):
    """Scale every array in ``grads`` by a common factor so their joint norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.dot(g, g)) for g in grads))
    if max_norm is None or total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    return [g * scale for g in grads], total


def minibatch_gradients(params, critic, mb: TrainingSet, config: TrainConfig, current_index):
    """Policy ascent direction and critic descent gradient for one minibatch."""
    if config.normalize_advantages and len(mb) > 1:
        a = mb.advantages
        mb = TrainingSet(mb.tags, mb.states, mb.actions, mb.behavior_log_probs,
                         (a - a.mean()) / (a.std() + 1e-8), mb.returns)
    coeffs = sample_weights(params, mb, config.selection.Uf, weighting="pooled")
    g = weighted_score_sum(params, mb.states, mb.actions, coeffs)
    if config.entropy_coef:
        g = g + config.entropy_coef * entropy_grad(params, mb.states)
    cur = mb.tags == current_index
    if cur.any():
        _, cg = critic_loss_and_grad(critic, mb.states[cur], mb.returns[cur])
        cg = config.value_loss_coef * cg
    else:
        cg = np.zeros_like(critic.weights)
    return g, cg


def offline_optimize(params: PolicyParams, critic: CriticParams, training_set: TrainingSet,
                     config: TrainConfig, state: OptimizerState, rng, current_index, k=1):
    """``K_off`` epochs of shuffled minibatch updates; returns ``(params, critic, state)``.

    The critic only regresses on rows from ``current_index``: historical returns
    were computed under older policies.
    """
    if len(training_set) == 0:
        raise ValueError("training set is empty")
    N = len(training_set)
    lr = config.learning_rate
    if config.optimizer == "sgd":
        lr = config.learning_rate * k ** (-config.lr_decay)
    for _ in range(config.K_off):
        perm = rng.permutation(N)
        for start in range(0, N, config.minibatch_size):
            mb = training_set.subset(perm[start:start + config.minibatch_size])
            g, cg = minibatch_gradients(params, critic, mb, config, current_index)
            (g, cg), _ = clip_by_global_norm([g, cg], config.grad_norm_clip)
            if config.optimizer == "adam":
                params, pm = adam_step(params, state.policy, g, lr)
                c_w, cm = adam_step(critic.weights, state.critic, -cg, lr)
            else:
                # moments are still tracked: they supply the relative-variance estimate
                pm, cm = adam_update(state.policy, g), adam_update(state.critic, -cg)
                params = params.with_weights(params.weights + lr * g)
                c_w = critic.weights - lr * cg
            critic = CriticParams(c_w, critic.sizes, critic.tabular)
            state = OptimizerState(pm, cm)
    return params, critic, state


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def pg_trace_variance(params, batch: IterationBatch) -> float:
    g = per_sample_gradients(params, TrainingSet.from_batches([batch]), weighted=False)
    return mbb_trace_variance(g, default_block_length(len(batch))).trace_variance


def training_set_trace_variance(params, ts: TrainingSet, Uf, current_index) -> float:
    """Trace variance of the pooled estimator, treating groups as independent.

    The current batch keeps its serial order and uses the default block length;
    resampled historical groups are i.i.d. draws, so their block length is 1.
    """
    g = per_sample_gradients(params, ts, Uf, weighted=True)
    N = len(ts)
    total = 0.0
    for tag, rows in ts.groups():
        l = default_block_length(len(rows)) if tag == current_index else 1
        total += (len(rows) / N) ** 2 * mbb_trace_variance(g[rows], l).trace_variance
    return total


# ---------------------------------------------------------------------------
# steps 1-4
# ---------------------------------------------------------------------------


@dataclass
class IterationState:
    k: int
    params: PolicyParams
    critic: CriticParams
    batch: IterationBatch
    reuse: ReuseSet
    metrics: IterationMetrics
    finished: list


def iterate(config: TrainConfig, envs=None):
    """Yield an :class:`IterationState` after every completed iteration ``k = 1..K``."""
    env_ss, init_ss, act_ss, opt_ss = np.random.SeedSequence(config.seed).spawn(4)
    envs = envs if envs is not None else make_envs(config, env_ss)
    init_rng = np.random.default_rng(init_ss)
    tabular = config.policy_kind == "tabular_softmax"
    params = init_policy(config.policy_kind, envs.obs_dim, envs.num_actions, config.hidden, rng=init_rng)
    critic = init_critic(envs.obs_dim, config.hidden, rng=init_rng, tabular=tabular)
    state = OptimizerState(AdamMoments.zeros(params.dim), AdamMoments.zeros(len(critic.weights)))
    act_rng = np.random.default_rng(act_ss)
    opt_rng = np.random.default_rng(opt_ss)
    buffer = ReplayBuffer(config.buffer_capacity)
    recent = []
    steps = 0
    for k in range(1, config.K + 1):
        t0 = time.perf_counter()
        try:
            snap = PolicySnapshot.take(params, k)
            batch, finished = collect_rollout(envs, params, critic, config.n, act_rng, k,
                                              config.gamma, config.lam, snapshot=snap)
            buffer.push(batch)
            zeta = relative_variance(state.policy) if state.policy.step else None
            reuse = build_reuse_set(buffer, params, config.selection, zeta, k)
            ts = build_training_set(buffer, reuse.members, config.n0, opt_rng, full={k})

            metrics = IterationMetrics(k, steps + len(batch), math.nan, reuse.reuse_ratio, zeta_hat=zeta)
            if config.diagnostics:
                metrics.pg_trace_var = pg_trace_variance(params, batch)
                metrics.lr_trace_var = training_set_trace_variance(params, ts, config.selection.Uf, k)
            if config.selection.rule == "kl":
                kls = [d.statistic for d in reuse.log if d.index != k]
                if kls:
                    metrics.mean_kl_min, metrics.mean_kl_max = min(kls), max(kls)

            params, critic, state = offline_optimize(params, critic, ts, config, state, opt_rng, k, k)
        except Exception as e:  # surfaced with the failing iteration
            raise TrainingError(f"iteration {k}: {e}") from e
        steps += len(batch)
        episode_ends = [(steps - len(batch) + (t + 1) * envs.num_envs, ret) for t, ret in finished]
        recent = (recent + [r for _, r in episode_ends])[-100:]
        metrics.mean_return = float(np.mean(recent)) if recent else math.nan
        if config.wall_clock:
            metrics.wall_ms = (time.perf_counter() - t0) * 1000.0
        yield IterationState(k, params, critic, batch, reuse, metrics, episode_ends)


@dataclass
class TrainResult:
    metrics: list
    params: PolicyParams
    critic: CriticParams
    episodes: list  # (k, step, return)


def train(config: TrainConfig, out_dir=None) -> TrainResult:
    """Run ``config.K`` iterations; with ``out_dir`` write metrics, selection log, episodes and parameters."""
    out = Path(out_dir) if out_dir is not None else None
    writers = {}
    files = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        for name, header in (("metrics", METRIC_COLUMNS),
                             ("selection", ("k", "candidate", "statistic", "threshold", "accepted")),
                             ("episodes", ("k", "step", "return"))):
            fh = open(out / f"{name}.csv", "w", newline="")
            files.append(fh)
            writers[name] = csv.writer(fh, lineterminator="\n")
            writers[name].writerow(header)
    metrics, episodes = [], []
    it = None
    try:
        for it in iterate(config):
            metrics.append(it.metrics)
            episodes.extend((it.k, s, r) for s, r in it.finished)
            if writers:
                writers["metrics"].writerow(it.metrics.row())
                for d in it.reuse.log:
                    writers["selection"].writerow([it.k, d.index, _fmt(d.statistic), _fmt(d.threshold), int(d.accepted)])
                for s, r in it.finished:
                    writers["episodes"].writerow([it.k, s, _fmt(r)])
    finally:
        for fh in files:
            fh.close()
    if it is None:
        raise TrainingError("no iterations were run")
    if out is not None:
        save_params(out / "policy.bin", it.params)
        save_params(out / "critic.bin", it.critic)
    return TrainResult(metrics, it.params, it.critic, episodes)


# ---------------------------------------------------------------------------
# tabular convergence diagnostic
# ---------------------------------------------------------------------------


def tabular_convergence_probe(mdp: ChainMDP, config: TrainConfig) -> np.ndarray:
    """Running average over iterations of the exact squared gradient norm at ``theta_k``.

    Entry ``k - 1`` is ``(1/k) * sum_{j<=k} ||grad J(theta_j)||^2``, where ``theta_1``
    is the initial policy and ``theta_j`` the policy used for rollout ``j``.
    """
    if config.policy_kind != "tabular_softmax":
        raise ValueError("the convergence probe needs a tabular softmax policy")
    env_ss = np.random.SeedSequence(config.seed).spawn(4)[0]
    envs = VecChain(mdp, config.num_envs, env_ss)
    sq = []
    for it in iterate(config, envs):
        # the policy that collected batch k is its snapshot
        g = exact_policy_gradient(mdp, it.batch.snapshot.params)
        sq.append(float(g @ g))
    return np.cumsum(sq) / np.arange(1, len(sq) + 1)
