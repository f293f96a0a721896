"""Desk-scale environments and the exact tabular policy-gradient oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .policy import PolicyParams, action_probs, score


def _seed_sequence(seed):
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


class EnvError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# CartPole
# ---------------------------------------------------------------------------


@dataclass
class CartPoleConstants:
    gravity: float = 9.8
    masscart: float = 1.0
    masspole: float = 0.1
    length: float = 0.5  # half the pole length
    force_mag: float = 10.0
    tau: float = 0.02
    x_threshold: float = 2.4
    theta_threshold: float = 12 * 2 * math.pi / 360
    max_steps: int = 500


def cartpole_dynamics(state, action, c: CartPoleConstants):
    """One semi-implicit Euler step; ``state`` is (..., 4) and ``action`` in {0, 1}."""
    x, x_dot, theta, theta_dot = np.moveaxis(np.asarray(state, dtype=np.float64), -1, 0)
    force = np.where(np.asarray(action) == 1, c.force_mag, -c.force_mag)
    costheta = np.cos(theta)
    sintheta = np.sin(theta)
    total_mass = c.masspole + c.masscart
    polemass_length = c.masspole * c.length
    temp = (force + polemass_length * theta_dot ** 2 * sintheta) / total_mass
    thetaacc = (c.gravity * sintheta - costheta * temp) / (
        c.length * (4.0 / 3.0 - c.masspole * costheta ** 2 / total_mass)
    )
    xacc = temp - polemass_length * thetaacc * costheta / total_mass
    x_dot = x_dot + c.tau * xacc
    x = x + c.tau * x_dot
    theta_dot = theta_dot + c.tau * thetaacc
    theta = theta + c.tau * theta_dot
    return np.stack([x, x_dot, theta, theta_dot], axis=-1)


def cartpole_failed(state, c: CartPoleConstants):
    state = np.asarray(state)
    return (np.abs(state[..., 0]) > c.x_threshold) | (np.abs(state[..., 2]) > c.theta_threshold)


class CartPoleEnv:
    """Single cart-pole instance; reward +1 for every step taken."""

    obs_dim = 4
    num_actions = 2
    discrete = True

    def __init__(self, constants: CartPoleConstants | None = None):
        self.c = constants or CartPoleConstants()
        self.state = None
        self.step_count = 0
        self.done = True

    def reset(self, rng=None):
        rng = np.random.default_rng(rng)
        self.state = rng.uniform(-0.05, 0.05, size=4)
        self.step_count = 0
        self.done = False
        return self.state.copy()

    def step(self, action):
        if self.done:
            raise EnvError("step() called on a terminated episode; call reset()")
        if action not in (0, 1):
            raise EnvError(f"invalid CartPole action {action!r}")
        self.state = cartpole_dynamics(self.state, action, self.c)
        self.step_count += 1
        self.done = bool(cartpole_failed(self.state, self.c)) or self.step_count >= self.c.max_steps
        return self.state.copy(), 1.0, self.done


class VecCartPole:
    """``num_envs`` independent cart-poles stepped together, with automatic reset.

    ``step`` returns the post-step observation (before reset) so transitions can
    be recorded, and ``obs`` already holds the reset state of finished envs.
    """

    obs_dim = 4
    num_actions = 2
    discrete = True

    def __init__(self, num_envs: int, seed=None, constants: CartPoleConstants | None = None):
        self.c = constants or CartPoleConstants()
        self.num_envs = num_envs
        self.rngs = [np.random.default_rng(s) for s in _seed_sequence(seed).spawn(num_envs)]
        self.obs = np.stack([r.uniform(-0.05, 0.05, size=4) for r in self.rngs])
        self.steps = np.zeros(num_envs, dtype=np.int64)
        self.ep_return = np.zeros(num_envs)
        self.truncated = np.zeros(num_envs, dtype=bool)

    def step(self, actions):
        nxt = cartpole_dynamics(self.obs, actions, self.c)
        self.steps += 1
        self.ep_return += 1.0
        failed = cartpole_failed(nxt, self.c)
        # time-limit endings are reported separately so callers can bootstrap them
        self.truncated = ~failed & (self.steps >= self.c.max_steps)
        done = failed | self.truncated
        rewards = np.ones(self.num_envs)
        finished = []
        self.obs = nxt.copy()
        for i in np.flatnonzero(done):
            finished.append(float(self.ep_return[i]))
            self.obs[i] = self.rngs[i].uniform(-0.05, 0.05, size=4)
            self.steps[i] = 0
            self.ep_return[i] = 0.0
        return nxt, rewards, done, finished


# ---------------------------------------------------------------------------
# tabular chain MDP
# ---------------------------------------------------------------------------


@dataclass
class ChainMDP:
    """Finite MDP whose raw kernel is blended with a uniform mixing floor ``eps``.

    Under any policy the blended chain satisfies ``P(s'|s,a) >= eps / S``, so it is
    uniformly ergodic by construction.
    """

    P_raw: np.ndarray  # (S, A, S)
    r: np.ndarray  # (S, A)
    gamma: float = 0.99
    eps: float = 0.05

    obs_dim = property(lambda self: self.S)
    num_actions = property(lambda self: self.A)
    discrete = True

    def __post_init__(self):
        self.P_raw = np.asarray(self.P_raw, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        S, A, S2 = self.P_raw.shape
        if S != S2 or self.r.shape != (S, A):
            raise ValueError("inconsistent transition/reward shapes")
        if np.any(self.P_raw < 0) or not np.allclose(self.P_raw.sum(axis=2), 1.0, atol=1e-8):
            raise ValueError("transition rows must be probability vectors")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 <= self.eps <= 1:
            raise ValueError("eps must lie in [0, 1]")
        self.P = (1.0 - self.eps) * self.P_raw + self.eps / S
        self.state = None
        self._rng = np.random.default_rng(0)

    @property
    def S(self) -> int:
        return self.P.shape[0]

    @property
    def A(self) -> int:
        return self.P.shape[1]

    @classmethod
    def random(cls, S, A, rng=None, gamma=0.99, eps=0.05, reward_scale=1.0):
        rng = np.random.default_rng(rng)
        P_raw = rng.dirichlet(np.full(S, 0.5), size=(S, A))
        r = reward_scale * rng.uniform(-1.0, 1.0, size=(S, A))
        return cls(P_raw, r, gamma, eps)

    @classmethod
    def from_file(cls, path):
        """Parse ``S A gamma eps`` then P[s,a,s'] and r[s,a] in row-major order.

        Tokens are whitespace separated; ``#`` starts a comment.
        """
        tokens = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            tokens.extend((lineno, tok) for tok in line.split("#", 1)[0].split())
        try:
            S, A = int(tokens[0][1]), int(tokens[1][1])
            gamma, eps = float(tokens[2][1]), float(tokens[3][1])
        except (IndexError, ValueError) as exc:
            raise ValueError(f"{path}: malformed header (S A gamma eps): {exc}") from None
        body = []
        for lineno, tok in tokens[4:]:
            try:
                body.append(float(tok))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: not a number: {tok!r}") from None
        need = S * A * S + S * A
        if len(body) != need:
            raise ValueError(f"{path}: expected {need} table entries after the header, got {len(body)}")
        P_raw = np.array(body[:S * A * S]).reshape(S, A, S)
        r = np.array(body[S * A * S:]).reshape(S, A)
        sums = P_raw.sum(axis=2)
        if not np.allclose(sums, 1.0, atol=1e-8):
            s, a = np.argwhere(~np.isclose(sums, 1.0, atol=1e-8))[0]
            raise ValueError(f"{path}: row P[{s},{a},:] sums to {sums[s, a]!r}, not 1")
        return cls(P_raw, r, gamma, eps)

    def to_text(self) -> str:
        lines = [f"{self.S} {self.A} {self.gamma!r} {self.eps!r}"]
        for s in range(self.S):
            for a in range(self.A):
                lines.append(" ".join(repr(float(x)) for x in self.P_raw[s, a]))
        for s in range(self.S):
            lines.append(" ".join(repr(float(x)) for x in self.r[s]))
        return "\n".join(lines) + "\n"

    def reset(self, rng=None) -> int:
        self._rng = np.random.default_rng(rng)
        self.state = int(self._rng.integers(self.S))
        return self.state

    def step(self, action):
        """Continuing task: never terminal."""
        if self.state is None:
            raise EnvError("step() before reset()")
        a = int(action)
        if not 0 <= a < self.A:
            raise EnvError(f"invalid action {action!r}")
        s = self.state
        self.state = int(self._rng.choice(self.S, p=self.P[s, a]))
        return self.state, float(self.r[s, a]), False


class VecChain:
    """``num_envs`` independent copies of a continuing chain MDP."""

    discrete = True

    def __init__(self, mdp: ChainMDP, num_envs: int, seed=None):
        self.mdp = mdp
        self.num_envs = num_envs
        self.obs_dim = mdp.S
        self.num_actions = mdp.A
        self.rng = np.random.default_rng(seed)
        self.obs = self.rng.integers(mdp.S, size=num_envs)
        self._cdf = mdp.P.cumsum(axis=2)
        self.truncated = np.zeros(num_envs, dtype=bool)

    def step(self, actions):
        actions = np.asarray(actions, dtype=np.int64)
        s = self.obs
        rewards = self.mdp.r[s, actions]
        u = self.rng.random((self.num_envs, 1))
        nxt = np.minimum((u >= self._cdf[s, actions]).sum(axis=1), self.mdp.S - 1)
        self.obs = nxt.copy()
        return nxt, rewards, np.zeros(self.num_envs, dtype=bool), []


# ---------------------------------------------------------------------------
# exact oracle for tabular softmax policies
# ---------------------------------------------------------------------------


def _check_tabular(mdp: ChainMDP, params: PolicyParams):
    if params.kind != "tabular_softmax" or params.sizes != (mdp.S, mdp.A):
        raise ValueError("exact oracle needs a tabular_softmax policy matching the MDP")


def policy_matrix(mdp, params):
    _check_tabular(mdp, params)
    return action_probs(params, np.arange(mdp.S))


def state_transition_matrix(mdp, pi):
    return np.einsum("sa,sat->st", pi, mdp.P)


def stationary_distribution(P_pi) -> np.ndarray:
    """Left eigenvector of ``P_pi`` for eigenvalue one, normalised to sum to one."""
    S = P_pi.shape[0]
    # solve d (P - I) = 0 with sum(d) = 1 as a square least-squares-free system
    M = np.vstack([(P_pi - np.eye(S)).T, np.ones(S)])
    rhs = np.zeros(S + 1)
    rhs[-1] = 1.0
    d, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    return d


def value_functions(mdp, params):
    """Exact discounted (V, Q) from the Bellman linear system."""
    pi = policy_matrix(mdp, params)
    P_pi = state_transition_matrix(mdp, pi)
    r_pi = (pi * mdp.r).sum(axis=1)
    V = np.linalg.solve(np.eye(mdp.S) - mdp.gamma * P_pi, r_pi)
    Q = mdp.r + mdp.gamma * mdp.P @ V
    return V, Q


def exact_objective(mdp: ChainMDP, params: PolicyParams, state_weights=None) -> float:
    """Discounted value averaged over states.

    ``state_weights`` defaults to the stationary distribution of ``params``;
    pass a fixed vector to differentiate with the weighting held constant.
    """
    V, _ = value_functions(mdp, params)
    if state_weights is None:
        pi = policy_matrix(mdp, params)
        state_weights = stationary_distribution(state_transition_matrix(mdp, pi))
    return float(np.dot(state_weights, V))


def exact_policy_gradient(mdp: ChainMDP, params: PolicyParams) -> np.ndarray:
    """``E_{s~d, a~pi}[A(s, a) grad log pi(a|s)]`` with ``d`` the stationary state distribution.

    This equals ``(1 - gamma)`` times the gradient of ``exact_objective`` taken with
    the state weights frozen at the stationary distribution of ``params``.
    """
    pi = policy_matrix(mdp, params)
    d = stationary_distribution(state_transition_matrix(mdp, pi))
    V, Q = value_functions(mdp, params)
    adv = Q - V[:, None]
    S, A = mdp.S, mdp.A
    states = np.repeat(np.arange(S), A)
    actions = np.tile(np.arange(A), S)
    w = (d[:, None] * pi * adv).ravel()
    return w @ score(params, states, actions)


def finite_difference_gradient(mdp: ChainMDP, params: PolicyParams, h: float = 1e-6) -> np.ndarray:
    """Central differences of ``exact_objective`` with frozen stationary weights, times ``1 - gamma``."""
    pi = policy_matrix(mdp, params)
    d = stationary_distribution(state_transition_matrix(mdp, pi))
    grad = np.zeros(params.dim)
    for j in range(params.dim):
        e = np.zeros(params.dim)
        e[j] = h
        up = exact_objective(mdp, params.with_weights(params.weights + e), d)
        dn = exact_objective(mdp, params.with_weights(params.weights - e), d)
        grad[j] = (up - dn) / (2 * h)
    return (1.0 - mdp.gamma) * grad
