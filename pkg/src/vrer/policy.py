"""Parametric policies and value critics backed by flat numpy weight vectors.

Three policy kinds are supported:

* ``tabular_softmax`` -- one logit per (state, action); states are integer indices.
* ``mlp_softmax``     -- tanh MLP producing action logits.
* ``mlp_gaussian``    -- tanh MLP producing the mean of a Gaussian with a fixed,
  state-independent standard deviation that is *not* part of the weights.

Every function is batched: ``states`` is either a single state or a stack of
states, and the return value follows the same convention.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("tabular_softmax", "mlp_softmax", "mlp_gaussian")
LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass
class PolicyParams:
    kind: str
    weights: np.ndarray
    sizes: tuple[int, ...]
    fixed_std: float = 0.5
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.sizes = tuple(int(s) for s in self.sizes)
        if self.weights.shape != (num_weights(self.kind, self.sizes),):
            raise ValueError(
                f"weights have shape {self.weights.shape}, architecture {self.sizes} "
                f"needs {num_weights(self.kind, self.sizes)}"
            )
        if self.kind == "mlp_gaussian" and not self.fixed_std > 0:
            raise ValueError("fixed_std must be positive")

    @property
    def dim(self) -> int:
        return self.weights.size

    @property
    def num_actions(self) -> int:
        """Number of discrete actions, or the action dimension for Gaussian heads."""
        return self.sizes[-1]

    @property
    def discrete(self) -> bool:
        return self.kind != "mlp_gaussian"

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.kind, self.weights.copy(), self.sizes, self.fixed_std, self.activation)

    def with_weights(self, weights) -> "PolicyParams":
        return PolicyParams(self.kind, np.array(weights, dtype=np.float64), self.sizes, self.fixed_std, self.activation)


@dataclass(frozen=True)
class PolicySnapshot:
    """Frozen copy of a policy taken at the end of an iteration."""

    params: PolicyParams
    iteration_index: int

    @classmethod
    def take(cls, params: PolicyParams, iteration_index: int) -> "PolicySnapshot":
        frozen = params.copy()
        frozen.weights.setflags(write=False)
        return cls(frozen, int(iteration_index))


@dataclass
class CriticParams:
    weights: np.ndarray
    sizes: tuple[int, ...]
    tabular: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.sizes = tuple(int(s) for s in self.sizes)
        expected = self.sizes[0] if self.tabular else _mlp_size(self.sizes)
        if self.weights.shape != (expected,):
            raise ValueError(f"critic weights have shape {self.weights.shape}, expected ({expected},)")

    def copy(self) -> "CriticParams":
        return CriticParams(self.weights.copy(), self.sizes, self.tabular)


def _mlp_size(sizes) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def num_weights(kind: str, sizes) -> int:
    if kind == "tabular_softmax":
        return sizes[0] * sizes[1]
    return _mlp_size(sizes)


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def _orthogonal(rng, rows, cols, gain):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def _orthogonal_mlp(rng, sizes, out_gain):
    parts = []
    n_layers = len(sizes) - 1
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = out_gain if i == n_layers - 1 else math.sqrt(2.0)
        parts.append(_orthogonal(rng, a, b, gain).ravel())
        parts.append(np.zeros(b))
    return np.concatenate(parts)


def init_policy(kind, obs_dim, num_actions, hidden=(64, 64), fixed_std=0.5, rng=None) -> PolicyParams:
    """Build a policy; MLP weights use orthogonal initialisation, tabular logits start at zero.

    For ``tabular_softmax`` ``obs_dim`` is the number of states.
    """
    rng = np.random.default_rng(rng)
    if kind == "tabular_softmax":
        sizes = (obs_dim, num_actions)
        return PolicyParams(kind, np.zeros(obs_dim * num_actions), sizes)
    sizes = (obs_dim, *hidden, num_actions)
    return PolicyParams(kind, _orthogonal_mlp(rng, sizes, 0.01), sizes, fixed_std=fixed_std)


def init_critic(obs_dim, hidden=(64, 64), rng=None, tabular=False) -> CriticParams:
    rng = np.random.default_rng(rng)
    if tabular:
        return CriticParams(np.zeros(obs_dim), (obs_dim,), tabular=True)
    sizes = (obs_dim, *hidden, 1)
    return CriticParams(_orthogonal_mlp(rng, sizes, 1.0), sizes)


# ---------------------------------------------------------------------------
# MLP forward / backward on a flat weight vector
# ---------------------------------------------------------------------------


def _unpack(weights, sizes):
    layers = []
    pos = 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        W = weights[pos:pos + a * b].reshape(a, b)
        pos += a * b
        bias = weights[pos:pos + b]
        pos += b
        layers.append((W, bias))
    return layers


def mlp_forward(weights, sizes, x):
    """Return the linear output and the list of layer inputs needed for backprop."""
    layers = _unpack(weights, sizes)
    acts = [x]
    h = x
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        if i < len(layers) - 1:
            h = np.tanh(z)
            acts.append(h)
        else:
            h = z
    return h, acts


def mlp_backward(weights, sizes, acts, dout, per_sample=False):
    """Backpropagate ``dout`` (N, out) to the flat weight vector.

    Returns the summed gradient (d,) or, with ``per_sample``, an (N, d) matrix.
    """
    layers = _unpack(weights, sizes)
    n = dout.shape[0]
    grads = []
    delta = dout
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        h = acts[i]
        if per_sample:
            gW = (h[:, :, None] * delta[:, None, :]).reshape(n, -1)
            gb = delta
        else:
            gW = (h.T @ delta).ravel()
            gb = delta.sum(axis=0)
        grads.append(gb)
        grads.append(gW)
        if i > 0:
            delta = (delta @ W.T) * (1.0 - h * h)
    grads.reverse()
    return np.concatenate(grads, axis=-1)


# ---------------------------------------------------------------------------
# distribution outputs
# ---------------------------------------------------------------------------


def _batch(params, states):
    """Coerce ``states`` into a batch; report whether the input was a single state."""
    if params.kind == "tabular_softmax":
        s = np.asarray(states)
        single = s.ndim == 0
        s = np.atleast_1d(s).astype(np.int64)
        if s.ndim != 1:
            s = s.reshape(len(s), -1)[:, 0]
        if s.size and (s.min() < 0 or s.max() >= params.sizes[0]):
            raise ValueError("state index out of range")
        return s, single
    s = np.asarray(states, dtype=np.float64)
    single = s.ndim == 1
    return np.atleast_2d(s), single


def forward(params: PolicyParams, states):
    """Logits (softmax kinds) or means (Gaussian) for a batch of states, plus a backprop cache."""
    s, _ = _batch(params, states)
    if params.kind == "tabular_softmax":
        table = params.weights.reshape(params.sizes)
        return table[s], s
    return mlp_forward(params.weights, params.sizes, s)


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def action_probs(params: PolicyParams, states):
    """Action probabilities for softmax policies."""
    if not params.discrete:
        raise TypeError("action_probs is defined only for softmax policies")
    s, single = _batch(params, states)
    z, _ = forward(params, s)
    p = np.exp(_log_softmax(z))
    return p[0] if single else p


def _check_actions(params, actions, n):
    if params.discrete:
        a = np.atleast_1d(np.asarray(actions)).astype(np.int64).reshape(-1)
        if a.size != n:
            raise ValueError("number of actions does not match number of states")
        if a.size and (a.min() < 0 or a.max() >= params.num_actions):
            raise ValueError(f"invalid action index for {params.num_actions}-action policy")
        return a
    a = np.asarray(actions, dtype=np.float64).reshape(n, params.num_actions)
    return a


def _log_prob_from_output(params, out, a):
    if params.discrete:
        return _log_softmax(out)[np.arange(len(a)), a]
    sd = params.fixed_std
    k = params.num_actions
    return -0.5 * (((a - out) / sd) ** 2).sum(axis=1) - k * math.log(sd) - 0.5 * k * LOG_2PI


def log_prob(params: PolicyParams, states, actions):
    """Natural-log probability mass (softmax) or density (Gaussian) of ``actions``."""
    s, single = _batch(params, states)
    a = _check_actions(params, actions, len(s))
    out, _ = forward(params, s)
    lp = _log_prob_from_output(params, out, a)
    return float(lp[0]) if single else lp


def _dlogp_dout(params, out, a):
    if params.discrete:
        g = -np.exp(_log_softmax(out))
        g[np.arange(len(a)), a] += 1.0
        return g
    return (a - out) / params.fixed_std ** 2


def _backprop(params, cache, dout, per_sample):
    if params.kind == "tabular_softmax":
        s = cache
        S, A = params.sizes
        if per_sample:
            g = np.zeros((len(s), S * A))
            cols = s[:, None] * A + np.arange(A)
            np.put_along_axis(g, cols, dout, axis=1)
            return g
        g = np.zeros((S, A))
        np.add.at(g, s, dout)
        return g.ravel()
    return mlp_backward(params.weights, params.sizes, cache, dout, per_sample=per_sample)


def score(params: PolicyParams, states, actions):
    """Gradient of ``log_prob`` w.r.t. the flat weights: (d,) for one sample, (N, d) for a batch."""
    s, single = _batch(params, states)
    a = _check_actions(params, actions, len(s))
    out, cache = forward(params, s)
    g = _backprop(params, cache, _dlogp_dout(params, out, a), per_sample=True)
    return g[0] if single else g


def weighted_score_sum(params: PolicyParams, states, actions, coeffs):
    """``sum_j coeffs[j] * score(s_j, a_j)`` without materialising per-sample gradients."""
    s, _ = _batch(params, states)
    a = _check_actions(params, actions, len(s))
    out, cache = forward(params, s)
    dout = _dlogp_dout(params, out, a) * np.asarray(coeffs, dtype=np.float64)[:, None]
    return _backprop(params, cache, dout, per_sample=False)


def sample_action(params: PolicyParams, states, rng=None):
    """Draw actions from the policy; ``rng`` is a seed or a ``numpy.random.Generator``."""
    rng = np.random.default_rng(rng)
    s, single = _batch(params, states)
    out, _ = forward(params, s)
    if params.discrete:
        p = np.exp(_log_softmax(out))
        c = p.cumsum(axis=1)
        u = rng.random((len(s), 1)) * c[:, -1:]
        a = np.minimum((u >= c).sum(axis=1), params.num_actions - 1)
        return int(a[0]) if single else a
    a = out + params.fixed_std * rng.standard_normal(out.shape)
    return a[0] if single else a


def entropy(params: PolicyParams, states):
    s, single = _batch(params, states)
    if params.discrete:
        z, _ = forward(params, s)
        lp = _log_softmax(z)
        h = -(np.exp(lp) * lp).sum(axis=1)
    else:
        k = params.num_actions
        h = np.full(len(s), 0.5 * k * (1.0 + LOG_2PI) + k * math.log(params.fixed_std))
    return float(h[0]) if single else h


def entropy_grad(params: PolicyParams, states):
    """Gradient of the mean entropy over ``states`` w.r.t. the weights."""
    s, _ = _batch(params, states)
    if not params.discrete:
        return np.zeros(params.dim)
    z, cache = forward(params, s)
    lp = _log_softmax(z)
    p = np.exp(lp)
    h = -(p * lp).sum(axis=1, keepdims=True)
    dz = -p * (lp + h) / len(s)
    return _backprop(params, cache, dz, per_sample=False)


# ---------------------------------------------------------------------------
# KL divergence
# ---------------------------------------------------------------------------


def kl_from_outputs(target: PolicyParams, out_t, behavior: PolicyParams, out_b):
    """Per-state KL(target || behavior) from precomputed forward outputs."""
    if target.discrete:
        lt = _log_softmax(out_t)
        lb = _log_softmax(out_b)
        pt = np.exp(lt)
        with np.errstate(invalid="ignore"):
            terms = np.where(pt > 0, pt * (lt - lb), 0.0)
        kl = terms.sum(axis=1)
        # behaviour with zero mass where the target has mass -> infinite KL
        kl[np.any((pt > 0) & np.isneginf(lb), axis=1)] = np.inf
        return np.maximum(kl, 0.0)
    st, sb = target.fixed_std, behavior.fixed_std
    k = target.num_actions
    quad = ((out_t - out_b) ** 2).sum(axis=1) / (2.0 * sb ** 2)
    return k * (math.log(sb / st) + st ** 2 / (2.0 * sb ** 2) - 0.5) + quad


def mean_kl(target: PolicyParams, behavior: PolicyParams, states) -> float:
    """Average over ``states`` of the analytic KL(target(.|s) || behavior(.|s))."""
    if target.kind != behavior.kind or target.sizes != behavior.sizes:
        raise ValueError("target and behaviour policies must share an architecture")
    s, _ = _batch(target, states)
    if len(s) == 0:
        raise ValueError("mean_kl needs at least one state")
    out_t, _ = forward(target, s)
    out_b, _ = forward(behavior, s)
    return float(kl_from_outputs(target, out_t, behavior, out_b).mean())


# ---------------------------------------------------------------------------
# critic
# ---------------------------------------------------------------------------


def _critic_forward(critic: CriticParams, states):
    if critic.tabular:
        s = np.atleast_1d(np.asarray(states)).astype(np.int64).reshape(-1)
        return critic.weights[s], s
    x = np.atleast_2d(np.asarray(states, dtype=np.float64))
    out, acts = mlp_forward(critic.weights, critic.sizes, x)
    return out[:, 0], acts


def critic_value(critic: CriticParams, states):
    single = (np.ndim(states) == 0) if critic.tabular else (np.ndim(states) == 1)
    v, _ = _critic_forward(critic, states)
    return float(v[0]) if single else v


def critic_loss_and_grad(critic: CriticParams, states, targets):
    """Mean squared error ``mean((V(s) - target)^2)`` and its gradient."""
    v, cache = _critic_forward(critic, states)
    targets = np.asarray(targets, dtype=np.float64)
    err = v - targets
    loss = float(np.mean(err ** 2))
    dv = 2.0 * err / len(err)
    if critic.tabular:
        g = np.zeros_like(critic.weights)
        np.add.at(g, cache, dv)
        return loss, g
    return loss, mlp_backward(critic.weights, critic.sizes, cache, dv[:, None])


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_MAGIC = b"VRERPAR1"


def _write(path, header, weights):
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.asarray(weights, dtype="<f8").tobytes())


def _read(path):
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen])
    weights = np.frombuffer(data[12 + hlen:], dtype="<f8").astype(np.float64)
    return header, weights


def save_params(path, params) -> None:
    """Write policy or critic parameters as a small JSON header followed by raw float64 weights."""
    if isinstance(params, PolicyParams):
        header = {"type": "policy", "kind": params.kind, "sizes": list(params.sizes),
                  "fixed_std": params.fixed_std, "activation": params.activation}
    else:
        header = {"type": "critic", "sizes": list(params.sizes), "tabular": params.tabular}
    _write(path, header, params.weights)


def load_params(path):
    header, weights = _read(path)
    if header["type"] == "policy":
        return PolicyParams(header["kind"], weights, tuple(header["sizes"]),
                            header["fixed_std"], header.get("activation", "tanh"))
    return CriticParams(weights, tuple(header["sizes"]), header["tabular"])
