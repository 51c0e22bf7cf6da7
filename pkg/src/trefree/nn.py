"""Actor-critic MLP with a shared first layer and hand-written reverse mode.

Architecture (``H`` hidden units, 64 by default)::

    h1    = tanh(obs @ shared_w + shared_b)          shared by actor and critic
    ha    = tanh(h1 @ actor_w + actor_b)
    mean  = ha @ mean_w + mean_b
    hc    = tanh(h1 @ critic_w + critic_b)
    value = hc @ value_w + value_b
    std   = exp(log_std)                             state independent

Losses are represented by :class:`LossGraph`: the scalar value plus the
cotangents of the loss with respect to the network outputs (mean, log_std,
value). :func:`backward` pulls those cotangents back to every parameter.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

PARAM_NAMES = (
    "shared_w", "shared_b",
    "actor_w", "actor_b", "mean_w", "mean_b", "log_std",
    "critic_w", "critic_b", "value_w", "value_b",
)
# parameters that influence the action distribution
POLICY_PARAMS = ("shared_w", "shared_b", "actor_w", "actor_b", "mean_w", "mean_b", "log_std")
CRITIC_ONLY_PARAMS = ("critic_w", "critic_b", "value_w", "value_b")

GradBuffer = dict  # name -> array, congruent with PolicyNet.params()


class NumericError(FloatingPointError):
    """A non-finite quantity appeared where a finite one is required."""


@dataclass
class PolicyNet:
    shared_w: np.ndarray
    shared_b: np.ndarray
    actor_w: np.ndarray
    actor_b: np.ndarray
    mean_w: np.ndarray
    mean_b: np.ndarray
    log_std: np.ndarray
    critic_w: np.ndarray
    critic_b: np.ndarray
    value_w: np.ndarray
    value_b: np.ndarray

    @property
    def obs_dim(self) -> int:
        return self.shared_w.shape[0]

    @property
    def act_dim(self) -> int:
        return self.mean_w.shape[1]

    @property
    def hidden(self) -> int:
        return self.shared_w.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "PolicyNet":
        return PolicyNet(**{k: v.copy() for k, v in self.params().items()})

    def flat(self, names=PARAM_NAMES) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in names])

    def set_flat(self, vec: np.ndarray, names=PARAM_NAMES) -> None:
        offset = 0
        for n in names:
            p = getattr(self, n)
            p[...] = vec[offset : offset + p.size].reshape(p.shape)
            offset += p.size
        if offset != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, expected {offset}")

    @classmethod
    def zeros(cls, obs_dim: int, act_dim: int, hidden: int = 64) -> "PolicyNet":
        H = hidden
        return cls(
            shared_w=np.zeros((obs_dim, H)), shared_b=np.zeros(H),
            actor_w=np.zeros((H, H)), actor_b=np.zeros(H),
            mean_w=np.zeros((H, act_dim)), mean_b=np.zeros(act_dim),
            log_std=np.zeros(act_dim),
            critic_w=np.zeros((H, H)), critic_b=np.zeros(H),
            value_w=np.zeros(H), value_b=np.zeros(1),
        )

    @classmethod
    def init(cls, obs_dim: int, act_dim: int, rng: np.random.Generator, hidden: int = 64) -> "PolicyNet":
        """Orthogonal weights (gain sqrt(2) hidden, 0.01 mean head, 1.0 value head), zero biases."""
        net = cls.zeros(obs_dim, act_dim, hidden)
        g = math.sqrt(2.0)
        net.shared_w = orthogonal((obs_dim, hidden), g, rng)
        net.actor_w = orthogonal((hidden, hidden), g, rng)
        net.critic_w = orthogonal((hidden, hidden), g, rng)
        net.mean_w = orthogonal((hidden, act_dim), 0.01, rng)
        net.value_w = orthogonal((hidden, 1), 1.0, rng)[:, 0]
        return net


def orthogonal(shape, gain, rng):
    rows, cols = shape
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def zeros_like_grads(net: PolicyNet) -> GradBuffer:
    return {k: np.zeros_like(v) for k, v in net.params().items()}


# -- Gaussian ---------------------------------------------------------------


@dataclass
class GaussianDist:
    """Diagonal Gaussian; arrays may carry leading batch dimensions."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if np.any(~np.isfinite(self.std)) or np.any(self.std <= 0):
            raise ValueError("Gaussian std must be finite and > 0")


def log_prob(dist: GaussianDist, action) -> np.ndarray | float:
    a = np.asarray(action, dtype=float)
    if a.shape[-1] != dist.mean.shape[-1]:
        raise ValueError(f"action dim {a.shape[-1]} != distribution dim {dist.mean.shape[-1]}")
    z = (a - dist.mean) / dist.std
    out = np.sum(-0.5 * z**2 - np.log(dist.std) - HALF_LOG_2PI, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def entropy(dist: GaussianDist) -> np.ndarray | float:
    out = np.sum(np.log(dist.std) + 0.5 + HALF_LOG_2PI, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def kl(dist_a: GaussianDist, dist_b: GaussianDist) -> np.ndarray | float:
    """KL(a || b) in closed form."""
    va, vb = dist_a.std**2, dist_b.std**2
    out = np.sum(
        np.log(dist_b.std / dist_a.std) + (va + (dist_a.mean - dist_b.mean) ** 2) / (2.0 * vb) - 0.5,
        axis=-1,
    )
    return float(out) if np.ndim(out) == 0 else out


def sample(dist: GaussianDist, rng: np.random.Generator) -> np.ndarray:
    return dist.mean + dist.std * rng.standard_normal(np.shape(dist.mean))


# -- forward ---------------------------------------------------------------


@dataclass
class Forward:
    """Intermediates of a batched forward pass, kept for backward."""

    obs: np.ndarray
    h1: np.ndarray
    ha: np.ndarray
    hc: np.ndarray
    mean: np.ndarray
    value: np.ndarray
    log_std: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def dist(self) -> GaussianDist:
        return GaussianDist(self.mean, np.broadcast_to(self.std, self.mean.shape))


def _as_batch(net: PolicyNet, obs) -> np.ndarray:
    obs = np.asarray(obs, dtype=float)
    if obs.shape[-1] != net.obs_dim:
        raise ValueError(f"observation dim {obs.shape[-1]} != network obs_dim {net.obs_dim}")
    if not np.all(np.isfinite(obs)):
        raise ValueError("observation contains non-finite entries")
    return np.atleast_2d(obs)


def forward(net: PolicyNet, obs) -> Forward:
    x = _as_batch(net, obs)
    h1 = np.tanh(x @ net.shared_w + net.shared_b)
    ha = np.tanh(h1 @ net.actor_w + net.actor_b)
    hc = np.tanh(h1 @ net.critic_w + net.critic_b)
    return Forward(
        obs=x, h1=h1, ha=ha, hc=hc,
        mean=ha @ net.mean_w + net.mean_b,
        value=hc @ net.value_w + net.value_b[0],
        log_std=net.log_std.copy(),
    )


def forward_policy(net: PolicyNet, obs) -> GaussianDist:
    fwd = forward(net, obs)
    if np.ndim(obs) == 1:
        return GaussianDist(fwd.mean[0], fwd.std)
    return fwd.dist()


def forward_value(net: PolicyNet, obs):
    v = forward(net, obs).value
    return float(v[0]) if np.ndim(obs) == 1 else v


# -- loss graphs and backward -------------------------------------------------


@dataclass
class LossGraph:
    """Scalar loss with its cotangents w.r.t. the network outputs of ``fwd``.

    Graphs over the same forward pass add and scale linearly, so composite
    losses are built as ``pg + 0.5 * value - 0.01 * ent``.
    """

    value: float
    fwd: Forward
    d_mean: np.ndarray
    d_log_std: np.ndarray
    d_value: np.ndarray
    extras: dict = field(default_factory=dict)

    def __add__(self, other: "LossGraph") -> "LossGraph":
        if other.fwd is not self.fwd:
            raise ValueError("can only combine losses built on the same forward pass")
        return LossGraph(
            self.value + other.value, self.fwd,
            self.d_mean + other.d_mean, self.d_log_std + other.d_log_std,
            self.d_value + other.d_value, {**self.extras, **other.extras},
        )

    def __mul__(self, c: float) -> "LossGraph":
        return LossGraph(
            c * self.value, self.fwd, c * self.d_mean, c * self.d_log_std, c * self.d_value, self.extras
        )

    __rmul__ = __mul__

    def __neg__(self) -> "LossGraph":
        return -1.0 * self

    def __sub__(self, other: "LossGraph") -> "LossGraph":
        return self + (-other)


def zero_loss(fwd: Forward) -> LossGraph:
    return LossGraph(0.0, fwd, np.zeros_like(fwd.mean), np.zeros_like(fwd.log_std), np.zeros_like(fwd.value))


def _finite(name: str, x: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values at node '{name}'")
    return x


def backward(net: PolicyNet, loss: LossGraph) -> GradBuffer:
    """Exact gradient of ``loss.value`` w.r.t. every parameter of ``net``."""
    fwd = loss.fwd
    _finite("loss", np.asarray(loss.value))
    d_mean = _finite("d_mean", loss.d_mean)
    d_value = _finite("d_value", loss.d_value)
    g = {}
    g["mean_w"] = fwd.ha.T @ d_mean
    g["mean_b"] = d_mean.sum(axis=0)
    g["log_std"] = _finite("d_log_std", loss.d_log_std).copy()
    g["value_w"] = fwd.hc.T @ d_value
    g["value_b"] = np.array([d_value.sum()])

    d_za = _finite("actor_hidden", (d_mean @ net.mean_w.T) * (1.0 - fwd.ha**2))
    g["actor_w"] = fwd.h1.T @ d_za
    g["actor_b"] = d_za.sum(axis=0)
    d_zc = _finite("critic_hidden", np.outer(d_value, net.value_w) * (1.0 - fwd.hc**2))
    g["critic_w"] = fwd.h1.T @ d_zc
    g["critic_b"] = d_zc.sum(axis=0)

    d_h1 = d_za @ net.actor_w.T + d_zc @ net.critic_w.T
    d_z1 = _finite("shared_hidden", d_h1 * (1.0 - fwd.h1**2))
    g["shared_w"] = fwd.obs.T @ d_z1
    g["shared_b"] = d_z1.sum(axis=0)
    return {k: g[k] for k in PARAM_NAMES}


def jvp_mean(net: PolicyNet, fwd: Forward, tangent: dict[str, np.ndarray]) -> np.ndarray:
    """Forward-mode derivative of the mean output along a parameter tangent."""
    t = tangent
    dz1 = fwd.obs @ t["shared_w"] + t["shared_b"]
    dh1 = (1.0 - fwd.h1**2) * dz1
    dza = dh1 @ net.actor_w + fwd.h1 @ t["actor_w"] + t["actor_b"]
    dha = (1.0 - fwd.ha**2) * dza
    return dha @ net.mean_w + fwd.ha @ t["mean_w"] + t["mean_b"]


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    m: GradBuffer
    v: GradBuffer
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net: PolicyNet) -> "AdamState":
        return cls(zeros_like_grads(net), zeros_like_grads(net))


def adam_step(net: PolicyNet, grads: GradBuffer, state: AdamState, lr: float, names=PARAM_NAMES):
    """One bias-corrected Adam update of ``names`` in place; returns (net, state).

    Raises NumericError without touching anything if a gradient is non-finite.
    """
    for n in names:
        if not np.all(np.isfinite(grads[n])):
            raise NumericError(f"non-finite gradient for '{n}', step aborted")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**state.t, 1.0 - b2**state.t
    for n in names:
        g = grads[n]
        state.m[n] = b1 * state.m[n] + (1.0 - b1) * g
        state.v[n] = b2 * state.v[n] + (1.0 - b2) * g * g
        m_hat = state.m[n] / c1
        v_hat = state.v[n] / c2
        p = getattr(net, n)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    np.clip(net.log_std, LOG_STD_MIN, LOG_STD_MAX, out=net.log_std)
    return net, state


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_FORMAT = "trefree-policynet/1"


def save_checkpoint(net: PolicyNet, path) -> None:
    """``.npz`` stores raw float64 arrays; anything else is written as JSON."""
    path = Path(path)
    if path.suffix == ".npz":
        np.savez(path, **net.params())
        return
    doc = {
        "format": CHECKPOINT_FORMAT,
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in net.params().items()},
    }
    path.write_text(json.dumps(doc))


def load_checkpoint(path) -> PolicyNet:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as data:
            return PolicyNet(**{k: data[k].astype(float) for k in PARAM_NAMES})
    doc = json.loads(path.read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format {doc.get('format')!r}")
    params = doc["params"]
    return PolicyNet(
        **{k: np.array(params[k]["data"], dtype=float).reshape(params[k]["shape"]) for k in PARAM_NAMES}
    )
