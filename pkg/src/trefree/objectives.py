"""Policy-update objectives and the TRPO constrained step.

Every objective is written as a loss to *minimize*; each returns a
:class:`~trefree.nn.LossGraph` whose ``extras["terms"]`` holds the per-sample
objective values before averaging and negation.

Per-sample objectives, with ``r = new(a|s) / old(a|s)`` and advantage ``A``:

=====================  ============================================
pg                     r * A
ratio_conservative     clip(r - 1, -lam, lam) * A
ppo (min form)         min(r * A, clip(r, 1 - eps, 1 + eps) * A)
trefree                min((r - 1) * A, delta)
=====================  ============================================

On a clip boundary the flat branch is taken, so the gradient there is zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ObjectiveSpec
from .nn import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    POLICY_PARAMS,
    Forward,
    GaussianDist,
    LossGraph,
    NumericError,
    PolicyNet,
    backward,
    forward,
    jvp_mean,
    kl,
    zero_loss,
)

MAX_LOG_RATIO = 30.0


@dataclass
class Minibatch:
    obs: np.ndarray  # (M, obs_dim)
    actions: np.ndarray  # (M, act_dim)
    old_log_probs: np.ndarray  # (M,)
    advantages: np.ndarray  # (M,)
    returns: np.ndarray  # (M,)
    old_means: np.ndarray | None = None  # (M, act_dim)
    old_stds: np.ndarray | None = None  # (M, act_dim)

    def __post_init__(self):
        M = len(self.obs)
        for name in ("actions", "old_log_probs", "advantages", "returns", "old_means", "old_stds"):
            x = getattr(self, name)
            if x is not None and len(x) != M:
                raise ValueError(f"{name} has {len(x)} rows, expected {M}")
        if not np.all(np.isfinite(self.old_log_probs)):
            raise ValueError("old_log_probs must be finite")
        if not np.all(np.isfinite(self.advantages)):
            raise ValueError("advantages must be finite")

    def __len__(self) -> int:
        return len(self.obs)

    def subset(self, idx) -> "Minibatch":
        pick = lambda x: None if x is None else x[idx]  # noqa: E731
        return Minibatch(
            self.obs[idx], self.actions[idx], self.old_log_probs[idx], self.advantages[idx],
            self.returns[idx], pick(self.old_means), pick(self.old_stds),
        )

    def old_dist(self) -> GaussianDist:
        if self.old_means is None or self.old_stds is None:
            raise ValueError("batch carries no old distribution parameters")
        return GaussianDist(self.old_means, self.old_stds)


# -- building blocks -------------------------------------------------------------


def _log_ratio(fwd: Forward, batch: Minibatch):
    """Log-ratios plus the pieces needed to pull per-sample cotangents back."""
    std = fwd.std
    diff = batch.actions - fwd.mean
    z2 = (diff / std) ** 2
    logp = np.sum(-0.5 * z2 - fwd.log_std - 0.5 * math.log(2.0 * math.pi), axis=1)
    log_ratio = logp - batch.old_log_probs
    bad = np.nonzero(~(log_ratio <= MAX_LOG_RATIO))[0]
    if bad.size:
        i = int(bad[0])
        raise NumericError(f"log-ratio {log_ratio[i]:.3g} at sample {i} exceeds {MAX_LOG_RATIO}")
    return log_ratio, diff / std**2, z2 - 1.0


def _logp_graph(fwd: Forward, batch: Minibatch, value: float, coef: np.ndarray, terms) -> LossGraph:
    """LossGraph for a loss whose derivative w.r.t. log-prob i is ``coef[i]``."""
    _, dlogp_dmean, dlogp_dlogstd = _log_ratio(fwd, batch)
    return LossGraph(
        value=float(value),
        fwd=fwd,
        d_mean=coef[:, None] * dlogp_dmean,
        d_log_std=coef @ dlogp_dlogstd,
        d_value=np.zeros_like(fwd.value),
        extras={"terms": terms},
    )


def _fwd(net, batch, fwd):
    return forward(net, batch.obs) if fwd is None else fwd


def pg_loss(net: PolicyNet, batch: Minibatch, fwd: Forward | None = None) -> LossGraph:
    fwd = _fwd(net, batch, fwd)
    ratio = np.exp(_log_ratio(fwd, batch)[0])
    A = batch.advantages
    M = len(batch)
    terms = ratio * A
    return _logp_graph(fwd, batch, -terms.mean(), -terms / M, terms)


def ratio_conservative_loss(
    net: PolicyNet, batch: Minibatch, lam: float, fwd: Forward | None = None
) -> LossGraph:
    """Clipped ratio deviation times advantage, without the PPO min."""
    if lam <= 0:
        raise ValueError("lambda must be > 0")
    fwd = _fwd(net, batch, fwd)
    ratio = np.exp(_log_ratio(fwd, batch)[0])
    A = batch.advantages
    dev = ratio - 1.0
    terms = np.clip(dev, -lam, lam) * A
    active = np.abs(dev) < lam
    return _logp_graph(fwd, batch, -terms.mean(), np.where(active, -ratio * A, 0.0) / len(batch), terms)


def ppo_clip_loss(net: PolicyNet, batch: Minibatch, eps: float, fwd: Forward | None = None) -> LossGraph:
    """min(r A, clip(r, 1 - eps, 1 + eps) A)."""
    if not 0 < eps < 1:
        raise ValueError("eps_clip must lie in (0, 1)")
    fwd = _fwd(net, batch, fwd)
    ratio = np.exp(_log_ratio(fwd, batch)[0])
    A = batch.advantages
    terms = np.minimum(ratio * A, np.clip(ratio, 1.0 - eps, 1.0 + eps) * A)
    flat = ((A > 0) & (ratio >= 1.0 + eps)) | ((A < 0) & (ratio <= 1.0 - eps))
    return _logp_graph(fwd, batch, -terms.mean(), np.where(flat, 0.0, -ratio * A) / len(batch), terms)


def trefree_loss(net: PolicyNet, batch: Minibatch, delta: float, fwd: Forward | None = None) -> LossGraph:
    """-(1/M) sum min((r - 1) A, delta); samples at or above delta contribute no gradient."""
    if delta <= 0:
        raise ValueError("delta must be > 0")
    fwd = _fwd(net, batch, fwd)
    ratio = np.exp(_log_ratio(fwd, batch)[0])
    A = batch.advantages
    raw = (ratio - 1.0) * A
    terms = np.minimum(raw, delta)
    active = raw < delta
    return _logp_graph(fwd, batch, -terms.mean(), np.where(active, -ratio * A, 0.0) / len(batch), terms)


def value_loss(net: PolicyNet, batch: Minibatch, fwd: Forward | None = None) -> LossGraph:
    fwd = _fwd(net, batch, fwd)
    err = fwd.value - batch.returns
    M = len(batch)
    out = zero_loss(fwd)
    out.value = float(np.mean(err**2))
    out.d_value = 2.0 * err / M
    return out


def entropy_bonus(net: PolicyNet, batch: Minibatch, fwd: Forward | None = None) -> LossGraph:
    """Mean policy entropy (a quantity to maximize; subtract it from a loss)."""
    fwd = _fwd(net, batch, fwd)
    out = zero_loss(fwd)
    out.value = float(np.sum(fwd.log_std + 0.5 + 0.5 * math.log(2.0 * math.pi)))
    out.d_log_std = np.ones_like(fwd.log_std)
    return out


def kl_loss(net: PolicyNet, batch: Minibatch, fwd: Forward | None = None) -> LossGraph:
    """Mean KL(old || new) with the old distribution held fixed."""
    fwd = _fwd(net, batch, fwd)
    old = batch.old_dist()
    var = fwd.std**2
    M = len(batch)
    out = zero_loss(fwd)
    out.value = float(np.mean(kl(old, fwd.dist())))
    out.d_mean = (fwd.mean - old.mean) / var / M
    out.d_log_std = np.sum(1.0 - (old.std**2 + (old.mean - fwd.mean) ** 2) / var, axis=0) / M
    return out


def policy_loss(net: PolicyNet, batch: Minibatch, spec: ObjectiveSpec, fwd: Forward | None = None) -> LossGraph:
    fwd = _fwd(net, batch, fwd)
    if spec.kind == "pg":
        return pg_loss(net, batch, fwd)
    if spec.kind == "ratio_conservative":
        if spec.ppo_form:
            return ppo_clip_loss(net, batch, spec.eps_clip, fwd)
        return ratio_conservative_loss(net, batch, spec.lam, fwd)
    if spec.kind == "objective_conservative":
        return trefree_loss(net, batch, spec.delta, fwd)
    raise ValueError(f"objective kind {spec.kind!r} has no minibatch loss")


def total_loss(net: PolicyNet, batch: Minibatch, spec: ObjectiveSpec) -> LossGraph:
    """policy loss + value_coef * value loss - entropy_coef * entropy."""
    fwd = forward(net, batch.obs)
    pol = policy_loss(net, batch, spec, fwd)
    out = pol + spec.value_coef * value_loss(net, batch, fwd)
    if spec.entropy_coef:
        out = out - spec.entropy_coef * entropy_bonus(net, batch, fwd)
    out.extras = {"policy_loss": pol.value, "terms": pol.extras["terms"]}
    return out


def log_ratios(net: PolicyNet, batch: Minibatch) -> np.ndarray:
    return _log_ratio(forward(net, batch.obs), batch)[0]


def ratio_stats(net: PolicyNet, batch: Minibatch) -> dict[str, float]:
    log_ratio = log_ratios(net, batch)
    return {
        "min_log_ratio": float(log_ratio.min()),
        "max_log_ratio": float(log_ratio.max()),
        "mean_log_ratio": float(log_ratio.mean()),
    }


# -- TRPO ---------------------------------------------------------------------------


def conjugate_gradient(Avp, b: np.ndarray, iters: int = 10, residual_tol: float = 1e-10):
    """Solve A x = b for symmetric positive definite A given only products A v.

    Returns ``(x, residual_norm)``.
    """
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rr = r @ r
    for _ in range(iters):
        if rr < residual_tol:
            break
        Ap = Avp(p)
        alpha = rr / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if not (np.all(np.isfinite(x)) and np.isfinite(r @ r)):
            raise NumericError("non-finite conjugate-gradient iterate")
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, float(np.sqrt(rr))


def _unflatten(net: PolicyNet, vec: np.ndarray, names) -> dict[str, np.ndarray]:
    out = {k: np.zeros_like(v) for k, v in net.params().items()}
    offset = 0
    for n in names:
        size = out[n].size
        out[n] = vec[offset : offset + size].reshape(out[n].shape)
        offset += size
    return out


def _flatten(grads: dict, names) -> np.ndarray:
    return np.concatenate([grads[n].ravel() for n in names])


def fisher_vector_product(net: PolicyNet, fwd: Forward, v: np.ndarray, names=POLICY_PARAMS) -> np.ndarray:
    """Hessian of mean KL(old || new) at new = old, applied to ``v``.

    At the minimum the Hessian equals J^T M J: J the Jacobian of (mean, log_std)
    and M = diag(1/std^2, 2) the Gaussian Fisher in those coordinates.
    """
    tangent = _unflatten(net, v, names)
    M = fwd.mean.shape[0]
    jm = jvp_mean(net, fwd, tangent)
    graph = zero_loss(fwd)
    graph.d_mean = jm / fwd.std**2 / M
    graph.d_log_std = 2.0 * tangent["log_std"]
    return _flatten(backward(net, graph), names)


def surrogate_gradient(net: PolicyNet, batch: Minibatch, fwd: Forward | None = None, names=POLICY_PARAMS):
    """(mean r*A, its gradient) at the current parameters."""
    graph = pg_loss(net, batch, fwd)
    return -graph.value, -_flatten(backward(net, graph), names)


def natural_step(g: np.ndarray, fvp, trpo_kl: float, cg_iters: int = 10, damping: float = 0.1):
    """Full step sqrt(2 kl / x^T F x) * x with x solving (F + damping I) x = g.

    Returns ``(step, cg_residual)``.
    """
    x, residual = conjugate_gradient(lambda v: fvp(v) + damping * v, g, cg_iters)
    xFx = float(x @ fvp(x))
    if not np.isfinite(xFx) or xFx <= 0:
        raise NumericError(f"non-positive curvature along the CG direction ({xFx:.3g})")
    return math.sqrt(2.0 * trpo_kl / xFx) * x, residual


@dataclass
class TrpoReport:
    accepted: bool
    reason: str
    kl: float = 0.0
    improvement: float = 0.0
    cg_residual: float = 0.0
    step_fraction: float = 0.0
    log: list = field(default_factory=list)


def trpo_step(
    net: PolicyNet,
    batch: Minibatch,
    trpo_kl: float,
    cg_iters: int = 10,
    damping: float = 0.1,
    backtrack: float = 0.8,
    max_backtracks: int = 10,
    fvp=None,
) -> TrpoReport:
    """One KL-constrained natural-gradient step on the policy parameters, in place.

    ``fvp`` replaces the Fisher-vector product (undamped) when given; damping is
    added on top for the CG solve only. The step length uses the undamped
    curvature: step = sqrt(2 * trpo_kl / x^T F x) * x.
    """
    if trpo_kl <= 0:
        raise ValueError("trpo_kl must be > 0")
    names = POLICY_PARAMS
    fwd = forward(net, batch.obs)
    surr_old, g = surrogate_gradient(net, batch, fwd, names)
    if not np.any(g):
        return TrpoReport(False, "zero-gradient")
    if fvp is None:
        fvp = lambda v: fisher_vector_product(net, fwd, v, names)  # noqa: E731
    full_step, residual = natural_step(g, fvp, trpo_kl, cg_iters, damping)

    theta0 = net.flat(names)
    old = batch.old_dist()
    log = []
    frac = 1.0
    for _ in range(max_backtracks):
        net.set_flat(theta0 + frac * full_step, names)
        try:
            trial = forward(net, batch.obs)
            surr = -pg_loss(net, batch, trial).value
            mean_kl = float(np.mean(kl(old, trial.dist())))
        except NumericError:
            surr, mean_kl = -np.inf, np.inf
        improvement = surr - surr_old
        log.append((frac, mean_kl, improvement))
        if mean_kl <= trpo_kl and improvement > 0:
            np.clip(net.log_std, LOG_STD_MIN, LOG_STD_MAX, out=net.log_std)
            return TrpoReport(True, "accepted", mean_kl, improvement, residual, frac, log)
        frac *= backtrack
    net.set_flat(theta0, names)
    return TrpoReport(False, "line-search-failed", 0.0, 0.0, residual, 0.0, log)


__all__ = [
    "Minibatch", "ObjectiveSpec", "pg_loss", "ratio_conservative_loss", "ppo_clip_loss", "trefree_loss",
    "value_loss", "entropy_bonus", "kl_loss", "policy_loss", "total_loss", "log_ratios", "ratio_stats",
    "conjugate_gradient", "natural_step", "fisher_vector_product", "surrogate_gradient", "trpo_step", "TrpoReport",
]
