"""Finite-difference verification of the hand-written gradients.

The numeric side only ever evaluates loss *values*, so it is independent of
:func:`trefree.nn.backward`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import objectives as ob
from .nn import PARAM_NAMES, PolicyNet, backward, forward

FD_STEP = 1e-5
REL_TOL = 1e-5
# below this magnitude an element is compared absolutely (REL_TOL * GRAD_FLOOR)
GRAD_FLOOR = 1e-6
# samples whose clip argument lies this close to a kink are redrawn
KINK_MARGIN = 1e-3

LOSS_FAMILIES = ("pg", "ratio-cons", "ppo", "trefree", "value", "entropy", "kl")


def loss_fn(family: str, lam=0.2, eps=0.2, delta=0.01):
    return {
        "pg": lambda net, b: ob.pg_loss(net, b),
        "ratio-cons": lambda net, b: ob.ratio_conservative_loss(net, b, lam),
        "ppo": lambda net, b: ob.ppo_clip_loss(net, b, eps),
        "trefree": lambda net, b: ob.trefree_loss(net, b, delta),
        "value": lambda net, b: ob.value_loss(net, b),
        "entropy": lambda net, b: ob.entropy_bonus(net, b),
        "kl": lambda net, b: ob.kl_loss(net, b),
    }[family]


def random_net(rng: np.random.Generator, obs_dim=3, act_dim=2, hidden=16, scale=0.5) -> PolicyNet:
    net = PolicyNet.zeros(obs_dim, act_dim, hidden)
    for p in net.params().values():
        p[...] = scale * rng.standard_normal(p.shape)
    return net


def random_batch(net: PolicyNet, rng: np.random.Generator, size=16, log_ratio_noise=0.3) -> ob.Minibatch:
    obs = rng.standard_normal((size, net.obs_dim))
    fwd = forward(net, obs)
    actions = fwd.mean + fwd.std * rng.standard_normal(fwd.mean.shape)
    logp = np.sum(-0.5 * ((actions - fwd.mean) / fwd.std) ** 2 - fwd.log_std - 0.5 * np.log(2 * np.pi), axis=1)
    return ob.Minibatch(
        obs=obs,
        actions=actions,
        old_log_probs=logp + log_ratio_noise * rng.standard_normal(size),
        advantages=rng.standard_normal(size),
        returns=rng.standard_normal(size),
        old_means=fwd.mean + 0.1 * rng.standard_normal(fwd.mean.shape),
        old_stds=fwd.std * np.exp(0.1 * rng.standard_normal(fwd.mean.shape)),
    )


def kink_distance(family: str, net: PolicyNet, batch: ob.Minibatch, lam=0.2, eps=0.2, delta=0.01) -> np.ndarray:
    """Per-sample distance of the clip argument from the nearest kink (inf if smooth)."""
    ratio = np.exp(ob.log_ratios(net, batch))
    A = batch.advantages
    if family == "ratio-cons":
        return np.abs(np.abs(ratio - 1.0) - lam)
    if family == "ppo":
        return np.minimum(np.abs(ratio - (1 + eps)), np.abs(ratio - (1 - eps)))
    if family == "trefree":
        return np.abs((ratio - 1.0) * A - delta)
    return np.full(len(batch), np.inf)


def numeric_grad(f, net: PolicyNet, h=FD_STEP) -> dict[str, np.ndarray]:
    """Central differences of ``f(net) -> float`` for every parameter element."""
    out = {}
    for name in PARAM_NAMES:
        p = getattr(net, name)
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = f(net)
            p[idx] = orig - h
            down = f(net)
            p[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    return out


@dataclass
class GradCheckResult:
    family: str
    max_rel_err: float
    max_abs_err_small: float
    n_checked: int
    n_flat_samples: int
    flat_exact_zero: bool
    passed: bool


def compare(analytic: dict, numeric: dict) -> tuple[float, float, int, bool]:
    worst_rel, worst_small, n, ok = 0.0, 0.0, 0, True
    for name in PARAM_NAMES:
        a, b = analytic[name].ravel(), numeric[name].ravel()
        mag = np.maximum(np.abs(a), np.abs(b))
        big = mag >= GRAD_FLOOR
        err = np.abs(a - b)
        if big.any():
            rel = err[big] / mag[big]
            worst_rel = max(worst_rel, float(rel.max()))
            ok &= bool(np.all(rel <= REL_TOL))
        if (~big).any():
            worst_small = max(worst_small, float(err[~big].max()))
            ok &= bool(np.all(err[~big] <= REL_TOL * GRAD_FLOOR))
        n += a.size
    return worst_rel, worst_small, n, ok


def check_family(family: str, net: PolicyNet, rng: np.random.Generator, size=16) -> GradCheckResult:
    f = loss_fn(family)
    for _ in range(100):
        batch = random_batch(net, rng, size)
        if np.all(kink_distance(family, net, batch) > KINK_MARGIN):
            break
    else:
        raise RuntimeError("could not draw a batch away from clip kinks")

    analytic = backward(net, f(net, batch))
    numeric = numeric_grad(lambda n: f(n, batch).value, net)
    worst_rel, worst_small, count, ok = compare(analytic, numeric)

    # samples on the flat side of a clip must contribute exactly nothing
    flat_zero, n_flat = True, 0
    if family in ("ratio-cons", "ppo", "trefree"):
        flat = _flat_mask(family, net, batch)
        n_flat = int(flat.sum())
        if n_flat:
            sub = batch.subset(np.nonzero(flat)[0])
            g = backward(net, f(net, sub))
            flat_zero = all(not np.any(v) for v in g.values())
    return GradCheckResult(family, worst_rel, worst_small, count, n_flat, flat_zero, ok and flat_zero)


def _flat_mask(family, net, batch, lam=0.2, eps=0.2, delta=0.01):
    ratio = np.exp(ob.log_ratios(net, batch))
    A = batch.advantages
    if family == "ratio-cons":
        return np.abs(ratio - 1.0) >= lam
    if family == "ppo":
        return ((A > 0) & (ratio >= 1 + eps)) | ((A < 0) & (ratio <= 1 - eps))
    return (ratio - 1.0) * A >= delta


def run_gradcheck(seed: int, n_nets: int = 10, families=LOSS_FAMILIES, hidden=16) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(n_nets):
        net = random_net(rng, hidden=hidden)
        for family in families:
            results.append(check_family(family, net, rng))
    return results
