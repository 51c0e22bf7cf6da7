"""Exact analytics on small finite MDPs.

Everything here is computed with dense linear solves, so the results are exact
up to floating point. The module exists to check policy-improvement identities
and lower bounds numerically: values, advantages, discounted state
distributions, the classic and generalized surrogate objectives, and the two
improvement bounds built on them.

Conventions
-----------
``P[s, a, s']`` transition tensor, ``r[s, a]`` rewards, ``d0[s]`` initial
distribution, ``pi[s, a]`` action probabilities. Discounted state
distributions are *unnormalized* (they sum to ``1 / (1 - gamma)``) unless a
``normalized=True`` flag is passed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PROB_ATOL = 1e-12
BOUND_ATOL = 1e-9


def _check_prob_rows(x: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    if np.any(x < 0):
        raise ValueError(f"{name} has negative entries")
    sums = x.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > PROB_ATOL):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ValueError(f"{name} rows must sum to 1 (max deviation {worst:.3e})")


@dataclass(frozen=True)
class Mdp:
    """Finite discounted MDP given by dense tables."""

    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    initial_dist: np.ndarray  # (S,)
    discount: float

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward, dtype=float)
        d0 = np.asarray(self.initial_dist, dtype=float)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "initial_dist", d0)
        object.__setattr__(self, "discount", float(self.discount))

        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[0] < 1 or P.shape[1] < 1:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        if r.shape != P.shape[:2]:
            raise ValueError(f"reward shape {r.shape} does not match (S, A) = {P.shape[:2]}")
        if d0.shape != (P.shape[0],):
            raise ValueError(f"initial_dist shape {d0.shape} does not match S = {P.shape[0]}")
        if not np.all(np.isfinite(r)):
            raise ValueError("reward contains non-finite entries")
        _check_prob_rows(P, "transition")
        _check_prob_rows(d0, "initial_dist")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "P": self.transition.tolist(),
            "r": self.reward.tolist(),
            "d0": self.initial_dist.tolist(),
            "gamma": self.discount,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Mdp":
        mdp = cls(data["P"], data["r"], data["d0"], data["gamma"])
        if (mdp.n_states, mdp.n_actions) != (data["n_states"], data["n_actions"]):
            raise ValueError("declared n_states/n_actions disagree with table shapes")
        return mdp

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Mdp":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TabularPolicy:
    probs: np.ndarray  # (S, A)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 2:
            raise ValueError(f"policy table must be 2-D, got shape {p.shape}")
        _check_prob_rows(p, "policy")
        object.__setattr__(self, "probs", p)


@dataclass(frozen=True)
class StateActionFn:
    """A(s, a) = r(s, a) + gamma * E[f(s')] - f(s) for some state function f."""

    values: np.ndarray  # (S, A)
    generator_f: np.ndarray | None = None


@dataclass(frozen=True)
class BoundReport:
    lhs: float
    surrogate: float
    penalty: float
    delta_term: float
    epsilon_term: float
    holds: bool

    @property
    def slack(self) -> float:
        return self.lhs - (self.surrogate - self.penalty)

    def to_dict(self) -> dict:
        return {
            "lhs": self.lhs,
            "surrogate": self.surrogate,
            "penalty": self.penalty,
            "delta_term": self.delta_term,
            "epsilon_term": self.epsilon_term,
            "holds": self.holds,
        }


def _make_report(lhs, surrogate, penalty, delta_term, epsilon_term) -> BoundReport:
    lhs, surrogate, penalty = float(lhs), float(surrogate), float(penalty)
    return BoundReport(
        lhs=lhs,
        surrogate=surrogate,
        penalty=penalty,
        delta_term=float(delta_term),
        epsilon_term=float(epsilon_term),
        holds=bool(lhs >= surrogate - penalty - BOUND_ATOL),
    )


def _check_pair(mdp: Mdp, pi: TabularPolicy) -> None:
    if pi.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"policy shape {pi.probs.shape} does not match MDP (S, A) = "
            f"{(mdp.n_states, mdp.n_actions)}"
        )


def policy_transition(mdp: Mdp, pi: TabularPolicy) -> np.ndarray:
    """State-to-state kernel P_pi[s, s'] = sum_a pi(a|s) P(s'|s, a)."""
    _check_pair(mdp, pi)
    return np.einsum("sa,sat->st", pi.probs, mdp.transition)


def policy_reward(mdp: Mdp, pi: TabularPolicy) -> np.ndarray:
    _check_pair(mdp, pi)
    return np.einsum("sa,sa->s", pi.probs, mdp.reward)


def solve_value(mdp: Mdp, pi: TabularPolicy) -> np.ndarray:
    """State values from the linear system (I - gamma P_pi) V = r_pi."""
    P_pi = policy_transition(mdp, pi)
    lhs = np.eye(mdp.n_states) - mdp.discount * P_pi
    return np.linalg.solve(lhs, policy_reward(mdp, pi))


def q_and_advantage(mdp: Mdp, pi: TabularPolicy) -> tuple[np.ndarray, np.ndarray]:
    V = solve_value(mdp, pi)
    Q = mdp.reward + mdp.discount * mdp.transition @ V
    return Q, Q - V[:, None]


def discounted_state_dist(mdp: Mdp, pi: TabularPolicy, normalized: bool = False) -> np.ndarray:
    """sum_t gamma^t P(s_t = s), optionally scaled by (1 - gamma) to sum to one."""
    P_pi = policy_transition(mdp, pi)
    lhs = np.eye(mdp.n_states) - mdp.discount * P_pi
    # d^T (I - gamma P_pi) = d0^T
    d = np.linalg.solve(lhs.T, mdp.initial_dist)
    if normalized:
        d = (1.0 - mdp.discount) * d
    return d


def performance(mdp: Mdp, pi: TabularPolicy) -> float:
    return float(mdp.initial_dist @ solve_value(mdp, pi))


def state_action_fn_from_f(mdp: Mdp, f) -> StateActionFn:
    f = np.asarray(f, dtype=float)
    if f.shape != (mdp.n_states,):
        raise ValueError(f"f must have length {mdp.n_states}, got shape {f.shape}")
    values = mdp.reward + mdp.discount * mdp.transition @ f - f[:, None]
    return StateActionFn(values=values, generator_f=f.copy())


def _check_saf(mdp: Mdp, saf: StateActionFn) -> None:
    if saf.values.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"state-action function shape {saf.values.shape} does not match MDP")


def performance_difference(
    mdp: Mdp, pi_new: TabularPolicy, pi_old: TabularPolicy, saf: StateActionFn
) -> tuple[float, float]:
    """Both sides of the generalized performance-difference identity.

    Returns ``(J(new) - J(old), E_{d_new, new}[A] - E_{d_old, old}[A])`` where the
    expectations use unnormalized discounted state distributions.
    """
    _check_saf(mdp, saf)
    lhs = performance(mdp, pi_new) - performance(mdp, pi_old)
    d_new = discounted_state_dist(mdp, pi_new)
    d_old = discounted_state_dist(mdp, pi_old)
    A = saf.values
    rhs = d_new @ np.sum(pi_new.probs * A, axis=1) - d_old @ np.sum(pi_old.probs * A, axis=1)
    return float(lhs), float(rhs)


def surrogate_L(mdp: Mdp, pi_new: TabularPolicy, pi_old: TabularPolicy) -> float:
    """J(old) + sum_s d_old(s) sum_a new(a|s) A_old(s, a)."""
    _check_pair(mdp, pi_new)
    _, A = q_and_advantage(mdp, pi_old)
    d = discounted_state_dist(mdp, pi_old)
    return performance(mdp, pi_old) + float(d @ np.sum(pi_new.probs * A, axis=1))


def ratio_deviation(pi_new: TabularPolicy, pi_old: TabularPolicy, saf: StateActionFn) -> np.ndarray:
    """Table of (new/old - 1) * A, zero where both A and new vanish off old's support.

    Raises ZeroDivisionError naming the offending (s, a) when old(a|s) = 0 while
    the product would need the ratio.
    """
    new, old, A = pi_new.probs, pi_old.probs, saf.values
    out = np.zeros_like(A)
    for s, a in zip(*np.nonzero(old == 0.0)):
        if new[s, a] > 0.0 and A[s, a] != 0.0:
            raise ZeroDivisionError(
                f"ratio undefined at (s={s}, a={a}): old probability is 0 "
                f"but new probability is {new[s, a]:.3g}"
            )
    support = old > 0.0
    out[support] = (new[support] / old[support] - 1.0) * A[support]
    return out


def surrogate_G(
    mdp: Mdp,
    pi_new: TabularPolicy,
    pi_old: TabularPolicy,
    saf: StateActionFn,
    normalized: bool = False,
) -> float:
    """E_{s ~ d_old, a ~ old}[(new/old - 1) * A(s, a)]."""
    _check_pair(mdp, pi_new)
    _check_saf(mdp, saf)
    d = discounted_state_dist(mdp, pi_old, normalized=normalized)
    weighted = pi_old.probs * ratio_deviation(pi_new, pi_old, saf)
    return float(d @ weighted.sum(axis=1))


def max_tv(pi_a: TabularPolicy, pi_b: TabularPolicy) -> float:
    return float(np.max(0.5 * np.abs(pi_a.probs - pi_b.probs).sum(axis=1)))


def kl_per_state(pi_a: TabularPolicy, pi_b: TabularPolicy) -> np.ndarray:
    p, q = pi_a.probs, pi_b.probs
    if np.any((p > 0) & (q == 0)):
        s, a = (int(i[0]) for i in np.nonzero((p > 0) & (q == 0)))
        raise ValueError(f"KL undefined: support violation at (s={s}, a={a})")
    mask = p > 0
    terms = np.zeros_like(p)
    terms[mask] = p[mask] * np.log(p[mask] / q[mask])
    return terms.sum(axis=1)


def max_kl(pi_a: TabularPolicy, pi_b: TabularPolicy) -> float:
    return float(np.max(kl_per_state(pi_a, pi_b)))


def check_theorem1(mdp: Mdp, pi_new: TabularPolicy, pi_old: TabularPolicy) -> BoundReport:
    """J(new) >= L_old(new) - 4 eps gamma / (1 - gamma)^2 * alpha^2.

    ``alpha`` is the max-state total variation and ``eps = max |A_old|``. The
    report's ``lhs`` is J(new) and ``surrogate`` is L_old(new).
    """
    gamma = mdp.discount
    _, A = q_and_advantage(mdp, pi_old)
    eps = float(np.max(np.abs(A)))
    alpha = max_tv(pi_new, pi_old)
    penalty = 4.0 * eps * gamma / (1.0 - gamma) ** 2 * alpha**2
    return _make_report(
        performance(mdp, pi_new), surrogate_L(mdp, pi_new, pi_old), penalty, alpha, eps
    )


def check_theorem2(
    mdp: Mdp,
    pi_new: TabularPolicy,
    pi_old: TabularPolicy,
    saf: StateActionFn,
    normalized: bool = False,
) -> BoundReport:
    """J(new) - J(old) >= G_old(new) - 2 gamma / (1 - gamma) * (delta + eps).

    ``delta = max_{s,a} |(new/old - 1) A|`` and ``eps = max_s |sum_a old(a|s) A(s, a)|``.
    """
    gamma = mdp.discount
    dev = ratio_deviation(pi_new, pi_old, saf)
    delta = float(np.max(np.abs(dev)))
    eps = float(np.max(np.abs(np.sum(pi_old.probs * saf.values, axis=1))))
    penalty = 2.0 * gamma / (1.0 - gamma) * (delta + eps)
    lhs = performance(mdp, pi_new) - performance(mdp, pi_old)
    G = surrogate_G(mdp, pi_new, pi_old, saf, normalized=normalized)
    return _make_report(lhs, G, penalty, delta, eps)


# -- random instances -------------------------------------------------------


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int, gamma: float) -> Mdp:
    """Dirichlet(1) transition rows and initial distribution, rewards U[-1, 1]."""
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    d0 = rng.dirichlet(np.ones(n_states))
    return Mdp(P, r, d0, gamma)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> TabularPolicy:
    return TabularPolicy(rng.dirichlet(np.ones(n_actions), size=n_states))


def greedy_policy(A: np.ndarray) -> TabularPolicy:
    probs = np.zeros_like(A)
    probs[np.arange(A.shape[0]), np.argmax(A, axis=1)] = 1.0
    return TabularPolicy(probs)
