"""Randomized sweeps over small MDPs for the exact bound and identity checks.

Instance ``i`` of a sweep with root seed ``seed`` is drawn from
``default_rng([seed, i])``, so any single instance can be replayed alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tabular as tc

F_KINDS = ("value", "random")


@dataclass
class Instance:
    index: int
    mdp: tc.Mdp
    pi_old: tc.TabularPolicy
    pi_new: tc.TabularPolicy
    f: np.ndarray
    f_kind: str

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "mdp": self.mdp.to_dict(),
            "pi_old": self.pi_old.probs.tolist(),
            "pi_new": self.pi_new.probs.tolist(),
            "f": self.f.tolist(),
            "f_kind": self.f_kind,
        }


def draw_new_policy(rng: np.random.Generator, pi_old: tc.TabularPolicy, A: np.ndarray) -> tc.TabularPolicy:
    """A candidate update: fresh random, greedy on A, or a mixture toward either."""
    S, nA = pi_old.probs.shape
    kind = rng.integers(4)
    if kind == 0:
        return tc.random_policy(rng, S, nA)
    if kind == 1:
        return tc.greedy_policy(A)
    target = tc.greedy_policy(A) if kind == 2 else tc.random_policy(rng, S, nA)
    alpha = rng.uniform(0.0, 1.0)
    return tc.TabularPolicy((1 - alpha) * pi_old.probs + alpha * target.probs)


def draw_instance(
    seed: int,
    index: int,
    gamma: float = 0.9,
    max_states: int = 5,
    max_actions: int = 3,
    f_kind: str = "random",
    same_policy: bool = False,
) -> Instance:
    if f_kind not in F_KINDS:
        raise ValueError(f"f_kind must be one of {F_KINDS}")
    rng = np.random.default_rng([seed, index])
    S = int(rng.integers(1, max_states + 1))
    nA = int(rng.integers(1, max_actions + 1))
    mdp = tc.random_mdp(rng, S, nA, gamma)
    pi_old = tc.random_policy(rng, S, nA)
    _, A = tc.q_and_advantage(mdp, pi_old)
    pi_new = pi_old if same_policy else draw_new_policy(rng, pi_old, A)
    if f_kind == "value":
        f = tc.solve_value(mdp, pi_old)
    else:
        f = rng.normal(0.0, 2.0, size=S)
    return Instance(index, mdp, pi_old, pi_new, f, f_kind)


@dataclass
class SuiteResult:
    check: str
    count: int
    n_violations: int
    worst_slack: float
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.n_violations == 0

    def to_dict(self) -> dict:
        return {
            "check": self.check,
            "count": self.count,
            "n_violations": self.n_violations,
            "worst_slack": self.worst_slack,
            "passed": self.passed,
            "violations": self.violations,
        }


def _suite(check: str, count: int, evaluate, draw) -> SuiteResult:
    if count < 1:
        raise ValueError("count must be >= 1")
    worst, bad = np.inf, []
    for i in range(count):
        inst = draw(i)
        slack, detail = evaluate(inst)
        worst = min(worst, slack)
        if slack < -tc.BOUND_ATOL:
            bad.append({"instance": inst.to_dict(), **detail})
    return SuiteResult(check, count, len(bad), float(worst), bad)


def theorem1_suite(count, seed=0, gamma=0.9, max_states=5, max_actions=3, same_policy=False) -> SuiteResult:
    def evaluate(inst):
        rep = tc.check_theorem1(inst.mdp, inst.pi_new, inst.pi_old)
        return rep.slack, {"report": rep.to_dict()}

    return _suite(
        "theorem1", count, evaluate,
        lambda i: draw_instance(seed, i, gamma, max_states, max_actions, "value", same_policy),
    )


def theorem2_suite(
    count, seed=0, gamma=0.9, max_states=5, max_actions=3, same_policy=False, normalized=False
) -> SuiteResult:
    """Half the instances use f = V_old, half a random f."""

    def evaluate(inst):
        saf = tc.state_action_fn_from_f(inst.mdp, inst.f)
        rep = tc.check_theorem2(inst.mdp, inst.pi_new, inst.pi_old, saf, normalized=normalized)
        return rep.slack, {"report": rep.to_dict()}

    return _suite(
        "theorem2" + ("-normalized" if normalized else ""), count, evaluate,
        lambda i: draw_instance(seed, i, gamma, max_states, max_actions, F_KINDS[i % 2], same_policy),
    )


def identity_suite(count, seed=0, gamma=0.9, max_states=5, max_actions=3, random_f_every=10) -> SuiteResult:
    """Every ``random_f_every``-th instance uses a non-value f; slack is ``-|lhs - rhs|``."""

    def evaluate(inst):
        saf = tc.state_action_fn_from_f(inst.mdp, inst.f)
        lhs, rhs = tc.performance_difference(inst.mdp, inst.pi_new, inst.pi_old, saf)
        return -abs(lhs - rhs), {"lhs": lhs, "rhs": rhs}

    return _suite(
        "identity", count, evaluate,
        lambda i: draw_instance(
            seed, i, gamma, max_states, max_actions, "random" if i % random_f_every == 0 else "value"
        ),
    )


SUITES = {"theorem1": theorem1_suite, "theorem2": theorem2_suite, "identity": identity_suite}
