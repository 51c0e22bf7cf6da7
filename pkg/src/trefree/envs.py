"""Small analytic environments with a common episodic interface.

``reset() -> obs`` and ``step(action) -> StepResult``. Actions outside the
box are clipped and counted in ``n_clipped``. Hitting the horizon ends the
episode with ``truncated=True`` (never ``done``), so learners bootstrap there.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tabular import Mdp, TabularPolicy


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    act_dim: int
    max_episode_steps: int
    action_low: np.ndarray
    action_high: np.ndarray

    def __post_init__(self):
        if self.obs_dim < 1 or self.act_dim < 1:
            raise ValueError("obs_dim and act_dim must be >= 1")
        if np.any(np.asarray(self.action_low) >= np.asarray(self.action_high)):
            raise ValueError("action_low must be < action_high elementwise")


@dataclass
class StepResult:
    next_obs: np.ndarray
    reward: float
    done: bool
    truncated: bool


class Env:
    spec: EnvSpec

    def __init__(self, seed: int | np.random.SeedSequence | None = None):
        self.rng = np.random.default_rng(seed)
        self.t = 0
        self.n_clipped = 0

    def _clip(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=float).reshape(self.spec.act_dim)
        clipped = np.clip(a, self.spec.action_low, self.spec.action_high)
        if np.any(clipped != a):
            self.n_clipped += 1
        return clipped

    def _advance(self) -> bool:
        self.t += 1
        return self.t >= self.spec.max_episode_steps

    def reset(self) -> np.ndarray:
        raise NotImplementedError

    def step(self, action) -> StepResult:
        raise NotImplementedError


class PointMass(Env):
    """Point mass in the plane pushed toward the origin.

    State ``(x, y, vx, vy)``; ``pos += 0.05 * vel`` then ``vel = 0.95 * vel + 0.1 * a``.
    Reward ``-|pos| - 0.01 |a|^2`` on the post-step position.
    """

    spec = EnvSpec(4, 2, 200, np.array([-1.0, -1.0]), np.array([1.0, 1.0]))

    def reset(self, state=None) -> np.ndarray:
        self.t = 0
        if state is None:
            self.pos = self.rng.uniform(-1.0, 1.0, size=2)
            self.vel = np.zeros(2)
        else:
            s = np.asarray(state, dtype=float)
            self.pos, self.vel = s[:2].copy(), s[2:].copy()
        return self._obs()

    def _obs(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel])

    def step(self, action) -> StepResult:
        a = self._clip(action)
        self.pos = self.pos + 0.05 * self.vel
        self.vel = 0.95 * self.vel + 0.1 * a
        reward = -math.hypot(self.pos[0], self.pos[1]) - 0.01 * float(a @ a)
        return StepResult(self._obs(), reward, False, self._advance())


def angle_normalize(x: float) -> float:
    return ((x + math.pi) % (2 * math.pi)) - math.pi


class Pendulum(Env):
    """Torque-limited swing-up; angle 0 is upright.

    Reward ``-(theta^2 + 0.1 thetadot^2 + 0.001 u^2)`` on the pre-step state.
    """

    spec = EnvSpec(3, 1, 200, np.array([-2.0]), np.array([2.0]))
    g, m, length, dt, max_speed = 10.0, 1.0, 1.0, 0.05, 8.0

    def reset(self, state=None) -> np.ndarray:
        self.t = 0
        if state is None:
            self.theta = float(self.rng.uniform(-math.pi, math.pi))
            self.thetadot = float(self.rng.uniform(-1.0, 1.0))
        else:
            self.theta, self.thetadot = float(state[0]), float(state[1])
        return self._obs()

    def _obs(self) -> np.ndarray:
        return np.array([math.cos(self.theta), math.sin(self.theta), self.thetadot])

    def step(self, action) -> StepResult:
        u = float(self._clip(action)[0])
        th, thdot = self.theta, self.thetadot
        reward = -(angle_normalize(th) ** 2 + 0.1 * thdot**2 + 0.001 * u**2)
        g, m, l, dt = self.g, self.m, self.length, self.dt
        thdot = thdot + (3 * g / (2 * l) * math.sin(th) + 3.0 / (m * l**2) * u) * dt
        thdot = min(max(thdot, -self.max_speed), self.max_speed)
        self.theta, self.thetadot = th + thdot * dt, thdot
        return StepResult(self._obs(), reward, False, self._advance())


def chain_horizon(gamma: float, tail: float = 1e-10) -> int:
    """Smallest horizon H with gamma^H <= tail."""
    if gamma == 0.0:
        return 1
    return int(math.ceil(math.log(tail) / math.log(gamma)))


class Chain(Env):
    """``n``-state chain; the single action dimension picks right (> 0) or left.

    The agent starts at state 0 and earns 1 per step spent in the right end
    state ``n - 1``. Observations are one-hot. ``mdp`` is the exact tabular
    counterpart (action 0 = left, 1 = right).
    """

    def __init__(self, n: int, seed=None, gamma: float = 0.99, horizon: int | None = None):
        if n < 2:
            raise ValueError(f"chain needs n >= 2 states, got {n}")
        super().__init__(seed)
        self.n = n
        self.spec = EnvSpec(n, 1, horizon or chain_horizon(gamma), np.array([-1.0]), np.array([1.0]))
        P = np.zeros((n, 2, n))
        for s in range(n):
            P[s, 0, max(s - 1, 0)] = 1.0
            P[s, 1, min(s + 1, n - 1)] = 1.0
        r = np.zeros((n, 2))
        r[n - 1, :] = 1.0
        d0 = np.zeros(n)
        d0[0] = 1.0
        self.mdp = Mdp(P, r, d0, gamma)

    def reset(self, state: int = 0) -> np.ndarray:
        self.t = 0
        self.state = int(state)
        return self._obs()

    def _obs(self) -> np.ndarray:
        obs = np.zeros(self.n)
        obs[self.state] = 1.0
        return obs

    def step(self, action) -> StepResult:
        a = self._clip(action)
        reward = float(self.mdp.reward[self.state, 0])
        self.state = int(chain_move(np.array([self.state]), a[:1], self.n)[0])
        return StepResult(self._obs(), reward, False, self._advance())

    def one_hot_states(self) -> np.ndarray:
        return np.eye(self.n)


def chain_move(states: np.ndarray, actions: np.ndarray, n: int) -> np.ndarray:
    """Vectorized chain dynamics: step right where the action is positive."""
    return np.clip(states + np.where(np.asarray(actions) > 0, 1, -1), 0, n - 1)


def chain_mc_returns(
    env: Chain, act, n_episodes: int, rng: np.random.Generator, horizon: int | None = None
) -> np.ndarray:
    """Discounted returns of ``n_episodes`` lockstep episodes from the start state.

    ``act(states, rng) -> actions`` maps an int array of states to 1-D actions.
    Rewards are discounted with the exported Mdp's gamma up to ``horizon``.
    """
    mdp = env.mdp
    horizon = horizon or env.spec.max_episode_steps
    states = np.zeros(n_episodes, dtype=int)
    returns = np.zeros(n_episodes)
    disc = 1.0
    for _ in range(horizon):
        returns += disc * mdp.reward[states, 0]
        actions = np.clip(act(states, rng), env.spec.action_low[0], env.spec.action_high[0])
        states = chain_move(states, actions, env.n)
        disc *= mdp.discount
    return returns


def chain_policy_table(means: np.ndarray, stds: np.ndarray) -> TabularPolicy:
    """Tabular policy induced by per-state Gaussians over the 1-D chain action.

    P(right | s) = P(a > 0) = Phi(mean / std).
    """
    means = np.asarray(means, dtype=float).reshape(-1)
    stds = np.asarray(stds, dtype=float).reshape(-1)
    right = np.array([0.5 * math.erfc(-m / (s * math.sqrt(2.0))) for m, s in zip(means, stds)])
    return TabularPolicy(np.stack([1.0 - right, right], axis=1))


ENV_NAMES = ("pointmass", "pendulum", "chain")


def pointmass_env(seed=None) -> PointMass:
    return PointMass(seed)


def pendulum_env(seed=None) -> Pendulum:
    return Pendulum(seed)


def chain_env(n: int, seed=None, gamma: float = 0.99, horizon: int | None = None) -> tuple[Chain, Mdp]:
    env = Chain(n, seed, gamma, horizon)
    return env, env.mdp


def make_env(name: str, seed=None, *, chain_n: int = 5, gamma: float = 0.99) -> Env:
    if name == "pointmass":
        return PointMass(seed)
    if name == "pendulum":
        return Pendulum(seed)
    if name == "chain":
        return Chain(chain_n, seed, gamma)
    raise ValueError(f"unknown environment {name!r}; choose from {ENV_NAMES}")
