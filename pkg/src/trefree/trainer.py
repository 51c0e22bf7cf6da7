"""Rollout collection, advantage estimation and the outer training loop.

Randomness: the root seed feeds ``np.random.SeedSequence(seed)``, whose
spawned children are, in order, network init, action sampling, minibatch
shuffling, then one child per actor environment. Each subsystem can thus be
reproduced on its own.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import objectives as ob
from .config import TrainConfig
from .envs import Env, make_env
from .nn import (
    CRITIC_ONLY_PARAMS,
    PARAM_NAMES,
    AdamState,
    GaussianDist,
    NumericError,
    PolicyNet,
    adam_step,
    backward,
    forward,
    kl,
    log_prob,
    sample,
)

log = logging.getLogger(__name__)

STD_GUARD = 1e-8
METRIC_COLUMNS = (
    "iteration", "step", "return_mean", "return_std", "objective",
    "min_log_ratio", "max_log_ratio", "mean_log_ratio", "kl", "lr",
    "max_term", "value_loss", "n_episodes", "trpo_accepted",
)


class RunningStats:
    """Streaming mean/variance per dimension (Welford updates, Chan merges)."""

    def __init__(self, shape=()):
        self.count = 0
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)

    @property
    def var(self) -> np.ndarray:
        return self.m2 / self.count if self.count else np.ones_like(self.mean)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)

    def update(self, x) -> None:
        """Fold in a batch of samples stacked along axis 0."""
        x = np.asarray(x, dtype=float).reshape((-1,) + self.mean.shape)
        other = RunningStats(self.mean.shape)
        other.count = x.shape[0]
        other.mean = x.mean(axis=0)
        other.m2 = ((x - other.mean) ** 2).sum(axis=0)
        self.merge(other)

    def merge(self, other: "RunningStats") -> "RunningStats":
        if other.count == 0:
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        self.mean = self.mean + delta * other.count / n
        self.m2 = self.m2 + other.m2 + delta**2 * self.count * other.count / n
        self.count = n
        return self

    def copy(self) -> "RunningStats":
        out = RunningStats(self.mean.shape)
        out.count, out.mean, out.m2 = self.count, self.mean.copy(), self.m2.copy()
        return out


@dataclass
class Normalizers:
    obs: RunningStats
    ret: RunningStats
    running_return: np.ndarray  # per actor discounted return accumulator
    episode_raw: np.ndarray  # per actor undiscounted raw return of the open episode
    obs_clip: float = 10.0
    reward_clip: float = 10.0
    normalize_obs: bool = True
    normalize_rew: bool = True

    @classmethod
    def for_config(cls, config: TrainConfig, obs_dim: int) -> "Normalizers":
        return cls(
            RunningStats((obs_dim,)), RunningStats(), np.zeros(config.n_actors), np.zeros(config.n_actors),
            config.obs_clip, config.reward_clip, config.normalize_obs, config.normalize_rew,
        )

    def norm_obs(self, raw: np.ndarray) -> np.ndarray:
        if not self.normalize_obs:
            return raw
        z = (raw - self.obs.mean) / np.sqrt(self.obs.var + STD_GUARD)
        return np.clip(z, -self.obs_clip, self.obs_clip)


@dataclass
class RolloutBatch:
    """Per-step arrays of one iteration, actor-major (actor 0's steps first)."""

    obs: np.ndarray
    actions: np.ndarray
    reward_norm: np.ndarray
    reward_raw: np.ndarray
    done: np.ndarray
    truncated: np.ndarray
    log_prob: np.ndarray
    value: np.ndarray
    next_value: np.ndarray  # V of the true successor observation
    segment_end: np.ndarray  # last step an actor took this iteration
    means: np.ndarray
    stds: np.ndarray
    episode_returns: list = field(default_factory=list)
    advantage: np.ndarray | None = None
    ret: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.obs)

    def minibatch(self) -> ob.Minibatch:
        return ob.Minibatch(
            self.obs, self.actions, self.log_prob, self.advantage, self.ret, self.means, self.stds
        )

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in ("obs", "actions", "reward_norm", "reward_raw", "log_prob", "value", "next_value"):
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        return h.hexdigest()


class RolloutError(RuntimeError):
    pass


def collect_rollouts(
    net: PolicyNet,
    envs: list[Env],
    obs_raw: np.ndarray,
    config: TrainConfig,
    norms: Normalizers,
    rng: np.random.Generator,
    gamma: float | None = None,
) -> tuple[RolloutBatch, np.ndarray]:
    """Run the frozen policy for ``steps_per_actor`` steps in every env.

    ``obs_raw`` holds each actor's current un-normalized observation; the
    updated array is returned alongside the batch so episodes continue across
    iterations. Normalizer statistics update once per timestep with the
    observations and discounted returns of all actors.
    """
    gamma = config.gamma if gamma is None else gamma
    N, T = len(envs), config.steps_per_actor
    obs_dim, act_dim = net.obs_dim, net.act_dim
    shape = (T, N)
    buf = {
        "obs": np.zeros(shape + (obs_dim,)), "actions": np.zeros(shape + (act_dim,)),
        "means": np.zeros(shape + (act_dim,)), "reward_norm": np.zeros(shape),
        "reward_raw": np.zeros(shape), "done": np.zeros(shape, bool), "truncated": np.zeros(shape, bool),
        "log_prob": np.zeros(shape), "value": np.zeros(shape), "next_value": np.zeros(shape),
    }
    episode_returns = []
    pending = []  # (t, actor, raw terminal obs) needing a bootstrap value

    for t in range(T):
        if norms.normalize_obs:
            norms.obs.update(obs_raw)
        obs = norms.norm_obs(obs_raw)
        fwd = forward(net, obs)
        dist = fwd.dist()
        actions = sample(dist, rng)
        buf["obs"][t], buf["actions"][t], buf["means"][t] = obs, actions, fwd.mean
        buf["log_prob"][t] = log_prob(dist, actions)
        buf["value"][t] = fwd.value

        next_raw = np.empty_like(obs_raw)
        for i, env in enumerate(envs):
            res = env.step(actions[i])
            if not (np.all(np.isfinite(res.next_obs)) and math.isfinite(res.reward)):
                raise RolloutError(f"actor {i} produced non-finite output at step {t}: {res}")
            buf["reward_raw"][t, i] = res.reward
            buf["done"][t, i], buf["truncated"][t, i] = res.done, res.truncated
            norms.episode_raw[i] += res.reward
            if res.done or res.truncated:
                episode_returns.append(float(norms.episode_raw[i]))
                norms.episode_raw[i] = 0.0
                if res.truncated and not res.done:
                    pending.append((t, i, res.next_obs.copy()))
                next_raw[i] = env.reset()
            else:
                next_raw[i] = res.next_obs

        rew = buf["reward_raw"][t]
        if norms.normalize_rew:
            norms.running_return = norms.running_return * gamma + rew
            norms.ret.update(norms.running_return)
            scaled = rew / np.sqrt(norms.ret.var + STD_GUARD)
            buf["reward_norm"][t] = np.clip(scaled, -norms.reward_clip, norms.reward_clip)
            ended = buf["done"][t] | buf["truncated"][t]
            norms.running_return[ended] = 0.0
        else:
            buf["reward_norm"][t] = rew
        obs_raw = next_raw

    # successor values: the next recorded value inside a segment, explicit otherwise
    buf["next_value"][:-1] = buf["value"][1:]
    buf["next_value"][-1] = forward(net, norms.norm_obs(obs_raw)).value
    if pending:
        rows = np.array([norms.norm_obs(o) for _, _, o in pending])
        vals = forward(net, rows).value
        for (t, i, _), v in zip(pending, vals):
            buf["next_value"][t, i] = v
    ended = buf["done"] | buf["truncated"]
    buf["next_value"][buf["done"]] = 0.0
    seg_end = np.zeros(shape, bool)
    seg_end[-1] = True

    def flat(x):
        x = np.swapaxes(x, 0, 1)
        return x.reshape((N * T,) + x.shape[2:])

    std = np.broadcast_to(np.exp(net.log_std), (N * T, act_dim)).copy()
    batch = RolloutBatch(
        obs=flat(buf["obs"]), actions=flat(buf["actions"]), reward_norm=flat(buf["reward_norm"]),
        reward_raw=flat(buf["reward_raw"]), done=flat(buf["done"]), truncated=flat(buf["truncated"]),
        log_prob=flat(buf["log_prob"]), value=flat(buf["value"]), next_value=flat(buf["next_value"]),
        segment_end=flat(seg_end | ended), means=flat(buf["means"]), stds=std,
        episode_returns=episode_returns,
    )
    return batch, obs_raw


def compute_gae(
    rewards, values, next_values, dones, ends, gamma: float, lam: float
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets.

    ``next_values[t]`` is the value of the successor of step ``t`` (ignored when
    ``dones[t]``); ``ends[t]`` marks where an episode or collected segment stops,
    cutting the backward recursion. Returns ``(advantages, advantages + values)``.
    """
    rewards, values, next_values = (np.asarray(x, dtype=float) for x in (rewards, values, next_values))
    dones, ends = np.asarray(dones, bool), np.asarray(ends, bool)
    n = len(rewards)
    if not all(len(x) == n for x in (values, next_values, dones, ends)):
        raise ValueError("compute_gae inputs must have equal lengths")
    deltas = rewards + gamma * np.where(dones, 0.0, next_values) - values
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        if ends[t] or dones[t]:
            running = 0.0
        running = deltas[t] + gamma * lam * running
        adv[t] = running
    return adv, adv + values


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    if adv.size < 2:
        raise ValueError("advantage normalization needs at least 2 samples")
    std = adv.std()
    return (adv - adv.mean()) / max(std, STD_GUARD)


# -- training loop --------------------------------------------------------------------


@dataclass
class TrainingLog:
    config: TrainConfig
    rows: list = field(default_factory=list)
    aborted: str | None = None
    final_state: "RunState | None" = None

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def final_return(self, last: int = 10) -> float:
        vals = self.column("return_mean")[-last:]
        vals = vals[np.isfinite(vals)]
        return float(vals.mean()) if vals.size else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row.get(k, "") for k in METRIC_COLUMNS})

    def manifest(self) -> dict:
        return {
            "config": self.config.to_flat(),
            "seed": self.config.seed,
            "version": version_string(),
            "iterations": len(self.rows),
            "aborted": self.aborted,
        }

    def write_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))


class TrainingAborted(RuntimeError):
    def __init__(self, iteration: int, cause: Exception, log: TrainingLog):
        super().__init__(f"training aborted at iteration {iteration}: {cause}")
        self.iteration = iteration
        self.log = log


def version_string() -> str:
    try:
        sha = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        sha = ""
    return f"{__version__}+g{sha}" if sha else __version__


@dataclass
class RunState:
    """Everything the loop mutates; exposed to iteration callbacks."""

    net: PolicyNet
    envs: list
    obs_raw: np.ndarray
    norms: Normalizers
    adam: AdamState
    action_rng: np.random.Generator
    shuffle_rng: np.random.Generator
    steps_done: int = 0
    last_batch: RolloutBatch | None = None
    trpo_reports: list = field(default_factory=list)


def init_run(config: TrainConfig) -> RunState:
    children = np.random.SeedSequence(config.seed).spawn(3 + config.n_actors)
    envs = [make_env(config.env_name, c, chain_n=config.chain_n, gamma=config.gamma) for c in children[3:]]
    spec = envs[0].spec
    net = PolicyNet.init(spec.obs_dim, spec.act_dim, np.random.default_rng(children[0]), config.hidden)
    obs_raw = np.array([env.reset() for env in envs])
    return RunState(
        net=net, envs=envs, obs_raw=obs_raw, norms=Normalizers.for_config(config, spec.obs_dim),
        adam=AdamState.for_net(net), action_rng=np.random.default_rng(children[1]),
        shuffle_rng=np.random.default_rng(children[2]),
    )


def _minibatches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for k in range(n // size):
        yield perm[k * size : (k + 1) * size]


def train_iteration(config: TrainConfig, state: RunState, iteration: int) -> dict:
    spec = config.objective
    lr = config.lr_at(state.steps_done)
    batch, state.obs_raw = collect_rollouts(
        state.net, state.envs, state.obs_raw, config, state.norms, state.action_rng
    )
    adv, ret = compute_gae(
        batch.reward_norm, batch.value, batch.next_value, batch.done, batch.segment_end,
        config.gamma, config.gae_lambda,
    )
    batch.ret = ret
    batch.advantage = normalize_advantages(adv) if config.normalize_adv else adv
    state.last_batch = batch
    full = batch.minibatch()
    net = state.net
    max_term = -np.inf
    trpo_accepted = ""

    if spec.kind == "trpo":
        report = ob.trpo_step(net, full, spec.trpo_kl)
        state.trpo_reports.append(report)
        trpo_accepted = int(report.accepted)
        for _ in range(config.epochs):
            for idx in _minibatches(len(batch), config.minibatch_size, state.shuffle_rng):
                graph = ob.value_loss(net, full.subset(idx))
                adam_step(net, backward(net, graph), state.adam, config.lr_start, CRITIC_ONLY_PARAMS)
    else:
        for _ in range(config.epochs):
            for idx in _minibatches(len(batch), config.minibatch_size, state.shuffle_rng):
                graph = ob.total_loss(net, full.subset(idx), spec)
                max_term = max(max_term, float(np.max(graph.extras["terms"])))
                adam_step(net, backward(net, graph), state.adam, lr, PARAM_NAMES)

    fwd = forward(net, full.obs)
    stats = ob.ratio_stats(net, full)
    if spec.kind == "trpo":
        objective = -ob.pg_loss(net, full, fwd).value
    else:
        objective = -ob.policy_loss(net, full, spec, fwd).value
    returns = np.array(batch.episode_returns)
    state.steps_done += config.batch_size
    return {
        "iteration": iteration,
        "step": state.steps_done,
        "return_mean": float(returns.mean()) if returns.size else float("nan"),
        "return_std": float(returns.std()) if returns.size else float("nan"),
        "objective": objective,
        **stats,
        "kl": float(np.mean(kl(full.old_dist(), fwd.dist()))),
        "lr": config.lr_start if spec.kind == "trpo" else lr,
        "max_term": max_term if np.isfinite(max_term) else float("nan"),
        "value_loss": ob.value_loss(net, full, fwd).value,
        "n_episodes": len(batch.episode_returns),
        "trpo_accepted": trpo_accepted,
    }


def train(config: TrainConfig, callback=None) -> TrainingLog:
    """Run ``config.n_iterations`` iterations; ``callback(state, row)`` after each."""
    state = init_run(config)
    out = TrainingLog(config)
    for it in range(config.n_iterations):
        try:
            row = train_iteration(config, state, it)
        except (NumericError, RolloutError, FloatingPointError) as exc:
            out.aborted = f"iteration {it}: {exc}"
            raise TrainingAborted(it, exc, out) from exc
        out.rows.append(row)
        log.debug("iter %d step %d return %.3f", it, row["step"], row["return_mean"])
        if callback is not None:
            callback(state, row)
    out.final_state = state
    return out


def frozen_policy(state: RunState, raw_obs) -> GaussianDist:
    """The current policy on raw observations, through the frozen obs normalizer."""
    return forward(state.net, state.norms.norm_obs(np.atleast_2d(np.asarray(raw_obs, dtype=float)))).dist()
