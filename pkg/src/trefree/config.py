"""Run configuration: objective hyperparameters and the training loop settings.

Configs are stored as flat ``key = value`` text, one key per line, ``#``
comments allowed. Keys are the :class:`TrainConfig` field names plus the
objective keys ``objective, delta, lambda, eps_clip, trpo_kl, value_coef,
entropy_coef``. Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

from .envs import ENV_NAMES

OBJECTIVE_KINDS = ("pg", "ratio_conservative", "objective_conservative", "trpo")

# command-line objective names -> (kind, ppo_form)
OBJECTIVE_NAMES = {
    "pg": ("pg", False),
    "ppo": ("ratio_conservative", True),
    "ratio-cons": ("ratio_conservative", False),
    "trefree": ("objective_conservative", False),
    "trpo": ("trpo", False),
}


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = "objective_conservative"
    delta: float = 0.01  # margin on (r - 1) * A
    lam: float = 0.2  # ratio-deviation clip, section-3.2 form
    eps_clip: float = 0.2  # PPO clip range
    trpo_kl: float = 0.01
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    ppo_form: bool = False  # ratio_conservative only: use min(r A, clip(r) A)

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if not self.delta > 0:
            raise ValueError("delta must be > 0")
        if not self.lam > 0:
            raise ValueError("lambda must be > 0")
        if not 0 < self.eps_clip < 1:
            raise ValueError("eps_clip must lie in (0, 1)")
        if not self.trpo_kl > 0:
            raise ValueError("trpo_kl must be > 0")

    @classmethod
    def from_name(cls, name: str, **kwargs) -> "ObjectiveSpec":
        if name not in OBJECTIVE_NAMES:
            raise ValueError(f"unknown objective {name!r}; choose from {sorted(OBJECTIVE_NAMES)}")
        kind, ppo_form = OBJECTIVE_NAMES[name]
        return cls(kind=kind, ppo_form=ppo_form, **kwargs)

    @property
    def name(self) -> str:
        for n, (kind, ppo_form) in OBJECTIVE_NAMES.items():
            if kind == self.kind and (kind != "ratio_conservative" or ppo_form == self.ppo_form):
                return n
        raise AssertionError("unreachable")


@dataclass(frozen=True)
class TrainConfig:
    env_name: str = "pointmass"
    total_steps: int = 200_000
    n_actors: int = 4
    steps_per_actor: int = 512
    epochs: int = 10
    minibatch_size: int = 64
    gamma: float = 0.99
    gae_lambda: float = 0.95
    lr_start: float = 3e-4
    lr_end: float = 0.0
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    seed: int = 0
    normalize_obs: bool = True
    normalize_rew: bool = True
    normalize_adv: bool = True
    hidden: int = 64
    obs_clip: float = 10.0
    reward_clip: float = 10.0
    chain_n: int = 5  # only used by the chain environment

    def __post_init__(self):
        if self.env_name not in ENV_NAMES:
            raise ValueError(f"unknown environment {self.env_name!r}; choose from {ENV_NAMES}")
        if self.n_actors < 1 or self.steps_per_actor < 1:
            raise ValueError("n_actors and steps_per_actor must be >= 1")
        if self.total_steps < self.batch_size:
            raise ValueError(
                f"total_steps ({self.total_steps}) must cover one batch "
                f"(n_actors * steps_per_actor = {self.batch_size})"
            )
        if not 1 <= self.minibatch_size <= self.batch_size:
            raise ValueError("minibatch_size must lie in [1, n_actors * steps_per_actor]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_start < 0 or self.lr_end < 0:
            raise ValueError("learning rates must be >= 0")
        if self.normalize_adv and self.batch_size < 2:
            raise ValueError("advantage normalization needs at least 2 samples per batch")

    @property
    def batch_size(self) -> int:
        return self.n_actors * self.steps_per_actor

    @property
    def n_iterations(self) -> int:
        return self.total_steps // self.batch_size

    def lr_at(self, steps_done: int) -> float:
        frac = steps_done / self.total_steps
        return self.lr_start * (1.0 - frac) + self.lr_end * frac

    # -- flat key/value form ------------------------------------------------------

    def to_flat(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "objective":
                continue
            out[f.name] = getattr(self, f.name)
        obj = self.objective
        out.update(
            objective=obj.name, delta=obj.delta, **{"lambda": obj.lam}, eps_clip=obj.eps_clip,
            trpo_kl=obj.trpo_kl, value_coef=obj.value_coef, entropy_coef=obj.entropy_coef,
        )
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        """Build from string or typed values keyed like :meth:`to_flat`."""
        flat = dict(flat)
        unknown = set(flat) - set(FLAT_KEYS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        typed = {k: _coerce(FLAT_KEYS[k], v, k) for k, v in flat.items()}
        obj_kwargs = {}
        for key, attr in (("delta", "delta"), ("lambda", "lam"), ("eps_clip", "eps_clip"),
                          ("trpo_kl", "trpo_kl"), ("value_coef", "value_coef"),
                          ("entropy_coef", "entropy_coef")):
            if key in typed:
                obj_kwargs[attr] = typed.pop(key)
        name = typed.pop("objective", "trefree")
        return cls(objective=ObjectiveSpec.from_name(name, **obj_kwargs), **typed)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_flat().items())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(typ, v, key):
    if not isinstance(v, str):
        return typ(v)
    s = v.strip()
    try:
        if typ is bool:
            low = s.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(s)
        if typ is int:
            return int(float(s)) if "e" in s.lower() else int(s)
        if typ is float:
            x = float(s)
            if math.isnan(x):
                raise ValueError(s)
            return x
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {v!r} as {typ.__name__}") from None
    return s


FLAT_KEYS = {
    **{f.name: {"int": int, "float": float, "bool": bool, "str": str}[f.type]
       for f in dataclasses.fields(TrainConfig) if f.name != "objective"},
    "objective": str, "delta": float, "lambda": float, "eps_clip": float,
    "trpo_kl": float, "value_coef": float, "entropy_coef": float,
}


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    """Read a key=value file; ``overrides`` (already flat) take precedence."""
    flat = parse_kv(Path(path).read_text()) if path is not None else {}
    flat.update(overrides or {})
    return TrainConfig.from_flat(flat)
