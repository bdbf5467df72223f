"""Training configuration and the flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

ALGOS = ("rfo", "shac-gaussian")
SCHEDULES = ("linear", "constant")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    env: str = "point-mass-reach"
    num_envs: int = 16
    episode_length: int = 100
    reward_scale: float = 1.0
    normalize_obs: bool = True

    algo: str = "rfo"
    iterations: int = 300
    seed: int = 0

    horizon: int = 32
    gamma: float = 0.99
    lam: float = 0.95

    flow_steps: int = 4
    chunk_size: int = 1
    chunk_executor: str = "auto"  # auto | chunked
    clamp_bound: float = 3.0

    actor_hidden: str = "64,64"
    critic_hidden: str = "64,64"
    actor_lr: float = 2e-3
    critic_lr: float = 5e-4
    actor_schedule: str = "linear"
    critic_schedule: str = "linear"
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    adam_eps: float = 1e-8
    clip_norm: float = 1.0

    actor_epochs: int = 1
    critic_epochs: int = 16
    critic_minibatches: int = 4

    c_past: float = 0.2
    c_uni: float = 0.2
    cfm_batch: int = 0  # 0 -> num_envs * horizon
    cfm_target: str = "pretanh"

    init_log_std: float = -1.0  # shac-gaussian only

    diagnostics: bool = True
    kl_pairs: int = 128
    kl_draws: int = 256
    kl_common_random: bool = True

    eval_episodes: int = 128
    eval_seed: int = 10_000  # shared by every run so returns are comparable across seeds
    eval_every: int = 10
    eval_periodic_episodes: int = 16
    checkpoint_every: int = 50
    terminal_bootstrap: str = "zero"

    def validate(self) -> "TrainConfig":
        if self.algo not in ALGOS:
            raise ConfigError(f"algo must be one of {ALGOS}, got {self.algo!r}")
        for key in ("actor_schedule", "critic_schedule"):
            if getattr(self, key) not in SCHEDULES:
                raise ConfigError(f"{key} must be one of {SCHEDULES}")
        for key in ("actor_lr", "critic_lr", "c_past", "c_uni", "weight_decay", "clip_norm"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0")
        for key in ("horizon", "flow_steps", "chunk_size", "num_envs", "episode_length", "critic_minibatches"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.actor_epochs != 1:
            raise ConfigError("actor_epochs: only M = 1 is supported (one backward pass per rollout)")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")
        if self.clamp_bound <= 0:
            raise ConfigError("clamp_bound must be > 0")
        if self.cfm_target not in ("pretanh", "tanh"):
            raise ConfigError("cfm_target must be pretanh or tanh")
        if self.chunk_executor not in ("auto", "chunked"):
            raise ConfigError("chunk_executor must be auto or chunked")
        if self.terminal_bootstrap != "zero":
            raise ConfigError("terminal_bootstrap: only 'zero' is implemented")
        if self.algo == "shac-gaussian" and self.chunk_size != 1:
            raise ConfigError("chunking applies to the flow policy only")
        self.hidden_sizes("actor_hidden")
        self.hidden_sizes("critic_hidden")
        return self

    def hidden_sizes(self, key: str) -> tuple[int, ...]:
        raw = getattr(self, key)
        try:
            sizes = tuple(int(x) for x in raw.split(",") if x.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated widths, got {raw!r}") from None
        if not sizes or min(sizes) < 1:
            raise ConfigError(f"{key}: widths must be positive")
        return sizes

    @property
    def batch_cfm(self) -> int:
        return self.cfm_batch or self.num_envs * self.horizon

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw).validate()

    def to_text(self) -> str:
        lines = ["# resolved configuration"]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


ALIASES = {"K": "flow_steps", "C": "chunk_size", "H": "horizon", "N": "num_envs"}
_FIELDS = {f.name: f for f in fields(TrainConfig)}


def coerce(key: str, raw: str):
    key = ALIASES.get(key, key)
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(TrainConfig(), key)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return key, True
            if low in ("0", "false", "no", "off"):
                return key, False
            raise ValueError(raw)
        if isinstance(default, int):
            return key, int(raw)
        if isinstance(default, float):
            return key, float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    return key, raw


def parse_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        k, v = body.split("=", 1)
        try:
            key, val = coerce(k.strip(), v)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
        out[key] = val
    return out


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> TrainConfig:
    """Defaults, then the file, then ``key=value`` overrides."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_text(p.read_text(), str(p)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        key, val = coerce(k.strip(), v)
        values[key] = val
    return TrainConfig(**values).validate()
