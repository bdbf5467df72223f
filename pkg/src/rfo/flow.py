"""Flow policy: a state-conditioned vector field integrated with K Euler steps
from Gaussian noise to a pre-tanh action (or action chunk)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tape as T
from .net import BoundMlp, MlpParams, init_mlp
from .tape import Var


class FlowError(ValueError):
    pass


@dataclass(frozen=True)
class FlowConfig:
    steps: int = 4
    clamp_bound: float = 3.0
    chunk: int = 1

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise FlowError("flow steps K must be >= 1")
        if self.clamp_bound <= 0:
            raise FlowError("clamp bound must be positive")
        if self.chunk < 1:
            raise FlowError("chunk size must be >= 1")

    @property
    def du(self) -> float:
        return 1.0 / self.steps

    def times(self) -> list[float]:
        return [k * self.du for k in range(self.steps)]


@dataclass
class ActionSample:
    noise: np.ndarray
    path: list[Var]
    action: Var
    act_dim: int

    @property
    def pre(self) -> Var:
        return self.path[-1]

    def split(self) -> list[Var]:
        """Consecutive per-step actions of a chunk."""
        d = self.act_dim
        n = self.pre.shape[-1] // d
        if n == 1:
            return [self.action]
        return [self.action[:, j * d : (j + 1) * d] for j in range(n)]


@dataclass
class FlowPolicy:
    """Vector-field weights plus the integration settings."""

    params: MlpParams
    cfg: FlowConfig
    obs_dim: int
    act_dim: int

    @property
    def width(self) -> int:
        return self.act_dim * self.cfg.chunk

    @classmethod
    def create(
        cls,
        obs_dim: int,
        act_dim: int,
        cfg: FlowConfig,
        hidden: Sequence[int],
        rng: np.random.Generator,
    ) -> "FlowPolicy":
        w = act_dim * cfg.chunk
        params = init_mlp((w + 1 + obs_dim, *hidden, w), rng)
        return cls(params, cfg, obs_dim, act_dim)

    def copy(self) -> "FlowPolicy":
        return FlowPolicy(self.params.copy(), self.cfg, self.obs_dim, self.act_dim)

    def noise_shape(self, batch: int) -> tuple[int, int]:
        return (batch, self.width)


def velocity(vf: BoundMlp, x, u, s) -> Var:
    """Evaluate v(x, u | s); ``u`` is a scalar or a column of flow times."""
    n = x.shape[0]
    ucol = np.broadcast_to(np.asarray(u, dtype=np.float64).reshape(-1, 1), (n, 1))
    return vf(T.concat([x, ucol, s]))


def sample_action(vf: BoundMlp, cfg: FlowConfig, s: Var, eps: np.ndarray, act_dim: int = 0) -> ActionSample:
    """Euler-integrate the field from ``eps``; the whole chain stays on the tape."""
    tape = s.tape
    x = tape.const(eps)
    path = [x]
    du = cfg.du
    for k in range(cfg.steps):
        v = velocity(vf, x, k * du, s)
        x = x + du * v
        if not np.all(np.isfinite(x.value)):
            raise FlowError(f"non-finite flow state at Euler step {k}")
        path.append(x)
    return ActionSample(np.asarray(eps), path, T.tanh(x), act_dim or x.shape[-1])


def sample_chunk(vf: BoundMlp, cfg: FlowConfig, s: Var, eps: np.ndarray, act_dim: int) -> ActionSample:
    """One flow sample covering ``cfg.chunk`` consecutive actions of width ``act_dim``."""
    if eps.shape[-1] != act_dim * cfg.chunk:
        raise FlowError(f"chunk noise width {eps.shape[-1]} != {act_dim} * {cfg.chunk}")
    return sample_action(vf, cfg, s, eps, act_dim)


def clamp_pretanh(a_pre, bound: float) -> np.ndarray:
    return np.clip(np.asarray(a_pre, dtype=np.float64), -bound, bound)


def integrate(params: MlpParams, cfg: FlowConfig, s: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Pre-tanh endpoint on plain arrays (no gradients)."""
    tape = T.Tape()
    vf = params.bind(tape, trainable=False)
    return sample_action(vf, cfg, tape.const(s), eps).pre.value
