"""Conditional flow matching regularisers and the buffers that feed them.

Both losses regress v(psi_u, u | s) onto the straight-line displacement
``a - eps`` with ``psi_u = (1 - u) eps + u a``. The past-data loss takes
``(s, a)`` pairs from the two most recent rollouts; the uniform loss pairs
rollout states with targets drawn uniformly over the action box.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tape as T
from .flow import FlowConfig, clamp_pretanh, velocity
from .net import BoundMlp
from .tape import Var

ATANH_SHRINK = 1.0 - 1e-6
TARGET_SPACES = ("pretanh", "tanh")


class BufferError(ValueError):
    pass


def interpolate(eps, a, u):
    """Point at flow time ``u`` on the segment from ``eps`` to ``a``."""
    u = np.asarray(u, dtype=np.float64)
    if np.any((u < 0.0) | (u > 1.0)):
        raise ValueError("flow time must lie in [0, 1]")
    eps = np.asarray(eps, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if u.ndim == 1:
        u = u[:, None]
    return (1.0 - u) * eps + u * a


class RecentBuffer:
    """State/pre-tanh-action pairs from the current and previous iteration."""

    def __init__(self, clamp_bound: float) -> None:
        self.clamp_bound = float(clamp_bound)
        self.current: tuple[np.ndarray, np.ndarray] | None = None
        self.previous: tuple[np.ndarray, np.ndarray] | None = None

    def update(self, obs: np.ndarray, pre: np.ndarray) -> None:
        obs = np.asarray(obs, dtype=np.float64)
        pre = clamp_pretanh(pre, self.clamp_bound)
        if obs.shape[0] != pre.shape[0]:
            raise BufferError(f"{obs.shape[0]} states vs {pre.shape[0]} actions")
        self.previous = self.current
        self.current = (obs.copy(), pre)

    def slots(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [s for s in (self.previous, self.current) if s is not None]

    def __len__(self) -> int:
        return sum(s[0].shape[0] for s in self.slots())

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        slots = self.slots()
        if not slots:
            raise BufferError("recent buffer is empty")
        return (
            np.concatenate([s[0] for s in slots]),
            np.concatenate([s[1] for s in slots]),
        )


class RolloutStates:
    """States visited during the current iteration's rollout."""

    def __init__(self) -> None:
        self.obs: np.ndarray | None = None

    def update(self, obs: np.ndarray) -> None:
        self.obs = np.asarray(obs, dtype=np.float64).copy()

    def __len__(self) -> int:
        return 0 if self.obs is None else self.obs.shape[0]


def buffer_update(buffer: RecentBuffer, obs: np.ndarray, pre: np.ndarray) -> None:
    buffer.update(obs, pre)


def rollout_states_update(states: RolloutStates, obs: np.ndarray) -> None:
    states.update(obs)


def cfm_regression(vf: BoundMlp, s: Var, target: np.ndarray, eps: np.ndarray, u: np.ndarray) -> Var:
    """Batch mean of ``||v(psi_u, u | s) - (target - eps)||^2``."""
    psi = s.tape.const(interpolate(eps, target, u))
    v = velocity(vf, psi, u, s)
    return T.mean(T.square_norm(v - (target - eps)))


def _norm_const(s_raw: np.ndarray, vf: BoundMlp, norm: Callable | None) -> Var:
    tape = next(iter(vf.vars.values())).tape
    s = s_raw if norm is None else norm(s_raw)
    return tape.const(s)


def cfm_loss_past(
    vf: BoundMlp,
    cfg: FlowConfig,
    buffer: RecentBuffer,
    batch: int,
    rng: np.random.Generator,
    norm: Callable | None = None,
    target_space: str = "pretanh",
) -> Var:
    """Monte-Carlo past-data CFM loss; one fresh (u, eps) per sampled pair."""
    if len(buffer) == 0:
        raise BufferError("past-data CFM loss needs a non-empty recent buffer")
    obs, pre = buffer.arrays()
    idx = rng.integers(obs.shape[0], size=batch)
    u = rng.uniform(0.0, 1.0, size=batch)
    eps = rng.standard_normal((batch, pre.shape[1]))
    target = pre[idx] if target_space == "pretanh" else np.tanh(pre[idx])
    return cfm_regression(vf, _norm_const(obs[idx], vf, norm), target, eps, u)


def uniform_targets(rng: np.random.Generator, shape, clamp_bound: float, target_space: str = "pretanh") -> np.ndarray:
    """Uniform draws over [-1, 1]^d, mapped to pre-tanh space unless asked not to."""
    a = rng.uniform(-1.0, 1.0, size=shape)
    if target_space == "tanh":
        return a
    return clamp_pretanh(np.arctanh(a * ATANH_SHRINK), clamp_bound)


def cfm_loss_uniform(
    vf: BoundMlp,
    cfg: FlowConfig,
    states: RolloutStates,
    width: int,
    batch: int,
    rng: np.random.Generator,
    norm: Callable | None = None,
    target_space: str = "pretanh",
) -> Var:
    """CFM loss toward uniform actions at every visited state, equally weighted."""
    if len(states) == 0:
        raise BufferError("uniform CFM loss needs rollout states")
    idx = rng.integers(len(states), size=batch)
    u = rng.uniform(0.0, 1.0, size=batch)
    eps = rng.standard_normal((batch, width))
    target = uniform_targets(rng, (batch, width), cfg.clamp_bound, target_space)
    return cfm_regression(vf, _norm_const(states.obs[idx], vf, norm), target, eps, u)
