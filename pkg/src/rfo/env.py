"""Differentiable toy control tasks built directly on the tape.

All tasks share dt = 0.05, actions in [-1, 1]^d, and a fixed episode length
with no early termination. ``step`` takes tape Vars, so the Jacobians with
respect to both state and action are available to the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tape as T
from .tape import Tape, Var

DT = 0.05
ACTION_TOL = 1e-9


class EnvError(ValueError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    obs_dim: int
    act_dim: int
    episode_length: int = 100
    dt: float = DT


# Each task supplies: rho0 sampler, dynamics (state, action) -> (next, reward),
# and the observation map.


def _pm_reset(rng, n):
    s = np.zeros((n, 4))
    s[:, :2] = rng.uniform(-1.0, 1.0, size=(n, 2))
    return s


def _pm_dynamics(s: Var, a: Var, dt: float):
    pos, vel = s[:, :2], s[:, 2:]
    nxt = T.concat([pos + dt * vel, vel + (2.0 * dt) * a])
    reward = -T.square_norm(pos) - 0.01 * T.square_norm(a)
    return nxt, reward


def _di_reset(rng, n):
    s = np.zeros((n, 2))
    s[:, 0] = rng.uniform(-1.0, 1.0, size=n)
    return s


def _di_dynamics(s: Var, a: Var, dt: float):
    x, v = s[:, 0:1], s[:, 1:2]
    nxt = T.concat([x + dt * v, v + (2.0 * dt) * a])
    reward = -T.square_norm(x) - 0.1 * T.square_norm(v) - 0.01 * T.square_norm(a)
    return nxt, reward


def _pend_reset(rng, n):
    s = np.empty((n, 2))
    s[:, 0] = rng.uniform(-np.pi, np.pi, size=n)
    s[:, 1] = rng.uniform(-1.0, 1.0, size=n)
    return s


def _pend_dynamics(s: Var, a: Var, dt: float):
    th, om = s[:, 0:1], s[:, 1:2]
    om2 = om + dt * (-10.0 * T.sin(th) + 4.0 * a - 0.05 * om)
    th2 = th + dt * om2
    up = T.wrap_angle(th - np.pi)
    reward = -T.square_norm(up) - 0.1 * T.square_norm(om) - 0.001 * T.square_norm(a)
    return T.concat([th2, om2]), reward


def _pend_obs(s: Var) -> Var:
    th = s[:, 0:1]
    return T.concat([T.cos(th), T.sin(th), s[:, 1:2]])


def _identity(s: Var) -> Var:
    return s


@dataclass(frozen=True)
class _Task:
    state_dim: int
    obs_dim: int
    act_dim: int
    reset: Callable
    dynamics: Callable
    observe: Callable


TASKS: dict[str, _Task] = {
    "point-mass-reach": _Task(4, 4, 2, _pm_reset, _pm_dynamics, _identity),
    "double-integrator": _Task(2, 2, 1, _di_reset, _di_dynamics, _identity),
    "pendulum-swingup": _Task(2, 3, 1, _pend_reset, _pend_dynamics, _pend_obs),
}


def make_spec(name: str, episode_length: int = 100) -> EnvSpec:
    if name not in TASKS:
        raise EnvError(f"unknown environment {name!r}; choose from {sorted(TASKS)}")
    if episode_length < 1:
        raise EnvError("episode_length must be >= 1")
    t = TASKS[name]
    return EnvSpec(name, t.state_dim, t.obs_dim, t.act_dim, episode_length)


class BatchedEnv:
    """N copies of one task stepped together on a shared tape.

    ``state`` and ``steps`` hold the detached per-instance state between
    calls; episodes auto-reset once ``steps`` reaches the episode length.
    """

    def __init__(
        self,
        name: str,
        num_envs: int,
        episode_length: int = 100,
        seed: int = 0,
        reward_scale: float = 1.0,
    ) -> None:
        self.spec = make_spec(name, episode_length)
        self.task = TASKS[name]
        self.num_envs = int(num_envs)
        self.reward_scale = float(reward_scale)
        self.rng = np.random.default_rng(seed)
        self.state = np.zeros((self.num_envs, self.spec.state_dim))
        self.steps = np.zeros(self.num_envs, dtype=np.int64)
        self.reset()

    def reset(self, indices=None, seed: int | None = None) -> np.ndarray:
        """Redraw the selected instances from the initial-state distribution."""
        idx = np.arange(self.num_envs) if indices is None else np.asarray(indices, dtype=np.int64)
        rng = self.rng if seed is None else np.random.default_rng(seed)
        self.state[idx] = self.task.reset(rng, len(idx))
        self.steps[idx] = 0
        return self.observe_array(self.state)

    def observe(self, state: Var) -> Var:
        return self.task.observe(state)

    def observe_array(self, state: np.ndarray) -> np.ndarray:
        t = Tape()
        return self.task.observe(t.const(state)).value

    def step(self, state: Var, action: Var) -> tuple[Var, Var, np.ndarray]:
        """Advance every instance one step.

        Returns ``(next_state, reward, done)``; rows with ``done`` carry a
        freshly reset state, which is a constant on the tape.
        """
        av = action.value
        if av.shape != (self.num_envs, self.spec.act_dim):
            raise EnvError(f"action shape {av.shape} != {(self.num_envs, self.spec.act_dim)}")
        if np.any(np.abs(av) > 1.0 + ACTION_TOL):
            raise EnvError(f"action out of bounds: max |a| = {np.abs(av).max():.6g}")
        nxt, reward = self.task.dynamics(state, action, self.spec.dt)
        if self.reward_scale != 1.0:
            reward = reward * self.reward_scale
        self.steps += 1
        done = self.steps >= self.spec.episode_length
        if done.any():
            fresh = nxt.value.copy()
            ids = np.flatnonzero(done)
            fresh[ids] = self.task.reset(self.rng, len(ids))
            self.steps[ids] = 0
            nxt = T.where_rows(~done, nxt, nxt.tape.const(fresh))
        self.state = nxt.value.copy()
        return nxt, reward, done


def step_arrays(name: str, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pure transition on arrays, no episode bookkeeping."""
    task = TASKS[name]
    t = Tape()
    nxt, r = task.dynamics(t.const(state), t.const(action), DT)
    return nxt.value, r.value


class RunningNorm:
    """Running mean/variance of observations (batched Welford/Chan merge)."""

    def __init__(self, dim: int, eps: float = 1e-8) -> None:
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 1e-4
        self.eps = eps
        self.frozen = False

    def update(self, batch: np.ndarray) -> None:
        if self.frozen:
            return
        batch = np.asarray(batch, dtype=np.float64).reshape(-1, self.mean.size)
        n = batch.shape[0]
        if n == 0:
            return
        b_mean = batch.mean(axis=0)
        b_var = batch.var(axis=0)
        delta = b_mean - self.mean
        tot = self.count + n
        self.mean = self.mean + delta * n / tot
        m2 = self.var * self.count + b_var * n + delta**2 * self.count * n / tot
        self.var = m2 / tot
        self.count = tot

    def scale(self) -> np.ndarray:
        return 1.0 / np.sqrt(self.var + self.eps)

    def __call__(self, obs: Var) -> Var:
        return (obs - self.mean) * self.scale()

    def apply(self, obs: np.ndarray) -> np.ndarray:
        return (obs - self.mean) * self.scale()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"mean": self.mean.copy(), "var": self.var.copy(), "count": np.asarray(self.count)}

    def load(self, d) -> None:
        self.mean = np.asarray(d["mean"], dtype=np.float64).copy()
        self.var = np.asarray(d["var"], dtype=np.float64).copy()
        self.count = float(d["count"])


class IdentityNorm(RunningNorm):
    """Drop-in for runs with normalisation switched off."""

    def update(self, batch) -> None:
        return

    def __call__(self, obs: Var) -> Var:
        return obs

    def apply(self, obs: np.ndarray) -> np.ndarray:
        return obs
