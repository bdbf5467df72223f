"""Short-horizon rollouts on the tape and the reparameterised actor update.

A segment is H steps of N environments recorded on one tape: the policy maps
noise to actions differentiably, the environment maps (state, action) to the
next state differentiably, and the surrogate adds a frozen-critic bootstrap
at s_H. One backward pass through that tape is the policy gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import tape as T
from .critic import CriticPair, value_on_tape
from .env import BatchedEnv, RunningNorm
from .flow import ActionSample, FlowConfig, FlowPolicy, sample_action, sample_chunk
from .net import AdamWState, BoundMlp, MlpParams, adamw_step, clip_by_global_norm, init_mlp
from .tape import Var


class TrainingError(RuntimeError):
    pass


class Policy(Protocol):
    params: MlpParams
    obs_dim: int
    act_dim: int

    @property
    def chunk(self) -> int: ...

    def noise_block(self, rng: np.random.Generator, horizon: int, batch: int) -> np.ndarray: ...

    def act(self, net: BoundMlp, s: Var, eps: np.ndarray) -> ActionSample: ...

    def copy(self) -> "Policy": ...


@dataclass
class FlowActor:
    """Adapter giving :class:`FlowPolicy` the rollout interface."""

    flow: FlowPolicy

    @property
    def params(self) -> MlpParams:
        return self.flow.params

    @property
    def obs_dim(self) -> int:
        return self.flow.obs_dim

    @property
    def act_dim(self) -> int:
        return self.flow.act_dim

    @property
    def cfg(self) -> FlowConfig:
        return self.flow.cfg

    @property
    def chunk(self) -> int:
        return self.flow.cfg.chunk

    def noise_block(self, rng, horizon, batch):
        n_dec = math.ceil(horizon / self.chunk)
        return rng.standard_normal((n_dec, batch, self.flow.width))

    def act(self, net, s, eps):
        if self.chunk == 1:
            return sample_action(net, self.flow.cfg, s, eps, self.act_dim)
        return sample_chunk(net, self.flow.cfg, s, eps, self.act_dim)

    def copy(self):
        return FlowActor(self.flow.copy())


@dataclass
class GaussianActor:
    """``a = tanh(mu(s) + sigma(s) * eps)`` with a clamped log-std head."""

    params: MlpParams
    obs_dim: int
    act_dim: int
    log_std_min: float = -10.0
    log_std_max: float = 1.0

    @classmethod
    def create(cls, obs_dim, act_dim, hidden, rng, init_log_std=-1.0) -> "GaussianActor":
        params = init_mlp((obs_dim, *hidden, 2 * act_dim), rng)
        params.tensors["out.b"][act_dim:] = init_log_std
        return cls(params, obs_dim, act_dim)

    @property
    def chunk(self) -> int:
        return 1

    def noise_block(self, rng, horizon, batch):
        return rng.standard_normal((horizon, batch, self.act_dim))

    def act(self, net, s, eps):
        d = self.act_dim
        out = net(s)
        log_std = T.clamp(out[:, d:], self.log_std_min, self.log_std_max)
        pre = out[:, :d] + T.exp(log_std) * eps
        return ActionSample(np.asarray(eps), [pre], T.tanh(pre), d)

    def copy(self):
        return GaussianActor(self.params.copy(), self.obs_dim, self.act_dim, self.log_std_min, self.log_std_max)


@dataclass
class TrajectorySegment:
    horizon: int
    states: list[Var]  # s_0 .. s_H (raw env state on the tape)
    obs: list[Var]  # normalised observations o_0 .. o_H
    rewards: list[Var]  # r_0 .. r_{H-1}, each (N,)
    dones: np.ndarray  # (H, N)
    noise: np.ndarray
    samples: list[ActionSample] = field(default_factory=list)
    decision_steps: list[int] = field(default_factory=list)
    raw_obs: np.ndarray | None = None  # (H + 1, N, obs) before normalisation

    def reward_array(self) -> np.ndarray:
        return np.stack([r.value for r in self.rewards])

    def decision_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Raw observations and pre-tanh actions at every policy query."""
        obs = np.concatenate([self.raw_obs[t] for t in self.decision_steps])
        pre = np.concatenate([s.pre.value for s in self.samples])
        return obs, pre


def rollout_segment(
    policy: Policy,
    net: BoundMlp,
    env: BatchedEnv,
    norm: RunningNorm,
    horizon: int,
    noise: np.ndarray,
    chunked: bool | None = None,
) -> TrajectorySegment:
    """Roll the policy forward ``horizon`` steps from the env's current state.

    With ``chunked`` (the default whenever ``policy.chunk > 1``) the policy is
    queried every ``chunk`` steps and the chunk's actions are executed in
    order; otherwise it is queried at every step.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if chunked is None:
        chunked = policy.chunk > 1
    tape = net.vars[next(iter(net.vars))].tape
    s = tape.const(env.state)
    seg = TrajectorySegment(horizon, [s], [], [], np.zeros((horizon, env.num_envs), dtype=bool), noise)
    raw = []
    if chunked:
        c = policy.chunk
        pending: list[Var] = []
        for t in range(horizon):
            o_raw = env.task.observe(s)
            raw.append(o_raw.value)
            o = norm(o_raw)
            seg.obs.append(o)
            if t % c == 0:
                sample = policy.act(net, o, noise[t // c])
                seg.samples.append(sample)
                seg.decision_steps.append(t)
                pending = sample.split()
            s, r, done = env.step(s, pending[t % c])
            seg.states.append(s)
            seg.rewards.append(r)
            seg.dones[t] = done
    else:
        if policy.chunk != 1:
            raise ValueError("step-wise rollout needs chunk size 1")
        for t in range(horizon):
            o_raw = env.task.observe(s)
            raw.append(o_raw.value)
            o = norm(o_raw)
            seg.obs.append(o)
            sample = policy.act(net, o, noise[t])
            seg.samples.append(sample)
            seg.decision_steps.append(t)
            s, r, done = env.step(s, sample.action)
            seg.states.append(s)
            seg.rewards.append(r)
            seg.dones[t] = done
    o_raw = env.task.observe(s)
    raw.append(o_raw.value)
    seg.obs.append(norm(o_raw))
    seg.raw_obs = np.stack(raw)
    return seg


def surrogate(seg: TrajectorySegment, critics: CriticPair | None, gamma: float) -> Var:
    """Mean over envs of the discounted H-step return plus gamma^H V(s_H).

    The discount restarts after an episode boundary and the boundary
    bootstrap is zero. Critic weights enter as constants.
    """
    n = seg.dones.shape[1]
    disc = np.ones(n)
    total = None
    for t, r in enumerate(seg.rewards):
        term = r * disc
        total = term if total is None else total + term
        disc = np.where(seg.dones[t], 1.0, disc * gamma)
    if critics is not None:
        live = ~seg.dones[-1]
        total = total + value_on_tape(critics, seg.obs[-1]) * (disc * live)
    return T.mean(total)


def policy_loss(j_hat: Var, l_past: Var | None, l_uni: Var | None, c_past: float, c_uni: float) -> Var:
    loss = -j_hat
    if l_past is not None:
        loss = loss + c_past * l_past
    if l_uni is not None:
        loss = loss + c_uni * l_uni
    return loss


@dataclass
class ActorStep:
    grad_norm: float
    clipped_norm: float
    lr: float


def actor_update(
    params: MlpParams,
    net: BoundMlp,
    loss: Var,
    opt: AdamWState,
    lr: float,
    clip_norm: float,
    iteration: int = -1,
) -> ActorStep:
    """Backprop ``loss``, clip the global gradient norm, take one AdamW step."""
    g = loss.tape.backward(loss)
    grads = net.grads(g)
    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise TrainingError(f"non-finite actor gradient in {k!r} at iteration {iteration}")
    grads, before, after = clip_by_global_norm(grads, clip_norm)
    adamw_step(params, grads, opt, lr)
    return ActorStep(before, after, lr)


__all__ = [
    "TrainingError",
    "FlowActor",
    "GaussianActor",
    "TrajectorySegment",
    "rollout_segment",
    "surrogate",
    "policy_loss",
    "actor_update",
    "ActorStep",
]
