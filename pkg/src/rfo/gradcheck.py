"""Finite-difference checks of every differentiable path, module by module.

Each check returns the worst relative error ``|analytic - numeric| /
(|numeric| + 1e-8)`` over the coordinates it probes. ``rfo gradcheck``
prints them as a table.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tape as T
from .cfm import cfm_regression
from .critic import CriticPair, value_on_tape
from .env import TASKS, BatchedEnv, RunningNorm
from .flow import FlowConfig, FlowPolicy, sample_action
from .net import MlpParams, init_mlp
from .rpg import FlowActor, rollout_segment, surrogate
from .tape import Tape, Var, grad_check

TOLERANCE = 1e-3
FD_STEP = 1e-5


@dataclass
class ParamCheck:
    name: str
    index: int
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return abs(self.analytic - self.numeric) / (abs(self.numeric) + 1e-8)


def _jitter(params: MlpParams, rng: np.random.Generator, scale: float = 0.1) -> MlpParams:
    # LayerNorm gains and biases start at 1 / 0; perturb so every block is exercised
    p = params.copy()
    for v in p.tensors.values():
        v += scale * rng.standard_normal(v.shape)
    return p


def param_check(
    loss_fn: Callable[[Tape, MlpParams, bool], tuple[Var, dict[str, Var]]],
    params: MlpParams,
    coords: list[tuple[str, int]],
    h: float = FD_STEP,
) -> list[ParamCheck]:
    """Compare tape gradients w.r.t. named parameter entries to central differences.

    ``loss_fn(tape, params, trainable)`` builds a scalar and returns it with
    the parameter leaves it bound.
    """
    tape = Tape()
    loss, leaves = loss_fn(tape, params, True)
    g = tape.backward(loss)
    out = []
    for name, i in coords:
        analytic = float(g[leaves[name]].ravel()[i])
        vals = []
        for sign in (1.0, -1.0):
            p = params.copy()
            p.tensors[name].reshape(-1)[i] += sign * h
            vals.append(float(loss_fn(Tape(), p, False)[0].value))
        out.append(ParamCheck(name, i, analytic, (vals[0] - vals[1]) / (2 * h)))
    return out


def random_coords(params: MlpParams, count: int, rng: np.random.Generator) -> list[tuple[str, int]]:
    """``count`` distinct (tensor, flat index) pairs drawn uniformly over all entries."""
    names = list(params.tensors)
    sizes = np.array([params.tensors[k].size for k in names])
    picks = rng.choice(int(sizes.sum()), size=min(count, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    out = []
    for p in np.sort(picks):
        j = int(np.searchsorted(bounds, p, side="right"))
        out.append((names[j], int(p - (bounds[j] - sizes[j]))))
    return out


# --------------------------------------------------------------------------
# per-module checks


def check_tape(rng: np.random.Generator) -> float:
    x = rng.uniform(0.2, 0.9, size=(3, 4))
    w = rng.standard_normal((4, 2))
    fns = [
        lambda t, v: T.sum(T.tanh(v) * T.exp(v) / (1.0 + T.square(v))),
        lambda t, v: T.sum(T.sin(v) * T.cos(v) + T.sqrt(v) - T.ln(v)),
        lambda t, v: T.sum(T.atanh(v * 0.9) + T.silu(v)),
        lambda t, v: T.sum(T.layernorm(v, t.const(np.ones(4) * 1.3), t.const(np.zeros(4))) * v),
        lambda t, v: T.mean(T.square_norm(v @ t.const(w))),
        lambda t, v: T.sum(T.square(T.concat([v[:, :2], T.wrap_angle(v[:, 2:] * 4.0)]))),
    ]
    return max(grad_check(f, x) for f in fns)


def check_net(rng: np.random.Generator) -> float:
    params = _jitter(init_mlp((3, 8, 6, 2), rng), rng)
    x = rng.standard_normal((5, 3))
    wts = rng.standard_normal((5, 2))

    def loss_fn(tape, p, trainable):
        net = p.bind(tape, trainable)
        return T.sum(T.tanh(net(tape.const(x))) * wts), net.vars

    checks = param_check(loss_fn, params, random_coords(params, 30, rng))
    return max(c.rel_error for c in checks)


def check_env(rng: np.random.Generator) -> float:
    worst = 0.0
    for task in TASKS.values():
        state = task.reset(rng, 3) + 0.1 * rng.standard_normal((3, task.state_dim))
        action = rng.uniform(-0.9, 0.9, size=(3, task.act_dim))
        ws = rng.standard_normal((3, task.state_dim))

        def via_state(t, s, a=action, ws=ws, task=task):
            nxt, r = task.dynamics(s, t.const(a), 0.05)
            return T.sum(nxt * ws) + T.sum(r)

        def via_action(t, a, s0=state, ws=ws, task=task):
            nxt, r = task.dynamics(t.const(s0), a, 0.05)
            return T.sum(nxt * ws) + T.sum(r)

        worst = max(worst, grad_check(via_state, state), grad_check(via_action, action))
    return worst


def check_flow(rng: np.random.Generator) -> float:
    cfg = FlowConfig(steps=4)
    flow = FlowPolicy.create(3, 2, cfg, (16, 16), rng)
    params = _jitter(flow.params, rng)
    s = rng.standard_normal((4, 3))
    eps = rng.standard_normal((4, 2))
    wts = rng.standard_normal((4, 2))

    def loss_fn(tape, p, trainable):
        net = p.bind(tape, trainable)
        return T.sum(sample_action(net, cfg, tape.const(s), eps).action * wts), net.vars

    checks = param_check(loss_fn, params, random_coords(params, 30, rng))

    def via_state(t, sv):
        net = params.bind(t, False)
        return T.sum(sample_action(net, cfg, sv, eps).action * wts)

    return max(max(c.rel_error for c in checks), grad_check(via_state, s))


def check_cfm(rng: np.random.Generator) -> float:
    params = _jitter(init_mlp((2 + 1 + 3, 16, 2), rng), rng)
    s = rng.standard_normal((6, 3))
    target = rng.standard_normal((6, 2))
    eps = rng.standard_normal((6, 2))
    u = rng.uniform(size=6)

    def loss_fn(tape, p, trainable):
        net = p.bind(tape, trainable)
        return cfm_regression(net, tape.const(s), target, eps, u), net.vars

    checks = param_check(loss_fn, params, random_coords(params, 30, rng))
    return max(c.rel_error for c in checks)


def check_critic(rng: np.random.Generator) -> float:
    pair = CriticPair.create(3, (16, 16), rng)
    pair = CriticPair(tuple(_jitter(n, rng) for n in pair.nets), pair.opts)
    obs = rng.standard_normal((5, 3))
    return grad_check(lambda t, o: T.sum(value_on_tape(pair, o)), obs)


def rollout_check(
    seed: int = 0,
    n_params: int = 20,
    horizon: int = 8,
    flow_steps: int = 4,
    num_envs: int = 2,
    h: float = FD_STEP,
) -> list[ParamCheck]:
    """Gradient of the short-horizon surrogate w.r.t. random actor parameters.

    Everything but the actor weights is frozen: start states, noise, critics
    and the observation normaliser. Each finite-difference evaluation replays
    the segment from a copy of the same environment.
    """
    rng = np.random.default_rng(seed)
    env = BatchedEnv("point-mass-reach", num_envs, seed=seed)
    cfg = FlowConfig(steps=flow_steps)
    flow = FlowPolicy.create(env.spec.obs_dim, env.spec.act_dim, cfg, (64, 64), rng)
    actor = FlowActor(FlowPolicy(_jitter(flow.params, rng, 0.05), cfg, flow.obs_dim, flow.act_dim))
    critics = CriticPair.create(env.spec.obs_dim, (64, 64), rng)
    norm = RunningNorm(env.spec.obs_dim)
    norm.update(rng.uniform(-1.0, 1.0, size=(64, env.spec.obs_dim)))
    norm.frozen = True
    noise = actor.noise_block(rng, horizon, num_envs)

    def loss_fn(tape, p, trainable):
        net = p.bind(tape, trainable)
        policy = FlowActor(FlowPolicy(p, cfg, flow.obs_dim, flow.act_dim))
        seg = rollout_segment(policy, net, copy.deepcopy(env), norm, horizon, noise)
        return surrogate(seg, critics, 0.99), net.vars

    params = actor.params
    return param_check(loss_fn, params, random_coords(params, n_params, rng), h)


def check_rpg(rng: np.random.Generator) -> float:
    return max(c.rel_error for c in rollout_check(seed=int(rng.integers(1 << 31))))


CHECKS: dict[str, Callable[[np.random.Generator], float]] = {
    "tape": check_tape,
    "net": check_net,
    "env": check_env,
    "flow": check_flow,
    "cfm": check_cfm,
    "critic": check_critic,
    "rpg": check_rpg,
}


def run_all(seed: int = 0) -> dict[str, float]:
    return {name: fn(np.random.default_rng([seed, i])) for i, (name, fn) in enumerate(CHECKS.items())}
