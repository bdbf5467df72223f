"""Twin value networks, TD(lambda) targets and the critic regression step."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .net import AdamWState, MlpParams, adamw_step, init_mlp, mlp_apply, mlp_backward, mlp_forward_cached
from .tape import Var


@dataclass
class CriticPair:
    nets: tuple[MlpParams, MlpParams]
    opts: tuple[AdamWState, AdamWState]

    @classmethod
    def create(cls, obs_dim: int, hidden: Sequence[int], rng: np.random.Generator, **adam) -> "CriticPair":
        nets = tuple(init_mlp((obs_dim, *hidden, 1), rng) for _ in range(2))
        opts = tuple(AdamWState.for_params(n, **adam) for n in nets)
        return cls(nets, opts)

    def copy(self) -> "CriticPair":
        return CriticPair(
            tuple(n.copy() for n in self.nets),
            tuple(
                AdamWState(
                    {k: v.copy() for k, v in o.m.items()},
                    {k: v.copy() for k, v in o.v.items()},
                    o.step, o.beta1, o.beta2, o.weight_decay, o.eps,
                )
                for o in self.opts
            ),
        )


def value(pair: CriticPair, obs: np.ndarray) -> np.ndarray:
    """Average of the two critics on plain (already normalised) observations."""
    a = mlp_apply(pair.nets[0], obs)[..., 0]
    b = mlp_apply(pair.nets[1], obs)[..., 0]
    return 0.5 * (a + b)


def value_on_tape(pair: CriticPair, obs: Var) -> Var:
    """Averaged critic with frozen weights: gradients reach ``obs`` only."""
    tape = obs.tape
    a = pair.nets[0].bind(tape, trainable=False)(obs)
    b = pair.nets[1].bind(tape, trainable=False)(obs)
    return 0.5 * (a[:, 0] + b[:, 0])


def td_lambda_targets(
    rewards: np.ndarray,
    next_values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    lam: float,
) -> np.ndarray:
    """``y_t = r_t + gamma (1 - d_t) [(1 - lam) V(s_{t+1}) + lam y_{t+1}]``, ``y_H = V(s_H)``.

    All inputs are ``(H, N)`` arrays; ``next_values[t]`` is V of the state
    after transition ``t``.
    """
    return _kernels.td_lambda(rewards, next_values, dones, gamma, lam)


def critic_loss(pair: CriticPair, obs: np.ndarray, targets: np.ndarray) -> float:
    """Mean over both critics of their MSE to ``targets``."""
    total = 0.0
    for net in pair.nets:
        pred = mlp_apply(net, obs)[:, 0]
        total += float(np.mean((pred - targets) ** 2))
    return 0.5 * total


def critic_update(
    pair: CriticPair,
    obs: np.ndarray,
    targets: np.ndarray,
    epochs: int,
    minibatches: int,
    lr: float,
    seed_key: Sequence[int] = (0,),
) -> float:
    """Regress both critics onto shared detached targets.

    Shuffling is reseeded every epoch from ``seed_key``. Returns the mean
    minibatch loss (averaged over the two critics) across all updates.
    """
    obs = np.asarray(obs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = obs.shape[0]
    mb = max(1, n // max(1, minibatches))
    losses = []
    for epoch in range(epochs):
        perm = np.random.default_rng([*seed_key, epoch]).permutation(n)
        for start in range(0, n - mb + 1, mb):
            ids = perm[start : start + mb]
            x = obs[ids]
            y = targets[ids]
            total = 0.0
            for net, opt in zip(pair.nets, pair.opts):
                pred, cache = mlp_forward_cached(net, x)
                resid = pred[:, 0] - y
                total += float(np.mean(resid * resid))
                gout = (2.0 / len(ids)) * resid[:, None]
                adamw_step(net, mlp_backward(net, cache, gout), opt, lr)
            losses.append(0.5 * total)
    return float(np.mean(losses)) if losses else 0.0
