"""Read-only training monitors built from per-pair CFM losses.

For a pair (s, a) the CFM loss under a flow policy stands in for a negative
log-likelihood, so ``exp(L_old - L_new)`` approximates ``pi_new / pi_old``.
Feeding that ratio to the K3 estimator gives KL(pi_old || pi_new).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .flow import FlowConfig
from .net import MlpParams, mlp_apply

EXP_CLIP = 30.0


@dataclass(frozen=True)
class PolicySnapshot:
    """Frozen actor weights taken at an iteration boundary."""

    params: MlpParams
    cfg: FlowConfig

    @classmethod
    def capture(cls, params: MlpParams, cfg: FlowConfig) -> "PolicySnapshot":
        p = params.copy()
        for v in p.tensors.values():
            v.setflags(write=False)
        return cls(p, cfg)


@dataclass
class CfmDraws:
    """Shared flow times ``u`` (P, n) and noise ``eps`` (P, n, w)."""

    u: np.ndarray
    eps: np.ndarray

    @classmethod
    def sample(cls, rng: np.random.Generator, pairs: int, n: int, width: int) -> "CfmDraws":
        return cls(rng.uniform(0.0, 1.0, size=(pairs, n)), rng.standard_normal((pairs, n, width)))


def cfm_losses(params: MlpParams, obs: np.ndarray, pre: np.ndarray, draws: CfmDraws) -> np.ndarray:
    """Monte-Carlo CFM loss for each of P pairs, averaged over its n draws."""
    obs = np.atleast_2d(obs)
    pre = np.atleast_2d(pre)
    p, n = draws.u.shape
    w = pre.shape[1]
    u = draws.u[..., None]
    psi = (1.0 - u) * draws.eps + u * pre[:, None, :]
    x = np.concatenate(
        [psi.reshape(p * n, w), draws.u.reshape(p * n, 1), np.repeat(obs, n, axis=0)], axis=1
    )
    v = mlp_apply(params, x).reshape(p, n, w)
    resid = v - (pre[:, None, :] - draws.eps)
    return (resid * resid).sum(axis=2).mean(axis=1)


def cfm_loss_pointwise(
    params: MlpParams, obs: np.ndarray, pre: np.ndarray, n: int, rng: np.random.Generator
) -> float:
    if n < 1:
        raise ValueError("need at least one draw")
    pre = np.atleast_1d(np.asarray(pre, dtype=np.float64))
    draws = CfmDraws.sample(rng, 1, n, pre.shape[-1])
    return float(cfm_losses(params, obs, pre, draws)[0])


def k3_values(log_ratio: np.ndarray) -> np.ndarray:
    """Per-sample ``(rho - 1) - ln rho`` given ``ln rho``."""
    return _kernels.k3(log_ratio)


@dataclass
class KlResult:
    kl: float
    clipped: bool
    loss_old: np.ndarray
    loss_new: np.ndarray


def kl_estimate(
    old: PolicySnapshot,
    new: PolicySnapshot,
    obs: np.ndarray,
    pre: np.ndarray,
    n: int,
    rng: np.random.Generator,
    common_random: bool = True,
    obs_new: np.ndarray | None = None,
) -> KlResult:
    """K3 estimate of KL(old || new) on pairs generated by ``old``.

    ``obs_new`` lets the new policy see the states through its own
    normaliser; by default both read ``obs``.
    """
    pairs, width = pre.shape
    d_old = CfmDraws.sample(rng, pairs, n, width)
    d_new = d_old if common_random else CfmDraws.sample(rng, pairs, n, width)
    l_old = cfm_losses(old.params, obs, pre, d_old)
    l_new = cfm_losses(new.params, obs if obs_new is None else obs_new, pre, d_new)
    log_rho = l_old - l_new
    clipped = bool(np.any(np.abs(log_rho) > EXP_CLIP))
    log_rho = np.clip(log_rho, -EXP_CLIP, EXP_CLIP)
    return KlResult(float(np.mean(k3_values(log_rho))), clipped, l_old, l_new)


def past_cfm_monitor(
    current: PolicySnapshot, obs: np.ndarray, pre: np.ndarray, n: int, rng: np.random.Generator
) -> float:
    """Mean CFM loss of ``current`` on the preceding iteration's pairs."""
    draws = CfmDraws.sample(rng, pre.shape[0], n, pre.shape[1])
    return float(np.mean(cfm_losses(current.params, obs, pre, draws)))


def subsample_pairs(
    obs: np.ndarray, pre: np.ndarray, count: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    idx = rng.choice(obs.shape[0], size=min(count, obs.shape[0]), replace=False)
    idx.sort()
    return obs[idx], pre[idx]
