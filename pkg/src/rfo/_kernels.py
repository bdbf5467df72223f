"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import from ``RFO_USE_NUMBA`` (``1`` by default,
``0`` forces numpy). :func:`set_backend` switches at runtime, which is what the
benchmark uses to time both paths in one process.

Both paths compute the same expressions in the same order per element, so
results agree to roundoff; bitwise identity is only promised within a backend.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba as nb

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb = None
    HAS_NUMBA = False


# --------------------------------------------------------------------------
# numpy reference path


def _layernorm_fwd_np(x, g, b, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * g + b, xhat, rstd[:, 0]


def _layernorm_bwd_np(gy, xhat, rstd, g):
    gxhat = gy * g
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gxhat - m1 - xhat * m2)
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


def _silu_fwd_np(x):
    sig = np.empty_like(x, dtype=np.float64)  # stays an ndarray for 0-d inputs
    np.negative(x, out=sig)
    np.exp(sig, out=sig)
    sig += 1.0
    np.reciprocal(sig, out=sig)
    return x * sig, sig


def _silu_bwd_np(gy, x, sig):
    return gy * (sig * (1.0 + x * (1.0 - sig)))


def _td_lambda_np(rewards, next_values, dones, gamma, lam):
    horizon = rewards.shape[0]
    out = np.empty_like(rewards)
    nxt = next_values[horizon - 1].copy()
    for t in range(horizon - 1, -1, -1):
        live = 1.0 - dones[t]
        mix = (1.0 - lam) * next_values[t] + lam * nxt
        out[t] = rewards[t] + gamma * live * mix
        nxt = out[t]
    return out


def _k3_np(log_ratio):
    # expm1 keeps tiny ratios from rounding below zero; the floor covers the rest
    return np.maximum(np.expm1(log_ratio) - log_ratio, 0.0)


def _adamw_np(p, g, m, v, lr, b1, b2, c1, c2, wd, eps):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    p *= 1.0 - lr * wd
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# --------------------------------------------------------------------------
# numba path

if HAS_NUMBA:

    @nb.njit(cache=True)
    def _layernorm_fwd_nb(x, g, b, eps):
        rows, cols = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows)
        for i in range(rows):
            mu = 0.0
            for j in range(cols):
                mu += x[i, j]
            mu /= cols
            var = 0.0
            for j in range(cols):
                d = x[i, j] - mu
                var += d * d
            var /= cols
            r = 1.0 / np.sqrt(var + eps)
            rstd[i] = r
            for j in range(cols):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                y[i, j] = h * g[j] + b[j]
        return y, xhat, rstd

    @nb.njit(cache=True)
    def _layernorm_bwd_nb(gy, xhat, rstd, g):
        rows, cols = gy.shape
        gx = np.empty_like(gy)
        gg = np.zeros(cols)
        gb = np.zeros(cols)
        for i in range(rows):
            m1 = 0.0
            m2 = 0.0
            for j in range(cols):
                gh = gy[i, j] * g[j]
                m1 += gh
                m2 += gh * xhat[i, j]
                gg[j] += gy[i, j] * xhat[i, j]
                gb[j] += gy[i, j]
            m1 /= cols
            m2 /= cols
            r = rstd[i]
            for j in range(cols):
                gx[i, j] = r * (gy[i, j] * g[j] - m1 - xhat[i, j] * m2)
        return gx, gg, gb

    @nb.njit(cache=True)
    def _silu_bwd_nb(gy, x, sig):
        gf = gy.ravel()
        xf = x.ravel()
        sf = sig.ravel()
        out = np.empty_like(gf)
        for i in range(gf.size):
            s = sf[i]
            out[i] = gf[i] * (s * (1.0 + xf[i] * (1.0 - s)))
        return out.reshape(gy.shape)

    @nb.njit(cache=True)
    def _td_lambda_nb(rewards, next_values, dones, gamma, lam):
        horizon, n = rewards.shape
        out = np.empty_like(rewards)
        for j in range(n):
            nxt = next_values[horizon - 1, j]
            for t in range(horizon - 1, -1, -1):
                live = 1.0 - dones[t, j]
                mix = (1.0 - lam) * next_values[t, j] + lam * nxt
                out[t, j] = rewards[t, j] + gamma * live * mix
                nxt = out[t, j]
        return out

    @nb.njit(cache=True)
    def _adamw_nb(p, g, m, v, lr, b1, b2, c1, c2, wd, eps):
        decay = 1.0 - lr * wd
        for i in range(p.size):
            gi = g[i]
            mi = m[i] * b1 + (1.0 - b1) * gi
            vi = v[i] * b2 + (1.0 - b2) * (gi * gi)
            m[i] = mi
            v[i] = vi
            p[i] = p[i] * decay - lr * (mi / c1) / (np.sqrt(vi / c2) + eps)

    @nb.njit(cache=True)
    def _k3_nb(log_ratio):
        out = np.empty_like(log_ratio)
        for i in range(log_ratio.size):
            lr = log_ratio[i]
            out[i] = max(math.expm1(lr) - lr, 0.0)
        return out


# --------------------------------------------------------------------------
# dispatch

_BACKEND = "numpy"


def set_backend(name: str) -> None:
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _BACKEND = name


def backend() -> str:
    return _BACKEND


set_backend("numba" if HAS_NUMBA and os.environ.get("RFO_USE_NUMBA", "1") != "0" else "numpy")


def layernorm_fwd(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float):
    """Row-wise LayerNorm of a 2-D array. Returns ``(y, xhat, rstd)``."""
    if _BACKEND == "numba":
        return _layernorm_fwd_nb(np.ascontiguousarray(x), g, b, eps)
    return _layernorm_fwd_np(x, g, b, eps)


def layernorm_bwd(gy: np.ndarray, xhat: np.ndarray, rstd: np.ndarray, g: np.ndarray):
    if _BACKEND == "numba":
        return _layernorm_bwd_nb(np.ascontiguousarray(gy), xhat, rstd, g)
    return _layernorm_bwd_np(gy, xhat, rstd, g)


def silu_fwd(x: np.ndarray):
    # numpy on both backends: its exp is SIMD-vectorised, numba's is not without SVML
    return _silu_fwd_np(x)


def silu_bwd(gy: np.ndarray, x: np.ndarray, sig: np.ndarray):
    if _BACKEND == "numba":
        return _silu_bwd_nb(np.ascontiguousarray(gy), x, sig)
    return _silu_bwd_np(gy, x, sig)


def td_lambda(rewards, next_values, dones, gamma: float, lam: float) -> np.ndarray:
    """Backward TD(lambda) recursion over a ``(H, N)`` segment.

    ``next_values[t]`` is the detached value of the state reached by transition
    ``t``; ``dones[t]`` cuts both the bootstrap and the recursion at an episode
    boundary. ``next_values[H-1]`` doubles as the segment tail bootstrap.
    """
    rewards = np.ascontiguousarray(rewards, dtype=np.float64)
    next_values = np.ascontiguousarray(next_values, dtype=np.float64)
    dones = np.ascontiguousarray(dones, dtype=np.float64)
    if _BACKEND == "numba":
        return _td_lambda_nb(rewards, next_values, dones, float(gamma), float(lam))
    return _td_lambda_np(rewards, next_values, dones, float(gamma), float(lam))


def k3(log_ratio: np.ndarray) -> np.ndarray:
    """K3 KL integrand ``(rho - 1) - ln rho`` given ``ln rho``."""
    log_ratio = np.ascontiguousarray(log_ratio, dtype=np.float64).ravel()
    if _BACKEND == "numba":
        return _k3_nb(log_ratio)
    return _k3_np(log_ratio)


def adamw_update(p, g, m, v, lr, b1, b2, c1, c2, wd, eps) -> None:
    """One in-place AdamW update of a parameter block and its moments."""
    if _BACKEND == "numba":
        _adamw_nb(p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                  m.reshape(-1), v.reshape(-1), lr, b1, b2, c1, c2, wd, eps)
    else:
        _adamw_np(p, g, m, v, lr, b1, b2, c1, c2, wd, eps)
