"""Independent reference computations used by several test modules."""

import numpy as np

from rfo.env import BatchedEnv, step_arrays

DT = 0.05
HORIZON = 100
ACTION_COST = 0.01


def point_mass_axis():
    a = np.array([[1.0, DT], [0.0, 1.0]])
    b = np.array([[0.0], [2.0 * DT]])
    q = np.diag([1.0, 0.0])
    r = np.array([[ACTION_COST]])
    return a, b, q, r


def finite_horizon_lqr(horizon=HORIZON):
    """Riccati recursion for one axis; returns gains K_t (u = -K_t x) and P_0."""
    a, b, q, r = point_mass_axis()
    p = np.zeros((2, 2))
    gains = []
    for _ in range(horizon):
        k = np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a)
        p = q + a.T @ p @ (a - b @ k)
        gains.append(k)
    return gains[::-1], p


def lqr_expected_return():
    """Unconstrained optimum of the point-mass return under its reset distribution.

    Two independent axes, position ~ U[-1, 1] (variance 1/3), velocity 0.
    """
    _, p0 = finite_horizon_lqr()
    return -2.0 * p0[0, 0] / 3.0


def clipped_lqr_returns(episodes, seed):
    """Per-episode returns of the LQR law with actions clipped to the box."""
    gains, _ = finite_horizon_lqr()
    env = BatchedEnv("point-mass-reach", episodes, HORIZON, seed=seed)
    s = env.state.copy()
    total = np.zeros(episodes)
    for t in range(HORIZON):
        k = gains[t][0]
        u = np.stack([-(s[:, [0, 2]] @ k), -(s[:, [1, 3]] @ k)], axis=1)
        u = np.clip(u, -1.0, 1.0)
        s, r = step_arrays("point-mass-reach", s, u)
        total += r
    return total


def ks_uniform(samples):
    """Kolmogorov-Smirnov distance of 1-D samples to Uniform[-1, 1]."""
    x = np.sort(np.asarray(samples))
    n = x.size
    cdf = (x + 1.0) / 2.0
    return float(max((np.arange(1, n + 1) / n - cdf).max(), (cdf - np.arange(n) / n).max()))


def _axis_position_map(horizon=HORIZON):
    """Positions p_0..p_{H-1} of one axis as ``p0 + M u`` (zero initial velocity)."""
    m = np.zeros((horizon, horizon))
    for j in range(horizon):
        # u_j raises velocity from step j+1 on; position integrates it one step later
        for t in range(j + 2, horizon):
            m[t, j] = 2.0 * DT * DT * (t - j - 1)
    return m


def box_optimal_returns(episodes, seed):
    """Exact open-loop optimum per episode under |a| <= 1 (a bounded least-squares problem per axis)."""
    from scipy.optimize import lsq_linear

    env = BatchedEnv("point-mass-reach", episodes, HORIZON, seed=seed)
    m = _axis_position_map()
    a = np.vstack([m, np.sqrt(ACTION_COST) * np.eye(HORIZON)])
    out = np.zeros(episodes)
    for i, s in enumerate(env.state):
        for p0 in s[:2]:
            b = np.concatenate([-p0 * np.ones(HORIZON), np.zeros(HORIZON)])
            res = lsq_linear(a, b, bounds=(-1.0, 1.0), tol=1e-12)
            out[i] -= float(np.sum((a @ res.x - b) ** 2))
    return out


def brute_force_lambda_return(r, v, d, gamma, lam, t):
    """Mixture of n-step returns, truncated at the segment end and at episode ends."""
    h = len(r)

    def n_step(n):
        # G_t^(n) = sum_{k<n} gamma^k r_{t+k} + gamma^n V(s_{t+n}), cut at the first done
        total, disc = 0.0, 1.0
        for k in range(n):
            total += disc * r[t + k]
            if d[t + k]:
                return total
            disc *= gamma
        return total + disc * v[t + n - 1]

    horizon = h - t
    out = sum((1 - lam) * lam ** (n - 1) * n_step(n) for n in range(1, horizon))
    return out + lam ** (horizon - 1) * n_step(horizon)
