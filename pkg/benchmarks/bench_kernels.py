"""Time each hot kernel under the numba and numpy backends, then a few
training iterations end to end.

    python3 benchmarks/bench_kernels.py [--repeat 200] [--iterations 10]

Shapes follow the default point-mass run: 16 envs, 64-wide hidden layers,
critic minibatches of 128 rows, CFM batches of 512, diagnostics over
128 x 256 draws.
"""

from __future__ import annotations

import argparse
import time
import timeit

import numpy as np

from rfo import _kernels as K
from rfo.config import TrainConfig
from rfo.trainer import Trainer


def kernel_cases(rng: np.random.Generator):
    g = rng.uniform(0.5, 1.5, 64)
    b = rng.normal(size=64)
    cases = []
    for rows in (16, 128, 512):
        x = rng.normal(size=(rows, 64))
        _, xhat, rstd = K._layernorm_fwd_np(x, g, b, 1e-5)
        gy = rng.normal(size=(rows, 64))
        _, sig = K.silu_fwd(x)
        cases += [
            (f"layernorm_fwd {rows}x64", lambda x=x: K.layernorm_fwd(x, g, b, 1e-5)),
            (f"layernorm_bwd {rows}x64", lambda gy=gy, xhat=xhat, rstd=rstd: K.layernorm_bwd(gy, xhat, rstd, g)),
            (f"silu_bwd {rows}x64", lambda gy=gy, x=x, sig=sig: K.silu_bwd(gy, x, sig)),
        ]
    r, v = rng.normal(size=(32, 16)), rng.normal(size=(32, 16))
    d = np.zeros((32, 16))
    cases.append(("td_lambda 32x16", lambda: K.td_lambda(r, v, d, 0.99, 0.95)))
    lr = rng.normal(size=128)
    cases.append(("k3 128", lambda: K.k3(lr)))
    n = 9_000  # about one 64-64 actor
    p, gr, m, vv = rng.normal(size=n), rng.normal(size=n), np.zeros(n), np.zeros(n)
    cases.append((f"adamw {n}", lambda: K.adamw_update(p, gr, m, vv, 1e-3, 0.9, 0.999, 0.1, 0.001, 1e-4, 1e-8)))
    return cases


def time_call(fn, repeat: int) -> float:
    fn()  # compile / warm caches
    return min(timeit.repeat(fn, number=repeat, repeat=3)) / repeat


def time_training(iterations: int, algo: str, diagnostics: bool) -> float:
    cfg = TrainConfig(algo=algo, iterations=iterations, diagnostics=diagnostics, eval_every=0, eval_episodes=8)
    Trainer(cfg.replace(iterations=1)).run()  # warm-up
    t0 = time.perf_counter()
    Trainer(cfg).run()
    return (time.perf_counter() - t0) / iterations


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--iterations", type=int, default=10)
    args = ap.parse_args()
    if not K.HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numpy us':>10}{'numba us':>10}{'speedup':>9}")
    for name, fn in kernel_cases(rng):
        times = {}
        for backend in ("numpy", "numba"):
            K.set_backend(backend)
            times[backend] = time_call(fn, args.repeat) * 1e6
        print(f"{name:<24}{times['numpy']:>10.2f}{times['numba']:>10.2f}{times['numpy'] / times['numba']:>8.2f}x")

    print()
    print(f"{'training iteration':<24}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for algo, diagnostics in (("rfo", False), ("rfo", True), ("shac-gaussian", False)):
        times = {}
        for backend in ("numpy", "numba"):
            K.set_backend(backend)
            times[backend] = time_training(args.iterations, algo, diagnostics) * 1e3
        label = algo + (" +diag" if diagnostics else "")
        print(f"{label:<24}{times['numpy']:>10.1f}{times['numba']:>10.1f}{times['numpy'] / times['numba']:>8.2f}x")


if __name__ == "__main__":
    main()
