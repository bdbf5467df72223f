"""Training runs shared between test modules, memoised per process."""

import time

from rfo.config import TrainConfig
from rfo.trainer import RunResult, Trainer

_CACHE: dict[str, tuple[RunResult, float]] = {}


def run(cfg: TrainConfig) -> RunResult:
    return timed_run(cfg)[0]


def timed_run(cfg: TrainConfig) -> tuple[RunResult, float]:
    """Result and wall-clock seconds of the first time this config was trained."""
    key = cfg.to_text()
    if key not in _CACHE:
        t0 = time.perf_counter()
        res = Trainer(cfg).run()
        _CACHE[key] = (res, time.perf_counter() - t0)
    return _CACHE[key]


# criterion-4 style runs: default settings, read-only extras switched off
def point_mass(algo: str, seed: int, **kw) -> TrainConfig:
    return TrainConfig(algo=algo, seed=seed, diagnostics=False, eval_every=0, **kw)


# one line per acceptance criterion, echoed in the pytest terminal summary
REPORT: list[str] = []


def report(tag: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {tag}: {detail}"
    REPORT.append(line)
    print(line)
