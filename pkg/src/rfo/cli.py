"""``rfo`` command line: train, eval, gradcheck, ablate, kl-monitor, plot."""

from __future__ import annotations

import argparse
import itertools
import logging
import os
import re
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diag
from .config import ALIASES, ConfigError, TrainConfig, coerce, load_config
from .env import BatchedEnv
from .flow import clamp_pretanh, integrate
from .rpg import TrainingError
from .trainer import Trainer, _fmt, evaluate, load_agent

EXIT_FAIL = 1
EXIT_CONFIG = 2


def parse_seeds(spec: str) -> list[int]:
    """``"3"``, ``"1..10"`` (inclusive) or ``"0,2,5"``."""
    spec = spec.strip()
    m = re.fullmatch(r"(-?\d+)\.\.(-?\d+)", spec)
    if m:
        a, b = int(m.group(1)), int(m.group(2))
        if b < a:
            raise ConfigError(f"empty seed range {spec!r}")
        return list(range(a, b + 1))
    try:
        return [int(s) for s in spec.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad seed list {spec!r}; use N, A..B or A,B,C") from None


def out_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get("RFO_OUT") or "runs")


def resolve_config(args) -> TrainConfig:
    overrides = list(args.set or [])
    if getattr(args, "algo", None):
        overrides.append(f"algo={args.algo}")
    return load_config(args.config, overrides)


def seeds_for(args, cfg: TrainConfig) -> list[int]:
    return parse_seeds(args.seeds) if args.seeds else [cfg.seed]


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    root = out_root(args.out)
    for seed in seeds_for(args, cfg):
        run_dir = root / f"seed_{seed}"
        res = Trainer(cfg.replace(seed=seed), run_dir).run()
        print(f"seed {seed}: final eval {res.final.mean:.4f} ± {res.final.std:.4f}  -> {run_dir}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg_path = args.config or (ckpt.parent / "config.cfg")
    cfg = load_config(cfg_path, args.set or [])
    policy, _, norm, it = load_agent(ckpt, cfg)
    episodes = args.episodes or cfg.eval_episodes
    seed = args.eval_seed if args.eval_seed is not None else cfg.eval_seed
    res = evaluate(policy, norm, cfg, episodes, seed)
    print(f"{res.mean:.6f} ± {res.std:.6f}  ({episodes} episodes, checkpoint iteration {it})")
    out = Path(args.out) if args.out else ckpt.parent
    out.mkdir(parents=True, exist_ok=True)
    lines = ["episode,return"] + [f"{i},{_fmt(r)}" for i, r in enumerate(res.returns)]
    (out / "eval.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "eval_summary.csv").write_text(
        f"checkpoint,iteration,episodes,mean,std\n{ckpt.name},{it},{episodes},{_fmt(res.mean)},{_fmt(res.std)}\n",
        encoding="utf-8",
    )
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import CHECKS, TOLERANCE

    worst = 0.0
    print(f"{'module':<8} {'max rel err':>12}  status")
    for i, (name, fn) in enumerate(CHECKS.items()):
        err = fn(np.random.default_rng([args.seed, i]))
        worst = max(worst, err)
        print(f"{name:<8} {err:>12.3e}  {'ok' if err < TOLERANCE else 'FAIL'}")
    return 0 if worst < TOLERANCE else EXIT_FAIL


def parse_grid(items: Sequence[str]) -> list[tuple[str, list]]:
    axes = []
    for item in items:
        if "=" not in item:
            raise ConfigError(f"grid axis must look like key=v1,v2,...; got {item!r}")
        key, vals = item.split("=", 1)
        key = ALIASES.get(key.strip(), key.strip())
        values = [coerce(key, v)[1] for v in vals.split(",") if v.strip()]
        if not values:
            raise ConfigError(f"grid axis {key!r} has no values")
        axes.append((key, values))
    return axes


def cell_name(cell: dict) -> str:
    return "__".join(f"{k}={v}" for k, v in cell.items())


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    axes = parse_grid(args.grid)
    keys = [k for k, _ in axes]
    root = out_root(args.out)
    rows = ["cell,seed,final_eval_mean,final_eval_std"]
    cells = [dict(zip(keys, combo)) for combo in itertools.product(*(v for _, v in axes))]
    for cfg_cell in cells:
        cfg = base.replace(**cfg_cell)
        for seed in seeds_for(args, cfg):
            run_dir = root / cell_name(cfg_cell) / f"seed_{seed}"
            res = Trainer(cfg.replace(seed=seed), run_dir).run()
            rows.append(f"{cell_name(cfg_cell)},{seed},{_fmt(res.final.mean)},{_fmt(res.final.std)}")
            print(f"{cell_name(cfg_cell)} seed {seed}: {res.final.mean:.4f} ± {res.final.std:.4f}")
    root.mkdir(parents=True, exist_ok=True)
    (root / "ablation.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return 0


def _checkpoint_iter(path: Path) -> int:
    m = re.search(r"(\d+)", path.stem)
    return int(m.group(1)) if m else -1


def checkpoint_kl(run_dir: Path, cfg: TrainConfig, pairs: int, draws: int, seed: int) -> list[dict]:
    """KL and past-data CFM monitor between consecutive stored checkpoints.

    Pairs come from the older policy acting on fresh initial states, so the
    estimate is KL(old || new) as during training.
    """
    if cfg.algo != "rfo":
        raise ConfigError("kl-monitor needs a flow-policy (rfo) run")
    ckpts = sorted(run_dir.glob("ckpt_*.rfo"), key=_checkpoint_iter)
    final = run_dir / "final.rfo"
    if final.exists():
        ckpts.append(final)
    if len(ckpts) < 2:
        raise FileNotFoundError(f"need at least two checkpoints in {run_dir}")
    rng = np.random.default_rng([seed, 7])
    agents = [load_agent(p, cfg) for p in ckpts]
    out = []
    for (p_old, a_old), (p_new, a_new) in zip(zip(ckpts, agents), zip(ckpts[1:], agents[1:])):
        old_pol, _, old_norm, it_old = a_old
        new_pol, _, new_norm, it_new = a_new
        env = BatchedEnv(cfg.env, pairs, cfg.episode_length, seed=int(rng.integers(1 << 31)))
        raw = env.observe_array(env.state)
        eps = rng.standard_normal((pairs, old_pol.flow.width))
        pre = clamp_pretanh(integrate(old_pol.params, old_pol.cfg, old_norm.apply(raw), eps), cfg.clamp_bound)
        old = diag.PolicySnapshot.capture(old_pol.params, old_pol.cfg)
        new = diag.PolicySnapshot.capture(new_pol.params, new_pol.cfg)
        res = diag.kl_estimate(
            old, new, old_norm.apply(raw), pre, draws, rng, cfg.kl_common_random, obs_new=new_norm.apply(raw)
        )
        out.append(
            {
                "from": p_old.name,
                "to": p_new.name,
                "from_iteration": it_old,
                "to_iteration": it_new,
                "kl": res.kl,
                "kl_clipped": int(res.clipped),
                "past_cfm_monitor": float(res.loss_new.mean()),
            }
        )
    return out


def cmd_kl_monitor(args) -> int:
    run_dir = Path(args.run)
    cfg = load_config(args.config or run_dir / "config.cfg", args.set or [])
    rows = checkpoint_kl(run_dir, cfg, args.pairs or cfg.kl_pairs, args.draws or cfg.kl_draws, cfg.seed)
    cols = ["from", "to", "from_iteration", "to_iteration", "kl", "kl_clipped", "past_cfm_monitor"]
    lines = [",".join(cols)] + [",".join(_fmt(r[c]) if not isinstance(r[c], str) else r[c] for c in cols) for r in rows]
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "kl_monitor.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for r in rows:
        flag = " (clipped)" if r["kl_clipped"] else ""
        print(f"{r['from']} -> {r['to']}: KL {r['kl']:.6g}{flag}, past CFM {r['past_cfm_monitor']:.6g}")
    return 0


def cmd_plot(args) -> int:
    from .plot import plot_runs

    out = Path(args.out) if args.out else out_root(None) / f"{args.column}.svg"
    path = plot_runs(args.runs, out, args.column, args.window)
    print(path)
    return 0


# --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, algo: bool = True) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--out", help="output directory (default: $RFO_OUT or ./runs)")
    p.add_argument("--seeds", "--seed", dest="seeds", help="seed, inclusive range A..B, or list A,B,C")
    if algo:
        p.add_argument("--algo", choices=("rfo", "shac-gaussian"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rfo", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run per seed")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--config", help="defaults to config.cfg next to the checkpoint")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--episodes", type=int)
    p.add_argument("--eval-seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every module")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="grid sweep, e.g. K=1,2,4,8 c_past=0.1,0.2")
    p.add_argument("grid", nargs="+", metavar="KEY=V1,V2")
    _common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("kl-monitor", help="KL between consecutive stored checkpoints")
    p.add_argument("run", help="run directory holding config.cfg and ckpt_*.rfo")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--pairs", type=int)
    p.add_argument("--draws", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_kl_monitor)

    p = sub.add_parser("plot", help="SVG learning curves (mean ± std over seeds)")
    p.add_argument("runs", nargs="+", help="directories with metrics.csv or seed_*/metrics.csv")
    p.add_argument("--column", default="eval_return")
    p.add_argument("--window", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"rfo: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, KeyError, TrainingError) as exc:
        print(f"rfo: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
