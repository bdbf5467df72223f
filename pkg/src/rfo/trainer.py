"""Outer training loop for RFO and the Gaussian SHAC baseline, evaluation,
metrics and checkpoints."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diag
from .cfm import RecentBuffer, RolloutStates, cfm_loss_past, cfm_loss_uniform
from .config import TrainConfig
from .critic import CriticPair, critic_update, td_lambda_targets, value
from .env import BatchedEnv, IdentityNorm, RunningNorm
from .flow import FlowConfig, FlowPolicy
from .net import (
    AdamWState,
    LrSchedule,
    load_tensors,
    mlp_apply,
    pack_adamw,
    pack_mlp,
    save_tensors,
    schedule_rate,
    unpack_mlp,
)
from .rpg import FlowActor, GaussianActor, TrainingError, actor_update, policy_loss, rollout_segment, surrogate
from .tape import Tape

log = logging.getLogger(__name__)

BASE_COLUMNS = [
    "iteration",
    "env_steps",
    "segment_return",
    "j_hat",
    "l_past",
    "l_uni",
    "policy_loss",
    "critic_loss",
    "critic_pair_var",
    "grad_norm",
    "grad_norm_clipped",
    "actor_lr",
    "critic_lr",
    "eval_return",
    "eval_std",
    "eval_iteration",
]
DIAG_COLUMNS = ["kl", "kl_clipped", "past_cfm_monitor"]


@dataclass
class EvalResult:
    mean: float
    std: float
    returns: np.ndarray


@dataclass
class RunResult:
    config: TrainConfig
    rows: list[dict]
    final: EvalResult
    policy: object
    critics: CriticPair
    norm: RunningNorm
    columns: list[str] = field(default_factory=list)
    timings: list[float] = field(default_factory=list)

    def csv_text(self) -> str:
        return metrics_csv(self.rows, self.columns)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)


def make_policy(cfg: TrainConfig, obs_dim: int, act_dim: int, rng: np.random.Generator):
    hidden = cfg.hidden_sizes("actor_hidden")
    if cfg.algo == "rfo":
        fcfg = FlowConfig(cfg.flow_steps, cfg.clamp_bound, cfg.chunk_size)
        return FlowActor(FlowPolicy.create(obs_dim, act_dim, fcfg, hidden, rng))
    return GaussianActor.create(obs_dim, act_dim, hidden, rng, cfg.init_log_std)


def evaluate(
    policy,
    norm: RunningNorm,
    cfg: TrainConfig,
    episodes: int,
    seed: int,
) -> EvalResult:
    """Undiscounted episode returns with seeded per-step noise; nothing is updated."""
    env = BatchedEnv(cfg.env, episodes, cfg.episode_length, seed=seed, reward_scale=cfg.reward_scale)
    rng = np.random.default_rng([seed, 1])
    totals = np.zeros(episodes)
    c = policy.chunk
    pending = []
    for t in range(cfg.episode_length):
        tape = Tape()
        s = tape.const(env.state)
        if t % c == 0:
            net = policy.params.bind(tape, trainable=False)
            o = norm(env.task.observe(s))
            eps = policy.noise_block(rng, c, episodes)[0]
            pending = [a.value for a in policy.act(net, o, eps).split()]
        a = tape.const(pending[t % c])
        _, r, _ = env.step(s, a)
        totals += r.value
    return EvalResult(float(totals.mean()), float(totals.std()), totals)


def metrics_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


class Trainer:
    """One seeded training run; :meth:`run` executes every iteration."""

    def __init__(self, cfg: TrainConfig, out_dir: str | Path | None = None) -> None:
        self.cfg = cfg.validate()
        self.out = Path(out_dir) if out_dir is not None else None
        ss = np.random.SeedSequence(cfg.seed)
        init_ss, env_ss, noise_ss, cfm_ss, diag_ss = ss.spawn(5)
        init_rng = np.random.default_rng(init_ss)
        self.rng_noise = np.random.default_rng(noise_ss)
        self.rng_cfm = np.random.default_rng(cfm_ss)
        self.rng_diag = np.random.default_rng(diag_ss)
        env_seed = int(env_ss.generate_state(1)[0])
        self.env = BatchedEnv(cfg.env, cfg.num_envs, cfg.episode_length, seed=env_seed, reward_scale=cfg.reward_scale)
        spec = self.env.spec
        self.norm = RunningNorm(spec.obs_dim) if cfg.normalize_obs else IdentityNorm(spec.obs_dim)
        self.policy = make_policy(cfg, spec.obs_dim, spec.act_dim, init_rng)
        adam = dict(beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay, eps=cfg.adam_eps)
        self.actor_opt = AdamWState.for_params(self.policy.params, **adam)
        self.critics = CriticPair.create(spec.obs_dim, cfg.hidden_sizes("critic_hidden"), init_rng, **adam)
        self.actor_sched = LrSchedule(cfg.actor_lr, cfg.iterations, cfg.actor_schedule)
        self.critic_sched = LrSchedule(cfg.critic_lr, cfg.iterations, cfg.critic_schedule)
        self.is_flow = cfg.algo == "rfo"
        self.buffer = RecentBuffer(cfg.clamp_bound)
        self.rollout_states = RolloutStates()
        self.columns = BASE_COLUMNS + (DIAG_COLUMNS if self.is_flow and cfg.diagnostics else [])
        self.rows: list[dict] = []
        self.timings: list[float] = []
        self.eval_seed = cfg.eval_seed
        self._last_eval = (0.0, 0.0, -1)

    # ------------------------------------------------------------------

    def run(self) -> RunResult:
        cfg = self.cfg
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
            (self.out / "config.cfg").write_text(cfg.to_text())
        if cfg.iterations > 0:
            self._periodic_eval(-1)
        for it in range(cfg.iterations):
            t0 = time.perf_counter()
            row = self.iteration(it)
            self.timings.append(time.perf_counter() - t0)
            self.rows.append(row)
            if self.out is not None and cfg.checkpoint_every > 0 and (it + 1) % cfg.checkpoint_every == 0:
                self.save_checkpoint(self.out / f"ckpt_{it + 1:05d}.rfo", it + 1)
        self.norm.frozen = True
        final = evaluate(self.policy, self.norm, cfg, cfg.eval_episodes, self.eval_seed)
        result = RunResult(cfg, self.rows, final, self.policy, self.critics, self.norm, self.columns, self.timings)
        if self.out is not None:
            self.save_checkpoint(self.out / "final.rfo", cfg.iterations)
            (self.out / "metrics.csv").write_text(result.csv_text())
            (self.out / "summary.csv").write_text(
                "final_eval_mean,final_eval_std,episodes\n"
                f"{_fmt(final.mean)},{_fmt(final.std)},{cfg.eval_episodes}\n"
            )
            (self.out / "timing.csv").write_text(
                "iteration,seconds\n" + "".join(f"{i},{t:.6f}\n" for i, t in enumerate(self.timings))
            )
        return result

    def _periodic_eval(self, it: int) -> None:
        res = evaluate(self.policy, self.norm, self.cfg, self.cfg.eval_periodic_episodes, self.eval_seed)
        self._last_eval = (res.mean, res.std, it + 1)

    def iteration(self, it: int) -> dict:
        cfg = self.cfg
        old = diag.PolicySnapshot.capture(self.policy.params, self.policy.cfg) if self._diag_on else None

        tape = Tape()
        net = self.policy.params.bind(tape)
        noise = self.policy.noise_block(self.rng_noise, cfg.horizon, cfg.num_envs)
        chunked = True if cfg.chunk_executor == "chunked" else None
        seg = rollout_segment(self.policy, net, self.env, self.norm, cfg.horizon, noise, chunked)
        obs_dec, pre_dec = seg.decision_pairs()

        j_hat = surrogate(seg, self.critics, cfg.gamma)
        l_past = l_uni = None
        if self.is_flow:
            self.buffer.update(obs_dec, pre_dec)
            self.rollout_states.update(obs_dec)
            fcfg = self.policy.cfg
            l_past = cfm_loss_past(net, fcfg, self.buffer, cfg.batch_cfm, self.rng_cfm, self.norm.apply, cfg.cfm_target)
            l_uni = cfm_loss_uniform(
                net, fcfg, self.rollout_states, self.policy.flow.width, cfg.batch_cfm,
                self.rng_cfm, self.norm.apply, cfg.cfm_target,
            )
        loss = policy_loss(j_hat, l_past, l_uni, cfg.c_past, cfg.c_uni)
        if not np.isfinite(loss.value):
            self._dump_failure(it, {"j_hat": j_hat.value, "loss": loss.value})
            raise TrainingError(f"non-finite policy loss at iteration {it}")
        lr = schedule_rate(self.actor_sched, it)
        try:
            step = actor_update(self.policy.params, net, loss, self.actor_opt, lr, cfg.clip_norm, it)
        except TrainingError:
            self._dump_failure(it, {"j_hat": j_hat.value, "loss": loss.value})
            raise

        # critic regression on the detached segment
        rewards = seg.reward_array()
        obs_n = np.stack([o.value for o in seg.obs])
        h, n, d = obs_n[1:].shape
        next_v = value(self.critics, obs_n[1:].reshape(h * n, d)).reshape(h, n)
        targets = td_lambda_targets(rewards, next_v, seg.dones, cfg.gamma, cfg.lam)
        clr = schedule_rate(self.critic_sched, it)
        c_loss = critic_update(
            self.critics, obs_n[:-1].reshape(h * n, d), targets.reshape(-1),
            cfg.critic_epochs, cfg.critic_minibatches, clr, (cfg.seed, it),
        )
        if not np.isfinite(c_loss):
            self._dump_failure(it, {"critic_loss": c_loss})
            raise TrainingError(f"non-finite critic loss at iteration {it}")
        pair_var = self._pair_variance(obs_n[:-1].reshape(h * n, d))

        row = {
            "iteration": it,
            "env_steps": (it + 1) * cfg.num_envs * cfg.horizon,
            "segment_return": float(rewards.sum(axis=0).mean()),
            "j_hat": float(j_hat.value),
            "l_past": float(l_past.value) if l_past is not None else 0.0,
            "l_uni": float(l_uni.value) if l_uni is not None else 0.0,
            "policy_loss": float(loss.value),
            "critic_loss": c_loss,
            "critic_pair_var": pair_var,
            "grad_norm": step.grad_norm,
            "grad_norm_clipped": step.clipped_norm,
            "actor_lr": lr,
            "critic_lr": clr,
        }
        if self._diag_on:
            row.update(self._diagnostics(old))

        self.norm.update(seg.raw_obs[:-1].reshape(-1, d))
        if cfg.eval_every > 0 and ((it + 1) % cfg.eval_every == 0 or it + 1 == cfg.iterations):
            self._periodic_eval(it)
        row["eval_return"], row["eval_std"], row["eval_iteration"] = self._last_eval
        return row

    @property
    def _diag_on(self) -> bool:
        return self.is_flow and self.cfg.diagnostics

    def _diagnostics(self, old: diag.PolicySnapshot) -> dict:
        # pairs are the clamped current-iteration contents of the recent buffer
        obs_raw, pre = self.buffer.current
        obs, pre = diag.subsample_pairs(self.norm.apply(obs_raw), pre, self.cfg.kl_pairs, self.rng_diag)
        new = diag.PolicySnapshot.capture(self.policy.params, self.policy.cfg)
        res = diag.kl_estimate(old, new, obs, pre, self.cfg.kl_draws, self.rng_diag, self.cfg.kl_common_random)
        return {"kl": res.kl, "kl_clipped": int(res.clipped), "past_cfm_monitor": float(res.loss_new.mean())}

    def _pair_variance(self, obs: np.ndarray) -> float:
        a = mlp_apply(self.critics.nets[0], obs)[:, 0]
        b = mlp_apply(self.critics.nets[1], obs)[:, 0]
        return float(np.mean(0.25 * (a - b) ** 2))

    def _dump_failure(self, it: int, info: dict) -> None:
        log.error("training aborted at iteration %d: %s", it, info)
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
            lines = [f"iteration = {it}"] + [f"{k} = {v}" for k, v in info.items()]
            (self.out / f"failure_iter{it:05d}.txt").write_text("\n".join(lines) + "\n")
            self.save_checkpoint(self.out / f"failure_iter{it:05d}.rfo", it)

    # ------------------------------------------------------------------

    def state_tensors(self, iteration: int) -> dict[str, np.ndarray]:
        t = pack_mlp("actor", self.policy.params)
        t.update(pack_adamw("actor_opt", self.actor_opt))
        for i, (net, opt) in enumerate(zip(self.critics.nets, self.critics.opts)):
            t.update(pack_mlp(f"critic{i}", net))
            t.update(pack_adamw(f"critic{i}_opt", opt))
        for k, v in self.norm.state_dict().items():
            t[f"obs_norm/{k}"] = v
        t["meta/iteration"] = np.asarray(float(iteration))
        return t

    def save_checkpoint(self, path: Path, iteration: int) -> None:
        save_tensors(path, self.state_tensors(iteration))


def train(cfg: TrainConfig, out_dir: str | Path | None = None) -> RunResult:
    return Trainer(cfg, out_dir).run()


def train_shac_gaussian(cfg: TrainConfig, out_dir: str | Path | None = None) -> RunResult:
    return Trainer(cfg.replace(algo="shac-gaussian"), out_dir).run()


def load_agent(path: str | Path, cfg: TrainConfig):
    """Rebuild ``(policy, critics, norm, iteration)`` from a checkpoint."""
    t = load_tensors(path)
    tr = Trainer(cfg.replace(iterations=max(cfg.iterations, 1)))
    tr.policy.params.assign(unpack_mlp("actor", t))
    for i, net in enumerate(tr.critics.nets):
        net.assign(unpack_mlp(f"critic{i}", t))
    tr.norm.load({k: t[f"obs_norm/{k}"] for k in ("mean", "var", "count")})
    tr.norm.frozen = True
    return tr.policy, tr.critics, tr.norm, int(t["meta/iteration"])
