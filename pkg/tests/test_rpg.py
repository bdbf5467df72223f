import copy

import numpy as np
import pytest

from rfo import tape as T
from rfo.critic import CriticPair
from rfo.env import BatchedEnv, IdentityNorm, RunningNorm
from rfo.flow import FlowConfig, FlowPolicy
from rfo.gradcheck import rollout_check
from rfo.net import AdamWState, init_mlp, zeros_mlp
from rfo.rpg import (
    FlowActor,
    GaussianActor,
    TrainingError,
    TrajectorySegment,
    actor_update,
    policy_loss,
    rollout_segment,
    surrogate,
)
from rfo.tape import Tape


def _segment(rewards, dones=None, obs_dim=2):
    h, n = rewards.shape
    tape = Tape()
    dones = np.zeros((h, n), dtype=bool) if dones is None else dones
    obs = [tape.const(np.zeros((n, obs_dim))) for _ in range(h + 1)]
    return TrajectorySegment(h, [], obs, [tape.const(r) for r in rewards], dones, None)


def _zero_critics(obs_dim=2, c=0.0):
    pair = CriticPair.create(obs_dim, (4,), np.random.default_rng(0))
    for n in pair.nets:
        n.assign(zeros_mlp(n.sizes))
        n.tensors["out.b"][:] = c
    return pair


def test_unit_rewards_discounted_sum():
    j = surrogate(_segment(np.ones((32, 3))), _zero_critics(), 0.99)
    assert j.value == pytest.approx(sum(0.99**t for t in range(32)), abs=1e-12)
    # the closed form (1 - 0.99**32) / 0.01 is 27.50197, a hair under the commonly quoted 27.5023
    assert j.value == pytest.approx((1 - 0.99**32) / 0.01, abs=1e-12)
    assert abs(j.value - 27.5023) < 1e-3


def test_gamma_zero_keeps_first_reward():
    r = np.random.default_rng(0).normal(size=(5, 4))
    assert surrogate(_segment(r), _zero_critics(c=9.0), 0.0).value == pytest.approx(r[0].mean())


def test_one_step_segment_bootstraps():
    r = np.array([[0.5, -1.0]])
    j = surrogate(_segment(r), _zero_critics(c=2.0), 0.9)
    assert j.value == pytest.approx(np.mean(r[0] + 0.9 * 2.0))


def test_boundary_restarts_discount_and_drops_bootstrap():
    r = np.ones((3, 1))
    d = np.array([[False], [True], [False]])
    j = surrogate(_segment(r, d), _zero_critics(c=10.0), 0.5)
    # 1 + 0.5 (episode ends) + 1 (fresh episode) + 0.5 * 10
    assert j.value == pytest.approx(1 + 0.5 + 1 + 5.0)


def _actor(rng, k=4, chunk=1):
    return FlowActor(FlowPolicy.create(4, 2, FlowConfig(steps=k, chunk=chunk), (16, 16), rng))


def test_horizon_must_be_positive():
    rng = np.random.default_rng(0)
    actor = _actor(rng)
    tape = Tape()
    with pytest.raises(ValueError):
        rollout_segment(actor, actor.params.bind(tape), BatchedEnv("point-mass-reach", 2), IdentityNorm(4), 0, None)


def test_rollouts_are_bit_identical_for_frozen_weights():
    rng = np.random.default_rng(1)
    actor = _actor(rng)
    env = BatchedEnv("point-mass-reach", 3, seed=4)
    noise = actor.noise_block(rng, 6, 3)

    def run():
        tape = Tape()
        return rollout_segment(actor, actor.params.bind(tape), copy.deepcopy(env), IdentityNorm(4), 6, noise)

    a, b = run(), run()
    assert np.array_equal(a.reward_array(), b.reward_array())
    assert np.array_equal(a.raw_obs, b.raw_obs)
    assert len(a.rewards) == 6 and len(a.states) == 7


def test_chunked_rollout_queries_every_c_steps():
    rng = np.random.default_rng(2)
    actor = _actor(rng, chunk=4)
    tape = Tape()
    seg = rollout_segment(actor, actor.params.bind(tape), BatchedEnv("point-mass-reach", 2), IdentityNorm(4), 10,
                          actor.noise_block(rng, 10, 2))
    assert seg.decision_steps == [0, 4, 8]
    obs, pre = seg.decision_pairs()
    assert obs.shape == (6, 4) and pre.shape == (6, 8)


def test_total_reward_gradient_against_finite_differences():
    rng = np.random.default_rng(3)
    actor = _actor(rng)
    env = BatchedEnv("point-mass-reach", 2, seed=3)
    noise = actor.noise_block(rng, 8, 2)
    name, idx = "h0.w", 5

    def total_reward(params, trainable):
        tape = Tape()
        net = params.bind(tape, trainable)
        pol = FlowActor(FlowPolicy(params, actor.cfg, 4, 2))
        seg = rollout_segment(pol, net, copy.deepcopy(env), IdentityNorm(4), 8, noise)
        total = seg.rewards[0]
        for r in seg.rewards[1:]:
            total = total + r
        return tape, net, T.sum(total)

    tape, net, root = total_reward(actor.params, True)
    analytic = tape.backward(root)[net.vars[name]].ravel()[idx]
    vals = []
    for sgn in (1, -1):
        p = actor.params.copy()
        p.tensors[name].reshape(-1)[idx] += sgn * 1e-5
        vals.append(float(total_reward(p, False)[2].value))
    numeric = (vals[0] - vals[1]) / 2e-5
    assert abs(analytic - numeric) / (abs(numeric) + 1e-8) < 1e-4


def test_surrogate_gradient_on_twenty_parameters():
    checks = rollout_check(seed=11)
    assert len(checks) == 20
    assert max(c.rel_error for c in checks) < 1e-3


def test_policy_loss_composition():
    tape = Tape()
    j, lp, lu = tape.const(3.0), tape.const(0.5), tape.const(2.0)
    assert policy_loss(j, lp, lu, 0.4, 0.4).value == pytest.approx(-3.0 + 0.4 * 0.5 + 0.4 * 2.0)
    assert policy_loss(j, None, None, 0.4, 0.4).value == -3.0


def test_detached_objective_leaves_regulariser_gradient():
    rng = np.random.default_rng(0)
    p = init_mlp((3, 4, 1), rng)
    x = rng.normal(size=(5, 3))
    tape = Tape()
    net = p.bind(tape)
    reg = T.mean(T.square(net(tape.const(x))))
    g_total = net.grads(tape.backward(policy_loss(tape.const(7.0), reg, None, 0.3, 0.0)))
    tape2 = Tape()
    net2 = p.bind(tape2)
    g_reg = net2.grads(tape2.backward(T.mean(T.square(net2(tape2.const(x))))))
    for k in g_total:
        np.testing.assert_allclose(g_total[k], 0.3 * g_reg[k], rtol=1e-12, atol=1e-15)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_actor_update_clips_and_rejects_non_finite():
    rng = np.random.default_rng(0)
    p = init_mlp((3, 4, 1), rng)
    tape = Tape()
    net = p.bind(tape)
    loss = T.sum(net(tape.const(100 * rng.normal(size=(8, 3)))))
    step = actor_update(p, net, loss, AdamWState.for_params(p), 1e-3, 1.0, iteration=4)
    assert step.grad_norm > 1.0 and abs(step.clipped_norm - 1.0) < 1e-9

    tape = Tape()
    net = p.bind(tape)
    bad = T.sum(net(tape.const(np.full((1, 3), np.inf))))
    with pytest.raises((TrainingError, T.TapeError, ValueError), match="4|non-finite|inf"):
        actor_update(p, net, bad, AdamWState.for_params(p), 1e-3, 1.0, iteration=4)


def test_zero_learning_rate_freezes_actor():
    rng = np.random.default_rng(0)
    p = init_mlp((3, 4, 1), rng)
    before = p.copy()
    tape = Tape()
    net = p.bind(tape)
    actor_update(p, net, T.sum(net(tape.const(rng.normal(size=(4, 3))))), AdamWState.for_params(p), 0.0, 1.0)
    assert np.array_equal(before.flat, p.flat)


def test_gaussian_actor_small_sigma_is_deterministic():
    rng = np.random.default_rng(0)
    g = GaussianActor.create(4, 2, (16,), rng, init_log_std=-10.0)
    s = rng.normal(size=(6, 4))
    outs = []
    for _ in range(3):
        tape = Tape()
        outs.append(g.act(g.params.bind(tape), tape.const(s), rng.normal(size=(6, 2))).action.value)
    assert np.ptp(np.stack(outs), axis=0).max() < 1e-3
    assert np.all(np.abs(outs[0]) < 1.0)


def test_running_norm_enters_rollout_as_constant():
    rng = np.random.default_rng(0)
    actor = _actor(rng)
    norm = RunningNorm(4)
    norm.update(rng.normal(size=(100, 4)))
    tape = Tape()
    seg = rollout_segment(actor, actor.params.bind(tape), BatchedEnv("point-mass-reach", 2), norm, 2,
                          actor.noise_block(rng, 2, 2))
    np.testing.assert_allclose(seg.obs[0].value, norm.apply(seg.raw_obs[0]))
