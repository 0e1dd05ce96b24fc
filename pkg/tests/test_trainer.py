import math

import numpy as np
import pytest

from oreo.envs import EnvSpec, TreeMdp, full_coverage_dataset, generate_offline_dataset, make_env, make_reference, single_step_mdp
from oreo.errors import ConfigError, TrainingError, UnsupportedSupportError
from oreo.mdp import OfflineDataset, PolicyTable, ValueTable, kl_to_reference, reachable_states, replay
from oreo.oracle import bellman_residual, soft_backward_induction
from oreo.trainer import (
    TrainConfig,
    compile_batch,
    consistency_residuals,
    initial_value_table,
    oreo_objective,
    policy_loss_response,
    policy_loss_step,
    policy_loss_token,
    reg_loss,
    response_residual,
    run_iterations,
    step_value_loss,
    train,
    value_loss,
    value_residuals,
    afterstate_value_loss,
)

from _support import GRAD_KINDS, all_trajectories, gradient_case, random_tables, shipped_envs, tv


@pytest.fixture(scope="module")
def m1():
    mdp = single_step_mdp((1.0, 0.0))
    ref = make_reference(mdp)
    return mdp, ref, soft_backward_induction(mdp, ref, 1.0)


def oracle_of(mdp, beta=0.5, perturb=0.7):
    ref = make_reference(mdp, perturb, 3)
    return ref, soft_backward_induction(mdp, ref, beta)


# --- loss examples ----------------------------------------------------------------------

def test_value_loss_examples(m1):
    mdp, ref, res = m1
    s0 = mdp.initial_states()[0]
    win = replay(mdp, s0, [0])
    assert value_loss(win, ValueTable([(0,)], [1.0]), ref, ref, 1.0) == 0.0
    assert value_loss(win, ValueTable([(0,)], [0.0]), ref, ref, 1.0) == 1.0
    for a in (0, 1):
        assert value_loss(replay(mdp, s0, [a]), res.v_star, res.pi_star, ref, 1.0) <= 1e-18


def test_policy_loss_zero_reward_reference():
    mdp = make_env(EnvSpec(family="keyhole", vocab=2, depth=3))
    flat = TreeMdp(2, [(0,)], {s.tokens: (0, 1) for s in reachable_states(mdp) if not s.terminal}, {})
    ref = make_reference(flat)
    zeros = initial_value_table(flat, False)
    for traj in all_trajectories(flat):
        assert policy_loss_token(traj, zeros, ref, ref, 0.5, 0.1) == 0.0
        assert policy_loss_response(traj, zeros, ref, ref, 0.5, 0.1) == 0.0
        assert policy_loss_step(traj, zeros, ref, ref, 0.5, 0.1) == 0.0


@pytest.mark.parametrize("mdp", shipped_envs(), ids=lambda m: m.env_id)
def test_losses_vanish_at_oracle(mdp):
    ref, res = oracle_of(mdp)
    for traj in all_trajectories(mdp):
        args = (traj, res.v_star, res.pi_star, ref, 0.5)
        assert value_loss(*args) <= 1e-18
        assert policy_loss_token(*args, 0.0) <= 1e-18
        assert policy_loss_step(*args, 0.0) <= 1e-18
        assert policy_loss_response(*args, 0.0) <= 1e-18


def test_regularizer_at_oracle_is_alpha_mean_kl():
    mdp = make_env(EnvSpec(family="keyhole", vocab=3, depth=3))
    ref, res = oracle_of(mdp)
    for traj in all_trajectories(mdp)[:10]:
        mean_kl = np.mean([kl_to_reference(res.pi_star, ref, s) for s in traj.states])
        got = policy_loss_token(traj, res.v_star, res.pi_star, ref, 0.5, 0.3)
        assert got == pytest.approx(0.3 * mean_kl, abs=1e-15)


def test_step_variant_degenerates_to_token():
    mdp = make_env(EnvSpec(family="digit-chain", vocab=3, depth=3, instances=2))
    rng = np.random.default_rng(0)
    ref, pi, value = random_tables(mdp, rng)
    for traj in all_trajectories(mdp):
        a = policy_loss_step(traj, value, pi, ref, 0.7, 0.2)
        b = policy_loss_token(traj, value, pi, ref, 0.7, 0.2)
        assert abs(a - b) <= 1e-12


def test_step_residual_sums_token_log_ratios():
    mdp = make_env(EnvSpec(family="keyhole", vocab=2, depth=4, step_len=2))
    rng = np.random.default_rng(1)
    ref, pi, value = random_tables(mdp, rng)
    traj = all_trajectories(mdp)[5]
    from oreo.mdp import log_ratio, step_log_prob
    R = traj.total_reward
    s0, s2 = traj.steps[0].state, traj.steps[2].state
    lr = [log_ratio(pi, ref, s, a) for s, a, _ in traj.steps]
    step_lr0 = step_log_prob(pi, mdp, s0, traj.actions[:2]) - step_log_prob(ref, mdp, s0, traj.actions[:2])
    assert step_lr0 == pytest.approx(lr[0] + lr[1], abs=1e-12)
    r0 = value[s0] - R + 0.5 * (lr[0] + lr[1]) + 0.5 * (lr[2] + lr[3])
    r1 = value[s2] - R + 0.5 * (lr[2] + lr[3])
    assert policy_loss_step(traj, value, pi, ref, 0.5, 0.0) == pytest.approx((r0 ** 2 + r1 ** 2) / 2, abs=1e-12)


# --- identities -------------------------------------------------------------------------

@pytest.mark.parametrize("mdp", shipped_envs(), ids=lambda m: m.env_id)
def test_dpo_link_and_telescoping(mdp):
    rng = np.random.default_rng(3)
    ref, pi, value = random_tables(mdp, rng)
    for traj in all_trajectories(mdp):
        res = value_residuals(traj, value, pi, ref, 0.8)
        assert response_residual(traj, value, pi, ref, 0.8) == res[0]
        per_step = consistency_residuals(traj, value, pi, ref, 0.8)
        for t in range(len(traj)):
            assert abs(sum(per_step[t:]) - res[t]) <= 1e-12


def test_support_hole_raises():
    mdp = single_step_mdp((1.0, 0.0))
    holey = PolicyTable([(0,)], np.zeros((1, 2)), np.array([[True, False]]))
    pi = make_reference(mdp)
    traj = replay(mdp, mdp.initial_states()[0], [1])
    with pytest.raises(UnsupportedSupportError):
        value_loss(traj, ValueTable([(0,)], [0.0]), pi, holey, 1.0)
    with pytest.raises(UnsupportedSupportError):
        compile_batch([traj], pi, holey, ValueTable([(0,)], [0.0]))


# --- batch path -------------------------------------------------------------------------

@pytest.mark.parametrize("variant", ["token", "step", "response"])
@pytest.mark.parametrize("mdp", shipped_envs(), ids=lambda m: m.env_id)
def test_batch_losses_match_reference(mdp, variant):
    rng = np.random.default_rng(5)
    ref, pi, value = random_tables(mdp, rng)
    trajs = all_trajectories(mdp)[:12]
    after = mdp.has_observations
    batch = compile_batch(trajs, pi, ref, value, mdp, after)
    obj = oreo_objective(batch, pi.logits, pi.legal, value.values, 0.6, 0.2, variant)
    vl = step_value_loss if variant == "step" else value_loss
    assert obj.value_loss == pytest.approx(np.mean([vl(t, value, pi, ref, 0.6) for t in trajs]), abs=1e-12)
    pl = {"token": policy_loss_token, "step": policy_loss_step, "response": policy_loss_response}[variant]
    assert obj.policy_loss == pytest.approx(np.mean([pl(t, value, pi, ref, 0.6, 0.2) for t in trajs]), abs=1e-12)
    if after:
        expected = np.mean([afterstate_value_loss(t, value, pi, ref, 0.6, mdp) for t in trajs])
        assert obj.afterstate_loss == pytest.approx(expected, abs=1e-12)
    assert obj.mean_kl == pytest.approx(
        np.mean([kl_to_reference(pi, ref, s) for t in trajs for s in t.states]), abs=1e-12)


@pytest.mark.parametrize("kind", GRAD_KINDS)
@pytest.mark.parametrize("seed", range(6))
def test_gradients_match_finite_differences(kind, seed):
    assert gradient_case(kind, 1000 + seed) <= 1.0


def test_stop_gradient_is_not_the_full_gradient():
    # differentiating through the future sum would give a different answer
    from _support import fd_grad
    mdp = make_env(EnvSpec(family="keyhole", vocab=2, depth=3))
    rng = np.random.default_rng(2)
    ref, pi, value = random_tables(mdp, rng)
    traj = all_trajectories(mdp)[3]
    batch = compile_batch([traj], pi, ref, value)
    obj = oreo_objective(batch, pi.logits, pi.legal, value.values, 1.0, 0.0, "token")
    full = fd_grad(lambda: policy_loss_token(traj, value, pi, ref, 1.0, 0.0), pi.logits)
    assert np.max(np.abs(full - obj.grad_logits)) > 1e-3


def test_zero_loss_gradients_vanish():
    mdp = make_env(EnvSpec(family="keyhole", vocab=2, depth=3))
    ref, res = oracle_of(mdp)
    pi = PolicyTable(res.pi_star.keys, res.pi_star.logits.copy(), res.pi_star.legal)
    value = ValueTable(res.v_star.keys, res.v_star.values.copy())
    batch = compile_batch(all_trajectories(mdp), pi, ref, value)
    for variant in ("token", "step", "response"):
        obj = oreo_objective(batch, pi.logits, pi.legal, value.values, 0.5, 0.0, variant)
        assert np.max(np.abs(obj.grad_value)) <= 1e-14
        assert np.max(np.abs(obj.grad_logits)) <= 1e-14


# --- training loop ----------------------------------------------------------------------

def test_zero_loss_fixed_point():
    mdp = make_env(EnvSpec(family="digit-chain", vocab=3, depth=2, instances=3))
    ref, res = oracle_of(mdp)
    ds = full_coverage_dataset(mdp)
    model = train(ds, mdp, ref, TrainConfig(beta=0.5, alpha=0.0, epochs=200, log_every=0),
                  init_policy=res.pi_star, init_value=res.v_star)
    assert np.max(np.abs(model.policy.logits - res.pi_star.logits)) <= 1e-9
    assert np.max(np.abs(model.value.values - res.v_star.values)) <= 1e-9


def test_all_negative_data_leaves_reference():
    mdp = make_env(EnvSpec(family="keyhole", vocab=2, depth=3))
    ref = make_reference(mdp, 0.4, 0)
    ds = OfflineDataset([t for t in all_trajectories(mdp) if t.total_reward == 0])
    model = train(ds, mdp, ref, TrainConfig(epochs=300, log_every=0))
    for s in reachable_states(mdp):
        if not s.terminal:
            assert tv(model.policy, ref, s) <= 1e-6


def test_training_converges_on_keyhole():
    mdp = make_env(EnvSpec(family="keyhole", vocab=2, depth=3))
    ref = make_reference(mdp)
    oracle = soft_backward_induction(mdp, ref, 0.5)
    model = train(full_coverage_dataset(mdp), mdp, ref, TrainConfig(alpha=0.0, epochs=4000, log_every=0))
    assert max(tv(model.policy, oracle.pi_star, s) for s in reachable_states(mdp) if not s.terminal) < 1e-2


def test_kl_regularizer_biases_the_fixed_point():
    # with alpha > 0 training settles away from the oracle: the policy is close, the residual is not zero
    mdp = make_env(EnvSpec(family="keyhole", vocab=2, depth=3))
    ref = make_reference(mdp)
    oracle = soft_backward_induction(mdp, ref, 0.5)
    states = reachable_states(mdp)
    resid = []
    for epochs in (5000, 10000):
        model = train(full_coverage_dataset(mdp), mdp, ref, TrainConfig(alpha=0.01, epochs=epochs, log_every=0))
        resid.append(bellman_residual(model.policy, model.value, mdp, ref, 0.5, states))
        assert max(tv(model.policy, oracle.pi_star, s) for s in states if not s.terminal) < 1e-2
    assert resid[0] == pytest.approx(resid[1], abs=1e-9)
    assert 1e-3 < resid[1] < 1e-2


def test_metrics_history_and_determinism():
    mdp = make_env(EnvSpec(family="keyhole", vocab=2, depth=3, instances=2))
    ref = make_reference(mdp)
    ds = generate_offline_dataset(mdp, ref, 8, seed=1)
    cfg = TrainConfig(epochs=250, batch_size=5, log_every=50, seed=4)
    a, b = train(ds, mdp, ref, cfg), train(ds, mdp, ref, cfg)
    assert [r.to_json() for r in a.history] == [r.to_json() for r in b.history]
    steps = [r.step for r in a.history]
    assert steps == sorted(steps) and steps[-1] == 250 * math.ceil(len(ds) / 5)
    for r in a.history:
        assert all(np.isfinite([r.value_loss, r.policy_loss, r.mean_kl, r.max_residual]))


def test_optimizer_and_update_modes_run():
    mdp = make_env(EnvSpec(family="keyhole", vocab=2, depth=3))
    ref = make_reference(mdp)
    ds = full_coverage_dataset(mdp)
    first = train(ds, mdp, ref, TrainConfig(epochs=1, log_every=0)).history[-1].value_loss
    for cfg in (TrainConfig(epochs=300, optimizer="adam", policy_lr=0.02, value_lr=0.05, log_every=0),
                TrainConfig(epochs=300, update="alternating", log_every=0)):
        assert train(ds, mdp, ref, cfg).history[-1].value_loss < first


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_is_reported():
    mdp = make_env(EnvSpec(family="keyhole", vocab=2, depth=3))
    ref = make_reference(mdp)
    with pytest.raises(TrainingError, match="step"):
        train(full_coverage_dataset(mdp), mdp, ref, TrainConfig(epochs=200, value_lr=1e6, policy_lr=1e6))


@pytest.mark.parametrize("bad", [dict(beta=0.0), dict(alpha=-1.0), dict(epochs=0), dict(variant="chunk"),
                                 dict(optimizer="rmsprop"), dict(batch_size=0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_empty_dataset():
    mdp = single_step_mdp()
    with pytest.raises(TrainingError):
        train(OfflineDataset([]), mdp, make_reference(mdp), TrainConfig())


def test_afterstate_rows_learn_env_values():
    mdp = make_env(EnvSpec(family="gridworld", width=3, height=1, goal=2, starts=[0], horizon=3))
    ref = make_reference(mdp)
    oracle = soft_backward_induction(mdp, ref, 0.5)
    model = train(full_coverage_dataset(mdp), mdp, ref, TrainConfig(alpha=0.0, epochs=3000, log_every=0,
                                                                    policy_lr=1.0, value_lr=2.5))
    for s in reachable_states(mdp):
        if not s.terminal:
            for a in mdp.legal_actions(s):
                key = mdp.afterstate_key(s, a)
                assert model.value.lookup(key) == pytest.approx(oracle.v_star.lookup(key), abs=1e-3)


def test_run_iterations_round_one_equals_train():
    mdp = make_env(EnvSpec(family="digit-chain", vocab=3, depth=2, instances=4))
    ref = make_reference(mdp)
    cfg = TrainConfig(epochs=50, log_every=10, seed=2)
    seen = []
    models = run_iterations(mdp, ref, cfg, 1, 5, on_round=lambda k, ds, m: seen.append(ds))
    direct = train(seen[0], mdp, ref, cfg)
    assert len(models) == 1
    assert np.allclose(models[0].policy.logits, direct.policy.logits)
    again = []
    run_iterations(mdp, ref, cfg, 2, 5, on_round=lambda k, ds, m: again.append(ds))
    assert [t.actions for t in again[0]] == [t.actions for t in seen[0]]


def test_run_iterations_rejects_zero_rounds():
    mdp = single_step_mdp()
    with pytest.raises(ConfigError):
        run_iterations(mdp, make_reference(mdp), TrainConfig(), 0)
