import io

import numpy as np
import pytest

from oreo.envs import (
    DigitChain,
    EnvSpec,
    balance_dataset,
    full_coverage_dataset,
    generate_offline_dataset,
    make_env,
    make_reference,
)
from oreo.errors import ConfigError, ResourceError
from oreo.mdp import State, replay, reachable_states
from oreo.oracle import soft_backward_induction

from _support import shipped_envs, tv


def leaves(mdp):
    return full_coverage_dataset(mdp).trajectories


def test_digit_chain_example():
    mdp = DigitChain(5, 1, [(2, 4)])
    rewarded = [t.actions for t in leaves(mdp) if t.total_reward == 1.0]
    assert rewarded == [[(2 + 4) % 5]] == [[1]]


@pytest.mark.parametrize("vocab, depth", [(3, 1), (4, 2), (5, 2), (3, 3)])
def test_digit_chain_rewarded_leaf_is_running_sum(vocab, depth):
    mdp = make_env(EnvSpec(family="digit-chain", vocab=vocab, depth=depth, instances=vocab * vocab))
    for s0 in mdp.initial_states():
        a, b = s0.tokens
        expected = [(a + k * b) % vocab for k in range(1, depth + 1)]  # hand-written oracle
        found = [t.actions for t in leaves(mdp) if t.initial_state == s0 and t.total_reward == 1.0]
        assert found == [expected]


def test_digit_chain_multi_token_steps_check_last_token():
    mdp = make_env(EnvSpec(family="digit-chain", vocab=3, depth=2, step_len=2, instances=9))
    s0 = mdp.initial_states()[4]
    a, b = s0.tokens
    good = [t for t in leaves(mdp) if t.initial_state == s0 and t.total_reward == 1.0]
    assert len(good) == 9  # free first token in each of the two steps
    for t in good:
        assert t.actions[1] == (a + b) % 3 and t.actions[3] == (a + 2 * b) % 3
        assert t.step_segments() == [(0, 2), (2, 4)]


@pytest.mark.parametrize("bad", [dict(depth=0), dict(vocab=1), dict(instances=0)])
def test_digit_chain_invalid(bad):
    with pytest.raises(ConfigError):
        make_env(EnvSpec(family="digit-chain", **{"vocab": 5, "depth": 2, **bad}))


def test_keyhole_leaf_count():
    mdp = make_env(EnvSpec(family="keyhole", vocab=2, depth=3, key_pos=0, key_token=1))
    ls = leaves(mdp)
    assert len(ls) == 8
    assert sum(t.total_reward for t in ls) == 4
    assert all((t.actions[0] == 1) == (t.total_reward == 1) for t in ls)


def test_keyhole_oracle_concentrates_on_key():
    mdp = make_env(EnvSpec(family="keyhole", vocab=2, depth=3))
    ref = make_reference(mdp)
    pi = soft_backward_induction(mdp, ref, 0.05).pi_star
    s0 = mdp.initial_states()[0]
    assert pi.prob(s0, mdp.key_token(s0.tokens)) >= 0.99


@pytest.mark.parametrize("beta", [0.05, 0.5, 3.0])
@pytest.mark.parametrize("key_pos", [0, 1, 2])
def test_keyhole_non_key_positions_match_reference(beta, key_pos):
    mdp = make_env(EnvSpec(family="keyhole", vocab=3, depth=3, key_pos=key_pos))
    ref = make_reference(mdp)
    pi = soft_backward_induction(mdp, ref, beta).pi_star
    for s in reachable_states(mdp):
        if not s.terminal and len(s.tokens) - 1 != key_pos:
            assert tv(pi, ref, s) <= 1e-6


def test_keyhole_invalid():
    with pytest.raises(ConfigError):
        make_env(EnvSpec(family="keyhole", vocab=2, depth=3, key_pos=3))


def test_corridor_shortest_path():
    mdp = make_env(EnvSpec(family="gridworld", width=3, height=1, goal=2, starts=[0], horizon=4))
    good = [t for t in leaves(mdp) if t.total_reward == 1.0]
    assert min(good, key=len).actions == [3, 3]


def test_wall_bump_repeats_cell():
    mdp = make_env(EnvSpec(family="gridworld", width=2, height=2, goal=3, starts=[0], walls=[1], horizon=4))
    s0 = mdp.initial_states()[0]
    s1 = mdp.transition(s0, 3)  # right into the wall
    assert s1.tokens[-1] == mdp.obs_token(0)
    s2 = mdp.transition(s0, 0)  # up, off the grid
    assert s2.tokens[-1] == mdp.obs_token(0)


def test_horizon_ends_without_reward():
    mdp = make_env(EnvSpec(family="gridworld", width=3, height=1, goal=2, starts=[0], horizon=2))
    traj = replay(mdp, mdp.initial_states()[0], [2, 2])
    assert traj.final_state.terminal and traj.total_reward == 0.0


def test_unreachable_goal():
    with pytest.raises(ConfigError):
        make_env(EnvSpec(family="gridworld", width=3, height=1, goal=2, starts=[0], walls=[1], horizon=5))
    with pytest.raises(ConfigError):
        make_env(EnvSpec(family="gridworld", width=3, height=1, goal=2, starts=[0], horizon=1))


@pytest.mark.parametrize("seed", range(3))
def test_gridworld_observation_decodes_position(seed):
    mdp = make_env(EnvSpec(family="gridworld", width=3, height=3, goal=8, starts=[0, 6], walls=[4], horizon=6))
    ds = generate_offline_dataset(mdp, make_reference(mdp), 20, seed)
    for traj in ds:
        cell = mdp.decode(traj.initial_state.tokens[-1])
        for t, (s, a, _) in enumerate(traj.steps):
            cell = mdp.move(cell, a)
            assert mdp.position(traj.next_state(t)) == cell


@pytest.mark.parametrize("mdp", shipped_envs(), ids=lambda m: m.env_id)
def test_generated_data_validates_and_labels_recompute(mdp):
    ds = generate_offline_dataset(mdp, make_reference(mdp, 0.5, 1), 10, seed=7)
    assert len(ds) == 10 * len(mdp.initial_states())
    ds.validate(mdp)
    for traj in ds:
        again = replay(mdp, traj.initial_state, traj.actions)
        assert again.total_reward == traj.total_reward
        assert traj.total_reward in (0.0, 1.0)


def test_generation_is_deterministic():
    mdp = make_env(EnvSpec(family="digit-chain", vocab=4, depth=2, instances=5))
    ref = make_reference(mdp)
    texts = []
    for _ in range(2):
        buf = io.StringIO()
        generate_offline_dataset(mdp, ref, 10, seed=11).to_jsonl(buf)
        texts.append(buf.getvalue())
    assert texts[0] == texts[1]
    other = io.StringIO()
    generate_offline_dataset(mdp, ref, 10, seed=12).to_jsonl(other)
    assert other.getvalue() != texts[0]


def test_oracle_behavior_mostly_positive():
    mdp = make_env(EnvSpec(family="keyhole", vocab=2, depth=3))
    pi = soft_backward_induction(mdp, make_reference(mdp), 0.02).pi_star
    ds = generate_offline_dataset(mdp, pi, 1000, seed=0)
    assert ds.positive_fraction > 0.99


def test_balance_dataset_caps_per_task():
    mdp = make_env(EnvSpec(family="keyhole", vocab=2, depth=3, instances=2))
    ds = generate_offline_dataset(mdp, make_reference(mdp), 30, seed=0)
    out = balance_dataset(ds, seed=0, max_pos=3, max_neg=4)
    for group in out.by_task().values():
        pos = sum(t.total_reward > 0 for t in group)
        assert 1 <= pos <= 3 and len(group) - pos <= 4


def test_state_cap_enforced():
    with pytest.raises(ResourceError):
        make_env(EnvSpec(family="keyhole", vocab=4, depth=6, state_cap=100))


def test_spec_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        EnvSpec.from_dict({"family": "keyhole", "colour": 3})
    with pytest.raises(ConfigError):
        make_env(EnvSpec(family="maze"))


def test_initial_states_are_prompts():
    mdp = make_env(EnvSpec(family="keyhole", vocab=3, depth=2, instances=3))
    assert mdp.initial_states() == [State((0,)), State((1,)), State((2,))]
