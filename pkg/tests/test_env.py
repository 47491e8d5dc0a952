import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recall_traces.env import (DOWN, LEFT, RIGHT, UP, ChainMDP, FourRoomEnv, PointMassEnv,
                               enumerate_trajectories)

GOLDEN_11 = """\
###########
#S...#....#
#.........#
#....#....#
#....#....#
##.####.###
#....#....#
#.........#
#....#....#
#....#...G#
###########"""


def test_layout_golden_11():
    assert FourRoomEnv(11).ascii() == GOLDEN_11


@pytest.mark.parametrize("size", [11, 13, 15, 19])
def test_layout_invariants(size):
    env = FourRoomEnv(size)
    assert env.is_open(env.start) and env.is_open(env.goal)
    mid = size // 2
    # exactly one doorway per wall segment
    assert sum(env.is_open((r, mid)) for r in range(1, mid)) == 1
    assert sum(env.is_open((r, mid)) for r in range(mid + 1, size - 1)) == 1
    assert sum(env.is_open((mid, c)) for c in range(1, mid)) == 1
    assert sum(env.is_open((mid, c)) for c in range(mid + 1, size - 1)) == 1
    assert env.max_steps == 4 * size * size


@pytest.mark.parametrize("size", [11, 15, 19])
def test_every_cell_reaches_goal_by_bfs(size):
    env = FourRoomEnv(size)
    # forward BFS from every cell using the step dynamics
    seen = {env.start}
    frontier = [env.start]
    while frontier:
        c = frontier.pop()
        for a in range(4):
            n = env.move(c, a)
            if n not in seen:
                seen.add(n)
                frontier.append(n)
    assert seen == set(env.cells)


def test_bad_size_rejected():
    for size in (6, 8, 5):
        with pytest.raises(ValueError):
            FourRoomEnv(size)


def test_reset_returns_start_for_any_seed():
    env = FourRoomEnv(11)
    for seed in (0, 1, 2**64 - 1):
        assert env.reset(seed=seed) == (1, 1)


def test_step_into_goal_rewards_and_terminates():
    env = FourRoomEnv(11)
    env.reset(0)
    env.state = (env.goal[0] - 1, env.goal[1])
    tr = env.step(DOWN)
    assert tr.r == 1.0 and tr.done and tr.s_next == env.goal


def test_step_into_wall_stays():
    env = FourRoomEnv(11)
    env.reset(0)
    tr = env.step(UP)
    assert tr.s_next == (1, 1) and tr.r == 0.0 and not tr.done
    tr = env.step(LEFT)
    assert tr.s_next == (1, 1)


def test_step_cap_ends_episode():
    env = FourRoomEnv(11, max_steps=3)
    env.reset(0)
    dones = [env.step(UP).done for _ in range(3)]
    assert dones == [False, False, True]


@pytest.mark.parametrize("bad", [4, -1, 1.5, "up", True])
def test_invalid_action_rejected(bad):
    env = FourRoomEnv(11)
    env.reset(0)
    with pytest.raises(ValueError):
        env.step(bad)


def test_slip_is_seeded():
    a = FourRoomEnv(11, slip=0.5)
    b = FourRoomEnv(11, slip=0.5)
    a.reset(7)
    b.reset(7)
    ta = [a.step(RIGHT).s_next for _ in range(50)]
    tb = [b.step(RIGHT).s_next for _ in range(50)]
    assert ta == tb


def test_backward_reachability_brute_force():
    env = FourRoomEnv(11)
    for c in env.cells:
        if c == env.start:
            continue
        pairs = [(s, a) for s in env.cells if not env.is_terminal(s) for a in range(4)
                 if env.move(s, a) == c]
        assert pairs, c
        # predecessors() agrees with the brute-force set
        assert sorted(pairs) == sorted((s, a) for a in range(4) for s in env.predecessors(c, a))


def test_encode_one_hot():
    env = FourRoomEnv(11)
    x = env.encode(env.cells)
    assert x.shape == (env.n_cells, env.n_cells)
    np.testing.assert_array_equal(x, np.eye(env.n_cells))
    np.testing.assert_array_equal(env.encode(env.goal), x[env.index(env.goal)])


def test_pointmass_noiseless_step():
    env = PointMassEnv(noise_std=0.0)
    env.reset(0)
    env.state = np.zeros(2)
    tr = env.step(np.array([0.1, 0.0]))
    np.testing.assert_allclose(tr.s_next, [0.1, 0.0], atol=1e-15)


def test_pointmass_reset_deterministic():
    a, b = PointMassEnv(), PointMassEnv()
    np.testing.assert_array_equal(a.reset(0), b.reset(0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=40),
       st.integers(0, 2**32 - 1))
def test_pointmass_stays_in_box(actions, seed):
    env = PointMassEnv(noise_std=0.3)
    env.reset(seed)
    for a in actions:
        tr = env.step(np.array(a))
        assert np.all(np.abs(tr.s_next) <= env.bound)
        assert np.linalg.norm(tr.a) <= env.max_step + 1e-12
        if tr.done:
            break


def test_pointmass_terminates_at_goal():
    env = PointMassEnv()
    env.reset(0)
    env.state = env.goal - np.array([0.03, 0.0])
    tr = env.step(np.array([0.03, 0.0]))
    assert tr.done and tr.r == 1.0


def test_chain_rows_validated():
    P = np.array([[[0.5, 0.49]], [[0.0, 1.0]]])
    with pytest.raises(ValueError):
        ChainMDP(P, np.zeros((2, 1)), horizon=2)


def test_chain_reset_state_zero():
    chain = ChainMDP.slippery_chain()
    assert chain.reset(3) == 0


def test_enumerate_deterministic_one_action():
    P = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
    chain = ChainMDP(P, np.zeros((2, 1)), horizon=2)
    out = enumerate_trajectories(chain, np.ones((2, 1)))
    assert len(out) == 1 and out[0][1] == 1.0
    assert out[0][0].states == (0, 1, 0)


def test_enumerate_uniform_two_actions_horizon_3():
    # deterministic dynamics: action a moves to state a
    P = np.zeros((2, 2, 2))
    P[:, 0, 0] = 1.0
    P[:, 1, 1] = 1.0
    chain = ChainMDP(P, np.zeros((2, 2)), horizon=3)
    out = enumerate_trajectories(chain, np.full((2, 2), 0.5))
    assert len(out) == 8
    assert all(p == pytest.approx(1 / 8, abs=1e-15) for _, p, _ in out)


def test_enumerate_probabilities_sum_to_one_and_returns_discounted():
    rng = np.random.default_rng(0)
    chain = ChainMDP.random(3, 2, 4, rng, gamma=0.9)
    policy = rng.dirichlet(np.ones(2), size=3)
    out = enumerate_trajectories(chain, policy)
    assert abs(sum(p for _, p, _ in out) - 1.0) < 1e-9
    for traj, _, ret in out:
        expect = sum(chain.R[s, a] * 0.9 ** t
                     for t, (s, a) in enumerate(zip(traj.states, traj.actions)))
        assert ret == pytest.approx(expect, abs=1e-12)


def test_enumerate_matches_monte_carlo():
    rng = np.random.default_rng(1)
    chain = ChainMDP.random(3, 2, 3, rng)
    policy = rng.dirichlet(np.ones(2), size=3)
    exact = {(t.states, t.actions): p for t, p, _ in enumerate_trajectories(chain, policy)}
    n = 20000
    counts = {}
    for i in range(n):
        s = chain.reset(seed=i)
        states, actions = [s], []
        act_rng = np.random.default_rng([i, 1])
        for _ in range(chain.horizon):
            a = int(act_rng.choice(2, p=policy[s]))
            tr = chain.step(a)
            actions.append(a)
            states.append(tr.s_next)
            s = tr.s_next
        k = (tuple(states), tuple(actions))
        counts[k] = counts.get(k, 0) + 1
    assert set(counts) <= set(exact)
    for k, p in exact.items():
        se = math.sqrt(p * (1 - p) / n)
        assert abs(counts.get(k, 0) / n - p) <= 3 * se


def test_enumerate_guard():
    chain = ChainMDP.random(4, 3, 8, np.random.default_rng(0), sparsity=0.0)
    with pytest.raises(ValueError):
        enumerate_trajectories(chain, np.full((4, 3), 1 / 3), limit=1000)
