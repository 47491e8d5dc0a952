import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recall_traces.backtrack import (BacktrackModel, Normalizer, backtrack_loss, generate_trace,
                                     random_backtrack_model, train_backtrack)
from recall_traces.buffer import ReplayBuffer, Trajectory
from recall_traces.env import RIGHT, ChainMDP, FourRoomEnv, PointMassEnv
from recall_traces.verify import GRADIENT_CASES


def grid_traj(env, cells, actions):
    nxt = [env.move(c, a) for c, a in zip(cells, actions)]
    return Trajectory(list(cells), list(actions), [0.0] * len(cells), nxt,
                      [False] * len(cells))


def test_uniform_heads_loss():
    env = FourRoomEnv(11)
    model = BacktrackModel(env, zero_last=True)
    c = (2, 2)
    t = grid_traj(env, [c], [RIGHT])
    # (2, 3) is interior: all 5 candidate slots are open
    n_open = sum(x is not None for x in env.candidate_predecessors(env.move(c, RIGHT)))
    assert n_open == 5
    assert backtrack_loss(model, t) == pytest.approx(math.log(1 / 4) + math.log(1 / 5), abs=1e-12)


def test_uniform_heads_loss_masks_walls():
    env = FourRoomEnv(11)
    model = BacktrackModel(env, zero_last=True)
    t = grid_traj(env, [(1, 1)], [0])  # bump into the top wall, stay at the corner
    # corner (1, 1): stay, down and right are the open candidates
    assert backtrack_loss(model, t) == pytest.approx(math.log(1 / 4) + math.log(1 / 3), abs=1e-12)


def test_continuous_gaussian_at_mean():
    env = PointMassEnv()
    model = BacktrackModel(env, hidden=8, seed=0)
    for net in (model.action_predictor, model.state_predictor):
        net.weights[-1][...] = 0.0
        net.biases[-1][...] = 0.0
    # action mean 0 and Delta-s mean 0, unit variances, normalizers at identity
    t = Trajectory([np.zeros(2)], [np.zeros(2)], [0.0], [np.zeros(2)], [False])
    half_log_2pi = 0.5 * math.log(2 * math.pi)
    assert backtrack_loss(model, t) == pytest.approx(2 * (-2 * half_log_2pi), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8))
def test_loss_equals_head_sum(seed, n):
    env = FourRoomEnv(11)
    rng = np.random.default_rng(seed)
    model = BacktrackModel(env, hidden=16, seed=seed % 1000)
    cells = [env.cells[i] for i in rng.integers(env.n_cells, size=n)]
    acts = rng.integers(4, size=n).tolist()
    t = grid_traj(env, cells, acts)
    la, ls = model.head_log_probs(t.states, t.actions, t.next_states)
    # independent recomputation of each head
    from recall_traces.nn import log_softmax
    x = env.encode(t.next_states)
    la2 = log_softmax(model.action_predictor.forward(x))[np.arange(n), acts]
    ls2 = []
    for s, a, s2 in zip(t.states, acts, t.next_states):
        cands = env.candidate_predecessors(s2)
        inp = np.concatenate([env.encode(s2), np.eye(4)[a]])
        logits = model.state_predictor.forward(inp)
        logits = np.array([l if c is not None else -np.inf for l, c in zip(logits, cands)])
        ls2.append(log_softmax(logits)[cands.index(s)])
    np.testing.assert_allclose(la, la2, atol=1e-12)
    np.testing.assert_allclose(ls, ls2, atol=1e-12)
    assert backtrack_loss(model, t) == pytest.approx(float(np.sum(la2) + np.sum(ls2)), abs=1e-9)


def test_state_rows_are_distributions():
    env = FourRoomEnv(11)
    model = BacktrackModel(env, hidden=16, seed=3)
    for c in env.cells[::7]:
        cands = env.candidate_predecessors(c)
        for a in range(4):
            ls = [model.head_log_probs([p], [a], [c])[1][0] for p in cands if p is not None]
            assert sum(math.exp(v) for v in ls) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("name", [n for n in GRADIENT_CASES if n.startswith("backtrack ")])
def test_backtrack_gradients_match_finite_differences(name):
    rng = np.random.default_rng(11)
    assert max(GRADIENT_CASES[name](rng) for _ in range(20)) <= 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-100, 100), min_size=3, max_size=3), min_size=2, max_size=20))
def test_normalizer_roundtrip(rows):
    x = np.array(rows)
    norm = Normalizer(3)
    norm.update(x)
    np.testing.assert_allclose(norm.unnormalize(norm.normalize(x)), x, atol=1e-9)


def test_normalizer_streaming_matches_batch():
    x = np.random.default_rng(0).normal(3.0, 2.0, size=(100, 2))
    a, b = Normalizer(2), Normalizer(2)
    a.update(x)
    for chunk in np.array_split(x, 7):
        b.update(chunk)
    np.testing.assert_allclose(a.mean, x.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(b.mean, a.mean, atol=1e-12)
    np.testing.assert_allclose(b.std, x.std(axis=0), atol=1e-12)


def _chain_data(n_traj=30, seed=0):
    # action 0 advances (s -> s+1 mod 3), action 1 stays
    P = np.zeros((3, 2, 3))
    for s in range(3):
        P[s, 0, (s + 1) % 3] = 1.0
        P[s, 1, s] = 1.0
    chain = ChainMDP(P, np.zeros((3, 2)), horizon=6)
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(k_traj=n_traj, k_pct=100)
    for i in range(n_traj):
        chain.reset(i)
        trs = [chain.step(int(rng.integers(2))) for _ in range(chain.horizon)]
        buf.add_trajectory(Trajectory.from_transitions(trs))
    return chain, buf


def test_deterministic_chain_reaches_entropy_bound():
    chain, buf = _chain_data()
    s, a, s2 = buf.filtered_transitions()
    # exact counting oracle: H = -mean log p_hat(s, a | s')
    joint = Counter(zip(s, a, s2))
    marg = Counter(s2)
    bound = -np.mean([math.log(joint[k] / marg[k[2]]) for k in zip(s, a, s2)])
    model = BacktrackModel(chain, hidden=32, seed=0, beta=0.1)
    train_backtrack(model, buf, 2000, np.random.default_rng(0))
    nll = -model.log_likelihood(s, a, s2) / len(s)
    assert nll >= bound - 1e-9
    assert nll - bound <= 1e-2


def test_steps_zero_is_noop():
    chain, buf = _chain_data(5)
    model = BacktrackModel(chain, hidden=8)
    before = model.action_predictor.get_flat().copy()
    assert train_backtrack(model, buf, 0, np.random.default_rng(0)) == []
    np.testing.assert_array_equal(model.action_predictor.get_flat(), before)


def test_empty_filtered_set_warns():
    chain, buf = _chain_data(3)
    model = BacktrackModel(chain, hidden=8)
    with pytest.warns(UserWarning):
        assert train_backtrack(model, buf, 5, np.random.default_rng(0), min_return=1.0) == []


def test_point_mass_loss_non_increasing_in_windows():
    env = FourRoomEnv(11)
    buf = ReplayBuffer(k_traj=1, k_pct=100)
    buf.add_trajectory(grid_traj(env, [(2, 2)], [3]))
    model = BacktrackModel(env, hidden=32, seed=0)
    hist = train_backtrack(model, buf, 300, np.random.default_rng(0))
    windows = [np.mean(hist[i:i + 50]) for i in range(0, 300, 50)]
    assert all(b <= a for a, b in zip(windows, windows[1:]))


def test_continuous_deterministic_trace():
    env = PointMassEnv()
    model = BacktrackModel(env, hidden=8, seed=0)
    for net in (model.action_predictor, model.state_predictor):
        net.weights[-1][...] = 0.0
    model.action_predictor.biases[-1][...] = [0.1, 0.0]
    model.state_predictor.biases[-1][...] = [-0.1, 0.0, -7.0, -7.0]
    tr = generate_trace(model, np.array([0.3, 0.0]), 2, np.random.default_rng(0), greedy=True)
    np.testing.assert_allclose(tr.states, [[0.1, 0.0], [0.2, 0.0]], atol=1e-12)
    np.testing.assert_allclose(tr.next_states, [[0.2, 0.0], [0.3, 0.0]], atol=1e-12)
    assert not tr.truncated


def test_continuous_trace_truncated_at_box():
    env = PointMassEnv()
    model = BacktrackModel(env, hidden=8, seed=0)
    model.state_predictor.weights[-1][...] = 0.0
    model.state_predictor.biases[-1][...] = [0.5, 0.0, -7.0, -7.0]
    tr = generate_trace(model, np.array([0.8, 0.0]), 3, np.random.default_rng(0), greedy=True)
    assert tr.truncated
    assert np.all(np.abs(np.array(tr.states)) <= env.bound)


def test_trace_structure():
    env = FourRoomEnv(11)
    model = BacktrackModel(env, hidden=16)
    rng = np.random.default_rng(0)
    for length in (1, 5):
        tr = generate_trace(model, env.goal, length, rng)
        assert tr.length == length and len(tr.actions) == length
        assert tr.next_states[-1] == env.goal and tr.seed_state == env.goal
        assert all(tr.next_states[i] == tr.states[i + 1] for i in range(length - 1))
    with pytest.raises(ValueError):
        generate_trace(model, env.goal, 0, rng)


def test_random_model_uniform_and_consistent():
    env = FourRoomEnv(11)
    model = random_backtrack_model(env, seed=3)
    np.testing.assert_allclose(model.action_probs(env.cells), 0.25, atol=1e-15)
    rng = np.random.default_rng(0)
    for _ in range(20):
        tr = generate_trace(model, env.goal, 5, rng)
        assert all(env.move(s, a) == s2
                   for s, a, s2 in zip(tr.states, tr.actions, tr.next_states))


def test_random_model_sampling_deterministic():
    env = FourRoomEnv(11)
    a = random_backtrack_model(env, seed=3)
    b = random_backtrack_model(env, seed=3)
    ta = generate_trace(a, env.goal, 5, np.random.default_rng(9))
    tb = generate_trace(b, env.goal, 5, np.random.default_rng(9))
    assert ta.to_json() == tb.to_json()


def test_learned_model_on_goal_neighbours():
    env = FourRoomEnv(11)
    buf = ReplayBuffer(k_traj=50, k_pct=100)
    rng = np.random.default_rng(0)
    # short walks that end in the goal from its neighbours
    for c in env.cells:
        for a in range(4):
            if env.move(c, a) == env.goal and c != env.goal:
                buf.add_trajectory(grid_traj(env, [c], [a]))
    model = BacktrackModel(env, seed=0)
    train_backtrack(model, buf, 300, rng)
    p = model.action_probs([env.goal])[0]
    ok = [a for a in range(4) if env.predecessors(env.goal, a)]
    assert p[ok].sum() > 0.9
