import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recall_traces import boltzmann as bz
from recall_traces.verify import GRADIENT_CASES, anneal_vs_fixed, gapped_task


def one_context(r, t=1.0):
    return bz.BoltzmannTask(np.ones(1), np.array([r], dtype=float), t)


def test_target_softmax_example():
    p = bz.boltzmann_target(one_context([1, 2, 3]), 0).probs
    np.testing.assert_allclose(p, [0.090031, 0.244728, 0.665241], atol=1e-6)


def test_target_partition_function():
    tgt = bz.boltzmann_target(one_context([1, 2, 3], t=2.0), 0)
    z = sum(math.exp(r / 2.0) for r in (1, 2, 3))
    assert tgt.z == pytest.approx(z, rel=1e-12)
    np.testing.assert_allclose(tgt.probs, [math.exp(r / 2.0) / z for r in (1, 2, 3)], rtol=1e-12)


def test_target_limits():
    task = one_context([0.3, 0.9, 0.1, 0.5])
    hot = bz.boltzmann_target(task, 0, 1e9).probs
    assert np.max(np.abs(hot - 0.25)) <= 1e-6
    cold = bz.boltzmann_target(task, 0, 1e-6).probs
    assert cold[1] > 1 - 1e-6
    np.testing.assert_array_equal(bz.greedy_target(task, 0), [0, 1, 0, 0])


@pytest.mark.parametrize("t", [0.0, -1.0, math.inf, math.nan])
def test_bad_temperature(t):
    with pytest.raises(ValueError):
        bz.boltzmann_target(one_context([1, 2]), 0, t)


def test_task_validation():
    with pytest.raises(ValueError):
        bz.BoltzmannTask(np.array([0.5, 0.4]), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        bz.BoltzmannTask(np.array([1.0]), np.array([[np.inf, 0.0]]))
    with pytest.raises(ValueError):
        bz.BoltzmannTask(np.array([1.0]), np.zeros((2, 2)))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.floats(-100, 100),
       st.floats(0.01, 100), st.floats(0.1, 10))
def test_target_shift_and_scale_invariance(r, c, t, k):
    r = np.array(r)
    base = bz.boltzmann_target(one_context(r, t), 0).probs
    shifted = bz.boltzmann_target(one_context(r + c, t), 0).probs
    np.testing.assert_allclose(base, shifted, atol=1e-9)
    scaled = bz.boltzmann_target(one_context(k * r, k * t), 0).probs
    np.testing.assert_allclose(base, scaled, atol=1e-9)
    assert abs(base.sum() - 1) <= 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_target_entropy_non_increasing_as_t_drops(seed):
    task = bz.BoltzmannTask.random(3, 5, np.random.default_rng(seed))
    grid = np.geomspace(100.0, 0.01, 40)
    ents = [bz.policy_entropy(task, bz.target_table(task, t)[0]) for t in grid]
    assert all(b <= a + 1e-12 for a, b in zip(ents, ents[1:]))


def test_expected_reward_examples():
    rng = np.random.default_rng(0)
    task = bz.BoltzmannTask.random(4, 3, rng)
    best = np.eye(3)[task.rbar.argmax(axis=1)]
    assert bz.expected_reward(task, best) == pytest.approx(
        float(np.sum(task.p_s * task.rbar.max(axis=1))), abs=1e-15)
    half = bz.BoltzmannTask(np.array([0.5, 0.5]), np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert bz.expected_reward(half, bz.SoftPolicy.uniform(2, 2)) == 0.5


def test_expected_reward_monte_carlo():
    rng = np.random.default_rng(1)
    task = bz.BoltzmannTask.random(4, 3, rng)
    pol = bz.SoftPolicy.random(4, 3, rng)
    p = pol.probs()
    n = 50_000
    s = rng.choice(4, size=n, p=task.p_s)
    u = rng.random(n)[:, None]
    a = (u > np.cumsum(p[s], axis=1)).sum(axis=1)
    samples = task.rbar[s, a]
    se = samples.std(ddof=1) / math.sqrt(n)
    assert abs(samples.mean() - bz.expected_reward(task, pol)) <= 3 * se


def test_decomposition_at_target():
    task = bz.BoltzmannTask.random(3, 4, np.random.default_rng(2), temperature=0.7)
    probs, _ = bz.target_table(task)
    kl, j_r, ent, log_z = bz.free_energy_decomposition(task, probs)
    assert abs(kl) <= 1e-12
    assert abs(kl - (-j_r / 0.7 - ent + log_z)) <= 1e-9


def test_uniform_policy_entropy():
    task = bz.BoltzmannTask.random(3, 6, np.random.default_rng(3))
    assert bz.policy_entropy(task, bz.SoftPolicy.uniform(3, 6)) == pytest.approx(
        math.log(6), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 20))
def test_decomposition_identity(seed, t):
    rng = np.random.default_rng(seed)
    task = bz.BoltzmannTask.random(int(rng.integers(1, 6)), int(rng.integers(2, 6)), rng, t)
    pol = bz.SoftPolicy.random(task.n_contexts, task.n_actions, rng, scale=2.0)
    kl, j_r, ent, log_z = bz.free_energy_decomposition(task, pol)
    # independent path: explicit per-entry loops
    ref = 0.0
    for s in range(task.n_contexts):
        z = sum(math.exp(r / t) for r in task.rbar[s])
        for a in range(task.n_actions):
            p = pol.probs()[s, a]
            ref += task.p_s[s] * p * (math.log(p) - (task.rbar[s, a] / t - math.log(z)))
    assert abs(kl - ref) <= 1e-9
    assert abs(kl - (-j_r / t - ent + log_z)) <= 1e-9
    assert kl >= -1e-12


def test_kl_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    assert max(GRADIENT_CASES["boltzmann KL"](rng) for _ in range(20)) <= 1.0


def test_hot_training_stays_uniform():
    task = bz.BoltzmannTask.random(4, 3, np.random.default_rng(5))
    pol, _ = bz.anneal_train(task, bz.SoftPolicy.uniform(4, 3), bz.fixed_schedule(1e6), 500)
    assert np.max(np.abs(pol.probs() - 1 / 3)) <= 1e-3


def test_cold_training_concentrates():
    for seed in range(5):
        task = gapped_task(np.random.default_rng(seed))
        pol, _ = bz.anneal_train(task, bz.SoftPolicy.uniform(task.n_contexts, task.n_actions),
                                 bz.fixed_schedule(0.01), 2000)
        p = pol.probs()
        assert np.all(p[np.arange(task.n_contexts), task.rbar.argmax(axis=1)] > 0.99)


def test_annealing_beats_fixed_temperature():
    annealed, fixed = anneal_vs_fixed(range(5))
    assert np.median(annealed) >= np.median(fixed)


def test_schedule_values_and_validation():
    sched = bz.anneal_schedule()
    assert sched(0) == 1.0 and sched(1) == 0.995 and sched(10_000) == 0.01
    task = bz.BoltzmannTask.random(2, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        bz.anneal_train(task, None, [1.0, 2.0], 2, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        bz.anneal_train(task, None, [1.0, 0.0], 2, rng=np.random.default_rng(0))


def test_anneal_rows_and_csv(tmp_path):
    task = bz.BoltzmannTask.random(2, 3, np.random.default_rng(6))
    _, rows = bz.anneal_train(task, None, bz.anneal_schedule(), 50, rng=np.random.default_rng(0))
    assert len(rows) == 50 and rows[0][1] == 1.0
    path = tmp_path / "anneal.csv"
    bz.write_anneal_csv(rows, path)
    with open(path) as fh:
        got = list(csv.reader(fh))
    assert tuple(got[0]) == bz.ANNEAL_COLUMNS
    assert len(got) == 51 and float(got[-1][2]) == rows[-1][2]
