"""Self-check suites: trajectory-posterior identities, Boltzmann identities,
and finite-difference checks of every hand-written gradient.

Each suite returns a list of :class:`Check` results; the CLI prints one
line per check.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import boltzmann as bz
from .agent import PolicyCritic
from .backtrack import BacktrackModel
from .env import ChainMDP, FourRoomEnv, PointMassEnv
from .nn import CategoricalHead, GaussianHead, Mlp
from .orchestrator import fit_reverse_kl, trajectory_posterior, verify_elbo

SUITES = ("elbo", "boltzmann", "gradients")


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}  {self.detail}".rstrip()


# --------------------------------------------------------------------------
# trajectory posterior


def elbo_chains(seed: int = 0):
    """Small enumerable chains with a random policy and a threshold whose event is
    neither empty nor certain: ``[(name, chain, policy, threshold)]``."""
    rng = np.random.default_rng(seed)
    out = []
    chain = ChainMDP.slippery_chain(n_states=4, slip=0.2, horizon=5)
    out.append(("slippery4", chain, np.full((4, 2), 0.5), 1.0))
    for i in range(2):
        chain = ChainMDP.random(3, 2, 4, rng, gamma=0.9)
        policy = rng.dirichlet(np.ones(2), size=3)
        _, _, prior, ret = trajectory_posterior(chain, policy, -math.inf)
        vals = sorted(set(ret.values()))
        threshold = vals[len(vals) // 2] if len(vals) > 1 else vals[0] - 1.0
        out.append((f"random{i}", chain, policy, threshold))
    return out


def elbo_suite(seed: int = 0, n_q: int = 20) -> list[Check]:
    checks = []
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst_identity = worst_exact = 0.0
    for name, chain, policy, threshold in elbo_chains(seed):
        log_p, post, prior, ret = trajectory_posterior(chain, policy, threshold)
        support = sorted(post)
        for _ in range(n_q):
            w = rng.dirichlet(np.ones(len(support)))
            rep = verify_elbo(chain, policy, dict(zip(support, w)), threshold)
            worst_identity = max(worst_identity, abs(rep.log_p - rep.elbo - rep.kl))
            if rep.kl < -1e-12 or rep.status != "ok":
                worst_identity = math.inf
        rep = verify_elbo(chain, policy, post, threshold)
        worst_exact = max(worst_exact, abs(rep.kl), abs(rep.log_p - rep.elbo))
    checks.append(Check(f"log p(R>L) = ELBO + KL for {n_q} random q per chain",
                        worst_identity <= 1e-9, f"max error {worst_identity:.2e}"))
    checks.append(Check("KL = 0 and ELBO = log p(R>L) at the exact posterior",
                        worst_exact <= 1e-9, f"max error {worst_exact:.2e}"))
    name, chain, policy, _ = elbo_chains(seed)[0]
    rep = verify_elbo(chain, policy, {}, threshold=1e9)
    checks.append(Check("threshold above every return is reported as an impossible event",
                        rep.status == "impossible_event" and rep.log_p == -math.inf))
    elapsed = time.perf_counter() - t0
    checks.append(Check("identity checks finish within 10 s", elapsed < 10.0,
                        f"{elapsed:.2f} s"))
    ratios = []
    for name, chain, policy, threshold in elbo_chains(seed):
        before, after, _ = fit_reverse_kl(chain, policy, threshold, seed=seed)
        ratios.append(after / before)
    checks.append(Check("MLE on rejection samples cuts KL(posterior || q) by >= 50%",
                        max(ratios) <= 0.5,
                        "after/before " + ", ".join(f"{r:.3f}" for r in ratios)))
    return checks


# --------------------------------------------------------------------------
# Boltzmann target


def gapped_task(rng: np.random.Generator, n_contexts: int = 5, n_actions: int = 4,
                gap: float = 0.1, temperature: float = 1.0) -> bz.BoltzmannTask:
    """Random task whose best action beats the runner-up by at least ``gap``
    in every context; contexts are drawn with comparable probabilities."""
    r = rng.uniform(0.0, 1.0, size=(n_contexts, n_actions))
    best = r.argmax(axis=1)
    second = np.sort(r, axis=1)[:, -2]
    r[np.arange(n_contexts), best] = second + gap + rng.uniform(0.0, 0.2, n_contexts)
    p = rng.dirichlet(np.full(n_contexts, 5.0))
    return bz.BoltzmannTask(p, r, temperature)


def boltzmann_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    worst = 0.0
    for _ in range(100):
        s, a = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        t = float(np.exp(rng.uniform(np.log(0.05), np.log(20.0))))
        task = bz.BoltzmannTask.random(s, a, rng, temperature=t)
        pol = bz.SoftPolicy.random(s, a, rng, scale=2.0)
        kl, j_r, ent, log_z = bz.free_energy_decomposition(task, pol)
        worst = max(worst, abs(kl - (-j_r / t - ent + log_z)))
    checks.append(Check("KL = -J_r/T - S + E[log Z] on 100 random instances", worst <= 1e-9,
                        f"max error {worst:.2e}"))

    worst_hot = 0.0
    worst_cold = 1.0
    for _ in range(20):
        task = gapped_task(rng)
        for s in range(task.n_contexts):
            hot = bz.boltzmann_target(task, s, 1e9).probs
            worst_hot = max(worst_hot, float(np.max(np.abs(hot - 1.0 / task.n_actions))))
            cold = bz.boltzmann_target(task, s, 1e-6).probs
            worst_cold = min(worst_cold, float(cold[np.argmax(task.rbar[s])]))
    checks.append(Check("T = 1e9 gives the uniform target", worst_hot <= 1e-6,
                        f"max deviation {worst_hot:.2e}"))
    checks.append(Check("T = 1e-6 puts all mass on the best action", worst_cold > 1 - 1e-6,
                        f"min argmax mass {worst_cold:.9f}"))

    task = gapped_task(rng)
    pol, _ = bz.anneal_train(task, bz.SoftPolicy.uniform(task.n_contexts, task.n_actions),
                             bz.fixed_schedule(1e6), 2000)
    dev = float(np.max(np.abs(pol.probs() - 1.0 / task.n_actions)))
    checks.append(Check("training at T = 1e6 keeps the policy uniform", dev <= 1e-3,
                        f"max deviation {dev:.2e}"))
    pol, _ = bz.anneal_train(task, bz.SoftPolicy.uniform(task.n_contexts, task.n_actions),
                             bz.fixed_schedule(0.01), 2000)
    greedy = float(np.min(pol.probs()[np.arange(task.n_contexts), task.rbar.argmax(axis=1)]))
    checks.append(Check("training at T = 0.01 makes the best action > 0.99 likely",
                        greedy > 0.99, f"min greedy probability {greedy:.4f}"))

    annealed, fixed = anneal_vs_fixed(seeds=range(5))
    checks.append(Check("annealed final J_r >= fixed T = 1 final J_r (median of 5 seeds)",
                        np.median(annealed) >= np.median(fixed),
                        f"median {np.median(annealed):.4f} vs {np.median(fixed):.4f}"))
    return checks


def anneal_vs_fixed(seeds, steps: int = 2000, n_contexts: int = 5, n_actions: int = 4):
    """Paired runs on the same random task and initial policy per seed."""
    annealed, fixed = [], []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        task = bz.BoltzmannTask.random(n_contexts, n_actions, rng)
        init = bz.SoftPolicy.random(n_contexts, n_actions, rng).logits
        _, rows = bz.anneal_train(task, bz.SoftPolicy(init.copy()), bz.anneal_schedule(), steps)
        annealed.append(rows[-1][2])
        _, rows = bz.anneal_train(task, bz.SoftPolicy(init.copy()), bz.fixed_schedule(1.0), steps)
        fixed.append(rows[-1][2])
    return annealed, fixed


# --------------------------------------------------------------------------
# finite differences


def fd_check(f: Callable[[], float], params, grads, rng: np.random.Generator,
             coords: int = 6, eps: float = 1e-6, rtol: float = 1e-4, atol: float = 1e-8):
    """Compare analytic ``grads`` of ``f`` with central differences.

    ``params`` are arrays that ``f`` reads; a few random coordinates of each
    are perturbed in place and restored. Returns the worst value of
    ``|g - fd| / (rtol * max(|g|, |fd|) + atol)``; the check passes when it
    is at most 1.
    """
    worst = 0.0
    for p, g in zip(params, grads):
        g = np.asarray(g)
        flat_idx = rng.choice(p.size, size=min(coords, p.size), replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, p.shape)
            old = p[idx]
            p[idx] = old + eps
            fp = f()
            p[idx] = old - eps
            fm = f()
            p[idx] = old
            fd = (fp - fm) / (2 * eps)
            ga = float(g[idx])
            worst = max(worst, abs(ga - fd) / (rtol * max(abs(ga), abs(fd)) + atol))
    return worst


def _mlp_case(rng, acts):
    sizes = [int(rng.integers(2, 6)), 8, 7, int(rng.integers(1, 4))]
    net = Mlp(sizes, acts, seed=int(rng.integers(2**31)))
    x = rng.normal(size=(3, sizes[0]))
    u = rng.normal(size=(3, sizes[-1]))
    net.forward(x)
    grads, dx = net.backward(u)
    f = lambda: float(np.sum(u * net.forward(x)))  # noqa: E731
    return max(fd_check(f, net.params(), grads, rng), fd_check(f, [x], [dx], rng))


def _categorical_case(rng):
    logits = rng.normal(size=(4, 5))
    k = rng.integers(5, size=4)
    h = CategoricalHead(logits)
    w = rng.normal(size=4)
    g = w[:, None] * h.grad_log_prob(k) + h.grad_entropy()
    f = lambda: float(np.sum(w * CategoricalHead(logits).log_prob(k))  # noqa: E731
                      + np.sum(CategoricalHead(logits).entropy()))
    return fd_check(f, [logits], [g], rng, coords=20)


def _gaussian_case(rng):
    mean = rng.normal(size=(3, 2))
    log_std = rng.normal(scale=0.5, size=(3, 2))
    a = rng.normal(size=(3, 2))
    dm, dl = GaussianHead(mean, log_std).grad_log_prob(a)
    f = lambda: float(np.sum(GaussianHead(mean, log_std).log_prob(a)))  # noqa: E731
    return fd_check(f, [mean, log_std], [dm, dl], rng, coords=6)


def _policy_case(rng, discrete: bool, reduce: str):
    obs = 5
    if discrete:
        pc = PolicyCritic(obs, n_actions=4, hidden=(8, 8), seed=int(rng.integers(2**31)))
        actions = rng.integers(4, size=6)
    else:
        pc = PolicyCritic(obs, act_dim=2, hidden=(8, 8), seed=int(rng.integers(2**31)))
        actions = rng.normal(size=(6, 2))
    for p in pc.policy_net.params():
        p += rng.normal(scale=0.3, size=p.shape)
    x = rng.normal(size=(6, obs))
    w = rng.normal(size=6)
    c = float(rng.uniform(0.0, 0.1))
    grads, _ = pc.policy_grads(x, actions, w, c, reduce=reduce)
    f = lambda: pc.policy_grads(x, actions, w, c, reduce=reduce)[1]  # noqa: E731
    return fd_check(f, pc.policy_params(), grads, rng)


def _value_case(rng):
    pc = PolicyCritic(5, n_actions=3, hidden=(8, 8), seed=int(rng.integers(2**31)))
    x = rng.normal(size=(6, 5))
    targets = rng.normal(size=6)
    w = rng.uniform(0.1, 1.0, size=6)
    grads, _ = pc.value_grads(x, targets, w)
    f = lambda: pc.value_grads(x, targets, w)[1]  # noqa: E731
    return fd_check(f, pc.value_net.params(), grads, rng)


def _random_transitions(env, rng, n):
    """Forward-consistent transitions from random open cells (four-room) or
    random box positions (point mass)."""
    s, a, s2 = [], [], []
    for _ in range(n):
        if env.discrete:
            cells = [c for c in env.cells if not env.is_terminal(c)]
            c = cells[int(rng.integers(len(cells)))]
            act = int(rng.integers(4))
            s.append(c)
            a.append(act)
            s2.append(env.move(c, act))
        else:
            p = rng.uniform(-0.9, 0.9, size=2)
            act = rng.uniform(-0.07, 0.07, size=2)
            s.append(p)
            a.append(act)
            s2.append(p + act)
    return s, a, s2


def _backtrack_case(rng, discrete: bool):
    env = FourRoomEnv(7) if discrete else PointMassEnv()
    model = BacktrackModel(env, hidden=8, seed=int(rng.integers(2**31)))
    s, a, s2 = _random_transitions(env, rng, 5)
    model.update_normalizers(s, a, s2)
    b = model.encode(s, a, s2)
    ga, gs, _ = model.nll_grads(b)
    f = lambda: model.nll_grads(b)[2]  # noqa: E731
    return max(fd_check(f, model.action_predictor.params(), ga, rng),
               fd_check(f, model.state_predictor.params(), gs, rng))


def _kl_case(rng):
    task = bz.BoltzmannTask.random(3, 4, rng, temperature=float(rng.uniform(0.2, 3.0)))
    pol = bz.SoftPolicy.random(3, 4, rng)
    g = bz.kl_grad(task, pol, task.temperature)
    f = lambda: bz.free_energy_decomposition(task, pol)[0]  # noqa: E731
    return fd_check(f, [pol.logits], [g], rng, coords=12)


GRADIENT_CASES = {
    "nn.Mlp tanh": lambda rng: _mlp_case(rng, ["tanh", "tanh", "identity"]),
    "nn.Mlp relu": lambda rng: _mlp_case(rng, ["relu", "relu", "identity"]),
    "nn.Mlp mixed": lambda rng: _mlp_case(rng, ["tanh", "relu", "tanh"]),
    "nn.CategoricalHead": _categorical_case,
    "nn.GaussianHead": _gaussian_case,
    "agent policy (categorical, sum)": lambda rng: _policy_case(rng, True, "sum"),
    "agent policy (categorical, mean)": lambda rng: _policy_case(rng, True, "mean"),
    "agent policy (gaussian)": lambda rng: _policy_case(rng, False, "sum"),
    "agent value": _value_case,
    "backtrack nll (grid)": lambda rng: _backtrack_case(rng, True),
    "backtrack nll (point mass)": lambda rng: _backtrack_case(rng, False),
    "boltzmann KL": _kl_case,
}


def gradient_errors(seed: int = 0, instances: int = 20) -> dict[str, float]:
    """Worst normalized error per case over ``instances`` random instances."""
    out = {}
    for i, (name, case) in enumerate(GRADIENT_CASES.items()):
        rng = np.random.default_rng([seed, i])
        out[name] = max(case(rng) for _ in range(instances))
    return out


def gradients_suite(seed: int = 0, instances: int = 20) -> list[Check]:
    return [Check(f"{name} gradient vs central differences ({instances} instances)", err <= 1.0,
                  f"worst |g-fd|/(1e-4*max(|g|,|fd|)+1e-8) = {err:.3f}")
            for name, err in gradient_errors(seed, instances).items()]


def run_suite(name: str, seed: int = 0) -> list[Check]:
    if name == "elbo":
        return elbo_suite(seed)
    if name == "boltzmann":
        return boltzmann_suite(seed)
    if name == "gradients":
        return gradients_suite(seed)
    raise ValueError(f"unknown suite {name!r}; expected one of {SUITES}")
