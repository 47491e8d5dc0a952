"""Training loop that augments actor-critic with recall traces, plus the
trajectory-posterior checks (ELBO identity and reverse KL fitting)."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .backtrack import BacktrackModel, Trace, generate_trace, train_backtrack
from .buffer import PerBuffer, ReplayBuffer, Trajectory, select_high_value_states
from .env import ChainMDP, enumerate_trajectories
from .nn import clip_grads, log_softmax, sgd_step

CSV_COLUMNS = ("env_steps", "episode", "return", "policy_loss", "value_loss",
               "backward_loss", "imitation_loss", "distinct_states")


def parse_ratio(ratio) -> tuple[int, int]:
    """``"2:1"`` -> (2, 1): RL updates per block, imitation rounds per block."""
    if isinstance(ratio, (tuple, list)):
        m, n = ratio
    else:
        m, n = str(ratio).split(":")
    m, n = int(m), int(n)
    if m < 1 or n < 1:
        raise ValueError(f"ratio terms must be positive, got {ratio!r}")
    return m, n


@dataclass
class LoopConfig:
    n_traces: int = 5
    trace_length: int = 5
    rl_steps_per_cycle: int = 5
    backward_steps_per_cycle: int = 100
    imitation_updates_per_cycle: int = 1
    imitation_lr: float | None = None
    curriculum_pct: float = 100.0
    env_to_trace_ratio: str = "2:1"
    total_env_steps: int = 100_000
    backward_batch: int = 256
    train_backward: bool = True
    seed_score: str = "reward"
    seed_temperature: float = 0.0
    n_seed_states: int = 1
    per_batch: int = 1000
    ac_steps_per_per_step: int = 3

    def __post_init__(self):
        for name in ("n_traces", "imitation_updates_per_cycle", "backward_steps_per_cycle",
                     "n_seed_states"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("trace_length", "rl_steps_per_cycle", "total_env_steps", "backward_batch",
                     "per_batch", "ac_steps_per_per_step"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.curriculum_pct <= 100:
            raise ValueError("curriculum_pct must lie in (0, 100]")
        if self.seed_score not in ("reward", "value"):
            raise ValueError("seed_score must be 'reward' or 'value'")
        parse_ratio(self.env_to_trace_ratio)


@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)
    visits: np.ndarray | None = None
    env_steps: int = 0
    distinct: set = field(default_factory=set)
    threshold: float | None = None
    aborted: str | None = None

    def csv_text(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in self.rows:
            w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
        return out.getvalue()

    @property
    def returns(self) -> np.ndarray:
        return np.array([r["return"] for r in self.rows], dtype=float)

    @property
    def steps(self) -> np.ndarray:
        return np.array([r["env_steps"] for r in self.rows], dtype=float)

    def summary(self, window: int = 10, threshold: float = 0.9) -> dict:
        return {
            "episodes": len(self.rows),
            "env_steps": self.env_steps,
            "auc": area_under_curve(self.steps, self.returns, self.env_steps, window),
            "steps_to_threshold": steps_to_threshold(self.steps, self.returns, threshold, window),
            "final_return": float(np.mean(self.returns[-window:])) if self.rows else None,
            "distinct_states": len(self.distinct),
            "curriculum_threshold": self.threshold,
            "aborted": self.aborted,
        }


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)


def moving_average(x, window: int = 10) -> np.ndarray:
    """Trailing mean over up to ``window`` most recent values."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return x
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def area_under_curve(steps, returns, total_steps: int, window: int = 10) -> float:
    """Smoothed return integrated over env steps, divided by the steps taken."""
    steps = np.asarray(steps, dtype=float)
    if steps.size == 0 or total_steps <= 0:
        return 0.0
    smooth = moving_average(returns, window)
    widths = np.diff(np.concatenate([[0.0], steps]))
    return float(np.sum(smooth * widths) / total_steps)


def steps_to_threshold(steps, returns, threshold: float = 0.9, window: int = 10):
    """Env steps when the trailing mean over a full window first reaches ``threshold``."""
    returns = np.asarray(returns, dtype=float)
    if returns.size < window:
        return None
    smooth = moving_average(returns, window)
    hit = np.nonzero(smooth[window - 1:] >= threshold)[0]
    return None if hit.size == 0 else int(np.asarray(steps)[hit[0] + window - 1])


# --------------------------------------------------------------------------
# imitation of recall traces


def imitation_loss(pc, traces, encode) -> float:
    """Sum over every (state, action) pair of every trace of log pi(a|s)."""
    traces = list(traces)
    if not traces:
        raise ValueError("no traces given")
    states = [s for tr in traces for s in tr.states]
    actions = [a for tr in traces for a in tr.actions]
    x = encode(states)
    return float(np.sum(pc.log_prob(np.atleast_2d(x), _action_array(pc, actions))))


def _action_array(pc, actions):
    return np.asarray(actions, dtype=int) if pc.discrete else np.asarray(actions, dtype=float)


def imitation_step(pc, traces, encode, lr: float | None = None) -> float:
    """One ascent step on the summed trace log-likelihood; policy net only.

    Returns the log-likelihood before the step.
    """
    states = [s for tr in traces for s in tr.states]
    actions = _action_array(pc, [a for tr in traces for a in tr.actions])
    x = np.atleast_2d(encode(states))
    grads, total = pc.policy_grads(x, actions, np.ones(len(states)))
    if not math.isfinite(total):
        raise FloatingPointError(f"imitation log-likelihood is {total}")
    (g,), _ = clip_grads([grads], pc.max_grad_norm)
    sgd_step(pc.policy_params(), [-v for v in g], pc.alpha if lr is None else lr)
    return total


# --------------------------------------------------------------------------
# threshold curriculum


def curriculum_threshold(returns, pct: float):
    """Keep the ceil(pct/100 * n) highest returns, plus anything tied with the last.

    Returns ``(L, kept)`` with ``kept`` sorted in decreasing order and ``L``
    the smallest kept return.
    """
    r = sorted((float(x) for x in returns), reverse=True)
    if not r:
        raise ValueError("no returns given")
    k = max(1, math.ceil(pct / 100.0 * len(r)))
    L = r[k - 1]
    kept = [x for x in r if x >= L]
    return L, kept


# --------------------------------------------------------------------------
# the training loop


def run_training(env, pc, model: BacktrackModel | None, buf: ReplayBuffer, cfg: LoopConfig,
                 seed: int, per: PerBuffer | None = None, on_episode=None) -> RunMetrics:
    """Interleave environment episodes, actor-critic updates and recall traces.

    After each episode: store it, take one actor-critic step, then (when a
    backtracking model is given and ``cfg.n_traces > 0``) fit the model
    every ``rl_steps_per_cycle`` updates and imitate freshly generated
    traces according to ``env_to_trace_ratio``. A ``PerBuffer`` adds a
    prioritized replay step every ``ac_steps_per_per_step`` updates.
    """
    env_rng, act_rng, bwd_rng, per_rng = (np.random.default_rng(s)
                                          for s in np.random.SeedSequence(seed).spawn(4))
    encode = env.encode
    metrics = RunMetrics()
    if env.discrete:
        metrics.visits = np.zeros((env.size, env.size), dtype=np.int64)
        all_x = env.encode(env.cells)
    augment = model is not None and cfg.n_traces > 0
    m_ratio, n_ratio = parse_ratio(cfg.env_to_trace_ratio)
    rl_updates = 0
    last_bwd = last_imit = None
    if buf.returns():
        metrics.threshold = curriculum_threshold(buf.returns(), cfg.curriculum_pct)[0]

    while metrics.env_steps < cfg.total_env_steps:
        s = env.reset(seed=int(env_rng.integers(2**63)))
        transitions = []
        if env.discrete:
            cum = np.cumsum(pc.probs(all_x), axis=1)
        complete = False
        while metrics.env_steps < cfg.total_env_steps:
            if env.discrete:
                metrics.visits[s] += 1
                a = int(np.searchsorted(cum[env.index(s)], act_rng.random(), side="right"))
                a = min(a, env.n_actions - 1)
            else:
                a, _ = pc.act(encode(s), act_rng)
            tr = env.step(a)
            metrics.env_steps += 1
            metrics.distinct.add(_visit_key(env, s))
            transitions.append(tr)
            s = tr.s_next
            if tr.done:
                complete = True
                break
        if not complete:
            break
        metrics.distinct.add(_visit_key(env, s))
        traj = Trajectory.from_transitions(transitions, gamma=pc.gamma,
                                           terminal=env.is_terminal(s))
        buf.add_trajectory(traj)
        try:
            x = encode(traj.states)
            x_last = encode([traj.next_states[-1]])[0]
            policy_loss, value_loss = pc.ac_update([(traj, np.atleast_2d(x), x_last)])
            rl_updates += 1
            if per is not None:
                for t in traj.transitions():
                    per.add(t)
                if rl_updates % cfg.ac_steps_per_per_step == 0 and len(per) >= cfg.per_batch:
                    _per_step(pc, per, cfg.per_batch, encode, per_rng)
            if augment:
                L = curriculum_threshold(buf.returns(), cfg.curriculum_pct)[0]
                metrics.threshold = L
                if cfg.train_backward and rl_updates % cfg.rl_steps_per_cycle == 0:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore")
                        hist = train_backtrack(model, buf, cfg.backward_steps_per_cycle, bwd_rng,
                                               value_fn=None, batch_size=cfg.backward_batch,
                                               min_return=L)
                    if hist:
                        last_bwd = float(hist[-1])
                if rl_updates % m_ratio == 0:
                    for _ in range(n_ratio):
                        traces = _recall(env, pc, model, buf, cfg, bwd_rng)
                        if not traces:
                            break
                        for _ in range(cfg.imitation_updates_per_cycle):
                            last_imit = imitation_step(pc, traces, encode, cfg.imitation_lr)
        except FloatingPointError as exc:
            metrics.aborted = f"episode {len(metrics.rows)}: {exc}"
            break
        metrics.rows.append({
            "env_steps": metrics.env_steps,
            "episode": len(metrics.rows),
            "return": traj.undiscounted_return,
            "policy_loss": float(policy_loss),
            "value_loss": float(value_loss),
            "backward_loss": last_bwd,
            "imitation_loss": last_imit,
            "distinct_states": len(metrics.distinct),
        })
        if on_episode is not None:
            on_episode(metrics)
    return metrics


def _visit_key(env, s):
    if env.discrete:
        return tuple(s)
    # continuous states are counted on a 20 x 20 lattice over the box
    cell = np.floor((np.asarray(s) + env.bound) / (2 * env.bound) * 20).astype(int)
    return tuple(np.clip(cell, 0, 19).tolist())


def _recall(env, pc, model, buf, cfg, rng) -> list[Trace]:
    if cfg.seed_score == "value":
        value_fn = lambda states: pc.values(np.atleast_2d(env.encode(states)))  # noqa: E731
    else:
        states, rewards = buf.distinct_next_states()
        if rewards.size == 0 or rewards.max() <= env.reward_range[0]:
            return []
        value_fn = None
    seeds = select_high_value_states(buf, value_fn, buf.k_pct, cfg.n_seed_states,
                                     cfg.seed_temperature, rng).states
    return [generate_trace(model, s, cfg.trace_length, rng)
            for s in seeds for _ in range(cfg.n_traces)]


def _per_step(pc, per: PerBuffer, batch: int, encode, rng) -> None:
    ids, items, weights = per.sample(batch, rng)
    x = np.atleast_2d(encode([t.s for t in items]))
    x_next = np.atleast_2d(encode([t.s_next for t in items]))
    # terminal means the goal was reached; step-cap cuts still bootstrap
    dones = [t.r > 0 and t.done for t in items]
    deltas = pc.td_update(x, _action_array(pc, [t.a for t in items]),
                          [t.r for t in items], x_next, dones, weights)
    per.update_priorities(ids, deltas)


# --------------------------------------------------------------------------
# trajectory posterior: ELBO identity and reverse-KL fitting


@dataclass
class ElboReport:
    log_p: float
    elbo: float
    kl: float
    threshold: float
    status: str = "ok"

    @property
    def gap(self) -> float:
        return self.log_p - self.elbo


def _key(traj):
    return (traj.states, traj.actions)


def trajectory_posterior(chain: ChainMDP, policy, threshold: float):
    """``(log p(R > L), {key: p(tau | R > L)}, {key: p(tau)}, {key: R})``."""
    enum = enumerate_trajectories(chain, policy)
    prior = {_key(t): p for t, p, _ in enum}
    ret = {_key(t): r for t, _, r in enum}
    mass = sum(p for t, p, r in enum if r > threshold)
    if mass <= 0:
        return -math.inf, {}, prior, ret
    post = {_key(t): p / mass for t, p, r in enum if r > threshold}
    return math.log(mass), post, prior, ret


def verify_elbo(chain: ChainMDP, policy, q: dict, threshold: float) -> ElboReport:
    """Evaluate log p(R>L), the ELBO under ``q`` and KL(q || p(tau | R>L)).

    ``q`` maps trajectory keys ``(states, actions)`` to probabilities. The
    KL term is summed directly, not taken as the gap, so the identity
    ``log_p == elbo + kl`` is a genuine check.
    """
    log_p, post, prior, ret = trajectory_posterior(chain, policy, threshold)
    if log_p == -math.inf:
        return ElboReport(-math.inf, -math.inf, math.nan, threshold, "impossible_event")
    elbo = 0.0
    kl = 0.0
    for k, qk in q.items():
        if qk <= 0:
            continue
        if k not in prior or not ret[k] > threshold:
            return ElboReport(log_p, -math.inf, math.inf, threshold, "unsupported_q")
        elbo += qk * (math.log(prior[k]) - math.log(qk))
        kl += qk * (math.log(qk) - math.log(post[k]))
    return ElboReport(log_p, elbo, kl, threshold)


def reverse_kl_check(chain: ChainMDP, posterior: dict, fitted_q) -> float:
    """KL(p(tau | R>L) || q); ``fitted_q`` is a dict or a callable on keys."""
    get = fitted_q.get if isinstance(fitted_q, dict) else fitted_q
    total = 0.0
    for k, p in posterior.items():
        if p <= 0:
            continue
        qk = get(k) or 0.0
        if qk <= 0:
            return math.inf
        total += p * (math.log(p) - math.log(qk))
    return total


def rejection_sample(chain: ChainMDP, policy, threshold: float, n: int, rng,
                     max_tries: int = 10**6) -> list:
    """Forward rollouts of the chain kept only when their return exceeds ``threshold``."""
    table = np.asarray(policy, dtype=float)
    cum_pi = np.cumsum(table, axis=1)
    cum_p = np.cumsum(chain.P, axis=2)
    out = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("rejection sampler exhausted its budget")
        s = 0
        states, actions, ret = [0], [], 0.0
        for t in range(chain.horizon):
            a = min(int(np.searchsorted(cum_pi[s], rng.random(), side="right")),
                    chain.n_actions - 1)
            s2 = min(int(np.searchsorted(cum_p[s, a], rng.random(), side="right")),
                     chain.n_states - 1)
            ret += chain.gamma ** t * chain.reward(s, a, s2)
            actions.append(a)
            states.append(s2)
            s = s2
        if ret > threshold:
            out.append((tuple(states), tuple(actions)))
    return out


class BackwardTrajectoryQ:
    """q(tau) = q(s_T) * prod_t q(a_t | s_{t+1}) q(s_t | a_t, s_{t+1}).

    The final-state prior is a free categorical; the factors come from a
    discrete :class:`BacktrackModel` on the chain.
    """

    def __init__(self, chain: ChainMDP, model: BacktrackModel | None = None, seed: int = 0):
        self.chain = chain
        self.model = model or BacktrackModel(chain, hidden=32, seed=seed, zero_last=True)
        self.prior_logits = np.zeros(chain.n_states)

    def log_q(self, key) -> float:
        states, actions = key
        lp_final = log_softmax(self.prior_logits)[states[-1]]
        la, ls = self.model.head_log_probs(states[:-1], actions, states[1:])
        return float(lp_final + la.sum() + ls.sum())

    def q(self, key) -> float:
        return math.exp(self.log_q(key))

    def fit_step(self, keys, lr: float) -> float:
        s, a, s2 = [], [], []
        finals = np.zeros(self.chain.n_states)
        for states, actions in keys:
            s.extend(states[:-1])
            a.extend(actions)
            s2.extend(states[1:])
            finals[states[-1]] += 1
        nll = self.model.train_step(self.model.encode(s, a, s2), lr)
        p = np.exp(log_softmax(self.prior_logits))
        # gradient of the mean final-state log-likelihood
        self.prior_logits += lr * (finals / len(keys) - p)
        return nll


def fit_reverse_kl(chain: ChainMDP, policy, threshold: float, steps: int = 500,
                   batch: int = 64, lr: float = 0.5, pool: int = 4000, seed: int = 0):
    """MLE-fit a backward q on rejection-sampled R>L trajectories.

    Returns ``(kl_before, kl_after, q)`` where the KLs are
    KL(p(tau | R>L) || q) computed by exact enumeration.
    """
    rng = np.random.default_rng(seed)
    _, post, _, _ = trajectory_posterior(chain, policy, threshold)
    q = BackwardTrajectoryQ(chain, seed=seed)
    kl_before = reverse_kl_check(chain, post, q.q)
    samples = rejection_sample(chain, policy, threshold, pool, rng)
    for _ in range(steps):
        idx = rng.integers(len(samples), size=batch)
        q.fit_step([samples[i] for i in idx], lr)
    return kl_before, reverse_kl_check(chain, post, q.q), q
