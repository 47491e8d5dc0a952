"""Backtracking model q(s_t, a_t | s_{t+1}) and recall-trace generation.

The joint factorizes into a backward action predictor q(a_t | s_{t+1}) and a
state generator. Discrete spaces get a categorical over a fixed list of
candidate predecessors of s_{t+1}; continuous spaces model the normalized
state change Delta s_t = s_t - s_{t+1} with a diagonal Gaussian.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .nn import CategoricalHead, GaussianHead, Mlp, log_softmax, sgd_step

MASKED = -1e30
LOG_STD_RANGE = (-7.0, 3.0)


class Normalizer:
    """Running per-dimension mean and standard deviation."""

    def __init__(self, dim: int, min_std: float = 1e-3):
        self.dim = int(dim)
        self.min_std = float(min_std)
        self.count = 0
        self.mean = np.zeros(dim)
        self._m2 = np.zeros(dim)

    @property
    def std(self) -> np.ndarray:
        if self.count < 2:
            return np.ones(self.dim)
        return np.maximum(np.sqrt(self._m2 / self.count), self.min_std)

    def update(self, x) -> None:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        if n == 0:
            return
        mean_b = x.mean(axis=0)
        m2_b = ((x - mean_b) ** 2).sum(axis=0)
        total = self.count + n
        delta = mean_b - self.mean
        self.mean = self.mean + delta * n / total
        self._m2 = self._m2 + m2_b + delta ** 2 * self.count * n / total
        self.count = total

    def normalize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def unnormalize(self, z) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.std + self.mean


@dataclass
class Trace:
    """Forward-ordered recall trace; ``next_states[-1]`` is the seed state."""

    states: list
    actions: list
    next_states: list
    seed_state: object
    truncated: bool = False

    @property
    def length(self) -> int:
        return len(self.states)

    def to_json(self) -> str:
        conv = lambda v: np.asarray(v).tolist()  # noqa: E731
        return json.dumps({"states": [conv(s) for s in self.states],
                           "actions": [conv(a) for a in self.actions],
                           "next_states": [conv(s) for s in self.next_states],
                           "seed_state": conv(self.seed_state),
                           "truncated": self.truncated})


def dump_traces_jsonl(traces, path) -> None:
    with open(path, "w") as fh:
        for tr in traces:
            fh.write(tr.to_json() + "\n")


@dataclass
class _Batch:
    """Encoded training tuples; ``target`` is the candidate slot (discrete)."""

    x_next: np.ndarray
    a: np.ndarray
    target: np.ndarray
    mask: np.ndarray | None = None
    raw: tuple = field(default=(), repr=False)

    def __len__(self) -> int:
        return self.x_next.shape[0]

    def take(self, idx) -> "_Batch":
        return _Batch(self.x_next[idx], self.a[idx], self.target[idx],
                      None if self.mask is None else self.mask[idx])


class BacktrackModel:
    """Backward action predictor plus backward state generator.

    ``space`` is the environment (or anything with the same encoding
    helpers). For discrete spaces ``state_source="true"`` swaps the learned
    state generator for the environment's exact predecessor sets.
    """

    def __init__(self, space, beta: float = 0.05, hidden: int = 128, seed: int = 0,
                 state_source: str = "learned", zero_last: bool = False):
        if state_source not in ("learned", "true"):
            raise ValueError(f"state_source must be 'learned' or 'true', got {state_source!r}")
        self.space = space
        self.discrete = bool(space.discrete)
        self.beta = float(beta)
        self.state_source = state_source
        if not self.discrete and state_source == "true":
            raise ValueError("exact predecessor sets exist only for discrete spaces")
        obs = space.obs_dim
        if self.discrete:
            n_a = space.n_actions
            self.action_predictor = Mlp([obs, hidden, hidden, n_a], ["tanh", "tanh", "identity"],
                                        seed=seed, zero_last=zero_last)
            self.state_predictor = Mlp([obs + n_a, hidden, hidden, space.n_candidates],
                                       ["relu", "relu", "identity"], seed=seed + 1,
                                       zero_last=zero_last)
        else:
            d_a = space.act_dim
            self.action_predictor = Mlp([obs, hidden, hidden, d_a], ["tanh", "tanh", "identity"],
                                        seed=seed, zero_last=zero_last)
            self.state_predictor = Mlp([obs + d_a, hidden, hidden, 2 * obs],
                                       ["relu", "relu", "identity"], seed=seed + 1,
                                       zero_last=zero_last)
            self.state_norm = Normalizer(obs)
            self.action_norm = Normalizer(d_a)
            self.delta_norm = Normalizer(obs)

    # ---- encoding

    def _onehot_actions(self, actions) -> np.ndarray:
        a = np.asarray(actions, dtype=int)
        out = np.zeros((a.size, self.space.n_actions))
        out[np.arange(a.size), a] = 1.0
        return out

    def _candidates(self, s_next):
        cands = self.space.candidate_predecessors(s_next)
        mask = np.array([c is None for c in cands])
        return cands, mask

    def encode(self, states, actions, next_states) -> _Batch:
        if not self.discrete:
            s = np.asarray(states, dtype=float).reshape(len(states), -1)
            s2 = np.asarray(next_states, dtype=float).reshape(len(next_states), -1)
            a = np.asarray(actions, dtype=float).reshape(len(actions), -1)
            return _Batch(self.state_norm.normalize(s2), self.action_norm.normalize(a),
                          self.delta_norm.normalize(s - s2))
        n = len(states)
        target = np.zeros(n, dtype=int)
        mask = np.zeros((n, self.space.n_candidates), dtype=bool)
        for i, (s, s2) in enumerate(zip(states, next_states)):
            cands, mask[i] = self._candidates(s2)
            key = _key(s)
            for j, c in enumerate(cands):
                if c is not None and _key(c) == key:
                    target[i] = j
                    break
            else:
                raise ValueError(f"state {s} is not a candidate predecessor of {s2}")
        return _Batch(self.space.encode(list(next_states)), np.asarray(actions, dtype=int),
                      target, mask, raw=(list(states), list(next_states)))

    # ---- log-densities

    def _state_inputs(self, b: _Batch) -> np.ndarray:
        a = self._onehot_actions(b.a) if self.discrete else b.a
        return np.concatenate([b.x_next, a], axis=1)

    def _state_logits(self, b: _Batch) -> np.ndarray:
        logits = self.state_predictor.forward(self._state_inputs(b))
        return np.where(b.mask, MASKED, logits)

    def _split_state_out(self, out):
        d = out.shape[1] // 2
        return out[:, :d], np.clip(out[:, d:], *LOG_STD_RANGE)

    def head_log_probs(self, states, actions, next_states):
        """Per-step ``(log q(a_t|s_{t+1}), log q(s_t or Delta s_t | a_t, s_{t+1}))``."""
        b = self.encode(states, actions, next_states)
        return self._head_log_probs(b)

    def _head_log_probs(self, b: _Batch):
        if self.discrete:
            la = CategoricalHead(self.action_predictor.forward(b.x_next)).log_prob(b.a)
            if self.state_source == "true":
                ls = self._true_state_log_probs(b)
            else:
                lp = log_softmax(self._state_logits(b))
                ls = lp[np.arange(len(b)), b.target]
            return np.atleast_1d(la), ls
        mean_a = self.action_predictor.forward(b.x_next)
        la = GaussianHead(mean_a, 0.0).log_prob(b.a)
        mean_d, log_std_d = self._split_state_out(self.state_predictor.forward(self._state_inputs(b)))
        ls = GaussianHead(mean_d, log_std_d).log_prob(b.target)
        return la, ls

    def _true_state_log_probs(self, b: _Batch) -> np.ndarray:
        states, next_states = b.raw
        out = np.empty(len(b))
        for i, (s, s2, a) in enumerate(zip(states, next_states, b.a)):
            preds = [_key(p) for p in self.space.predecessors(s2, int(a))]
            out[i] = -math.log(len(preds)) if _key(s) in preds else -math.inf
        return out

    def log_likelihood(self, states, actions, next_states) -> float:
        la, ls = self.head_log_probs(states, actions, next_states)
        return float(np.sum(la) + np.sum(ls))

    # ---- training

    def nll_grads(self, b: _Batch):
        """Gradients of the mean negative log-likelihood over a batch.

        Returns ``(action_grads, state_grads, mean_nll)``; ``state_grads`` is
        ``None`` when the state generator is the exact one.
        """
        n = len(b)
        if self.discrete:
            head = CategoricalHead(self.action_predictor.forward(b.x_next))
            la = head.log_prob(b.a)
            ga, _ = self.action_predictor.backward(-head.grad_log_prob(b.a) / n, input_grad=False)
            if self.state_source == "true":
                return ga, None, float(-np.mean(la))
            sh = CategoricalHead(self._state_logits(b))
            ls = sh.log_prob(b.target)
            gs, _ = self.state_predictor.backward(-sh.grad_log_prob(b.target) / n, input_grad=False)
            return ga, gs, float(-np.mean(la) - np.mean(ls))
        mean_a = self.action_predictor.forward(b.x_next)
        ah = GaussianHead(mean_a, 0.0)
        la = ah.log_prob(b.a)
        d_mean_a, _ = ah.grad_log_prob(b.a)
        ga, _ = self.action_predictor.backward(-d_mean_a / n, input_grad=False)
        out = self.state_predictor.forward(self._state_inputs(b))
        mean_d, log_std_d = self._split_state_out(out)
        sh = GaussianHead(mean_d, log_std_d)
        ls = sh.log_prob(b.target)
        d_mean, d_log_std = sh.grad_log_prob(b.target)
        d = mean_d.shape[1]
        inside = (out[:, d:] > LOG_STD_RANGE[0]) & (out[:, d:] < LOG_STD_RANGE[1])
        d_out = np.concatenate([-d_mean, -d_log_std * inside], axis=1) / n
        gs, _ = self.state_predictor.backward(d_out, input_grad=False)
        return ga, gs, float(-np.mean(la) - np.mean(ls))

    def train_step(self, b: _Batch, lr: float | None = None) -> float:
        lr = self.beta if lr is None else lr
        ga, gs, nll = self.nll_grads(b)
        if not math.isfinite(nll):
            raise FloatingPointError(f"backtracking loss is {nll}")
        sgd_step(self.action_predictor.params(), ga, lr)
        if gs is not None:
            sgd_step(self.state_predictor.params(), gs, lr)
        return nll

    def update_normalizers(self, states, actions, next_states) -> None:
        if self.discrete:
            return
        s = np.asarray(states, dtype=float).reshape(len(states), -1)
        s2 = np.asarray(next_states, dtype=float).reshape(len(next_states), -1)
        self.state_norm.update(s2)
        self.action_norm.update(np.asarray(actions, dtype=float).reshape(len(actions), -1))
        self.delta_norm.update(s - s2)

    # ---- sampling

    def sample_step(self, s_next, rng: np.random.Generator, greedy: bool = False):
        """One backward step from ``s_next``: returns ``(s, a, truncated)``."""
        if self.discrete:
            return self._sample_discrete(s_next, rng, greedy)
        z_next = self.state_norm.normalize(np.asarray(s_next, dtype=float))[None, :]
        mean_a = self.action_predictor.forward(z_next)
        za = mean_a if greedy else mean_a + rng.standard_normal(mean_a.shape)
        mean_d, log_std_d = self._split_state_out(
            self.state_predictor.forward(np.concatenate([z_next, za], axis=1)))
        zd = mean_d if greedy else mean_d + np.exp(log_std_d) * rng.standard_normal(mean_d.shape)
        a = self.action_norm.unnormalize(za[0])
        s = np.asarray(s_next, dtype=float) + self.delta_norm.unnormalize(zd[0])
        truncated = False
        low, high = getattr(self.space, "low", None), getattr(self.space, "high", None)
        if low is not None and (np.any(s < low) or np.any(s > high)):
            s = np.clip(s, low, high)
            truncated = True
        return s, a, truncated

    def _sample_discrete(self, s_next, rng, greedy):
        x = self.space.encode([s_next])
        p_a = CategoricalHead(self.action_predictor.forward(x)[0]).probs()
        if self.state_source == "true":
            preds = [self.space.predecessors(s_next, a) for a in range(len(p_a))]
            feasible = np.array([len(p) > 0 for p in preds])
            if not feasible.any():
                return s_next, int(rng.integers(len(p_a))), True
            p_a = np.where(feasible, p_a, 0.0)
            p_a /= p_a.sum()
            a = int(np.argmax(p_a)) if greedy else int(rng.choice(len(p_a), p=p_a))
            options = preds[a]
            s = options[0] if greedy else options[int(rng.integers(len(options)))]
            return s, a, False
        a = int(np.argmax(p_a)) if greedy else int(rng.choice(len(p_a), p=p_a))
        cands, mask = self._candidates(s_next)
        logits = self.state_predictor.forward(
            np.concatenate([x, self._onehot_actions([a])], axis=1))[0]
        p_s = CategoricalHead(np.where(mask, MASKED, logits)).probs()
        j = int(np.argmax(p_s)) if greedy else int(rng.choice(len(p_s), p=p_s))
        return cands[j], a, False

    def action_probs(self, next_states) -> np.ndarray:
        """q(a | s_{t+1}) for a batch of discrete states."""
        return CategoricalHead(self.action_predictor.forward(
            self.space.encode(list(next_states)))).probs()


def _key(s):
    if isinstance(s, (int, np.integer)):
        return int(s)
    return tuple(np.asarray(s).ravel().tolist())


def backtrack_loss(model: BacktrackModel, trajectory) -> float:
    """Log-likelihood of a trajectory under the backtracking model.

    Training maximizes this quantity (minimizes its negative).
    """
    if len(trajectory.states) < 1:
        raise ValueError("trajectory must contain at least one step")
    value = model.log_likelihood(trajectory.states, trajectory.actions, trajectory.next_states)
    if math.isnan(value):
        raise FloatingPointError("backtracking log-likelihood is NaN")
    return value


def train_backtrack(model: BacktrackModel, buf, steps: int, rng: np.random.Generator,
                    value_fn=None, batch_size: int = 256, min_return: float | None = None,
                    lr: float | None = None) -> list[float]:
    """Stochastic gradient steps on the filtered high-value part of ``buf``.

    Minibatches are drawn uniformly, with replacement, from the top
    ``buf.k_pct`` percent of transitions of the top ``buf.k_traj``
    trajectories. Returns the minibatch negative log-likelihood per step.
    """
    if steps <= 0:
        return []
    states, actions, next_states = buf.filtered_transitions(value_fn, min_return=min_return)
    if not states:
        warnings.warn("no qualifying transitions for the backtracking model; skipped", stacklevel=2)
        return []
    model.update_normalizers(states, actions, next_states)
    data = model.encode(states, actions, next_states)
    history = []
    for _ in range(int(steps)):
        idx = rng.integers(len(data), size=min(batch_size, max(len(data), 1)))
        history.append(model.train_step(data.take(idx), lr))
    return history


def generate_trace(model: BacktrackModel, seed_state, length: int, rng: np.random.Generator,
                   greedy: bool = False) -> Trace:
    """Sample ``length`` steps backward from ``seed_state``; returned in forward order."""
    if length < 1:
        raise ValueError("trace length must be at least 1")
    states, actions, nexts = [], [], []
    s_next = seed_state
    truncated = False
    for _ in range(int(length)):
        s, a, cut = model.sample_step(s_next, rng, greedy)
        truncated = truncated or cut
        states.append(s)
        actions.append(a)
        nexts.append(s_next)
        s_next = s
    return Trace(states[::-1], actions[::-1], nexts[::-1], seed_state, truncated)


def random_backtrack_model(env, seed: int = 0) -> BacktrackModel:
    """Untrained backward action predictor (uniform or unit Gaussian).

    On discrete environments the state generator is the exact predecessor
    set; continuous environments keep an untrained generator.
    """
    source = "true" if env.discrete else "learned"
    return BacktrackModel(env, seed=seed, state_source=source, zero_last=True)
