"""Experience storage: whole trajectories ranked by return, and a PER baseline."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .env import Transition


def state_key(s):
    """Hashable key for a state (grid tuple, int, or float vector)."""
    if type(s) is tuple:
        return s
    if isinstance(s, (int, np.integer)):
        return int(s)
    return tuple(np.asarray(s).ravel().tolist())


def _to_json(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x


def _from_json(x):
    if isinstance(x, list):
        if all(isinstance(v, int) for v in x):
            return tuple(x)
        return np.asarray(x, dtype=float)
    return x


@dataclass
class Trajectory:
    states: list
    actions: list
    rewards: list
    next_states: list
    dones: list
    terminal: bool = False
    gamma: float = 0.99
    stamp: int = -1
    ret: float = field(init=False)

    def __post_init__(self):
        n = len(self.states)
        if not (len(self.actions) == len(self.rewards) == len(self.next_states)
                == len(self.dones) == n):
            raise ValueError("trajectory fields have different lengths")
        self.ret = float(sum(r * self.gamma ** t for t, r in enumerate(self.rewards)))

    @classmethod
    def from_transitions(cls, transitions, gamma: float = 0.99, terminal: bool = False):
        transitions = list(transitions)
        return cls([t.s for t in transitions], [t.a for t in transitions],
                   [float(t.r) for t in transitions], [t.s_next for t in transitions],
                   [bool(t.done) for t in transitions], terminal=terminal, gamma=gamma)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def undiscounted_return(self) -> float:
        return float(sum(self.rewards))

    def returns_to_go(self) -> np.ndarray:
        g = np.zeros(len(self))
        running = 0.0
        for t in range(len(self) - 1, -1, -1):
            running = self.rewards[t] + self.gamma * running
            g[t] = running
        return g

    def transitions(self):
        for s, a, r, s2, d in zip(self.states, self.actions, self.rewards,
                                  self.next_states, self.dones):
            yield Transition(s, a, r, s2, d)


class ReplayBuffer:
    """Bounded store of complete trajectories, evicting the oldest first.

    ``k_traj`` trajectories with the highest discounted return feed the
    backtracking model; within them only the top ``k_pct`` percent of
    transitions by value are used.
    """

    def __init__(self, capacity: int = 100_000, k_traj: int = 10, k_pct: float = 10.0):
        if capacity < 1 or k_traj < 1 or not 0 < k_pct <= 100:
            raise ValueError("capacity, k_traj must be positive and k_pct in (0, 100]")
        self.capacity = int(capacity)
        self.k_traj = int(k_traj)
        self.k_pct = float(k_pct)
        self.trajectories: deque[Trajectory] = deque()
        self.n_transitions = 0
        self._stamp = 0
        # arrival key -> (state, best reward); rebuilt lazily after evictions
        self._arrivals: dict | None = {}

    def __len__(self) -> int:
        return len(self.trajectories)

    def add_trajectory(self, traj: Trajectory) -> None:
        if len(traj) == 0:
            raise ValueError("cannot store an empty trajectory")
        traj.stamp = self._stamp
        self._stamp += 1
        self.trajectories.append(traj)
        self.n_transitions += len(traj)
        if self._arrivals is not None:
            self._note_arrivals(traj)
        while self.n_transitions > self.capacity and len(self.trajectories) > 1:
            old = self.trajectories.popleft()
            self.n_transitions -= len(old)
            self._arrivals = None

    def _note_arrivals(self, traj: Trajectory) -> None:
        arrivals = self._arrivals
        for r, s2 in zip(traj.rewards, traj.next_states):
            k = state_key(s2)
            seen = arrivals.get(k)
            if seen is None:
                arrivals[k] = (s2, r)
            elif r > seen[1]:
                arrivals[k] = (seen[0], r)

    def top_trajectories(self, k: int | None = None) -> list[Trajectory]:
        """Highest returns first; equal returns put the more recent one first."""
        k = self.k_traj if k is None else int(k)
        ranked = sorted(self.trajectories, key=lambda t: (-t.ret, -t.stamp))
        return ranked[:k]

    def returns(self) -> list[float]:
        return [t.ret for t in self.trajectories]

    def filtered_transitions(self, value_fn=None, k_traj: int | None = None,
                             k_pct: float | None = None, min_return: float | None = None):
        """Top ``k_pct`` percent of transitions, by value, from the best trajectories.

        Transitions are scored by ``value_fn(next_states)`` when a critic is
        given, otherwise by the observed discounted return-to-go from the
        transition. Returns ``(states, actions, next_states)`` lists.
        """
        k_pct = self.k_pct if k_pct is None else float(k_pct)
        trajs = self.top_trajectories(k_traj)
        if min_return is not None:
            trajs = [t for t in trajs if t.ret >= min_return]
        if not trajs:
            return [], [], []
        s, a, s2, scores = [], [], [], []
        for t in trajs:
            s.extend(t.states)
            a.extend(t.actions)
            s2.extend(t.next_states)
            if value_fn is None:
                scores.append(t.returns_to_go())
        if value_fn is None:
            scores = np.concatenate(scores)
        else:
            scores = np.asarray(value_fn(s2), dtype=float)
        keep = max(1, math.ceil(k_pct / 100.0 * len(s)))
        order = np.argsort(-scores, kind="stable")[:keep]
        return [s[i] for i in order], [a[i] for i in order], [s2[i] for i in order]

    def distinct_next_states(self):
        """Distinct arrival states with the best reward observed on arriving.

        States come in order of first arrival.
        """
        if self._arrivals is None:
            self._arrivals = {}
            for t in self.trajectories:
                self._note_arrivals(t)
        items = list(self._arrivals.values())
        return [st for st, _ in items], np.array([r for _, r in items], dtype=float)

    # ---- debugging dump, one transition per line

    def dump_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for i, t in enumerate(self.trajectories):
                for s, a, r, s2, d in zip(t.states, t.actions, t.rewards, t.next_states, t.dones):
                    fh.write(json.dumps({"traj": i, "s": _to_json(s), "a": _to_json(a), "r": r,
                                         "s_next": _to_json(s2), "done": d,
                                         "terminal": t.terminal, "gamma": t.gamma}) + "\n")

    @classmethod
    def load_jsonl(cls, path, **kwargs) -> "ReplayBuffer":
        buf = cls(**kwargs)
        rows: dict[int, list] = {}
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    rows.setdefault(row["traj"], []).append(row)
        for i in sorted(rows):
            r = rows[i]
            buf.add_trajectory(Trajectory(
                [_from_json(x["s"]) for x in r], [_from_json(x["a"]) for x in r],
                [x["r"] for x in r], [_from_json(x["s_next"]) for x in r],
                [x["done"] for x in r], terminal=r[0]["terminal"], gamma=r[0]["gamma"]))
        return buf


class SeedSelection(NamedTuple):
    states: list
    truncated: bool


def select_high_value_states(buf: ReplayBuffer, value_fn=None, k_pct: float = 10.0, n: int = 1,
                             seed_temperature: float = 0.0, rng=None) -> SeedSelection:
    """Pick states to seed backward traces from.

    With ``seed_temperature == 0`` the ``n`` best-scoring distinct states
    are returned (critic value, or best observed arrival reward without a
    critic). With a positive temperature, ``n`` states are drawn without
    replacement with probability proportional to ``exp(score / T)`` from
    the top ``k_pct`` percent of states.
    """
    if len(buf) == 0:
        raise ValueError("buffer is empty")
    if seed_temperature < 0:
        raise ValueError("seed_temperature must be nonnegative")
    states, rewards = buf.distinct_next_states()
    scores = rewards if value_fn is None else np.asarray(value_fn(states), dtype=float)
    order = np.argsort(-scores, kind="stable")
    if seed_temperature == 0:
        truncated = n > len(states)
        return SeedSelection([states[i] for i in order[:n]], truncated)
    pool = order[:max(1, math.ceil(k_pct / 100.0 * len(states)))]
    truncated = n > len(pool)
    if truncated:
        return SeedSelection([states[i] for i in pool], True)
    z = scores[pool] / seed_temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    rng = np.random.default_rng() if rng is None else rng
    picked = rng.choice(len(pool), size=n, replace=False, p=p)
    return SeedSelection([states[pool[i]] for i in picked], False)


def generate_goal_states(*args, **kwargs):
    """Generative goal proposals are not part of this package."""
    raise NotImplementedError("generated goal states (gen_state=true) are not implemented")


class PerBuffer:
    """Proportional prioritized replay over single transitions.

    Priority ``p_i = min((|delta_i| + eps) ** per_alpha, p_max)``; sampling is
    with replacement, ``P(i) = p_i / sum_j p_j``, and importance weights
    ``(N P(i)) ** -per_beta`` are divided by their batch maximum.
    """

    def __init__(self, capacity: int = 100_000, per_alpha: float = 0.8, per_beta: float = 0.1,
                 eps: float = 1e-6, p_max: float = 1e3):
        self.capacity = int(capacity)
        self.per_alpha = float(per_alpha)
        self.per_beta = float(per_beta)
        self.eps = float(eps)
        self.p_max = float(p_max)
        self._items: list = [None] * self.capacity
        self._prio = np.zeros(self.capacity)
        self._next_id = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def priority(self, delta) -> np.ndarray:
        d = np.abs(np.asarray(delta, dtype=float))
        with np.errstate(over="ignore", invalid="ignore"):
            p = (d + self.eps) ** self.per_alpha
        return np.minimum(np.nan_to_num(p, nan=self.p_max, posinf=self.p_max), self.p_max)

    def add(self, transition, delta=None) -> int:
        if delta is None:
            p = float(self._prio[:self._size].max()) if self._size else 1.0
        else:
            p = float(self.priority(delta))
        i = self._next_id
        slot = i % self.capacity
        self._items[slot] = transition
        self._prio[slot] = p
        self._next_id += 1
        self._size = min(self._size + 1, self.capacity)
        return i

    def _slots(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        oldest = self._next_id - self._size
        if np.any(ids < oldest) or np.any(ids >= self._next_id):
            raise KeyError(f"unknown transition id among {ids.tolist()}")
        return ids % self.capacity

    def probabilities(self) -> np.ndarray:
        p = self._prio[:self._size]
        return p / p.sum()

    def slot_to_id(self, slots) -> np.ndarray:
        slots = np.asarray(slots, dtype=np.int64)
        base = self._next_id - (self._next_id % self.capacity)
        ids = base + slots
        return np.where(ids >= self._next_id, ids - self.capacity, ids)

    def sample(self, batch: int, rng: np.random.Generator):
        """Returns ``(ids, transitions, weights)``."""
        if self._size < batch:
            raise ValueError(f"buffer holds {self._size} transitions, batch {batch} requested")
        probs = self.probabilities()
        slots = rng.choice(self._size, size=batch, replace=True, p=probs)
        w = (self._size * probs[slots]) ** (-self.per_beta)
        w /= w.max()
        return self.slot_to_id(slots), [self._items[s] for s in slots], w

    def update_priorities(self, ids, deltas) -> None:
        slots = self._slots(ids)
        self._prio[slots] = self.priority(deltas)

    def priorities(self) -> np.ndarray:
        return self._prio[:self._size].copy()
