"""Environments with small, fully known dynamics.

``FourRoomEnv`` is the sparse-reward maze used for the learning curves,
``PointMassEnv`` is a continuous 2-d stand-in, and ``ChainMDP`` is a tiny
tabular MDP whose trajectory distribution can be enumerated exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
ACTION_NAMES = ("up", "down", "left", "right")
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))
# predecessor candidates for a grid cell: itself, then the four neighbours
CANDIDATE_OFFSETS = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass(frozen=True)
class Transition:
    s: Any
    a: Any
    r: float
    s_next: Any
    done: bool


class FourRoomEnv:
    """Square grid split into four rooms by walls along the midlines.

    Each of the four wall segments has a single doorway at its midpoint.
    Reward is +1 on entering the goal cell (bottom-right room corner) and 0
    otherwise. States are ``(row, col)`` tuples.
    """

    n_actions = 4
    reward_range = (0.0, 1.0)
    discrete = True

    def __init__(self, size: int = 11, slip: float = 0.0, max_steps: int | None = None,
                 gamma: float = 0.99):
        size = int(size)
        if size < 7 or size % 2 == 0:
            raise ValueError(f"four-room size must be an odd integer >= 7, got {size}")
        if not 0.0 <= slip <= 1.0:
            raise ValueError(f"slip must lie in [0, 1], got {slip}")
        self.size = size
        self.slip = float(slip)
        self.gamma = float(gamma)
        self.max_steps = int(max_steps) if max_steps is not None else 4 * size * size
        self.walls = self._build_walls(size)
        self.start = (1, 1)
        self.goal = (size - 2, size - 2)
        self.cells = [(r, c) for r in range(size) for c in range(size) if not self.walls[r, c]]
        self._index = {cell: i for i, cell in enumerate(self.cells)}
        self._check_connected()
        self.state = None
        self.t = 0
        self._rng = np.random.default_rng(0)

    @staticmethod
    def _build_walls(size: int) -> np.ndarray:
        w = np.zeros((size, size), dtype=bool)
        w[0, :] = w[-1, :] = w[:, 0] = w[:, -1] = True
        mid = size // 2
        w[mid, :] = True
        w[:, mid] = True
        lo_a, hi_a = 1, mid - 1
        lo_b, hi_b = mid + 1, size - 2
        w[(lo_a + hi_a) // 2, mid] = False
        w[(lo_b + hi_b) // 2, mid] = False
        w[mid, (lo_a + hi_a) // 2] = False
        w[mid, (lo_b + hi_b) // 2] = False
        return w

    def _check_connected(self) -> None:
        seen = {self.goal}
        frontier = [self.goal]
        while frontier:
            cell = frontier.pop()
            for dr, dc in MOVES:
                nxt = (cell[0] + dr, cell[1] + dc)
                if nxt not in seen and self.is_open(nxt):
                    seen.add(nxt)
                    frontier.append(nxt)
        if len(seen) != len(self.cells):
            raise ValueError("four-room layout is not connected")

    # ---- layout helpers

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def obs_dim(self) -> int:
        return len(self.cells)

    def is_open(self, cell) -> bool:
        r, c = cell
        return 0 <= r < self.size and 0 <= c < self.size and not self.walls[r, c]

    def index(self, cell) -> int:
        return self._index[tuple(cell)]

    def encode(self, states) -> np.ndarray:
        """One-hot features; accepts one cell or a sequence of cells."""
        if len(states) == 2 and np.isscalar(states[0]):
            out = np.zeros(self.n_cells)
            out[self._index[tuple(states)]] = 1.0
            return out
        out = np.zeros((len(states), self.n_cells))
        out[np.arange(len(states)), [self._index[tuple(s)] for s in states]] = 1.0
        return out

    def is_terminal(self, cell) -> bool:
        return tuple(cell) == self.goal

    def move(self, cell, action: int):
        """Deterministic dynamics: blocked moves leave the agent in place."""
        dr, dc = MOVES[action]
        nxt = (cell[0] + dr, cell[1] + dc)
        return nxt if self.is_open(nxt) else tuple(cell)

    def predecessors(self, cell, action: int) -> list:
        """Every non-terminal open cell ``s`` with ``move(s, action) == cell``."""
        cell = tuple(cell)
        out = []
        for dr, dc in CANDIDATE_OFFSETS:
            s = (cell[0] + dr, cell[1] + dc)
            if self.is_open(s) and not self.is_terminal(s) and self.move(s, action) == cell:
                out.append(s)
        return out

    def candidate_predecessors(self, cell) -> list:
        """Fixed-order candidate list used by the learned state predictor.

        Slots whose cell is not a state (wall or off-grid) are ``None``.
        """
        out = []
        for dr, dc in CANDIDATE_OFFSETS:
            s = (cell[0] + dr, cell[1] + dc)
            out.append(s if self.is_open(s) else None)
        return out

    @property
    def n_candidates(self) -> int:
        return len(CANDIDATE_OFFSETS)

    def ascii(self) -> str:
        rows = []
        for r in range(self.size):
            row = []
            for c in range(self.size):
                if self.walls[r, c]:
                    row.append("#")
                elif (r, c) == self.goal:
                    row.append("G")
                elif (r, c) == self.start:
                    row.append("S")
                else:
                    row.append(".")
            rows.append("".join(row))
        return "\n".join(rows)

    # ---- episode interface

    def reset(self, seed: int | None = None):
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.state = self.start
        self.t = 0
        return self.state

    def step(self, action) -> Transition:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        action = _check_discrete_action(action, self.n_actions)
        taken = action
        if self.slip > 0.0 and self._rng.random() < self.slip:
            taken = int(self._rng.integers(self.n_actions))
        s = self.state
        s_next = self.move(s, taken)
        self.t += 1
        reached = s_next == self.goal
        r = 1.0 if reached else 0.0
        done = reached or self.t >= self.max_steps
        self.state = s_next
        return Transition(s, action, r, s_next, done)


def _check_discrete_action(action, n: int) -> int:
    if isinstance(action, (bool, np.bool_)) or not isinstance(action, (int, np.integer)):
        raise ValueError(f"action must be an integer in 0..{n - 1}, got {action!r}")
    if not 0 <= int(action) < n:
        raise ValueError(f"action {action} outside 0..{n - 1}")
    return int(action)


class PointMassEnv:
    """Point in the box ``[-bound, bound]^2`` moved by clipped displacements."""

    discrete = False
    act_dim = 2
    obs_dim = 2
    reward_range = (0.0, 1.0)

    def __init__(self, bound: float = 1.0, max_step: float = 0.1, eps_goal: float = 0.05,
                 noise_std: float = 0.0, goal=(0.5, 0.5), max_steps: int = 200,
                 gamma: float = 0.99):
        if noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        self.bound = float(bound)
        self.max_step = float(max_step)
        self.eps_goal = float(eps_goal)
        self.noise_std = float(noise_std)
        self.goal = np.asarray(goal, dtype=float)
        self.max_steps = int(max_steps)
        self.gamma = float(gamma)
        self.low = np.full(2, -self.bound)
        self.high = np.full(2, self.bound)
        self.state = None
        self.t = 0
        self._rng = np.random.default_rng(0)

    def encode(self, states) -> np.ndarray:
        return np.asarray(states, dtype=float) / self.bound

    def clip_action(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=float).reshape(2)
        norm = float(np.linalg.norm(a))
        if norm > self.max_step:
            a = a * (self.max_step / norm)
        return a

    def clip_state(self, x) -> np.ndarray:
        return np.clip(x, self.low, self.high)

    def is_terminal(self, x) -> bool:
        return float(np.linalg.norm(np.asarray(x) - self.goal)) <= self.eps_goal

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.state = self._rng.uniform(-self.bound, self.bound, size=2)
        self.t = 0
        return self.state.copy()

    def step(self, action) -> Transition:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        a = np.asarray(action, dtype=float)
        if a.shape != (2,) or not np.all(np.isfinite(a)):
            raise ValueError(f"action must be a finite 2-vector, got {action!r}")
        a = self.clip_action(a)
        s = self.state
        s_next = s + a
        if self.noise_std > 0:
            s_next = s_next + self.noise_std * self._rng.standard_normal(2)
        s_next = self.clip_state(s_next)
        self.t += 1
        reached = self.is_terminal(s_next)
        r = 1.0 if reached else 0.0
        done = reached or self.t >= self.max_steps
        self.state = s_next
        return Transition(s.copy(), a, r, s_next.copy(), done)


class ChainMDP:
    """Finite-horizon tabular MDP started in state 0.

    ``P[s, a, s']`` is the transition table and ``R[s, a]`` the reward.
    """

    discrete = True

    def __init__(self, P, R, horizon: int, gamma: float = 1.0):
        P = np.asarray(P, dtype=float)
        R = np.asarray(R, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or R.shape != P.shape[:2]:
            raise ValueError(f"inconsistent shapes P{P.shape} R{R.shape}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("transition rows must be nonnegative and sum to 1")
        if horizon < 1:
            raise ValueError("horizon must be positive")
        self.P = P
        self.R = R
        self.horizon = int(horizon)
        self.gamma = float(gamma)
        self.n_states, self.n_actions = R.shape
        self.reward_range = (float(R.min()), float(R.max()))
        self.state = None
        self.t = 0
        self._rng = np.random.default_rng(0)

    @classmethod
    def random(cls, n_states: int, n_actions: int, horizon: int, rng: np.random.Generator,
               gamma: float = 1.0, sparsity: float = 0.5) -> "ChainMDP":
        P = rng.random((n_states, n_actions, n_states))
        P[P < sparsity] = 0.0
        # keep at least one successor per row
        P[np.arange(n_states)[:, None], np.arange(n_actions)[None, :],
          rng.integers(n_states, size=(n_states, n_actions))] += 1.0
        P /= P.sum(axis=2, keepdims=True)
        R = (rng.random((n_states, n_actions)) < 0.3).astype(float)
        return cls(P, R, horizon, gamma)

    @classmethod
    def slippery_chain(cls, n_states: int = 4, slip: float = 0.2, horizon: int = 5,
                       gamma: float = 1.0) -> "ChainMDP":
        """Left/right chain; the move fails with probability ``slip``.

        Reward 1 for every step that ends in the rightmost state.
        """
        P = np.zeros((n_states, 2, n_states))
        for s in range(n_states):
            for a, d in ((0, -1), (1, 1)):
                nxt = min(max(s + d, 0), n_states - 1)
                P[s, a, nxt] += 1.0 - slip
                P[s, a, s] += slip
        return _ArrivalChain(P, n_states - 1, horizon, gamma)

    # ---- discrete space adapter for the backtracking model

    @property
    def obs_dim(self) -> int:
        return self.n_states

    @property
    def n_candidates(self) -> int:
        return self.n_states

    def encode(self, states) -> np.ndarray:
        states = np.atleast_1d(np.asarray(states, dtype=int))
        out = np.zeros((states.size, self.n_states))
        out[np.arange(states.size), states] = 1.0
        return out

    def candidate_predecessors(self, state) -> list:
        return list(range(self.n_states))

    def predecessors(self, state, action: int) -> list:
        return [s for s in range(self.n_states) if self.P[s, action, state] > 0]

    def is_terminal(self, state) -> bool:
        return False

    def reward(self, s: int, a: int, s_next: int) -> float:
        return float(self.R[s, a])

    # ---- episode interface

    def reset(self, seed: int | None = None) -> int:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.state = 0
        self.t = 0
        return 0

    def step(self, action) -> Transition:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        action = _check_discrete_action(action, self.n_actions)
        s = self.state
        s_next = int(self._rng.choice(self.n_states, p=self.P[s, action]))
        r = self.reward(s, action, s_next)
        self.t += 1
        self.state = s_next
        return Transition(s, action, r, s_next, self.t >= self.horizon)


class _ArrivalChain(ChainMDP):
    """Chain whose reward depends on the arrival state, not on (s, a)."""

    def __init__(self, P, rewarded_state: int, horizon: int, gamma: float):
        R = P[:, :, rewarded_state].copy()
        super().__init__(P, R, horizon, gamma)
        self.rewarded_state = rewarded_state

    def reward(self, s, a, s_next):
        return 1.0 if s_next == self.rewarded_state else 0.0


@dataclass(frozen=True)
class ChainTrajectory:
    states: tuple
    actions: tuple
    rewards: tuple


def enumerate_trajectories(chain: ChainMDP, policy, limit: int = 10**6):
    """All positive-probability trajectories of ``chain`` under ``policy``.

    ``policy`` is an ``(n_states, n_actions)`` table or a callable
    ``policy(t, s) -> probability vector``. Returns a list of
    ``(trajectory, probability, discounted_return)`` triples.
    """
    if callable(policy):
        pi = policy
    else:
        table = np.asarray(policy, dtype=float)
        if table.shape != (chain.n_states, chain.n_actions):
            raise ValueError(f"policy table shape {table.shape} does not match the chain")
        pi = lambda t, s: table[s]  # noqa: E731

    out = []
    # depth-first over (state, action, next state); zero-probability branches pruned
    stack = [((0,), (), (), 1.0)]
    while stack:
        states, actions, rewards, prob = stack.pop()
        t = len(actions)
        if t == chain.horizon:
            ret = sum(r * chain.gamma ** i for i, r in enumerate(rewards))
            out.append((ChainTrajectory(states, actions, rewards), prob, ret))
            if len(out) > limit:
                raise ValueError(f"more than {limit} trajectories; enumeration refused")
            continue
        s = states[-1]
        probs = np.asarray(pi(t, s), dtype=float)
        for a in range(chain.n_actions - 1, -1, -1):
            if probs[a] <= 0:
                continue
            for s_next in range(chain.n_states - 1, -1, -1):
                p = chain.P[s, a, s_next]
                if p <= 0:
                    continue
                stack.append((states + (s_next,), actions + (a,),
                              rewards + (chain.reward(s, a, s_next),), prob * probs[a] * p))
        if len(stack) > limit * (chain.n_states * chain.n_actions + 1):
            raise ValueError(f"more than {limit} trajectories; enumeration refused")
    return out
