"""Boltzmann policies on finite contextual bandits.

The target for context ``s`` at temperature ``T`` is
``p*(a|s) = exp(rbar(s,a) / T) / Z_T(s)``: high reward means high
probability, large ``T`` flattens towards uniform and small ``T``
concentrates on the best action. A tabular softmax policy is fitted by
exact gradient descent on ``KL(p_theta || p*)``, optionally while the
temperature is lowered.

For any policy the free energy splits as

    KL(p_theta || p*) = -J_r / T - S(p_theta) + E_s[log Z_T(s)]

with ``J_r`` the expected reward and ``S`` the context-averaged entropy.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .nn import log_softmax, softmax

ANNEAL_COLUMNS = ("step", "T", "J_r", "entropy", "kl")


@dataclass
class BoltzmannTask:
    """Context distribution ``p_s`` (S,), mean rewards ``rbar`` (S, A), temperature."""

    p_s: np.ndarray
    rbar: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        self.p_s = np.asarray(self.p_s, dtype=float)
        self.rbar = np.atleast_2d(np.asarray(self.rbar, dtype=float))
        if self.p_s.ndim != 1 or self.p_s.shape[0] != self.rbar.shape[0]:
            raise ValueError(f"p_s shape {self.p_s.shape} does not match rbar {self.rbar.shape}")
        if not np.all(np.isfinite(self.rbar)):
            raise ValueError("reward table must be finite")
        if np.any(self.p_s < 0) or abs(self.p_s.sum() - 1.0) > 1e-9:
            raise ValueError("context probabilities must be nonnegative and sum to 1")
        _check_temperature(self.temperature)

    @property
    def n_contexts(self) -> int:
        return self.rbar.shape[0]

    @property
    def n_actions(self) -> int:
        return self.rbar.shape[1]

    @classmethod
    def random(cls, n_contexts: int, n_actions: int, rng: np.random.Generator,
               temperature: float = 1.0) -> "BoltzmannTask":
        p = rng.dirichlet(np.ones(n_contexts))
        return cls(p, rng.uniform(0.0, 1.0, size=(n_contexts, n_actions)), temperature)


@dataclass
class SoftPolicy:
    """Tabular softmax policy, one logit row per context."""

    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.atleast_2d(np.asarray(self.logits, dtype=float))

    @classmethod
    def uniform(cls, n_contexts: int, n_actions: int) -> "SoftPolicy":
        return cls(np.zeros((n_contexts, n_actions)))

    @classmethod
    def random(cls, n_contexts: int, n_actions: int, rng: np.random.Generator,
               scale: float = 1.0) -> "SoftPolicy":
        return cls(rng.normal(0.0, scale, size=(n_contexts, n_actions)))

    @classmethod
    def from_probs(cls, probs) -> "SoftPolicy":
        with np.errstate(divide="ignore"):
            return cls(np.log(np.asarray(probs, dtype=float)))

    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits)


@dataclass
class BoltzmannTarget:
    probs: np.ndarray
    log_z: float

    @property
    def z(self) -> float:
        # overflows to inf for very small temperatures; log_z stays finite
        with np.errstate(over="ignore"):
            return float(np.exp(self.log_z))


def _check_temperature(t: float) -> None:
    if not (t > 0 and math.isfinite(t)):
        raise ValueError(f"temperature must be positive and finite, got {t}")


def _logsumexp(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]


def boltzmann_target(task: BoltzmannTask, s: int, temperature: float | None = None) -> BoltzmannTarget:
    """``p*(.|s)`` proportional to ``exp(rbar(s, .) / T)``, with ``log Z_T(s)``."""
    t = task.temperature if temperature is None else temperature
    _check_temperature(t)
    z = task.rbar[s] / t
    log_z = float(_logsumexp(z))
    return BoltzmannTarget(np.exp(z - log_z), log_z)


def greedy_target(task: BoltzmannTask, s: int, atol: float = 0.0) -> np.ndarray:
    """Zero-temperature limit: uniform over the best actions of context ``s``."""
    r = task.rbar[s]
    best = r >= r.max() - atol
    return best / best.sum()


def target_table(task: BoltzmannTask, temperature: float | None = None):
    """All contexts at once: ``(probs (S, A), log_z (S,))``."""
    t = task.temperature if temperature is None else temperature
    _check_temperature(t)
    log_p, log_z = _log_target_table(task, t)
    return np.exp(log_p), log_z


def _log_target_table(task: BoltzmannTask, t: float):
    z = task.rbar / t
    log_z = _logsumexp(z)
    return z - log_z[:, None], log_z


def expected_reward(task: BoltzmannTask, policy) -> float:
    """``J_r = sum_s p(s) sum_a p_theta(a|s) rbar(s,a)``."""
    p = _probs(policy)
    return float(np.sum(task.p_s[:, None] * p * task.rbar))


def policy_entropy(task: BoltzmannTask, policy) -> float:
    """Context-averaged entropy ``S = -sum_s p(s) sum_a p log p`` (0 log 0 = 0)."""
    p = _probs(policy)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    return float(-np.sum(task.p_s[:, None] * plogp))


def free_energy_decomposition(task: BoltzmannTask, policy, temperature: float | None = None):
    """``(kl, j_r, entropy, log_z_term)`` for ``KL(p_theta || p*_T)``.

    ``kl`` is summed directly from the two distributions; the other three
    come from separate sums, so ``kl == -j_r / T - entropy + log_z_term`` is
    a real check rather than a rearrangement.
    """
    t = task.temperature if temperature is None else temperature
    _check_temperature(t)
    log_target, log_z = _log_target_table(task, t)
    p = _probs(policy)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(p > 0, p * (np.log(p) - log_target), 0.0)
    kl = float(np.sum(task.p_s[:, None] * ratio))
    j_r = expected_reward(task, p)
    entropy = policy_entropy(task, p)
    log_z_term = float(np.sum(task.p_s * log_z))
    return kl, j_r, entropy, log_z_term


def kl_grad(task: BoltzmannTask, policy: SoftPolicy, temperature: float) -> np.ndarray:
    """Exact gradient of ``KL(p_theta || p*_T)`` with respect to the logits."""
    _check_temperature(temperature)
    log_target, _ = _log_target_table(task, temperature)
    p = policy.probs()
    # per context: d/dtheta sum_a p (log p - log q) = p * (g - sum_a p g), g = log p - log q
    g = policy.log_probs() - log_target
    centered = g - np.sum(p * g, axis=1, keepdims=True)
    return task.p_s[:, None] * p * centered


def anneal_schedule(t0: float = 1.0, decay: float = 0.995, t_min: float = 0.01) -> Callable[[int], float]:
    """``T_k = max(t_min, t0 * decay**k)``."""
    if not (t0 > 0 and 0 < decay <= 1 and t_min > 0):
        raise ValueError("need t0 > 0, 0 < decay <= 1 and t_min > 0")
    return lambda k: max(t_min, t0 * decay ** k)


def fixed_schedule(t: float) -> Callable[[int], float]:
    _check_temperature(t)
    return lambda k: t


def anneal_train(task: BoltzmannTask, policy: SoftPolicy | None,
                 schedule: Callable[[int], float] | Sequence[float], steps: int,
                 rng: np.random.Generator | None = None, lr: float = 1.0):
    """Gradient descent on ``KL(p_theta || p*_{T_k})`` with exact gradients.

    ``policy`` is updated in place; when it is None a random one is drawn
    from ``rng``. Returns ``(policy, rows)`` where each row is
    ``(step, T, J_r, entropy, kl)`` measured after the step.
    """
    if policy is None:
        rng = np.random.default_rng() if rng is None else rng
        policy = SoftPolicy.random(task.n_contexts, task.n_actions, rng)
    temps = [float(schedule[k]) if not callable(schedule) else float(schedule(k))
             for k in range(steps)]
    for k, t in enumerate(temps):
        _check_temperature(t)
        if k and t > temps[k - 1]:
            raise ValueError(f"schedule increases at step {k}: {temps[k - 1]} -> {t}")
    rows = []
    for k, t in enumerate(temps):
        policy.logits -= lr * kl_grad(task, policy, t)
        kl, j_r, ent, _ = free_energy_decomposition(task, policy, t)
        rows.append((k, t, j_r, ent, kl))
    return policy, rows


def write_anneal_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ANNEAL_COLUMNS)
        for step, t, j_r, ent, kl in rows:
            w.writerow([step, repr(float(t)), repr(float(j_r)), repr(float(ent)), repr(float(kl))])


def _probs(policy) -> np.ndarray:
    if isinstance(policy, SoftPolicy):
        return policy.probs()
    return np.atleast_2d(np.asarray(policy, dtype=float))
