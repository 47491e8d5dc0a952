"""On-policy actor-critic with generalized advantage estimation."""

from __future__ import annotations

import math

import numpy as np

from .nn import CategoricalHead, GaussianHead, Mlp, clip_grads, sgd_step


def gae(rewards, values, bootstrap: float, gamma: float, lam: float) -> np.ndarray:
    """Advantages ``A_t = sum_l (gamma*lam)^l delta_{t+l}`` for one trajectory.

    ``values`` holds V(s_t) for every step; ``bootstrap`` is V(s_T) after the
    last step (0 when the episode terminated).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    next_values = np.append(values[1:], bootstrap)
    deltas = rewards + gamma * next_values - values
    adv = np.zeros_like(deltas)
    running = 0.0
    for t in range(len(deltas) - 1, -1, -1):
        running = deltas[t] + gamma * lam * running
        adv[t] = running
    return adv


class PolicyCritic:
    """Policy network plus state-value network trained by actor-critic.

    Discrete action spaces get a categorical policy whose last layer starts
    at zero (uniform initial policy). Continuous spaces get a Gaussian
    policy with a state-independent learned ``log_std``.
    """

    def __init__(self, obs_dim: int, n_actions: int | None = None, act_dim: int | None = None,
                 hidden=(64, 64), gamma: float = 0.99, lam: float = 0.95, alpha: float = 3e-3,
                 entropy_coef: float = 0.01, value_coef: float = 0.5,
                 max_grad_norm: float | None = 5.0, init_log_std: float = math.log(0.1),
                 seed: int = 0):
        if (n_actions is None) == (act_dim is None):
            raise ValueError("give exactly one of n_actions (discrete) or act_dim (continuous)")
        self.discrete = n_actions is not None
        self.n_actions = n_actions
        self.act_dim = act_dim
        self.obs_dim = int(obs_dim)
        self.gamma = float(gamma)
        self.lam = float(lam)
        self.alpha = float(alpha)
        self.entropy_coef = float(entropy_coef)
        self.value_coef = float(value_coef)
        self.max_grad_norm = max_grad_norm
        out = n_actions if self.discrete else act_dim
        hidden = list(hidden)
        self.policy_net = Mlp([obs_dim, *hidden, out], seed=seed, zero_last=True)
        self.value_net = Mlp([obs_dim, *hidden, 1], seed=seed + 1)
        self.log_std = None if self.discrete else np.full(act_dim, float(init_log_std))

    # ---- evaluation

    def head(self, x):
        out = self.policy_net.forward(x)
        if self.discrete:
            return CategoricalHead(out)
        return GaussianHead(out, self.log_std)

    def probs(self, x) -> np.ndarray:
        return CategoricalHead(self.policy_net.forward(x)).probs()

    def values(self, x) -> np.ndarray:
        v = self.value_net.forward(x)
        return v[..., 0]

    def log_prob(self, x, actions) -> np.ndarray:
        return self.head(x).log_prob(actions)

    def act(self, x, rng: np.random.Generator):
        """Sample an action for a single feature vector; returns (action, log_prob)."""
        h = self.head(x)
        a = h.sample(rng)
        return a, float(h.log_prob(a))

    def policy_params(self) -> list[np.ndarray]:
        ps = self.policy_net.params()
        return ps if self.discrete else ps + [self.log_std]

    # ---- gradients

    def policy_grads(self, x, actions, weights, entropy_coef: float = 0.0, reduce: str = "sum"):
        """Gradient (and value) of ``sum_i w_i log pi(a_i|s_i) + c * sum_i H_i``.

        ``reduce="mean"`` divides both terms by the batch size. This is an
        ascent direction; callers negate it for descent.
        """
        x = np.atleast_2d(x)
        n = x.shape[0] if reduce == "mean" else 1
        weights = np.asarray(weights, dtype=float).reshape(x.shape[0])
        h = self.head(x)
        logp = h.log_prob(actions)
        ent = h.entropy()
        objective = float((np.sum(weights * logp) + entropy_coef * np.sum(ent)) / n)
        if self.discrete:
            d_out = weights[:, None] * h.grad_log_prob(actions) / n
            if entropy_coef:
                d_out += entropy_coef * h.grad_entropy() / n
            grads, _ = self.policy_net.backward(d_out, input_grad=False)
            return grads, objective
        actions = np.asarray(actions, dtype=float).reshape(x.shape[0], -1)
        d_mean, d_log_std = h.grad_log_prob(actions)
        grads, _ = self.policy_net.backward(weights[:, None] * d_mean / n, input_grad=False)
        g_log_std = (np.sum(weights[:, None] * d_log_std, axis=0) + entropy_coef * x.shape[0]) / n
        return grads + [g_log_std], objective

    def value_grads(self, x, targets, weights=None, reduce: str = "sum"):
        """Gradient and value of ``value_coef * sum_i w_i (V(s_i) - target_i)^2``."""
        x = np.atleast_2d(x)
        n = x.shape[0] if reduce == "mean" else 1
        w = np.ones(x.shape[0]) if weights is None else np.asarray(weights, dtype=float)
        v = self.values(x)
        err = v - np.asarray(targets, dtype=float)
        loss = float(self.value_coef * np.sum(w * err * err) / n)
        d_out = (2.0 * self.value_coef * w * err / n)[:, None]
        grads, _ = self.value_net.backward(d_out, input_grad=False)
        return grads, loss

    def _apply(self, policy_grads, value_grads, lr):
        """Ascent on the policy objective, descent on the value loss."""
        (pg,), _ = clip_grads([policy_grads], self.max_grad_norm)
        sgd_step(self.policy_params(), [-g for g in pg], lr)
        if value_grads is not None:
            (vg,), _ = clip_grads([value_grads], self.max_grad_norm)
            sgd_step(self.value_net.params(), vg, lr)

    # ---- updates

    def gae_advantages(self, traj, x=None, x_next_last=None):
        """Per-step advantages and TD(lambda) value targets for one trajectory.

        ``x`` are the encoded states; ``x_next_last`` the encoded final next
        state, used for bootstrapping when the episode was cut by the step cap.
        """
        values = self.values(x)
        if traj.dones[-1] and traj.terminal:
            bootstrap = 0.0
        else:
            bootstrap = float(self.values(x_next_last[None, :])[0])
        adv = gae(traj.rewards, values, bootstrap, self.gamma, self.lam)
        return adv, adv + values

    def ac_update(self, batch):
        """One actor-critic step on a list of ``(traj, x, x_next_last)`` items.

        Returns ``(policy_loss, value_loss)`` measured before the step.
        """
        xs, acts, advs, targets = [], [], [], []
        for traj, x, x_last in batch:
            adv, tgt = self.gae_advantages(traj, x, x_last)
            xs.append(x)
            acts.append(np.asarray(traj.actions))
            advs.append(adv)
            targets.append(tgt)
        x = np.concatenate(xs)
        acts = np.concatenate(acts)
        adv = np.concatenate(advs)
        tgt = np.concatenate(targets)
        pg, objective = self.policy_grads(x, acts, adv, self.entropy_coef)
        vg, value_loss = self.value_grads(x, tgt)
        _check_finite("ac_update", pg + vg, objective, value_loss)
        self._apply(pg, vg, self.alpha)
        return -objective, value_loss

    def td_update(self, x, actions, rewards, x_next, dones, weights):
        """Importance-weighted one-step actor-critic update on replayed transitions.

        Returns the TD errors measured before the step (new PER priorities).
        """
        rewards = np.asarray(rewards, dtype=float)
        not_done = 1.0 - np.asarray(dones, dtype=float)
        v_next = self.values(x_next)
        v = self.values(x)
        deltas = rewards + self.gamma * not_done * v_next - v
        pg, objective = self.policy_grads(x, actions, np.asarray(weights) * deltas,
                                          self.entropy_coef, reduce="mean")
        vg, value_loss = self.value_grads(x, rewards + self.gamma * not_done * v_next, weights,
                                          reduce="mean")
        _check_finite("td_update", pg + vg, objective, value_loss)
        self._apply(pg, vg, self.alpha)
        return deltas


def _check_finite(where: str, grads, *scalars) -> None:
    bad = [i for i, s in enumerate(scalars) if not math.isfinite(s)]
    if bad or not all(np.all(np.isfinite(g)) for g in grads):
        raise FloatingPointError(f"{where}: non-finite loss or gradient (scalars={scalars})")
