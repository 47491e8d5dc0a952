"""Small fully connected networks with hand-written reverse-mode gradients.

Everything here works on row-major batches: ``x`` has shape ``(batch, in)``
and a 1-d input is treated as a batch of one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")

_LOG_2PI = math.log(2.0 * math.pi)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _dact(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    return np.ones_like(z)


class Mlp:
    """Dense feedforward net ``x -> act(x W1 + b1) -> ... -> act(h Wn + bn)``.

    ``activations`` has one tag per weight layer, so a net with
    ``layer_sizes=[4, 64, 64, 2]`` takes three tags, normally ending in
    ``"identity"``.
    """

    def __init__(self, layer_sizes, activations=None, seed: int = 0, zero_last: bool = False):
        layer_sizes = [int(n) for n in layer_sizes]
        if len(layer_sizes) < 2 or min(layer_sizes) < 1:
            raise ValueError(f"bad layer sizes {layer_sizes}")
        n_layers = len(layer_sizes) - 1
        if activations is None:
            activations = ["tanh"] * (n_layers - 1) + ["identity"]
        activations = list(activations)
        if len(activations) != n_layers:
            raise ValueError(f"need {n_layers} activation tags, got {len(activations)}")
        for tag in activations:
            if tag not in ACTIVATIONS:
                raise ValueError(f"unknown activation {tag!r}")
        self.layer_sizes = layer_sizes
        self.activations = activations
        self.rng_seed = int(seed)

        rng = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))
        if zero_last:
            self.weights[-1][:] = 0.0
            self.biases[-1][:] = 0.0
        self._cache = None

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input of width {self.in_dim}, got shape {x.shape}")
        inputs, pre, post = [], [], []
        h = x
        for w, b, tag in zip(self.weights, self.biases, self.activations):
            inputs.append(h)
            z = h @ w + b
            h = _act(tag, z)
            pre.append(z)
            post.append(h)
        self._cache = (inputs, pre, post, squeeze)
        return h[0] if squeeze else h

    def backward(self, upstream, input_grad: bool = True) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of ``sum(upstream * output)`` w.r.t. parameters and input.

        Returns ``(grads, dx)`` where ``grads`` is ordered like :meth:`params`.
        ``dx`` is None when ``input_grad`` is false (saves one matmul).
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        inputs, pre, post, squeeze = self._cache
        g = np.asarray(upstream, dtype=float)
        if squeeze:
            g = g[None, :]
        if g.shape != post[-1].shape:
            raise ValueError(f"upstream shape {g.shape} != output shape {post[-1].shape}")
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))
        for i in reversed(range(len(self.weights))):
            dz = g * _dact(self.activations[i], pre[i], post[i])
            grads[2 * i] = inputs[i].T @ dz
            grads[2 * i + 1] = dz.sum(axis=0)
            if i == 0 and not input_grad:
                return grads, None
            g = dz @ self.weights[i].T
        return grads, (g[0] if squeeze else g)

    # flat views are what finite-difference checks and checkpoints use
    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} values, got {flat.size}")
        i = 0
        for p in self.params():
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "Mlp":
        other = Mlp(self.layer_sizes, self.activations, seed=self.rng_seed)
        other.set_flat(self.get_flat())
        return other


def flat_grad(grads) -> np.ndarray:
    return np.concatenate([np.ravel(g) for g in grads])


def grad_norm(*grad_lists) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for grads in grad_lists for g in grads))


def clip_grads(grad_lists, max_norm: float | None):
    """Scale several gradient lists jointly so their global norm is <= max_norm."""
    norm = grad_norm(*grad_lists)
    if not math.isfinite(norm):
        raise FloatingPointError(f"non-finite gradient norm {norm}")
    if max_norm is None or norm <= max_norm:
        return grad_lists, norm
    scale = max_norm / (norm + 1e-12)
    return [[g * scale for g in grads] for grads in grad_lists], norm


def sgd_step(params, grads, lr: float) -> None:
    """In-place descent step ``p -= lr * g``."""
    for p, g in zip(params, grads):
        p -= lr * g


# --------------------------------------------------------------------------
# distribution heads


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    m = np.max(z, axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    return np.exp(log_softmax(logits))


@dataclass
class CategoricalHead:
    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)

    @property
    def n(self) -> int:
        return self.logits.shape[-1]

    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    def log_prob(self, k):
        k = np.asarray(k)
        if np.any(k < 0) or np.any(k >= self.n):
            raise IndexError(f"outcome {k} outside 0..{self.n - 1}")
        lp = log_softmax(self.logits)
        if lp.ndim == 1:
            return float(lp[int(k)])
        return np.take_along_axis(lp, k.reshape(-1, 1).astype(int), axis=-1)[:, 0]

    def entropy(self):
        lp = log_softmax(self.logits)
        return -np.sum(np.exp(lp) * lp, axis=-1)

    def sample(self, rng: np.random.Generator):
        p = self.probs()
        if p.ndim == 1:
            return int(rng.choice(self.n, p=p))
        u = rng.random(p.shape[0])
        idx = (np.cumsum(p, axis=-1) < u[:, None]).sum(axis=-1)
        return np.minimum(idx, self.n - 1)

    def grad_log_prob(self, k) -> np.ndarray:
        """d log p(k) / d logits = onehot(k) - softmax."""
        p = self.probs()
        g = -p
        if p.ndim == 1:
            g[int(k)] += 1.0
        else:
            g[np.arange(p.shape[0]), np.asarray(k, dtype=int)] += 1.0
        return g

    def grad_entropy(self) -> np.ndarray:
        """d H / d logits = -p * (log p + H)."""
        lp = log_softmax(self.logits)
        p = np.exp(lp)
        h = -np.sum(p * lp, axis=-1, keepdims=True)
        return -p * (lp + h)


@dataclass
class GaussianHead:
    """Diagonal Gaussian; ``log_std`` broadcasts against ``mean``."""

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.log_std = np.broadcast_to(np.asarray(self.log_std, dtype=float), self.mean.shape)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def log_prob(self, x):
        x = np.asarray(x, dtype=float)
        z = (x - self.mean) / self.std
        per_dim = -0.5 * z * z - self.log_std - 0.5 * _LOG_2PI
        return np.sum(per_dim, axis=-1)

    def entropy(self):
        return np.sum(self.log_std + 0.5 * (1.0 + _LOG_2PI), axis=-1)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal(self.mean.shape)

    def grad_log_prob(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of log p(x) w.r.t. (mean, log_std)."""
        x = np.asarray(x, dtype=float)
        z = (x - self.mean) / self.std
        return z / self.std, z * z - 1.0


def categorical_log_prob(logits, k):
    return CategoricalHead(logits).log_prob(k)


def gaussian_log_prob(mean, log_std, x):
    return GaussianHead(mean, log_std).log_prob(x)


# --------------------------------------------------------------------------
# checkpoints: one JSON header line, then raw little-endian float64 values


def save_params(net: Mlp, path) -> None:
    header = {
        "layer_sizes": net.layer_sizes,
        "activations": net.activations,
        "seed": net.rng_seed,
        "shapes": [list(p.shape) for p in net.params()],
        "dtype": "<f8",
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(net.get_flat().astype("<f8").tobytes())
    tmp.replace(path)


def load_params(path) -> Mlp:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    net = Mlp(header["layer_sizes"], header["activations"], seed=header.get("seed", 0))
    flat = np.frombuffer(payload, dtype=header.get("dtype", "<f8"))
    expected = sum(int(np.prod(s)) for s in header["shapes"])
    if flat.size != expected:
        raise ValueError(f"checkpoint {path} holds {flat.size} values, header says {expected}")
    net.set_flat(flat.astype(float))
    return net
