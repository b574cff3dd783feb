"""Small conditional noise-prediction network eps_theta(x_t; c, t).

Input features are ``[x_t, sinusoidal(t), embed(c)]``; the body is a SiLU MLP
with a linear output head of width ``dim``. Gradients are hand-derived (see
:mod:`polydpo.kernels`) and checked against finite differences in the tests.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels


@dataclass(frozen=True)
class DenoiserSpec:
    dim: int = 2
    n_conditions: int = 2
    hidden: tuple[int, ...] = (64, 64)
    time_embed_dim: int = 16
    cond_embed_dim: int = 8

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.dim < 1 or self.n_conditions < 1:
            raise ValueError("dim and n_conditions must be positive")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be an even integer >= 2")
        if self.cond_embed_dim < 1:
            raise ValueError("cond_embed_dim must be positive")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden layer sizes must be positive")

    @property
    def input_dim(self) -> int:
        return self.dim + self.time_embed_dim + self.cond_embed_dim

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.dim)

    def param_shapes(self) -> list[tuple[int, ...]]:
        """Shapes in declared order: condition table, then (W, b) per layer."""
        shapes: list[tuple[int, ...]] = [(self.n_conditions, self.cond_embed_dim)]
        sizes = self.layer_sizes
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            shapes.append((fan_in, fan_out))
            shapes.append((fan_out,))
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserSpec":
        return cls(**{**d, "hidden": tuple(d["hidden"])})


def time_embedding(t: np.ndarray, width: int) -> np.ndarray:
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass
class Denoiser:
    spec: DenoiserSpec
    params: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def init(cls, spec: DenoiserSpec, rng: np.random.Generator, zero_output: bool = True) -> "Denoiser":
        """LeCun-normal hidden layers, N(0, 1) condition table.

        With ``zero_output`` the head starts at zero so the network predicts
        zero noise everywhere until trained.
        """
        params = [rng.standard_normal(spec.param_shapes()[0])]
        sizes = spec.layer_sizes
        n_layers = len(sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if i == n_layers - 1 and zero_output:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
            params.append(w)
            params.append(np.zeros(fan_out))
        return cls(spec, params)

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    @property
    def cond_table(self) -> np.ndarray:
        return self.params[0]

    @property
    def weights(self) -> list[np.ndarray]:
        return self.params[1::2]

    @property
    def biases(self) -> list[np.ndarray]:
        return self.params[2::2]

    def _check_conditions(self, c) -> np.ndarray:
        c = np.asarray(c)
        if c.dtype.kind not in "iu":
            raise ValueError(f"condition ids must be integers, got dtype {c.dtype}")
        if np.any(c < 0) or np.any(c >= self.spec.n_conditions):
            raise ValueError(f"condition id out of range [0, {self.spec.n_conditions})")
        return c.astype(np.intp)

    def _features(self, x_t, c, t):
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.ndim != 2 or x_t.shape[1] != self.spec.dim:
            raise ValueError(f"x_t must have shape (n, {self.spec.dim}), got {x_t.shape}")
        n = x_t.shape[0]
        c = np.broadcast_to(self._check_conditions(c), (n,))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError("t must lie in [0, 1]")
        h0 = np.empty((n, self.spec.input_dim))
        d, te = self.spec.dim, self.spec.time_embed_dim
        h0[:, :d] = x_t
        h0[:, d : d + te] = time_embedding(t, te)
        h0[:, d + te :] = self.cond_table[c]
        return h0, c

    def predict(self, x_t, c, t) -> np.ndarray:
        """Predicted noise, shape ``(n, dim)``. ``c`` and ``t`` broadcast over rows."""
        h0, _ = self._features(x_t, c, t)
        return kernels.mlp_predict(h0, self.weights, self.biases)

    def forward(self, x_t, c, t):
        h0, cidx = self._features(x_t, c, t)
        out, cache = kernels.mlp_forward(h0, self.weights, self.biases)
        return out, (cache, cidx)

    def backward(self, cache, grad_out) -> list[np.ndarray]:
        """Parameter gradients (declared order) for ``sum(out * grad_out)``."""
        mlp_cache, cidx = cache
        gw, gb, gin = kernels.mlp_backward(mlp_cache, self.weights, grad_out)
        g_table = np.zeros_like(self.cond_table)
        off = self.spec.dim + self.spec.time_embed_dim
        np.add.at(g_table, cidx, gin[:, off:])
        grads = [g_table]
        for w, b in zip(gw, gb):
            grads.append(w)
            grads.append(b)
        return grads

    def copy(self) -> "Denoiser":
        return Denoiser(self.spec, [p.copy() for p in self.params])

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, vec: np.ndarray) -> None:
        off = 0
        for p in self.params:
            p[...] = vec[off : off + p.size].reshape(p.shape)
            off += p.size

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.params:
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params)


class Adam:
    """Adam with bias correction; state is per-parameter list."""

    def __init__(self, params: list[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_copy(self) -> "Adam":
        return copy.deepcopy(self)
