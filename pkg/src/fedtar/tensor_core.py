"""Dense float64 kernels and a small ReLU MLP with hand-written gradients.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Every function
validates shapes up front and raises ``ValueError`` with the offending
dimensions, so that shape bugs surface at the call site rather than as a
broadcast surprise three modules later.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

FLOAT = np.float64


def as_matrix(a, name="matrix") -> np.ndarray:
    a = np.asarray(a, dtype=FLOAT)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def as_vector(v, name="vector") -> np.ndarray:
    v = np.asarray(v, dtype=FLOAT)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    return v


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: a is {a.shape[0]}x{a.shape[1]}, "
            f"b is {b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def softmax(v) -> np.ndarray:
    v = as_vector(v, "logits")
    if v.size == 0:
        raise ValueError("softmax of an empty vector is undefined")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax logits must be finite")
    z = np.exp(v - v.max())
    return z / z.sum()


def softmax_jacobian(v) -> np.ndarray:
    """J[i, j] = s_i (delta_ij - s_j) with s = softmax(v)."""
    s = softmax(v)
    return np.diag(s) - np.outer(s, s)


@dataclass
class MlpParams:
    """Weights ``W[i]`` (out x in) and biases ``b[i]`` of a feed-forward net.

    ReLU follows every layer except the last, which is linear.
    """

    weights: List[np.ndarray] = field(default_factory=list)
    biases: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=FLOAT) for w in self.weights]
        self.biases = [np.asarray(b, dtype=FLOAT) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("MlpParams needs one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(
                    f"layer {i} expects input {w.shape[1]} but layer {i - 1} "
                    f"outputs {self.weights[i - 1].shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, zero_last=False) -> "MlpParams":
        weights, biases = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if zero_last and i == len(sizes) - 2:
                w = np.zeros((n_out, n_in))
            else:
                w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_out, n_in))
            weights.append(w)
            biases.append(np.zeros(n_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, sizes: Sequence[int]) -> "MlpParams":
        return cls(
            [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])],
            [np.zeros(o) for o in sizes[1:]],
        )

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases])

    def flatten(self) -> np.ndarray:
        """Layer by layer, each layer as its row-major weight then its bias."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b]
        return np.concatenate(parts)

    def unflatten(self, flat) -> "MlpParams":
        flat = as_vector(flat, "flat")
        if flat.size != self.size:
            raise ValueError(f"expected {self.size} parameters, got {flat.size}")
        weights, biases, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(flat[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            biases.append(flat[pos:pos + b.size].copy())
            pos += b.size
        return MlpParams(weights, biases)


def _check_input(p: MlpParams, x: np.ndarray):
    if x.ndim not in (1, 2) or x.shape[-1] != p.in_dim:
        raise ValueError(f"MLP expects input of length {p.in_dim}, got shape {x.shape}")


def mlp_forward(p: MlpParams, x, return_cache=False):
    """Evaluate the MLP on one input vector or on a batch (rows of a matrix)."""
    x = np.asarray(x, dtype=FLOAT)
    _check_input(p, x)
    h = x
    cache = [h]
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = h @ w.T + b
        h = z if i == last else np.maximum(z, 0.0)
        cache.append(z)
    if return_cache:
        return h, cache
    return h


def mlp_vjp(p: MlpParams, x, upstream) -> Tuple[MlpParams, np.ndarray]:
    """Reverse-mode gradient of ``<upstream, mlp_forward(p, x)>``.

    For a batch input, parameter gradients are summed over rows and the input
    gradient is returned per row. The ReLU derivative at exactly 0 is 0.
    """
    x = np.asarray(x, dtype=FLOAT)
    _check_input(p, x)
    upstream = np.asarray(upstream, dtype=FLOAT)
    expected = x.shape[:-1] + (p.out_dim,)
    if upstream.shape != expected:
        raise ValueError(f"upstream shape {upstream.shape} does not match output shape {expected}")
    _, cache = mlp_forward(p, x, return_cache=True)
    batched = x.ndim == 2
    n = len(p.weights)
    gw: List[np.ndarray] = [None] * n
    gb: List[np.ndarray] = [None] * n
    g = upstream
    for i in range(n - 1, -1, -1):
        if i != n - 1:
            g = g * (cache[i + 1] > 0.0)
        h_in = cache[0] if i == 0 else np.maximum(cache[i], 0.0)
        if batched:
            gw[i] = g.T @ h_in
            gb[i] = g.sum(axis=0)
        else:
            gw[i] = np.outer(g, h_in)
            gb[i] = g.copy()
        g = g @ p.weights[i]
    return MlpParams(gw, gb), g
