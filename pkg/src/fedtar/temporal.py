"""Server-side temporal residual aggregation and its meta-learned coefficients.

Within a round the global model moves through the time steps as::

    w_t = w_{t-1} + alpha_t (wbar_t - w_{t-1})

where ``wbar_t`` is the client average after training on time-``t`` data.
The coefficients come from a softmax over per-time scores produced by a score
MLP applied to a learnable time-embedding table. Their meta-gradient is
propagated forward alongside the primal recursion through the sensitivity
matrix ``S_t = dw_t / dpsi``, treating the snapshots as constants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .tensor_core import FLOAT, MlpParams, as_vector, mlp_forward, mlp_vjp, softmax, softmax_jacobian


# ---------------------------------------------------------------------------
# Temporal policy
# ---------------------------------------------------------------------------

@dataclass
class TemporalPolicy:
    """Time-embedding table (T x embed_dim) plus a scalar-output score MLP."""

    table: np.ndarray
    mlp: MlpParams

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=FLOAT)
        if self.table.ndim != 2 or self.table.shape[0] < 1:
            raise ValueError("time-embedding table must be a non-empty T x embed_dim matrix")
        if self.mlp.in_dim != self.table.shape[1] or self.mlp.out_dim != 1:
            raise ValueError(
                f"score MLP must map {self.table.shape[1]} -> 1, got {self.mlp.in_dim} -> {self.mlp.out_dim}"
            )

    @property
    def T(self) -> int:
        return self.table.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.table.shape[1]

    @property
    def size(self) -> int:
        return self.table.size + self.mlp.size

    @classmethod
    def init(cls, T: int, embed_dim: int = 4, hidden: int = 8, rng=None, zero=False) -> "TemporalPolicy":
        """Random table and hidden layer, zero output layer: alphas start uniform but stay trainable."""
        sizes = [embed_dim, hidden, 1]
        if zero:
            return cls(np.zeros((T, embed_dim)), MlpParams.zeros(sizes))
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(rng.normal(0.0, 1.0, (T, embed_dim)), MlpParams.init(sizes, rng, zero_last=True))

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.table.ravel(), self.mlp.flatten()])

    def unflatten(self, psi) -> "TemporalPolicy":
        psi = as_vector(psi, "psi")
        if psi.size != self.size:
            raise ValueError(f"psi must have {self.size} entries, got {psi.size}")
        n = self.table.size
        return TemporalPolicy(psi[:n].reshape(self.table.shape).copy(), self.mlp.unflatten(psi[n:]))


@dataclass
class AlphaCache:
    scores: np.ndarray
    alphas: np.ndarray


def compute_alphas(policy: TemporalPolicy) -> Tuple[np.ndarray, AlphaCache]:
    psi = policy.flatten()
    if not np.all(np.isfinite(psi)):
        raise ValueError("temporal policy parameters contain non-finite values")
    scores = mlp_forward(policy.mlp, policy.table)[:, 0]
    alphas = softmax(scores)
    return alphas, AlphaCache(scores, alphas)


def alpha_jacobian(policy: TemporalPolicy, cache: Optional[AlphaCache] = None) -> np.ndarray:
    """T x d_psi matrix whose row t is the gradient of alpha_t wrt psi."""
    if cache is None:
        _, cache = compute_alphas(policy)
    T, k = policy.table.shape
    dscore = np.zeros((T, policy.size))
    for t in range(T):
        gp, gx = mlp_vjp(policy.mlp, policy.table[t], np.ones(1))
        dscore[t, t * k:(t + 1) * k] = gx
        dscore[t, T * k:] = gp.flatten()
    return softmax_jacobian(cache.scores) @ dscore


# ---------------------------------------------------------------------------
# Aggregation primitives
# ---------------------------------------------------------------------------

AVERAGING_MODES = ("paper_literal", "fedavg_proportional")


def weighted_client_average(client_weights: Sequence[np.ndarray], sizes: Sequence[float],
                            mode: str = "fedavg_proportional") -> np.ndarray:
    """Combine client vectors in a fixed order.

    ``paper_literal`` uses coefficient 1/n_k for client k (not normalised);
    ``fedavg_proportional`` uses n_k / sum(n).
    """
    if len(client_weights) == 0:
        raise ValueError("need at least one client")
    if len(sizes) != len(client_weights):
        raise ValueError("one sample count per client is required")
    W = [np.asarray(w, dtype=FLOAT) for w in client_weights]
    if any(w.shape != W[0].shape for w in W):
        raise ValueError("client weight vectors differ in length")
    n = np.asarray(sizes, dtype=FLOAT)
    if np.any(n <= 0):
        raise ValueError("every client sample count must be positive")
    if mode == "paper_literal":
        coef = 1.0 / n
    elif mode == "fedavg_proportional":
        coef = n / n.sum()
    else:
        raise ValueError(f"unknown averaging mode {mode!r}")
    out = np.zeros_like(W[0])
    for c, w in zip(coef, W):
        out += c * w
    return out


def residual_step(w_prev, w_bar, alpha_t: float) -> np.ndarray:
    """Move ``alpha_t`` of the way from ``w_prev`` to ``w_bar``; exact at 0 and 1."""
    if not (0.0 <= alpha_t <= 1.0):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha_t}")
    w_prev = np.asarray(w_prev, dtype=FLOAT)
    w_bar = np.asarray(w_bar, dtype=FLOAT)
    if w_prev.shape != w_bar.shape:
        raise ValueError(f"shape mismatch: {w_prev.shape} vs {w_bar.shape}")
    return (1.0 - alpha_t) * w_prev + alpha_t * w_bar


def closed_form_betas(alphas: Sequence[float]) -> np.ndarray:
    """Weights of w_0, wbar_1, ..., wbar_t in the unrolled recursion."""
    a = np.asarray(alphas, dtype=FLOAT)
    if a.ndim != 1:
        raise ValueError("alphas must be a sequence")
    if np.any((a < 0.0) | (a > 1.0)):
        raise ValueError("every alpha must lie in [0, 1]")
    t = a.size
    # tail[x] = prod_{y > x} (1 - a_y) for x = 0..t (1-based alphas)
    tail = np.ones(t + 1)
    for x in range(t - 1, -1, -1):
        tail[x] = tail[x + 1] * (1.0 - a[x])
    betas = np.empty(t + 1)
    betas[0] = tail[0]
    betas[1:] = a * tail[1:]
    return betas


def reconstruct_from_betas(w0, snapshots: Sequence[np.ndarray], betas) -> np.ndarray:
    betas = as_vector(betas, "betas")
    if betas.size != len(snapshots) + 1:
        raise ValueError(f"need {len(snapshots) + 1} betas for {len(snapshots)} snapshots, got {betas.size}")
    out = betas[0] * np.asarray(w0, dtype=FLOAT)
    for b, s in zip(betas[1:], snapshots):
        out = out + b * np.asarray(s, dtype=FLOAT)
    return out


def relative_error(a, b, floor: float = 0.0) -> float:
    """max|a-b| / max(max|a|, max|b|, floor); ``floor`` guards gradients that vanish analytically."""
    a = np.asarray(a, dtype=FLOAT)
    b = np.asarray(b, dtype=FLOAT)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - b)) / scale)


@dataclass
class SnapshotHistory:
    w0: np.ndarray
    snapshots: List[np.ndarray] = field(default_factory=list)
    residuals: List[np.ndarray] = field(default_factory=list)
    alphas: List[float] = field(default_factory=list)
    iterates: List[np.ndarray] = field(default_factory=list)

    @property
    def current(self) -> np.ndarray:
        return self.iterates[-1] if self.iterates else self.w0

    def push(self, w_bar, alpha_t: float) -> np.ndarray:
        w_prev = self.current
        w_bar = np.asarray(w_bar, dtype=FLOAT)
        self.residuals.append(w_bar - w_prev)
        self.snapshots.append(w_bar)
        self.alphas.append(float(alpha_t))
        w = residual_step(w_prev, w_bar, alpha_t)
        self.iterates.append(w)
        return w


def run_recursion(w0, snapshots: Sequence[np.ndarray], alphas: Sequence[float]) -> SnapshotHistory:
    hist = SnapshotHistory(np.asarray(w0, dtype=FLOAT))
    for s, a in zip(snapshots, alphas):
        hist.push(s, a)
    return hist


@dataclass
class StepReport:
    t: int
    alpha: float
    delta_norm: float
    update_norm: float
    identity_error: float
    bound: float
    ok: bool


def check_bounded_update(history: SnapshotHistory, G: Optional[float] = None,
                         tol: float = 1e-12) -> List[StepReport]:
    """Per step: ||w_t - w_{t-1}|| against alpha_t ||Delta_t|| and against alpha_t G.

    ``G`` defaults to the largest recorded residual norm. The identity
    tolerance is relative to ``max(1, ||Delta_t||)``.
    """
    norms = [float(np.linalg.norm(d)) for d in history.residuals]
    if G is None:
        G = max(norms, default=0.0)
    reports = []
    prev = history.w0
    for t, (a, d, w) in enumerate(zip(history.alphas, norms, history.iterates), start=1):
        upd = float(np.linalg.norm(w - prev))
        err = abs(upd - a * d)
        slack = tol * max(1.0, d)
        ok = err <= slack and upd <= a * G + slack
        reports.append(StepReport(t, a, d, upd, err, a * G, ok))
        prev = w
    return reports


# ---------------------------------------------------------------------------
# Hypergradient
# ---------------------------------------------------------------------------

def sensitivity_step(S, alpha_t: float, grad_alpha_t, delta_t) -> np.ndarray:
    """S_{t+1} = (1 - alpha_t) S_t + Delta_t (grad alpha_t)^T, with S of shape d_w x d_psi."""
    S = np.asarray(S, dtype=FLOAT)
    ga = as_vector(grad_alpha_t, "grad_alpha_t")
    dt = as_vector(delta_t, "delta_t")
    if S.shape != (dt.size, ga.size):
        raise ValueError(f"sensitivity {S.shape} incompatible with d_w={dt.size}, d_psi={ga.size}")
    return (1.0 - alpha_t) * S + np.outer(dt, ga)


def hypergradient(S_T, grad_val) -> np.ndarray:
    S_T = np.asarray(S_T, dtype=FLOAT)
    grad_val = as_vector(grad_val, "grad_val")
    if S_T.ndim != 2 or S_T.shape[0] != grad_val.size:
        raise ValueError(f"sensitivity {S_T.shape} incompatible with gradient of length {grad_val.size}")
    return S_T.T @ grad_val


def first_order_hypergradient(history: SnapshotHistory, grad_alphas, grad_val) -> np.ndarray:
    """Approximation that drops the (1 - alpha_t) decay: S_T ~ sum_t Delta_t (grad alpha_t)^T.

    ``grad_alphas`` has one row per recorded step. Exact when T = 1 or every
    alpha is 0; otherwise only a heuristic.
    """
    grad_alphas = np.atleast_2d(np.asarray(grad_alphas, dtype=FLOAT))
    grad_val = as_vector(grad_val, "grad_val")
    if grad_alphas.shape[0] != len(history.residuals):
        raise ValueError("need one alpha gradient per recorded step")
    out = np.zeros(grad_alphas.shape[1])
    for d, ga in zip(history.residuals, grad_alphas):
        if d.size != grad_val.size:
            raise ValueError("residual and validation gradient lengths differ")
        out += float(d @ grad_val) * ga
    return out


def exact_hypergradient(history: SnapshotHistory, grad_alphas, grad_val) -> np.ndarray:
    """Forward sensitivity recursion over a recorded history, then S_T^T grad_val."""
    grad_alphas = np.atleast_2d(np.asarray(grad_alphas, dtype=FLOAT))
    if grad_alphas.shape[0] != len(history.residuals):
        raise ValueError("need one alpha gradient per recorded step")
    S = np.zeros((history.w0.size, grad_alphas.shape[1]))
    for a, ga, d in zip(history.alphas, grad_alphas, history.residuals):
        S = sensitivity_step(S, a, ga, d)
    return hypergradient(S, grad_val)


def step_size(round_index: int, eta0: float) -> float:
    if round_index < 1:
        raise ValueError("rounds are numbered from 1")
    if eta0 <= 0:
        raise ValueError("eta0 must be positive")
    return eta0 / math.sqrt(round_index)


def meta_update(psi, hypergrad, round_index: int, eta0: float) -> np.ndarray:
    hypergrad = as_vector(hypergrad, "hypergrad")
    if not np.all(np.isfinite(hypergrad)):
        bad = np.flatnonzero(~np.isfinite(hypergrad))
        raise ValueError(f"hypergradient has non-finite entries at indices {bad[:5].tolist()}")
    psi = as_vector(psi, "psi")
    if psi.shape != hypergrad.shape:
        raise ValueError("psi and hypergradient lengths differ")
    return psi - step_size(round_index, eta0) * hypergrad
