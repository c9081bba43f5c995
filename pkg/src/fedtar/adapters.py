"""Patient-conditioned LoRA on a small tanh MLP.

The client model is::

    h_0 = W_in x + b_in
    h_l = tanh(W_p^l h_{l-1} + c^l),        l = 1..L
    y   = W_out h_L + b_out

with the per-patient block ``W_p^l = W^l + s A^l B^l + s A_p^l B_p^l``.
``A`` is e x r and ``B`` is r x e, so each delta has rank at most r. The
patient factors come from a hypernetwork ``h^l(phi_p)`` whose output is
packed as ``[vec(A_p), vec(B_p)]`` (row-major), and ``phi_p`` is the linear
projection of the patient's GMM responsibilities.

All trainable tensors live in one flat float64 vector (:class:`ClientWeights`)
so that aggregation, residual steps and sensitivities act on plain vectors.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .demographics import ProjectionParams, project_embedding_vjp
from .tensor_core import FLOAT, MlpParams, mlp_forward, mlp_vjp


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss or gradient."""


@dataclass(frozen=True)
class ModelSpec:
    in_dim: int = 8
    out_dim: int = 2
    e: int = 16
    n_layers: int = 2
    rank: int = 4
    alpha_lora: float = 128.0
    embed_dim: int = 8
    n_comp: int = 16
    hyper_hidden: int = 16
    lora_init_std: Optional[float] = None

    def __post_init__(self):
        if self.rank > self.e:
            raise ValueError(f"LoRA rank {self.rank} exceeds block size {self.e}")
        for name in ("in_dim", "out_dim", "e", "n_layers", "rank", "embed_dim", "n_comp", "hyper_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def scale(self) -> float:
        return self.alpha_lora / self.rank

    @property
    def hyper_out(self) -> int:
        return 2 * self.e * self.rank

    def hyper_sizes(self) -> List[int]:
        return [self.embed_dim, self.hyper_hidden, self.hyper_out]

    def layout(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return list(self._layout)

    @cached_property
    def _layout(self) -> Tuple[Tuple[str, Tuple[int, ...]], ...]:
        e, r = self.e, self.rank
        items = [("W_in", (e, self.in_dim)), ("b_in", (e,))]
        for l in range(self.n_layers):
            items += [(f"W{l}", (e, e)), (f"c{l}", (e,))]
        items += [("W_out", (self.out_dim, e)), ("b_out", (self.out_dim,))]
        for l in range(self.n_layers):
            items += [(f"A{l}", (e, r)), (f"B{l}", (r, e))]
        sizes = self.hyper_sizes()
        for l in range(self.n_layers):
            for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
                items += [(f"h{l}.W{i}", (n_out, n_in)), (f"h{l}.b{i}", (n_out,))]
        items += [("W_proj", (self.embed_dim, self.n_comp)), ("b_proj", (self.embed_dim,))]
        return tuple(items)

    @cached_property
    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return dict(self._layout)

    @cached_property
    def _slices(self) -> Dict[str, slice]:
        out, pos = {}, 0
        for name, shape in self._layout:
            n = int(np.prod(shape))
            out[name] = slice(pos, pos + n)
            pos += n
        return out

    def slices(self) -> Dict[str, slice]:
        return dict(self._slices)

    @cached_property
    def size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self._layout)

    def adapter_mask(self) -> np.ndarray:
        """Boolean mask over the flat vector selecting the shared A, B factors."""
        mask = np.zeros(self.size, dtype=bool)
        sl = self.slices()
        for l in range(self.n_layers):
            mask[sl[f"A{l}"]] = True
            mask[sl[f"B{l}"]] = True
        return mask


@dataclass
class ClientWeights:
    spec: ModelSpec
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=FLOAT)
        if self.flat.shape != (self.spec.size,):
            raise ValueError(f"expected {self.spec.size} parameters, got shape {self.flat.shape}")

    def part(self, name: str) -> np.ndarray:
        return self.flat[self.spec._slices[name]].reshape(self.spec.shapes[name])

    def parts(self) -> Dict[str, np.ndarray]:
        sl = self.spec._slices
        return {name: self.flat[sl[name]].reshape(shape) for name, shape in self.spec._layout}

    def hypernet(self, layer: int) -> MlpParams:
        n = len(self.spec.hyper_sizes()) - 1
        return MlpParams([self.part(f"h{layer}.W{i}") for i in range(n)],
                         [self.part(f"h{layer}.b{i}") for i in range(n)])

    def lora(self, layer: int) -> "LoraAdapter":
        return LoraAdapter(self.part(f"A{layer}"), self.part(f"B{layer}"), self.spec.scale)

    def projection(self) -> ProjectionParams:
        return ProjectionParams(self.part("W_proj"), self.part("b_proj"))

    def flatten(self) -> np.ndarray:
        return self.flat.copy()

    @classmethod
    def unflatten(cls, spec: ModelSpec, flat) -> "ClientWeights":
        return cls(spec, np.array(flat, dtype=FLOAT, copy=True))

    @classmethod
    def from_parts(cls, spec: ModelSpec, parts: Dict[str, np.ndarray]) -> "ClientWeights":
        chunks = []
        for name, shape in spec.layout():
            arr = np.asarray(parts[name], dtype=FLOAT)
            if arr.shape != shape:
                raise ValueError(f"part {name} has shape {arr.shape}, expected {shape}")
            chunks.append(arr.ravel())
        return cls(spec, np.concatenate(chunks))

    def copy(self) -> "ClientWeights":
        return ClientWeights(self.spec, self.flat.copy())

    def with_flat(self, flat) -> "ClientWeights":
        return ClientWeights(self.spec, flat)


@dataclass
class LoraAdapter:
    A: np.ndarray  # e x r
    B: np.ndarray  # r x e
    scale: float = 1.0

    def delta(self) -> np.ndarray:
        return self.scale * (self.A @ self.B)


def init_weights(spec: ModelSpec, rng: np.random.Generator) -> ClientWeights:
    """Random base model; shared B and the B_p rows of each hypernetwork start at 0.

    Zeroing only the B-side keeps every adapter delta at exactly zero at
    initialisation while leaving a nonzero gradient path into B.
    """
    e, r = spec.e, spec.rank
    parts = {}
    parts["W_in"] = rng.normal(0, 1 / np.sqrt(spec.in_dim), (e, spec.in_dim))
    parts["b_in"] = np.zeros(e)
    for l in range(spec.n_layers):
        parts[f"W{l}"] = rng.normal(0, 1 / np.sqrt(e), (e, e))
        parts[f"c{l}"] = np.zeros(e)
    parts["W_out"] = rng.normal(0, 1 / np.sqrt(e), (spec.out_dim, e))
    parts["b_out"] = np.zeros(spec.out_dim)
    a_std = spec.lora_init_std if spec.lora_init_std is not None else 1.0 / (spec.scale * np.sqrt(e))
    for l in range(spec.n_layers):
        parts[f"A{l}"] = rng.normal(0, a_std, (e, r))
        parts[f"B{l}"] = np.zeros((r, e))
    sizes = spec.hyper_sizes()
    for l in range(spec.n_layers):
        h = MlpParams.init(sizes, rng)
        last = h.weights[-1]
        last *= a_std * np.sqrt(sizes[-2])
        last[e * r:] = 0.0
        for i in range(len(h.weights)):
            parts[f"h{l}.W{i}"] = h.weights[i]
            parts[f"h{l}.b{i}"] = h.biases[i]
    proj = ProjectionParams.init(spec.embed_dim, spec.n_comp, rng)
    parts["W_proj"], parts["b_proj"] = proj.W, proj.b
    return ClientWeights.from_parts(spec, parts)


# ---------------------------------------------------------------------------
# Hypernetwork and composition
# ---------------------------------------------------------------------------

def split_adapter_output(out: np.ndarray, e: int, r: int) -> Tuple[np.ndarray, np.ndarray]:
    out = np.asarray(out, dtype=FLOAT)
    if out.shape[-1] != 2 * e * r:
        raise ValueError(f"hypernetwork output has length {out.shape[-1]}, expected {2 * e * r}")
    lead = out.shape[:-1]
    A = out[..., : e * r].reshape(lead + (e, r))
    B = out[..., e * r:].reshape(lead + (r, e))
    return A, B


def hypernet_generate(h: MlpParams, phi, e: int, r: int) -> Tuple[np.ndarray, np.ndarray]:
    """Patient factors ``(A_p, B_p)``; ``phi`` may be one embedding or a row stack."""
    phi = np.asarray(phi, dtype=FLOAT)
    if phi.shape[-1] != h.in_dim:
        raise ValueError(f"embedding length {phi.shape[-1]} != hypernetwork input {h.in_dim}")
    if h.out_dim != 2 * e * r:
        raise ValueError(f"hypernetwork output {h.out_dim} != e*r + r*e = {2 * e * r}")
    return split_adapter_output(mlp_forward(h, phi), e, r)


def compose_weights(W_client, shared: LoraAdapter, patient: Tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    W_client = np.asarray(W_client, dtype=FLOAT)
    A_p, B_p = patient
    e = W_client.shape[0]
    if W_client.shape != (e, e):
        raise ValueError(f"client block must be square, got {W_client.shape}")
    for name, m, rows in (("A", shared.A, e), ("A_p", A_p, e)):
        if m.ndim != 2 or m.shape[0] != rows:
            raise ValueError(f"{name} has shape {np.shape(m)}, expected ({rows}, r)")
    if shared.B.shape != (shared.A.shape[1], e) or np.shape(B_p) != (np.shape(A_p)[1], e):
        raise ValueError("B factors must be r x e and match their A factor's rank")
    return W_client + shared.scale * (shared.A @ shared.B) + shared.scale * (A_p @ B_p)


# ---------------------------------------------------------------------------
# Forward pass and gradients
# ---------------------------------------------------------------------------

def task_loss(pred, target, kind: str = "squared_error"):
    """Mean per-row loss and its gradient with respect to ``pred``.

    ``squared_error`` is the mean over output coordinates of (pred - y)^2;
    ``cross_entropy`` treats ``pred`` as logits against a one-hot target.
    """
    pred = np.asarray(pred, dtype=FLOAT)
    target = np.asarray(target, dtype=FLOAT)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    single = pred.ndim == 1
    P = np.atleast_2d(pred)
    Y = np.atleast_2d(target)
    n, m = P.shape
    if kind == "squared_error":
        diff = P - Y
        losses = np.mean(diff**2, axis=1)
        grad = 2.0 * diff / m
    elif kind == "cross_entropy":
        if not (np.all((Y == 0.0) | (Y == 1.0)) and np.all(Y.sum(axis=1) == 1.0)):
            raise ValueError("cross_entropy needs one-hot targets")
        top = P.max(axis=1, keepdims=True)
        z = P - top
        logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp = z - logsum
        losses = -np.sum(Y * logp, axis=1)
        grad = np.exp(logp) - Y
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    if single:
        return float(losses[0]), grad[0]
    return float(losses.mean()), grad / n


@dataclass
class _Cache:
    phi: np.ndarray
    Ap: List[np.ndarray]
    Bp: List[np.ndarray]
    hs: List[np.ndarray]  # h_0 .. h_L
    U: List[np.ndarray]  # per-sample B_p h_{l-1}


def _forward(w: ClientWeights, Q: np.ndarray, pid: np.ndarray, X: np.ndarray):
    spec = w.spec
    s = spec.scale
    pr = w.parts()
    phi = Q @ pr["W_proj"].T + pr["b_proj"]
    h = X @ pr["W_in"].T + pr["b_in"]
    cache = _Cache(phi, [], [], [h], [])
    for l in range(spec.n_layers):
        Ap, Bp = hypernet_generate(w.hypernet(l), phi, spec.e, spec.rank)
        A, B = pr[f"A{l}"], pr[f"B{l}"]
        u = np.einsum("nre,ne->nr", Bp[pid], h)
        pre = (h @ pr[f"W{l}"].T + pr[f"c{l}"]
               + s * ((h @ B.T) @ A.T)
               + s * np.einsum("ner,nr->ne", Ap[pid], u))
        h = np.tanh(pre)
        cache.Ap.append(Ap)
        cache.Bp.append(Bp)
        cache.U.append(u)
        cache.hs.append(h)
    y = h @ pr["W_out"].T + pr["b_out"]
    return y, cache


def predict(w: ClientWeights, Q, pid, X) -> np.ndarray:
    """Batched predictions: sample i uses patient ``pid[i]`` with responsibilities ``Q[pid[i]]``."""
    Q = np.atleast_2d(np.asarray(Q, dtype=FLOAT))
    X = np.atleast_2d(np.asarray(X, dtype=FLOAT))
    pid = np.asarray(pid, dtype=np.intp)
    _check_batch(w.spec, Q, pid, X)
    return _forward(w, Q, pid, X)[0]


def model_forward(w: ClientWeights, phi, x) -> np.ndarray:
    """Predictions for one patient embedding ``phi`` and one input or a batch."""
    spec = w.spec
    phi = np.asarray(phi, dtype=FLOAT)
    if phi.shape != (spec.embed_dim,):
        raise ValueError(f"embedding must have length {spec.embed_dim}, got {phi.shape}")
    x = np.asarray(x, dtype=FLOAT)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != spec.in_dim:
        raise ValueError(f"input must have length {spec.in_dim}, got {X.shape[1]}")
    pr = w.parts()
    h = X @ pr["W_in"].T + pr["b_in"]
    for l in range(spec.n_layers):
        Ap, Bp = hypernet_generate(w.hypernet(l), phi, spec.e, spec.rank)
        Wp = compose_weights(pr[f"W{l}"], w.lora(l), (Ap, Bp))
        h = np.tanh(h @ Wp.T + pr[f"c{l}"])
    y = h @ pr["W_out"].T + pr["b_out"]
    return y[0] if single else y


def _check_batch(spec: ModelSpec, Q, pid, X):
    if Q.shape[1] != spec.n_comp:
        raise ValueError(f"soft assignments must have {spec.n_comp} columns, got {Q.shape[1]}")
    if X.shape[1] != spec.in_dim:
        raise ValueError(f"inputs must have {spec.in_dim} columns, got {X.shape[1]}")
    if pid.shape != (X.shape[0],):
        raise ValueError("need exactly one patient index per sample")
    if pid.size and (pid.min() < 0 or pid.max() >= Q.shape[0]):
        raise ValueError("patient index out of range")


def loss_and_grad(w: ClientWeights, Q, pid, X, Y, kind="squared_error") -> Tuple[float, np.ndarray]:
    """Mean task loss over the batch and its gradient wrt every entry of ``w.flat``."""
    spec = w.spec
    s = spec.scale
    Q = np.atleast_2d(np.asarray(Q, dtype=FLOAT))
    X = np.atleast_2d(np.asarray(X, dtype=FLOAT))
    Y = np.atleast_2d(np.asarray(Y, dtype=FLOAT))
    pid = np.asarray(pid, dtype=np.intp)
    _check_batch(spec, Q, pid, X)
    y, c = _forward(w, Q, pid, X)
    loss, gy = task_loss(y, Y, kind)

    pr = w.parts()
    sl = spec._slices
    grad = np.zeros(spec.size)

    def put(name, value):
        grad[sl[name]] += np.ravel(value)

    P = Q.shape[0]
    h_L = c.hs[-1]
    put("W_out", gy.T @ h_L)
    put("b_out", gy.sum(axis=0))
    g = gy @ pr["W_out"]
    g_phi = np.zeros((P, spec.embed_dim))
    for l in range(spec.n_layers - 1, -1, -1):
        h_prev, h_out = c.hs[l], c.hs[l + 1]
        g_pre = g * (1.0 - h_out**2)
        A, B = pr[f"A{l}"], pr[f"B{l}"]
        G = g_pre.T @ h_prev
        put(f"W{l}", G)
        put(f"c{l}", g_pre.sum(axis=0))
        put(f"A{l}", s * (G @ B.T))
        put(f"B{l}", s * (A.T @ G))

        Ap, Bp, u = c.Ap[l], c.Bp[l], c.U[l]
        Ap_n, Bp_n = Ap[pid], Bp[pid]
        v = np.einsum("ner,ne->nr", Ap_n, g_pre)  # A_p^T g per sample
        gAp = np.zeros_like(Ap)
        gBp = np.zeros_like(Bp)
        np.add.at(gAp, pid, s * np.einsum("ne,nr->ner", g_pre, u))
        np.add.at(gBp, pid, s * np.einsum("nr,ne->nre", v, h_prev))
        upstream = np.concatenate([gAp.reshape(P, -1), gBp.reshape(P, -1)], axis=1)
        gh, gphi_l = mlp_vjp(w.hypernet(l), c.phi, upstream)
        for i in range(len(gh.weights)):
            put(f"h{l}.W{i}", gh.weights[i])
            put(f"h{l}.b{i}", gh.biases[i])
        g_phi += gphi_l

        g = (g_pre @ pr[f"W{l}"]
             + s * ((g_pre @ A) @ B)
             + s * np.einsum("nr,nre->ne", v, Bp_n))
    put("W_in", g.T @ X)
    put("b_in", g.sum(axis=0))
    gW, gb, _ = project_embedding_vjp(w.projection(), Q, g_phi)
    put("W_proj", gW)
    put("b_proj", gb)
    return loss, grad


# ---------------------------------------------------------------------------
# Local training
# ---------------------------------------------------------------------------

@dataclass
class LocalData:
    """One client's samples for one time step, indexed against its patient table."""

    X: np.ndarray
    Y: np.ndarray
    pid: np.ndarray

    def __len__(self):
        return int(self.X.shape[0])

    def concat(self, other: "LocalData") -> "LocalData":
        return LocalData(np.vstack([self.X, other.X]), np.vstack([self.Y, other.Y]),
                         np.concatenate([self.pid, other.pid]))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 10
    lr: float = 0.05
    batch_size: int = 32
    optimizer: str = "sgd"
    weight_decay: float = 0.0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    loss: str = "squared_error"


def client_local_update(global_w: ClientWeights, data: LocalData, Q: np.ndarray,
                        cfg: TrainConfig, seed: int) -> Tuple[ClientWeights, float]:
    """Run ``cfg.steps`` mini-batch steps from ``global_w``; return new weights and mean batch loss.

    ``Q`` holds the frozen GMM responsibilities of the client's patients.
    """
    if len(data) == 0:
        raise ValueError("client has no samples for this time step")
    if cfg.optimizer not in ("sgd", "adamw"):
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
    rng = np.random.default_rng(seed)
    flat = global_w.flat.copy()
    n = len(data)
    bs = min(cfg.batch_size, n)
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    losses = []
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(n, size=bs, replace=False) if bs < n else np.arange(n)
        loss, grad = loss_and_grad(global_w.with_flat(flat), Q, data.pid[idx], data.X[idx],
                                   data.Y[idx], cfg.loss)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite loss/gradient at local step {step} (loss={loss})")
        losses.append(loss)
        if cfg.optimizer == "sgd":
            flat = flat - cfg.lr * grad
        else:
            b1, b2 = cfg.betas
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad**2
            mhat = m / (1 - b1**step)
            vhat = v / (1 - b2**step)
            flat = flat * (1 - cfg.lr * cfg.weight_decay) - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return global_w.with_flat(flat), mean_loss
