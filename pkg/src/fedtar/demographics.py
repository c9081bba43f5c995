"""Patient demographics -> profile vector -> GMM soft assignment -> embedding."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .tensor_core import FLOAT, as_vector

SEX_CODES = {"male": 0.0, "female": 1.0, "unknown": 0.5}
MAX_AGE = 130.0
DEMOGRAPHICS_FIELDS = ("id", "age", "sex", "client_id")


@dataclass(frozen=True)
class PatientProfile:
    id: str
    age: float
    sex: str = "unknown"

    def __post_init__(self):
        if not self.id:
            raise ValueError("patient id must be non-empty")
        if not (0.0 <= float(self.age) <= MAX_AGE):
            raise ValueError(f"age {self.age} outside [0, {MAX_AGE:g}] for patient {self.id!r}")
        if self.sex not in SEX_CODES:
            raise ValueError(f"sex must be one of {sorted(SEX_CODES)}, got {self.sex!r}")


def hash_unit(identifier: str) -> float:
    """First 8 bytes of SHA-256(identifier), big-endian, divided by 2**64."""
    digest = hashlib.sha256(identifier.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2.0**64


def build_profile_vector(p: PatientProfile) -> np.ndarray:
    if not (0.0 <= float(p.age) <= MAX_AGE):
        raise ValueError(f"age {p.age} outside [0, {MAX_AGE:g}]")
    return np.array([hash_unit(p.id), float(p.age) / 100.0, SEX_CODES[p.sex]], dtype=FLOAT)


def profile_matrix(profiles: Sequence[PatientProfile]) -> np.ndarray:
    return np.stack([build_profile_vector(p) for p in profiles])


# ---------------------------------------------------------------------------
# Diagonal-covariance Gaussian mixture
# ---------------------------------------------------------------------------

@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    floor: float = 1e-6
    n_iter: int = 0
    log_likelihood: float = float("nan")
    history: List[float] = field(default_factory=list)
    converged: bool = False

    @property
    def n_comp(self) -> int:
        return self.weights.shape[0]

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "floor": self.floor,
            "n_iter": self.n_iter,
            "log_likelihood": self.log_likelihood,
        }


def _log_gauss(X: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    # (N, K) log N(x_n | mu_k, diag(var_k))
    diff2 = (X[:, None, :] - means[None, :, :]) ** 2
    return -0.5 * (np.sum(diff2 / variances[None], axis=2)
                   + np.sum(np.log(2.0 * np.pi * variances), axis=1)[None])


def _e_step(X, weights, means, variances):
    log_joint = _log_gauss(X, means, variances) + np.log(weights)[None]
    top = log_joint.max(axis=1, keepdims=True)
    rel = np.exp(log_joint - top)
    total = rel.sum(axis=1, keepdims=True)
    log_norm = top[:, 0] + np.log(total[:, 0])
    resp = np.maximum(rel / total, 1e-300)
    resp /= resp.sum(axis=1, keepdims=True)
    return resp, float(np.mean(log_norm))


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def gmm_fit(profiles, n_comp: int = 16, floor: float = 1e-6, tol: float = 1e-3,
            max_iter: int = 200, seed: int = 0) -> GmmModel:
    """Fit a diagonal GMM by EM, seeded with k-means++ centres.

    ``tol`` is compared against the gain in mean per-sample log-likelihood.
    The M-step clamps each variance at ``floor``; this is the exact
    constrained maximiser per coordinate, so the likelihood stays monotone.
    """
    X = np.atleast_2d(np.asarray(profiles, dtype=FLOAT))
    n, dim = X.shape
    if n == 0:
        raise ValueError("gmm_fit needs at least one sample")
    if n_comp < 1:
        raise ValueError("n_comp must be >= 1")
    if n_comp > n:
        raise ValueError(f"n_comp={n_comp} exceeds the number of samples ({n})")
    rng = np.random.default_rng(seed)

    means = _kmeans_pp(X, n_comp, rng)
    variances = np.tile(np.maximum(X.var(axis=0), floor), (n_comp, 1))
    weights = np.full(n_comp, 1.0 / n_comp)

    history: List[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        resp, ll = _e_step(X, weights, means, variances)
        history.append(ll)
        if len(history) > 1 and history[-1] - history[-2] < tol:
            converged = True
            break
        nk = resp.sum(axis=0) + 10.0 * np.finfo(FLOAT).tiny
        weights = nk / nk.sum()
        means = (resp.T @ X) / nk[:, None]
        diff2 = (X[:, None, :] - means[None]) ** 2
        variances = np.maximum(np.einsum("nk,nkd->kd", resp, diff2) / nk[:, None], floor)
    else:
        _, ll = _e_step(X, weights, means, variances)
        history.append(ll)

    return GmmModel(weights=weights, means=means, variances=variances, floor=floor,
                    n_iter=it, log_likelihood=history[-1], history=history,
                    converged=converged)


def gmm_soft_assign(m: GmmModel, v) -> np.ndarray:
    """Posterior responsibilities for one profile vector or a stack of them."""
    V = np.asarray(v, dtype=FLOAT)
    single = V.ndim == 1
    V = np.atleast_2d(V)
    if V.shape[1] != m.means.shape[1]:
        raise ValueError(f"profile vectors must have length {m.means.shape[1]}, got {V.shape[1]}")
    resp, _ = _e_step(V, m.weights, m.means, m.variances)
    return resp[0] if single else resp


# ---------------------------------------------------------------------------
# Learnable projection q -> phi
# ---------------------------------------------------------------------------

@dataclass
class ProjectionParams:
    W: np.ndarray  # d x n_comp
    b: np.ndarray  # d

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=FLOAT)
        self.b = np.asarray(self.b, dtype=FLOAT)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"projection weight {self.W.shape} incompatible with bias {self.b.shape}")

    @classmethod
    def init(cls, d: int, n_comp: int, rng: np.random.Generator) -> "ProjectionParams":
        return cls(rng.normal(0.0, 1.0 / np.sqrt(n_comp), size=(d, n_comp)), np.zeros(d))


def project_embedding(pp: ProjectionParams, q) -> np.ndarray:
    q = np.asarray(q, dtype=FLOAT)
    if q.shape[-1] != pp.W.shape[1]:
        raise ValueError(f"soft assignment length {q.shape[-1]} != n_comp {pp.W.shape[1]}")
    return q @ pp.W.T + pp.b


def project_embedding_vjp(pp: ProjectionParams, q, upstream) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dW, db, dq) of ``<upstream, W q + b>``; batches are summed."""
    q = np.asarray(q, dtype=FLOAT)
    upstream = np.asarray(upstream, dtype=FLOAT)
    if q.shape[-1] != pp.W.shape[1] or upstream.shape[-1] != pp.W.shape[0]:
        raise ValueError("projection vjp shape mismatch")
    if q.shape[:-1] != upstream.shape[:-1]:
        raise ValueError(f"batch shapes differ: q {q.shape}, upstream {upstream.shape}")
    if q.ndim == 1:
        return np.outer(upstream, q), upstream.copy(), pp.W.T @ upstream
    return upstream.T @ q, upstream.sum(axis=0), upstream @ pp.W


# ---------------------------------------------------------------------------
# Record file
# ---------------------------------------------------------------------------

def write_demographics(path, records: Sequence[Tuple[PatientProfile, int]]) -> None:
    """One CSV row per patient: id, age, sex, client_id."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DEMOGRAPHICS_FIELDS)
        for prof, client in records:
            w.writerow([prof.id, repr(float(prof.age)), prof.sex, int(client)])


def read_demographics(path) -> Dict[int, List[PatientProfile]]:
    out: Dict[int, List[PatientProfile]] = {}
    with open(Path(path), encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(DEMOGRAPHICS_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                prof = PatientProfile(row["id"], float(row["age"]), row["sex"])
                client = int(row["client_id"])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            out.setdefault(client, []).append(prof)
    return out
