"""Executable checks of the aggregation guarantees.

* convex-hull closed form of the residual recursion (random instances)
* per-step update-norm identity and bound
* audit-log verification for recorded runs
* finite-difference check of the forward-mode hypergradient on the
  frozen-snapshot surrogate (snapshots are constants, only alpha depends on psi)
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from .temporal import (SnapshotHistory, TemporalPolicy, alpha_jacobian, closed_form_betas,
                       compute_alphas, exact_hypergradient, first_order_hypergradient,
                       reconstruct_from_betas, relative_error, run_recursion)
from .tensor_core import MlpParams

SIMPLEX_TOL = 1e-12
RECON_TOL = 1e-10
IDENTITY_TOL = 1e-12


# ---------------------------------------------------------------------------
# Closed form
# ---------------------------------------------------------------------------

def convex_hull_instance(rng: np.random.Generator, max_T: int = 8, max_dw: int = 100):
    T = int(rng.integers(1, max_T + 1))
    d_w = int(rng.integers(1, max_dw + 1))
    # mix interior values with the endpoints 0 and 1
    alphas = rng.random(T)
    alphas[rng.random(T) < 0.1] = 0.0
    alphas[rng.random(T) < 0.1] = 1.0
    scale = 10.0 ** rng.uniform(-2, 2)
    w0 = scale * rng.normal(size=d_w)
    snaps = [scale * rng.normal(size=d_w) for _ in range(T)]
    return w0, snaps, alphas


def check_convex_hull(w0, snapshots, alphas) -> Dict[str, float]:
    """Compare every recursive iterate with its closed form; report worst errors."""
    hist = run_recursion(w0, snapshots, alphas)
    worst_sum, worst_neg, worst_rec = 0.0, 0.0, 0.0
    for t in range(1, len(alphas) + 1):
        betas = closed_form_betas(alphas[:t])
        worst_sum = max(worst_sum, abs(betas.sum() - 1.0))
        worst_neg = max(worst_neg, -float(betas.min()))
        recon = reconstruct_from_betas(w0, snapshots[:t], betas)
        worst_rec = max(worst_rec, relative_error(recon, hist.iterates[t - 1]))
    return {"simplex_error": worst_sum, "negativity": worst_neg, "reconstruction_error": worst_rec}


# ---------------------------------------------------------------------------
# Audit logs
# ---------------------------------------------------------------------------

class AuditFormatError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


AUDIT_FIELDS = ("round", "t", "alpha_t", "delta_norm", "update_norm", "betas", "w_prev", "w_bar", "w")


@dataclass
class Violation:
    lineno: int
    round: int
    t: int
    check: str
    detail: str


@dataclass
class AuditReport:
    records: int = 0
    checks: int = 0
    violations: List[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations and self.records > 0


def parse_audit(lines: Iterable[str]) -> List[Tuple[int, dict]]:
    out = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise AuditFormatError(lineno, f"not valid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise AuditFormatError(lineno, "record is not a JSON object")
        missing = [f for f in AUDIT_FIELDS if f not in rec]
        if missing:
            raise AuditFormatError(lineno, f"missing fields {missing}")
        n = len(rec["w"])
        if len(rec["w_prev"]) != n or len(rec["w_bar"]) != n:
            raise AuditFormatError(lineno, "weight vectors have inconsistent lengths")
        out.append((lineno, rec))
    return out


def verify_audit(lines: Iterable[str]) -> AuditReport:
    """Run the aggregation checks on every record of an audit log.

    Records are grouped by (method, seed, round) and must list t = 1, 2, ...
    in order within a group.
    """
    parsed = parse_audit(lines)
    report = AuditReport(records=len(parsed))
    groups: Dict[tuple, List[Tuple[int, dict]]] = {}
    for lineno, rec in parsed:
        key = (rec.get("method"), rec.get("seed"), rec["round"])
        groups.setdefault(key, []).append((lineno, rec))

    def fail(lineno, rec, check, detail):
        report.violations.append(Violation(lineno, rec["round"], rec["t"], check, detail))

    for key, items in groups.items():
        G = max(rec["delta_norm"] for _, rec in items)
        w0 = np.asarray(items[0][1]["w_prev"], dtype=float)
        alphas, snaps = [], []
        prev_w = None
        for i, (lineno, rec) in enumerate(items, start=1):
            report.checks += 7
            a = float(rec["alpha_t"])
            if rec["t"] != i:
                fail(lineno, rec, "ordering", f"expected t={i}, found t={rec['t']}")
            if not (0.0 <= a <= 1.0):
                fail(lineno, rec, "alpha_range", f"alpha_t={a!r} outside [0, 1]")
                a_clamped = min(max(a, 0.0), 1.0)
            else:
                a_clamped = a
            alphas.append(a_clamped)
            betas = np.asarray(rec["betas"], dtype=float)
            if betas.size != i + 1:
                fail(lineno, rec, "beta_length", f"{betas.size} betas for step {i}")
                continue
            if abs(betas.sum() - 1.0) > SIMPLEX_TOL or betas.min() < 0.0:
                fail(lineno, rec, "beta_simplex", f"sum={betas.sum()!r}, min={betas.min()!r}")
            expected = closed_form_betas(alphas)
            if np.max(np.abs(expected - betas)) > SIMPLEX_TOL:
                fail(lineno, rec, "beta_closed_form",
                     f"max |beta - closed form| = {np.max(np.abs(expected - betas)):.3e}")
            w_prev = np.asarray(rec["w_prev"], dtype=float)
            if prev_w is not None and relative_error(w_prev, prev_w) > IDENTITY_TOL:
                fail(lineno, rec, "continuity", "w_prev differs from the previous step's w")
            snaps.append(np.asarray(rec["w_bar"], dtype=float))
            w = np.asarray(rec["w"], dtype=float)
            recon = reconstruct_from_betas(w0, snaps, betas)
            err = relative_error(recon, w)
            if err > RECON_TOL:
                fail(lineno, rec, "reconstruction", f"relative error {err:.3e} > {RECON_TOL:g}")
            d, u = float(rec["delta_norm"]), float(rec["update_norm"])
            slack = IDENTITY_TOL * max(1.0, d)
            if abs(u - a * d) > slack:
                fail(lineno, rec, "update_identity", f"|{u!r} - {a!r}*{d!r}| > {slack:.1e}")
            if u > a * G + slack:
                fail(lineno, rec, "update_bound", f"update {u!r} exceeds alpha*G = {a * G!r}")
            prev_w = w
    return report


# ---------------------------------------------------------------------------
# Hypergradient finite-difference check
# ---------------------------------------------------------------------------

@dataclass
class SurrogateProblem:
    """Frozen-snapshot meta-objective L(w_T(psi)) with a smooth validation loss."""

    policy: TemporalPolicy
    w0: np.ndarray
    snapshots: List[np.ndarray]
    C: np.ndarray
    target: np.ndarray

    def val_loss(self, w: np.ndarray) -> float:
        r = self.C @ w - self.target
        return float(0.5 * r @ r + np.sum(np.log(np.cosh(w))))

    def val_grad(self, w: np.ndarray) -> np.ndarray:
        return self.C.T @ (self.C @ w - self.target) + np.tanh(w)

    def unroll(self, psi: np.ndarray) -> SnapshotHistory:
        alphas, _ = compute_alphas(self.policy.unflatten(psi))
        return run_recursion(self.w0, self.snapshots, alphas)

    def objective(self, psi: np.ndarray) -> float:
        return self.val_loss(self.unroll(psi).current)

    def hypergrad(self, psi: np.ndarray, mode: str = "exact") -> np.ndarray:
        pol = self.policy.unflatten(psi)
        alphas, cache = compute_alphas(pol)
        J = alpha_jacobian(pol, cache)
        hist = run_recursion(self.w0, self.snapshots, alphas)
        g = self.val_grad(hist.current)
        if mode == "exact":
            return exact_hypergradient(hist, J, g)
        return first_order_hypergradient(hist, J, g)


def policy_size(T: int, embed_dim: int, hidden: int) -> int:
    return T * embed_dim + embed_dim * hidden + hidden + hidden + 1


def make_surrogate(rng: np.random.Generator, d_w: int, T: int, embed_dim: int = 2, hidden: int = 3,
                   zero_mlp: bool = False) -> SurrogateProblem:
    if zero_mlp:
        policy = TemporalPolicy.init(T, embed_dim, hidden, zero=True)
    else:
        mlp = MlpParams.init([embed_dim, hidden, 1], rng)
        mlp.biases[0] += rng.normal(0, 0.5, hidden)
        mlp.biases[1] += rng.normal()
        policy = TemporalPolicy(rng.normal(size=(T, embed_dim)), mlp)
    w0 = rng.normal(size=d_w)
    snaps = [w0 + rng.normal(size=d_w) for _ in range(T)]
    C = rng.normal(0, 1 / np.sqrt(d_w), (max(1, d_w // 2), d_w))
    target = rng.normal(size=C.shape[0])
    return SurrogateProblem(policy, w0, snaps, C, target)


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def hypergradient_gradcheck(prob: SurrogateProblem, h: float = 1e-6) -> Dict[str, float]:
    psi = prob.policy.flatten()
    exact = prob.hypergrad(psi, "exact")
    fo = prob.hypergrad(psi, "first_order")
    fd = central_difference(prob.objective, psi, h)
    # round-off scale of the central difference; only matters when the true gradient is ~0
    # (saturated score units, or the output bias, which softmax ignores)
    noise = np.finfo(float).eps * max(abs(prob.objective(psi)), 1.0) / h
    cos = float(exact @ fo / (np.linalg.norm(exact) * np.linalg.norm(fo))) \
        if np.linalg.norm(exact) > 0 and np.linalg.norm(fo) > 0 else float("nan")
    return {
        "d_w": prob.w0.size,
        "d_psi": psi.size,
        "T": prob.policy.T,
        "max_rel_error": relative_error(exact, fd, floor=noise),
        "first_order_gap": relative_error(exact, fo),
        "first_order_cosine": cos,
        "hypergrad_norm": float(np.linalg.norm(exact)),
    }
