"""Synthetic longitudinal federation and the round loop that trains on it.

A cohort has K clients, each with a fixed set of patients observed at T time
steps. The target map of client k at time t is a linear teacher ``M_{k,t} x +
b_{k,t}`` plus a demographic offset, and drifts across t according to
``drift_kind``. ``final_jump`` adds an extra abrupt change at t = T only.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .adapters import (ClientWeights, LocalData, ModelSpec, NumericalError, TrainConfig,
                       client_local_update, init_weights, loss_and_grad, predict, task_loss)
from .demographics import PatientProfile, gmm_fit, gmm_soft_assign, profile_matrix, GmmModel
from .temporal import (SnapshotHistory, TemporalPolicy, alpha_jacobian, closed_form_betas,
                       compute_alphas, first_order_hypergradient, hypergradient, meta_update,
                       sensitivity_step, weighted_client_average)

DRIFT_KINDS = ("rotation", "shift", "mixture-swap")
TASKS = ("regression", "classification")
METHODS = ("fedtar", "uniform_alpha", "fedavg_pooled", "last_step_only")


@dataclass(frozen=True)
class DriftConfig:
    clients: int = 5
    time_steps: int = 5
    patients_per_client: int = 40
    samples_per_patient: int = 10
    input_dim: int = 8
    output_dim: int = 2
    task: str = "regression"
    drift_kind: str = "rotation"
    drift_magnitude: float = 0.1
    final_jump: float = 0.0
    heterogeneity: float = 0.2
    noise: float = 0.05
    patient_effect: float = 0.5
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("clients", "time_steps", "patients_per_client", "samples_per_patient",
                     "input_dim", "output_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("drift_magnitude", "final_jump", "heterogeneity", "noise", "patient_effect"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.drift_kind not in DRIFT_KINDS:
            raise ValueError(f"drift_kind must be one of {DRIFT_KINDS}, got {self.drift_kind!r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "classification" and self.output_dim < 2:
            raise ValueError("classification needs output_dim >= 2")
        if not (0.0 < self.val_fraction < 1.0):
            raise ValueError("val_fraction must be in (0, 1)")
        n = self.samples_per_patient * self.patients_per_client
        if round(n * self.val_fraction) in (0, n):
            raise ValueError("val_fraction leaves an empty train or validation split")


@dataclass
class ClientDataset:
    profiles: List[PatientProfile]
    train: List[LocalData]  # index t-1
    val: List[LocalData]
    teacher: List[Tuple[np.ndarray, np.ndarray]]  # (M_{k,t}, b_{k,t})
    offsets: np.ndarray  # per-patient additive target offset (before time scaling)

    def n_train(self, t: int) -> int:
        return len(self.train[t - 1])

    def pooled_train(self) -> LocalData:
        out = self.train[0]
        for d in self.train[1:]:
            out = out.concat(d)
        return out


@dataclass
class Cohort:
    config: DriftConfig
    clients: List[ClientDataset]

    @property
    def loss_kind(self) -> str:
        return "squared_error" if self.config.task == "regression" else "cross_entropy"


def rotation_matrix(dim: int, theta: float) -> np.ndarray:
    """Block-diagonal Givens rotation by ``theta`` in planes (0,1), (2,3), ..."""
    R = np.eye(dim)
    c, s = np.cos(theta), np.sin(theta)
    for i in range(0, dim - 1, 2):
        R[i, i], R[i, i + 1] = c, -s
        R[i + 1, i], R[i + 1, i + 1] = s, c
    return R


def _progress(cfg: DriftConfig, t: int) -> float:
    return cfg.drift_magnitude * (t - 1) + (cfg.final_jump if t == cfg.time_steps and t > 1 else 0.0)


def _teacher(cfg: DriftConfig, M: np.ndarray, b: np.ndarray, M_alt: np.ndarray,
             shift_dir: np.ndarray, t: int):
    amount = _progress(cfg, t)
    if cfg.drift_kind == "rotation":
        return M @ rotation_matrix(cfg.input_dim, amount), b.copy()
    if cfg.drift_kind == "shift":
        return M.copy(), b + amount * shift_dir
    lam = min(1.0, amount)
    return (1.0 - lam) * M + lam * M_alt, b.copy()


def generate_synthetic_cohort(cfg: DriftConfig) -> Cohort:
    rng = np.random.default_rng(cfg.seed)
    d_in, d_out = cfg.input_dim, cfg.output_dim
    M0 = rng.normal(0, 1 / np.sqrt(d_in), (d_out, d_in))
    M0_alt = rng.normal(0, 1 / np.sqrt(d_in), (d_out, d_in))
    effect_dir = rng.normal(size=d_out)
    effect_dir /= np.linalg.norm(effect_dir)
    shift_dir = rng.normal(size=d_out)
    shift_dir /= np.linalg.norm(shift_dir)

    clients = []
    for k in range(cfg.clients):
        crng = np.random.default_rng([cfg.seed, k + 1])
        het = cfg.heterogeneity
        M_k = M0 + het * crng.normal(0, 1 / np.sqrt(d_in), (d_out, d_in))
        M_alt = M0_alt + het * crng.normal(0, 1 / np.sqrt(d_in), (d_out, d_in))
        b_k = het * 0.5 * crng.normal(size=d_out)
        age_mean = 60.0 + 10.0 * het * crng.normal()

        profiles, z = [], []
        for p in range(cfg.patients_per_client):
            age = float(np.clip(np.round(crng.normal(age_mean, 12.0)), 18, 95))
            u = crng.random()
            sex = "female" if u < 0.475 else ("male" if u < 0.95 else "unknown")
            profiles.append(PatientProfile(f"c{k}-p{p:03d}", age, sex))
            z.append((age - 60.0) / 20.0 + {"female": 0.5, "male": -0.5, "unknown": 0.0}[sex])
        offsets = cfg.patient_effect * np.outer(z, effect_dir)

        n_pat, spp = cfg.patients_per_client, cfg.samples_per_patient
        pid = np.repeat(np.arange(n_pat), spp)
        n = pid.size
        n_val = int(round(n * cfg.val_fraction))
        train, val, teacher = [], [], []
        for t in range(1, cfg.time_steps + 1):
            M_t, b_t = _teacher(cfg, M_k, b_k, M_alt, shift_dir, t)
            teacher.append((M_t, b_t))
            X = crng.normal(size=(n, d_in))
            scale = 1.0 + cfg.drift_magnitude * (t - 1)
            signal = X @ M_t.T + b_t + scale * offsets[pid]
            if cfg.task == "regression":
                Y = signal + cfg.noise * crng.normal(size=signal.shape)
            else:
                labels = np.argmax(signal + cfg.noise * crng.normal(size=signal.shape), axis=1)
                Y = np.eye(d_out)[labels]
            perm = crng.permutation(n)
            vi, ti = np.sort(perm[:n_val]), np.sort(perm[n_val:])
            train.append(LocalData(X[ti], Y[ti], pid[ti]))
            val.append(LocalData(X[vi], Y[vi], pid[vi]))
        clients.append(ClientDataset(profiles, train, val, teacher, offsets))
    return Cohort(cfg, clients)


# ---------------------------------------------------------------------------
# Experiment configuration and state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GmmConfig:
    n_comp: int = 16
    floor: float = 1e-6
    tol: float = 1e-3
    max_iter: int = 200


@dataclass(frozen=True)
class MetaConfig:
    eta0: float = 1.0
    embed_dim: int = 4
    hidden: int = 8
    hypergrad: str = "exact"
    val_steps: str = "last"

    def __post_init__(self):
        if self.hypergrad not in ("exact", "first_order"):
            raise ValueError(f"hypergrad must be 'exact' or 'first_order', got {self.hypergrad!r}")
        if self.val_steps not in ("last", "all"):
            raise ValueError(f"val_steps must be 'last' or 'all', got {self.val_steps!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    cohort: DriftConfig = field(default_factory=DriftConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    gmm: GmmConfig = field(default_factory=GmmConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    method: str = "fedtar"
    rounds: int = 20
    seed: int = 0
    mode: str = "fedavg_proportional"
    payload: str = "full"
    sketch_dim: int = 8

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.payload not in ("full", "adapters_only"):
            raise ValueError(f"payload must be 'full' or 'adapters_only', got {self.payload!r}")
        if self.mode not in ("paper_literal", "fedavg_proportional"):
            raise ValueError(f"mode must be 'paper_literal' or 'fedavg_proportional', got {self.mode!r}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.model.in_dim != self.cohort.input_dim or self.model.out_dim != self.cohort.output_dim:
            raise ValueError("model in/out dims must match the cohort's input/output dims")
        if self.model.n_comp != self.gmm.n_comp:
            raise ValueError("model.n_comp must equal gmm.n_comp")

    def to_dict(self) -> dict:
        return asdict(self)


def make_config(**overrides) -> ExperimentConfig:
    """Build a config, keeping the model's in/out/n_comp dims in sync with cohort and GMM."""
    cohort = overrides.pop("cohort", DriftConfig())
    gmm = overrides.pop("gmm", GmmConfig())
    model = overrides.pop("model", ModelSpec())
    model = replace(model, in_dim=cohort.input_dim, out_dim=cohort.output_dim, n_comp=gmm.n_comp)
    return ExperimentConfig(cohort=cohort, model=model, gmm=gmm, **overrides)


@dataclass
class FederationState:
    cohort: Cohort
    spec: ModelSpec
    gmms: List[GmmModel]
    Q: List[np.ndarray]
    local: List[ClientWeights]
    global_w: np.ndarray
    mask: Optional[np.ndarray]
    psi: Optional[np.ndarray] = None
    round: int = 0

    def client_weights(self, k: int, w: Optional[np.ndarray] = None,
                       local: Optional[List[ClientWeights]] = None) -> ClientWeights:
        """Weights client k trains or evaluates with, given payload ``w``.

        In ``adapters_only`` mode everything outside the payload comes from the
        client's own persistent copy (``local`` overrides ``self.local``).
        """
        w = self.global_w if w is None else w
        if self.mask is None:
            return ClientWeights(self.spec, w)
        flat = (self.local if local is None else local)[k].flat.copy()
        flat[self.mask] = w
        return ClientWeights(self.spec, flat)

    def payload(self, cw: ClientWeights) -> np.ndarray:
        return cw.flat.copy() if self.mask is None else cw.flat[self.mask].copy()


def init_state(cfg: ExperimentConfig, cohort: Optional[Cohort] = None) -> FederationState:
    if cohort is None:
        cohort = generate_synthetic_cohort(cfg.cohort)
    gmms, Q = [], []
    for k, client in enumerate(cohort.clients):
        V = profile_matrix(client.profiles)
        g = gmm_fit(V, cfg.gmm.n_comp, cfg.gmm.floor, cfg.gmm.tol, cfg.gmm.max_iter,
                    seed=int(np.random.SeedSequence([cfg.seed, 7, k]).generate_state(1)[0]))
        gmms.append(g)
        Q.append(gmm_soft_assign(g, V))
    w0 = init_weights(cfg.model, np.random.default_rng([cfg.seed, 11]))
    local = [w0.copy() for _ in cohort.clients]
    mask = None if cfg.payload == "full" else cfg.model.adapter_mask()
    global_w = w0.flat.copy() if mask is None else w0.flat[mask].copy()
    return FederationState(cohort, cfg.model, gmms, Q, local, global_w, mask)


def _client_seed(seed: int, r: int, t: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, r, t, k]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class LossStats:
    mean: float
    std: float
    n: int


def evaluate(weights: ClientWeights, data: LocalData, Q: np.ndarray, kind: str = "squared_error") -> LossStats:
    """Per-sample loss statistics of ``weights`` on ``data``; no parameters change."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty data slice")
    pred = predict(weights, Q, data.pid, data.X)
    losses = np.array([task_loss(p, y, kind)[0] for p, y in zip(pred, data.Y)])
    return LossStats(float(losses.mean()), float(losses.std()), int(losses.size))


def _mean_loss(state: FederationState, w: np.ndarray, split: str, steps: Sequence[int]) -> float:
    kind = state.cohort.loss_kind
    vals = []
    for k, client in enumerate(state.cohort.clients):
        cw = state.client_weights(k, w)
        for t in steps:
            data = getattr(client, split)[t - 1]
            pred = predict(cw, state.Q[k], data.pid, data.X)
            vals.append(task_loss(pred, data.Y, kind)[0])
    return float(np.mean(vals))


def validation_grad(state: FederationState, w: np.ndarray, steps: Sequence[int]) -> Tuple[float, np.ndarray]:
    """Mean validation loss over clients and ``steps`` and its gradient wrt the payload."""
    kind = state.cohort.loss_kind
    total, grad, count = 0.0, np.zeros_like(w), 0
    for k, client in enumerate(state.cohort.clients):
        cw = state.client_weights(k, w)
        for t in steps:
            data = client.val[t - 1]
            loss, g = loss_and_grad(cw, state.Q[k], data.pid, data.X, data.Y, kind)
            total += loss
            grad += g if state.mask is None else g[state.mask]
            count += 1
    return total / count, grad / count


# ---------------------------------------------------------------------------
# Audit sketches
# ---------------------------------------------------------------------------

def sketch_matrix(d_w: int, k: int) -> np.ndarray:
    """Fixed Gaussian projection used to record weight vectors compactly in audits."""
    rng = np.random.default_rng([20240917, d_w, k])
    return rng.normal(0.0, 1.0 / np.sqrt(d_w), (k, d_w))


def _sketch(P: Optional[np.ndarray], w: np.ndarray) -> List[float]:
    v = w if P is None else P @ w
    return [float(x) for x in v]


# ---------------------------------------------------------------------------
# Rounds
# ---------------------------------------------------------------------------

@dataclass
class RoundOutput:
    rows: List[dict]
    audit: List[dict]
    alphas: np.ndarray
    hypergrad: Optional[np.ndarray]
    val_loss: float


def _local_updates(state: FederationState, cfg: ExperimentConfig, w_start: np.ndarray, t: int,
                   locals_: List[ClientWeights], pooled: bool = False):
    payloads, sizes, trained = [], [], []
    train = replace(cfg.train, steps=cfg.train.steps * state.cohort.config.time_steps) if pooled else cfg.train
    for k, client in enumerate(state.cohort.clients):
        data = client.pooled_train() if pooled else client.train[t - 1]
        try:
            cw, _ = client_local_update(state.client_weights(k, w_start, locals_), data, state.Q[k],
                                        train, seed=_client_seed(cfg.seed, state.round, t, k))
        except NumericalError as exc:
            raise NumericalError(f"round {state.round}, t={t}, client {k}: {exc}") from None
        payloads.append(state.payload(cw))
        sizes.append(len(data))
        trained.append(cw)
    return payloads, sizes, trained


def run_round(state: FederationState, cfg: ExperimentConfig, policy: Optional[TemporalPolicy] = None,
              alphas: Optional[Sequence[float]] = None, meta: bool = True,
              sketch: Optional[np.ndarray] = None) -> RoundOutput:
    """One communication round of temporal residual aggregation.

    Coefficients come from ``policy`` unless ``alphas`` is given. When
    ``meta`` is true and a policy is present, the policy's parameters in
    ``state.psi`` receive one hypergradient step after the last time step.
    On a client failure the exception propagates and ``state`` is untouched.
    """
    T = state.cohort.config.time_steps
    r = state.round + 1
    if alphas is None:
        if policy is None:
            raise ValueError("run_round needs a temporal policy or explicit alphas")
        pol = policy.unflatten(state.psi) if state.psi is not None else policy
        alphas, cache = compute_alphas(pol)
        J = alpha_jacobian(pol, cache)
    else:
        alphas = np.asarray(alphas, dtype=float)
        J = None
        meta = False
    if alphas.shape != (T,):
        raise ValueError(f"need {T} alphas, got shape {alphas.shape}")

    saved_round = state.round
    state.round = r
    try:
        w0 = state.global_w.copy()
        hist = SnapshotHistory(w0)
        S = np.zeros((w0.size, J.shape[1])) if (meta and J is not None) else None
        locals_ = list(state.local)
        rows, audit = [], []
        for t in range(1, T + 1):
            w_prev = hist.current
            payloads, sizes, trained = _local_updates(state, cfg, w_prev, t, locals_)
            if state.mask is not None:
                locals_ = trained
                state_view = replace(state, local=locals_)
            else:
                state_view = state
            w_bar = weighted_client_average(payloads, sizes, cfg.mode)
            w = hist.push(w_bar, float(alphas[t - 1]))
            if S is not None:
                S = sensitivity_step(S, float(alphas[t - 1]), J[t - 1], hist.residuals[-1])
            rows.append(_row(state_view, cfg, r, t, w, float(alphas[t - 1]), hist))
            audit.append(_audit_record(cfg, r, t, alphas[:t], hist, rows[-1]["val_loss"], sketch))
    except Exception:
        state.round = saved_round
        raise

    state.local = locals_
    hg = None
    w_T = hist.current
    steps = [T] if cfg.meta.val_steps == "last" else list(range(1, T + 1))
    if meta and J is not None:
        val_loss, g_val = validation_grad(state, w_T, steps)
        if cfg.meta.hypergrad == "exact":
            hg = hypergradient(S, g_val)
        else:
            hg = first_order_hypergradient(hist, J, g_val)
        psi = state.psi if state.psi is not None else policy.flatten()
        state.psi = meta_update(psi, hg, r, cfg.meta.eta0)
    else:
        val_loss = _mean_loss(state, w_T, "val", steps)
    state.global_w = w_T
    return RoundOutput(rows, audit, np.asarray(alphas, dtype=float), hg, val_loss)


def run_pooled_round(state: FederationState, cfg: ExperimentConfig,
                     sketch: Optional[np.ndarray] = None) -> RoundOutput:
    """Time-agnostic baseline: one FedAvg aggregation over all time steps' data."""
    T = state.cohort.config.time_steps
    r = state.round + 1
    state.round = r
    try:
        w0 = state.global_w.copy()
        payloads, sizes, trained = _local_updates(state, cfg, w0, 0, state.local, pooled=True)
    except Exception:
        state.round = r - 1
        raise
    if state.mask is not None:
        state.local = trained
    w_bar = weighted_client_average(payloads, sizes, cfg.mode)
    hist = SnapshotHistory(w0)
    w = hist.push(w_bar, 1.0)
    rows = []
    for t in range(1, T + 1):
        row = _row(state, cfg, r, t, w, None, hist if t == T else None)
        rows.append(row)
    audit = [_audit_record(cfg, r, 1, [1.0], hist, rows[-1]["val_loss"], sketch)]
    state.global_w = w
    steps = [T] if cfg.meta.val_steps == "last" else list(range(1, T + 1))
    return RoundOutput(rows, audit, np.ones(1), None, _mean_loss(state, w, "val", steps))


def _row(state, cfg, r, t, w, alpha, hist) -> dict:
    tr = _mean_loss(state, w, "train", [t])
    va = _mean_loss(state, w, "val", [t])
    if not (np.isfinite(tr) and np.isfinite(va)):
        raise NumericalError(f"non-finite loss at round {r}, t={t}")
    upd = None
    if hist is not None:
        prev = hist.w0 if len(hist.iterates) == 1 else hist.iterates[-2]
        upd = float(np.linalg.norm(hist.iterates[-1] - prev))
    return {"round": r, "t": t, "method": cfg.method, "seed": cfg.seed, "train_loss": tr,
            "val_loss": va, "alpha_t": alpha, "update_norm": upd}


def _audit_record(cfg, r, t, alphas, hist: SnapshotHistory, val_loss, sketch) -> dict:
    prev = hist.w0 if len(hist.iterates) == 1 else hist.iterates[-2]
    return {
        "round": r,
        "t": t,
        "method": cfg.method,
        "seed": cfg.seed,
        "alpha_t": float(alphas[-1]),
        "delta_norm": float(np.linalg.norm(hist.residuals[-1])),
        "update_norm": float(np.linalg.norm(hist.iterates[-1] - prev)),
        "betas": [float(b) for b in closed_form_betas(alphas)],
        "val_loss": val_loss,
        "w_prev": _sketch(sketch, prev),
        "w_bar": _sketch(sketch, hist.snapshots[-1]),
        "w": _sketch(sketch, hist.iterates[-1]),
    }


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    method: str
    seed: int
    rows: List[dict]
    audit: List[dict]
    alpha_trajectory: List[List[float]]
    final_psi: Optional[List[float]]
    wall_clock: float

    @property
    def final_val_loss(self) -> float:
        return self.rows[-1]["val_loss"]

    def final_step_val_loss(self) -> float:
        T = max(row["t"] for row in self.rows)
        last_round = self.rows[-1]["round"]
        return next(row["val_loss"] for row in self.rows if row["round"] == last_round and row["t"] == T)

    def summary(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "rounds": self.rows[-1]["round"],
            "final_val_loss": self.final_val_loss,
            "final_step_val_loss": self.final_step_val_loss(),
            "final_alphas": self.alpha_trajectory[-1] if self.alpha_trajectory else None,
            "wall_clock_s": self.wall_clock,
        }


def run_experiment(cfg: ExperimentConfig, method: Optional[str] = None, rounds: Optional[int] = None,
                   seed: Optional[int] = None, alphas: Optional[Sequence[float]] = None,
                   audit_vectors: str = "sketch") -> ExperimentResult:
    """Train one method on the cohort generated from ``cfg`` and ``seed``.

    ``alphas`` replaces the coefficient schedule of the temporal methods with a
    fixed one (no meta-learning); used to exercise fixed schedules such as 1/t.
    """
    overrides = {}
    if method is not None:
        overrides["method"] = method
    if rounds is not None:
        overrides["rounds"] = rounds
    if seed is not None:
        overrides["seed"] = seed
    cfg = replace(cfg, **overrides)
    cohort = generate_synthetic_cohort(replace(cfg.cohort, seed=cfg.seed))
    state = init_state(cfg, cohort)
    T = cfg.cohort.time_steps
    d_w = state.global_w.size
    sketch = None if audit_vectors == "full" else sketch_matrix(d_w, cfg.sketch_dim)

    policy = None
    fixed = None
    if alphas is not None:
        fixed = np.asarray(alphas, dtype=float)
    elif cfg.method == "fedtar":
        policy = TemporalPolicy.init(T, cfg.meta.embed_dim, cfg.meta.hidden,
                                     rng=np.random.default_rng([cfg.seed, 13]))
        state.psi = policy.flatten()
    elif cfg.method == "uniform_alpha":
        fixed = np.full(T, 1.0 / T)
    elif cfg.method == "last_step_only":
        fixed = np.zeros(T)
        fixed[-1] = 1.0

    start = time.perf_counter()
    rows, audit, traj = [], [], []
    for _ in range(cfg.rounds):
        try:
            if cfg.method == "fedavg_pooled" and alphas is None:
                out = run_pooled_round(state, cfg, sketch)
            else:
                out = run_round(state, cfg, policy=policy, alphas=fixed, sketch=sketch)
        except NumericalError as exc:
            # completed rounds stay available to the caller for partial outputs
            psi = None if state.psi is None else [float(x) for x in state.psi]
            exc.partial = ExperimentResult(cfg.method, cfg.seed, rows, audit, traj, psi,
                                           time.perf_counter() - start)
            raise
        rows += out.rows
        audit += out.audit
        traj.append([float(a) for a in out.alphas])
    elapsed = time.perf_counter() - start
    final_psi = None if state.psi is None else [float(x) for x in state.psi]
    return ExperimentResult(cfg.method, cfg.seed, rows, audit, traj, final_psi, elapsed)


def default_config(**overrides) -> ExperimentConfig:
    """Reference drifting-regression setup: K=5, T=5, rotation drift plus an abrupt jump at t=T."""
    cohort = overrides.pop("cohort", DriftConfig(final_jump=1.0))
    return make_config(cohort=cohort, **overrides)
