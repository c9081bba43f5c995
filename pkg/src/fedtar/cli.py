"""``fedtar`` command line: gen-data, simulate, verify, gradcheck, report.

Exit codes: 0 success, 2 config or input error, 3 numerical failure,
4 verification failure. Output goes under ``--out``, defaulting to
``$FEDTAR_OUT`` or ``./runs``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .adapters import NumericalError
from .artifacts import read_metrics_csv, write_cohort, write_json, write_jsonl, write_metrics_csv
from .config import ConfigError, config_digest, load_config
from .federation import METHODS, generate_synthetic_cohort, run_experiment
from .stats import paired_bootstrap
from .verification import AuditFormatError, hypergradient_gradcheck, make_surrogate, policy_size, verify_audit

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_VERIFY = 0, 2, 3, 4
OUT_ENV = "FEDTAR_OUT"
GRADCHECK_LIMITS = {"d_w": 50, "d_psi": 20, "T": 6}
REPORT_METRICS = ("val_loss", "train_loss")


class InputError(Exception):
    """Bad command-line input; maps to exit code 2."""


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _out_dir(arg: Optional[str]) -> Path:
    out = Path(arg or os.environ.get(OUT_ENV) or "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(command: str, raw: Optional[bytes], seed, started: str, outputs, status: str,
              partial: bool = False, **extra) -> dict:
    m = {
        "command": command,
        "tool_version": __version__,
        "config_sha256": config_digest(raw) if raw is not None else None,
        "seed": seed,
        "started": started,
        "finished": _now(),
        "outputs": [str(p) for p in outputs],
        "status": status,
        "partial": partial,
    }
    m.update(extra)
    return m


def _err(msg: str) -> None:
    print(f"fedtar: error: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    started = _now()
    cfg, raw = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    cohort = generate_synthetic_cohort(replace(cfg.cohort, seed=seed))
    out = _out_dir(args.out)
    files = write_cohort(cohort, out)
    write_json(_manifest("gen-data", raw, seed, started, files, "ok"), out / "manifest.json")
    print(f"wrote cohort ({cfg.cohort.clients} clients, T={cfg.cohort.time_steps}) to {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = _now()
    cfg, raw = load_config(args.config)
    over = {}
    for key in ("method", "seed", "rounds", "mode"):
        if getattr(args, key) is not None:
            over[key] = getattr(args, key)
    if args.hypergrad is not None:
        over["meta"] = replace(cfg.meta, hypergrad=args.hypergrad)
    try:
        cfg = replace(cfg, **over)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(args.out)
    stem = f"{cfg.method}_s{cfg.seed}"
    paths = {k: out / f"{k}_{stem}.{ext}" for k, ext in
             (("metrics", "csv"), ("audit", "jsonl"), ("summary", "json"), ("manifest", "json"))}

    status, partial, code, result = "ok", False, EXIT_OK, None
    try:
        result = run_experiment(cfg, audit_vectors=args.audit_vectors)
    except NumericalError as exc:
        _err(str(exc))
        status, partial, code = "numerical_failure", True, EXIT_NUMERICAL
        result = getattr(exc, "partial", None)

    written = []
    if result is not None:
        write_metrics_csv(result.rows, paths["metrics"])
        write_jsonl(result.audit, paths["audit"])
        written += [paths["metrics"], paths["audit"]]
        if result.rows and not partial:
            summary = result.summary()
            summary.pop("wall_clock_s")    # keeps the summary byte-reproducible
            write_json(summary, paths["summary"])
            written.append(paths["summary"])
    extra = {"method": cfg.method, "rounds": cfg.rounds, "mode": cfg.mode, "hypergrad": cfg.meta.hypergrad,
             "config": str(args.config)}
    if result is not None:
        extra["wall_clock_s"] = result.wall_clock
    write_json(_manifest("simulate", raw, cfg.seed, started, written, status, partial, **extra),
               paths["manifest"])
    if code == EXIT_OK:
        print(f"{cfg.method} seed={cfg.seed}: final val_loss={result.final_val_loss:.6g} "
              f"({result.wall_clock:.1f}s) -> {out}")
    return code


def cmd_verify(args) -> int:
    path = Path(args.audit)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read audit {path}: {exc.strerror}") from None
    try:
        report = verify_audit(text.splitlines())
    except AuditFormatError as exc:
        print(f"FAIL {path}: corrupt audit, {exc}")
        return EXIT_VERIFY
    for v in report.violations:
        print(f"FAIL line {v.lineno} (round {v.round}, t={v.t}) {v.check}: {v.detail}")
    if report.records == 0:
        print(f"FAIL {path}: no audit records")
        return EXIT_VERIFY
    verdict = "PASS" if report.ok else "FAIL"
    print(f"{verdict} {path}: {report.records} records, {report.checks} checks, "
          f"{len(report.violations)} violations")
    return EXIT_OK if report.ok else EXIT_VERIFY


def parse_dims(text: str) -> dict:
    dims = {"d_w": 20, "T": 4, "embed": 2, "hidden": 2}
    if text:
        for item in text.split(","):
            key, sep, value = item.partition("=")
            key = key.strip()
            if not sep or key not in dims:
                raise InputError(f"bad --dims entry {item!r}; expected keys {sorted(dims)}")
            try:
                dims[key] = int(value)
            except ValueError:
                raise InputError(f"--dims {key} must be an integer, got {value!r}") from None
            if dims[key] < 1:
                raise InputError(f"--dims {key} must be >= 1")
    d_psi = policy_size(dims["T"], dims["embed"], dims["hidden"])
    for key, value in (("d_w", dims["d_w"]), ("T", dims["T"]), ("d_psi", d_psi)):
        if value > GRADCHECK_LIMITS[key]:
            raise InputError(f"{key}={value} exceeds the limit {GRADCHECK_LIMITS[key]}")
    dims["d_psi"] = d_psi
    return dims


def _symmetric_pattern(prob, hg) -> bool:
    """Time steps with identical embeddings must get identical table gradients."""
    table = prob.policy.table
    g = hg[:table.size].reshape(table.shape)
    for i in range(table.shape[0]):
        for j in range(i + 1, table.shape[0]):
            if np.array_equal(table[i], table[j]) and not np.array_equal(g[i], g[j]):
                return False
    return True


def cmd_gradcheck(args) -> int:
    dims = parse_dims(args.dims)
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    ok = True
    for i in range(args.instances):
        prob = make_surrogate(rng, dims["d_w"], dims["T"], dims["embed"], dims["hidden"],
                              zero_mlp=args.zero_mlp)
        res = hypergradient_gradcheck(prob)
        hg = prob.hypergrad(prob.policy.flatten(), args.hypergrad)
        line = (f"instance {i}: d_w={res['d_w']} d_psi={res['d_psi']} T={res['T']} "
                f"max_rel_error={res['max_rel_error']:.3e} first_order_gap={res['first_order_gap']:.3e}")
        if args.zero_mlp:
            sym = _symmetric_pattern(prob, hg)
            ok &= sym
            line += f" symmetric={'yes' if sym else 'no'} |hg|={np.linalg.norm(hg):.3e}"
            # an all-zero gradient is exact; the relative error is then meaningless
            err = 0.0 if np.linalg.norm(hg) == 0 and res["hypergrad_norm"] == 0 else res["max_rel_error"]
        else:
            err = res["max_rel_error"]
        worst = max(worst, err)
        print(line)
    ok &= worst < args.tol
    print(f"{'PASS' if ok else 'FAIL'} max relative error {worst:.3e} (tolerance {args.tol:g})")
    return EXIT_OK if ok else EXIT_VERIFY


def pair_rows(base: List[dict], cand: List[dict], which: str = "final"):
    """Match rows on (seed, round, t); every key must appear exactly once in both files."""
    def index(rows, name):
        out = {}
        for row in rows:
            key = (row["seed"], row["round"], row["t"])
            if key in out:
                raise InputError(f"{name}: duplicate row for seed={key[0]} round={key[1]} t={key[2]}")
            out[key] = row
        return out

    ib, ic = index(base, "baseline"), index(cand, "candidate")
    if set(ib) != set(ic):
        missing = sorted(set(ib) ^ set(ic))[:3]
        raise InputError(f"unpaired rows between baseline and candidate, e.g. (seed, round, t) = {missing}")
    keys = sorted(ib)
    if which == "final":
        last = {}
        for s, r, t in keys:
            last[s] = max(last.get(s, 0), r)
        keys = [k for k in keys if k[1] == last[k[0]]]
    return [(ib[k], ic[k]) for k in keys]


def cmd_report(args) -> int:
    base, cand = [], []
    for paths, dest in ((args.baseline, base), (args.candidate, cand)):
        for p in paths:
            try:
                dest += read_metrics_csv(p)
            except OSError as exc:
                raise InputError(f"cannot read {p}: {exc.strerror}") from None
            except ValueError as exc:
                raise InputError(str(exc)) from None
    pairs = pair_rows(base, cand, args.rows)
    reports = {}
    for metric in REPORT_METRICS:
        diffs = [b[metric] - c[metric] for b, c in pairs if b[metric] is not None and c[metric] is not None]
        if len(diffs) < 2:
            raise InputError(f"{metric}: need at least two paired rows, found {len(diffs)}")
        reports[metric] = paired_bootstrap(diffs, replicates=args.replicates, seed=args.seed).to_dict()

    b_name = base[0]["method"] if base else "baseline"
    c_name = cand[0]["method"] if cand else "candidate"
    print(f"paired comparison: baseline={b_name} candidate={c_name} rows={args.rows} "
          f"(diff = baseline - candidate; positive favours the candidate)")
    print(f"{'metric':<12}{'n':>5}{'mean':>12}{'ci_low':>12}{'ci_high':>12}{'p':>10}{'win%':>8}  sig")
    for metric, r in reports.items():
        print(f"{metric:<12}{r['n']:>5}{r['mean_diff']:>12.5g}{r['ci_low']:>12.5g}{r['ci_high']:>12.5g}"
              f"{r['p_value']:>10.4g}{r['win_rate']:>8.1f}  {'yes' if r['significant'] else 'no'}")
    if args.out:
        out = _out_dir(args.out)
        payload = {"baseline": b_name, "candidate": c_name, "rows": args.rows,
                   "replicates": args.replicates, "seed": args.seed, "metrics": reports}
        write_json(payload, out / f"report_{b_name}_vs_{c_name}.json")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedtar", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate and write a synthetic drifting cohort")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("simulate", help="run one method and write metrics, audit and summary")
    s.add_argument("--config", required=True)
    s.add_argument("--method", choices=METHODS)
    s.add_argument("--seed", type=int)
    s.add_argument("--rounds", type=int)
    s.add_argument("--mode", choices=("paper_literal", "fedavg_proportional"))
    s.add_argument("--hypergrad", choices=("exact", "first_order"))
    s.add_argument("--audit-vectors", choices=("sketch", "full"), default="sketch",
                   help="record weight vectors as fixed random projections (default) or in full")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify", help="check an audit log against the aggregation guarantees")
    v.add_argument("audit")
    v.set_defaults(func=cmd_verify)

    c = sub.add_parser("gradcheck", help="finite-difference check of the hypergradient")
    c.add_argument("--dims", default="", help="comma list of d_w=,T=,embed=,hidden= (defaults 20,4,2,2)")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--instances", type=int, default=1)
    c.add_argument("--hypergrad", choices=("exact", "first_order"), default="exact")
    c.add_argument("--zero-mlp", action="store_true", help="use an all-zero policy")
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="paired bootstrap of two methods' metrics CSVs")
    r.add_argument("--baseline", nargs="+", required=True)
    r.add_argument("--candidate", nargs="+", required=True)
    r.add_argument("--replicates", type=int, default=5000)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--rows", choices=("final", "all"), default="final",
                   help="pair only the last round's rows (default) or every row")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except NumericalError as exc:
        _err(str(exc))
        return EXIT_NUMERICAL
    except ValueError as exc:
        _err(str(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
