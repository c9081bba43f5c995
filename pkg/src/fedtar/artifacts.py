"""Text artifacts: cohort files, metrics CSV, JSON-lines audit, manifests.

Floats are written with ``repr`` so every file re-reads to the exact same
values, and nothing run-dependent (timestamps, paths) goes into the CSV or
JSONL outputs; those are byte-identical for a given config and seed.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .adapters import LocalData
from .demographics import PatientProfile, read_demographics, write_demographics
from .federation import ClientDataset, Cohort, DriftConfig

METRIC_COLUMNS = ("round", "t", "method", "seed", "train_loss", "val_loss", "alpha_t", "update_norm")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# ---------------------------------------------------------------------------
# Cohort
# ---------------------------------------------------------------------------

def cohort_stats(cohort: Cohort) -> List[dict]:
    """Per client, time step and split: sample count and column means of x and y."""
    out = []
    for k, client in enumerate(cohort.clients):
        for t in range(1, cohort.config.time_steps + 1):
            for split in ("train", "val"):
                d = getattr(client, split)[t - 1]
                out.append({"client": k, "t": t, "split": split, "n": len(d),
                            "x_mean": [float(v) for v in d.X.mean(axis=0)],
                            "y_mean": [float(v) for v in d.Y.mean(axis=0)]})
    return out


def write_cohort(cohort: Cohort, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = cohort.config
    demo = out_dir / "demographics.csv"
    write_demographics(demo, [(p, k) for k, c in enumerate(cohort.clients) for p in c.profiles])

    samples = out_dir / "samples.csv"
    header = (["client_id", "patient_id", "t", "split"]
              + [f"x{i}" for i in range(cfg.input_dim)] + [f"y{j}" for j in range(cfg.output_dim)])
    with open(samples, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k, client in enumerate(cohort.clients):
            for t in range(1, cfg.time_steps + 1):
                for split in ("train", "val"):
                    d = getattr(client, split)[t - 1]
                    for i in range(len(d)):
                        w.writerow([k, client.profiles[d.pid[i]].id, t, split]
                                   + [repr(float(v)) for v in d.X[i]] + [repr(float(v)) for v in d.Y[i]])

    meta = out_dir / "cohort.json"
    payload = {"config": asdict(cfg), "stats": cohort_stats(cohort),
               "teacher": [[{"M": M.tolist(), "b": b.tolist()} for M, b in c.teacher]
                           for c in cohort.clients],
               "offsets": [c.offsets.tolist() for c in cohort.clients]}
    meta.write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    return [demo, samples, meta]


def load_cohort(in_dir) -> Cohort:
    in_dir = Path(in_dir)
    meta = json.loads((in_dir / "cohort.json").read_text(encoding="utf-8"))
    cfg = DriftConfig(**meta["config"])
    profiles = read_demographics(in_dir / "demographics.csv")
    index = {k: {p.id: i for i, p in enumerate(ps)} for k, ps in profiles.items()}
    buckets: Dict[tuple, List[list]] = {}
    with open(in_dir / "samples.csv", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for lineno, row in enumerate(reader, start=2):
            try:
                k, t = int(row[0]), int(row[2])
                pid = index[k][row[1]]
                vals = [float(v) for v in row[4:]]
            except (KeyError, ValueError, IndexError) as exc:
                raise ValueError(f"samples.csv:{lineno}: malformed row ({exc})") from None
            buckets.setdefault((k, t, row[3]), []).append([pid] + vals)
    clients = []
    d_in = cfg.input_dim
    for k in range(cfg.clients):
        train, val = [], []
        for t in range(1, cfg.time_steps + 1):
            for split, dest in (("train", train), ("val", val)):
                rows = np.array(buckets.get((k, t, split), []), dtype=float)
                dest.append(LocalData(rows[:, 1:1 + d_in], rows[:, 1 + d_in:], rows[:, 0].astype(np.intp)))
        teacher = [(np.array(e["M"]), np.array(e["b"])) for e in meta["teacher"][k]]
        clients.append(ClientDataset(profiles[k], train, val, teacher, np.array(meta["offsets"][k])))
    return Cohort(cfg, clients)


# ---------------------------------------------------------------------------
# Metrics and audit
# ---------------------------------------------------------------------------

def write_metrics_csv(rows: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])


def read_metrics_csv(path) -> List[dict]:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(METRIC_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append({
                    "round": int(row["round"]), "t": int(row["t"]), "method": row["method"],
                    "seed": int(row["seed"]),
                    **{c: (float(row[c]) if row[c] != "" else None)
                       for c in ("train_loss", "val_loss", "alpha_t", "update_norm")},
                })
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return rows


def write_jsonl(records: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
