"""CSV/JSON persistence with fixed schemas.

Floats are written with 6 significant digits (``%.6g``), booleans as 0/1,
so files are byte-stable across runs and platforms. Wall-clock times are
kept out of the record files (they go to ``timings.json``) so a repeated
run reproduces ``rounds.csv`` and ``clients.csv`` bit for bit.

Run directory layout::

    config.json   the exact configuration
    rounds.csv    one row per round (ROUND_COLUMNS)
    clients.csv   one row per (round, client) (CLIENT_COLUMNS)
    summary.json  derived from rounds.csv
    timings.json  wall time per round
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

from .config import ExperimentConfig, load_config, save_config

ROUND_COLUMNS = (
    "round", "lr", "test_accuracy", "test_loss", "val_accuracy", "val_loss", "delta_acc",
    "tp", "fp", "tn", "fn", "fpr", "fnr", "fnr_defined", "reward", "shapley_samples",
    "vae_trained", "weight_fallback",
)
CLIENT_COLUMNS = (
    "round", "client_id", "malicious", "attack", "num_samples",
    "f1", "f2", "f3", "f4", "f5", "f6", "phi", "bin", "anomaly", "weight",
)
SUMMARY_COLUMNS = (
    "name", "method", "attack", "partition", "seed", "rounds",
    "final_accuracy", "best_accuracy", "mean_fpr", "mean_fnr",
)


def fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return "%.6g" % value
    return str(value)


def round_rows(records) -> list:
    return [{c: fmt(getattr(r, c)) for c in ROUND_COLUMNS} for r in records]


def client_rows(records) -> list:
    rows = []
    for r in records:
        for c in r.clients:
            row = {"round": fmt(r.round)}
            row.update({k: fmt(getattr(c, k)) for k in CLIENT_COLUMNS[1:]})
            rows.append(row)
    return rows


def emit_csv(rows, path, columns=None) -> None:
    """Write dict rows (or RoundRecords) with a fixed column order."""
    rows = list(rows)
    if rows and not isinstance(rows[0], dict):
        rows = round_rows(rows)
        columns = ROUND_COLUMNS
    if columns is None:
        columns = SUMMARY_COLUMNS if not rows else tuple(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({c: fmt(row[c]) for c in columns})


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _json_value(v):
    if isinstance(v, float):
        return None if math.isnan(v) else float("%.6g" % v)
    if isinstance(v, dict):
        return {k: _json_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_value(x) for x in v]
    return v


def emit_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_json_value(obj), indent=2) + "\n")


def summary_from_rows(cfg: ExperimentConfig, rows) -> dict:
    """Run summary computed from (string) round rows, as stored in rounds.csv."""
    from .harness import method_label
    from .data import PartitionScheme

    acc = [float(r["test_accuracy"]) for r in rows]
    fpr = [float(r["fpr"]) for r in rows]
    fnr = [float(r["fnr"]) for r in rows]
    p = cfg.partition
    return {
        "name": cfg.name,
        "method": method_label(cfg),
        "attack": cfg.attack.kind,
        "partition": PartitionScheme(p.kind, p.alpha, p.ratio, p.sigma).label(),
        "seed": cfg.seed,
        "rounds": len(rows),
        "final_accuracy": acc[-1] if acc else float("nan"),
        "best_accuracy": max(acc) if acc else float("nan"),
        "mean_fpr": sum(fpr) / len(fpr) if fpr else float("nan"),
        "mean_fnr": sum(fnr) / len(fnr) if fnr else float("nan"),
    }


def write_run(out_dir, cfg: ExperimentConfig, records) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    rows = round_rows(records)
    emit_csv(rows, out / "rounds.csv", ROUND_COLUMNS)
    emit_csv(client_rows(records), out / "clients.csv", CLIENT_COLUMNS)
    summary = summary_from_rows(cfg, rows)
    emit_json(summary, out / "summary.json")
    emit_json({"wall_time": [r.wall_time for r in records]}, out / "timings.json")
    return summary


def report(in_dir) -> dict:
    """Re-derive a run's summary from its stored config and rounds.csv."""
    d = Path(in_dir)
    cfg = load_config(d / "config.json")
    return summary_from_rows(cfg, read_csv(d / "rounds.csv"))


def format_table(header, rows) -> str:
    cells = [[str(h) for h in header]] + [[fmt(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells)
