"""Comparison tables across run directories."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .runner import load_record


class ReportError(ValueError):
    pass


# Config keys allowed to differ between rows of one table.
ROW_KEYS = ("paradigm", "method", "sparsity", "seeds", "output_dir")
IGNORED = (("pretrain", "checkpoint"),)


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def comparable_part(config: dict) -> dict:
    flat = _flatten(config)
    drop = set(ROW_KEYS) | {".".join(p) for p in IGNORED}
    return {k: v for k, v in flat.items() if k not in drop}


def check_compatible(records: Sequence[dict], names: Sequence[str]) -> None:
    """All runs must share everything but paradigm, method, sparsity and seed."""
    ref = comparable_part(records[0]["config"])
    for rec, name in zip(records[1:], names[1:]):
        other = comparable_part(rec["config"])
        diff = sorted(k for k in set(ref) | set(other) if ref.get(k) != other.get(k))
        if diff:
            lines = [f"  {k}: {ref.get(k)!r} ({names[0]}) vs {other.get(k)!r} ({name})" for k in diff]
            raise ReportError("incompatible configs:\n" + "\n".join(lines))


def _metric_columns(records: Sequence[dict]) -> list[str]:
    cols = {"val.multitask_loss", "achieved_sparsity"}
    for rec in records:
        for task, metrics in rec["val_metrics"].items():
            if isinstance(metrics, dict):
                cols.update(f"val.{task}.{m}" for m in metrics)
    return sorted(cols)


def _metric(rec: dict, col: str):
    if col == "achieved_sparsity":
        return rec.get("achieved_sparsity")
    parts = col.split(".")[1:]
    cur = rec["val_metrics"]
    for p in parts:
        if not isinstance(cur, dict) or p not in cur:
            return None
        cur = cur[p]
    return cur


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def build_table(run_dirs: Sequence[str | Path]) -> tuple[list[str], list[list[str]]]:
    """One row per (method, paradigm, requested sparsity), with mean and
    sample std over seeds.  Rows are sorted, so the table does not depend on
    the order the directories were given in."""
    if not run_dirs:
        raise ReportError("report needs at least one run directory")
    names = [str(d) for d in run_dirs]
    records = [load_record(d) for d in run_dirs]
    check_compatible(records, names)
    metrics = _metric_columns(records)

    groups: dict[tuple, list[dict]] = defaultdict(list)
    for rec in records:
        s = rec["requested_sparsity"]
        groups[(rec["method"], rec["paradigm"], -1.0 if s is None else s)].append(rec)

    header = ["method", "paradigm", "sparsity", "n_seeds", "seeds"]
    for m in metrics:
        header += [f"{m}.mean", f"{m}.std"]
    rows = []
    for key in sorted(groups):
        method, paradigm, s = key
        recs = sorted(groups[key], key=lambda r: r["seed"])
        seeds = [r["seed"] for r in recs]
        if len(set(seeds)) != len(seeds):
            raise ReportError(f"duplicate seeds for {method}/{paradigm}/S={s}")
        row = [method, paradigm, "" if s < 0 else repr(float(s)), str(len(recs)), " ".join(map(str, seeds))]
        for m in metrics:
            vals = [v for v in (_metric(r, m) for r in recs) if v is not None]
            mean = float(np.mean(vals)) if vals else None
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else None
            row += [_fmt(mean), _fmt(std)]
        rows.append(row)
    return header, rows


def write_report(run_dirs: Sequence[str | Path], path: str | Path) -> Path:
    header, rows = build_table(run_dirs)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def find_runs(paths: Sequence[str | Path]) -> list[Path]:
    """Expand each path to the run directories at or directly below it."""
    found = []
    for p in map(Path, paths):
        if (p / "run_record.json").exists():
            found.append(p)
        elif p.is_dir():
            found += sorted(d for d in p.iterdir() if (d / "run_record.json").exists())
        else:
            raise ReportError(f"{p}: not a run directory")
    return found
