"""Metrics CSV io and the cross-method comparison table.

All training methods share one validation CSV schema — ``iter,
pde_solves, mean_val_J, val_J_*`` plus method-specific trailing columns —
so comparisons never care which method produced a run.  Rows are flushed
as written: a killed run leaves a valid prefix.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

VALIDATION_FILE = "validation.csv"
TRAINING_FILE = "training.csv"
CONFIG_FILE = "config.json"
SOLVE_NOTE = (
    "pde_solves counts training-time implicit-Euler solves only; "
    "validation rollouts are measurement and excluded"
)
NOT_REACHED = "not_reached"


class MetricsWriter:
    """Append-only CSV with a leading comment line; every row is flushed."""

    def __init__(self, path, fieldnames: list[str], comment: str | None = None):
        self.path = Path(path)
        self.fieldnames = list(fieldnames)
        self._fh = open(self.path, "w", newline="")
        if comment:
            self._fh.write(f"# {comment}\n")
        self._writer = csv.DictWriter(self._fh, fieldnames=self.fieldnames)
        self._writer.writeheader()
        self._fh.flush()

    def write(self, row: dict) -> None:
        formatted = {}
        for key in self.fieldnames:
            value = row[key]
            if isinstance(value, float):
                formatted[key] = f"{value:.12g}"
            else:
                formatted[key] = value
        self._writer.writerow(formatted)
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict]:
    """Rows with numeric fields parsed; leading # comments skipped."""
    rows = []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for row in csv.DictReader(lines):
        parsed = {}
        for key, value in row.items():
            if value is None or value == "":
                parsed[key] = value
                continue
            try:
                parsed[key] = float(value)
            except ValueError:
                parsed[key] = value
        rows.append(parsed)
    return rows


def validation_fieldnames(num_problems: int, extras: list[str]) -> list[str]:
    cols = ["iter", "pde_solves", "mean_val_J"]
    cols += [f"val_J_{i:03d}" for i in range(num_problems)]
    return cols + extras


def run_metadata(run_dir) -> dict:
    with open(Path(run_dir) / CONFIG_FILE) as fh:
        return json.load(fh)


def first_solves_below(rows: list[dict], threshold: float):
    """First cumulative solve count whose validation mean is <= threshold."""
    for row in rows:
        if row["mean_val_J"] <= threshold:
            return int(row["pde_solves"])
    return None


def compare_runs(run_dirs: list, thresholds: list[float],
                 baseline_mean: float | None = None) -> list[dict]:
    """One comparison row per run: threshold crossings plus final gaps.

    Runs must share the validation problem set (checked against the
    metadata each run wrote next to its metrics).
    """
    if len(run_dirs) < 1:
        raise ValueError("nothing to compare")
    reference_problems = None
    table = []
    for run_dir in run_dirs:
        meta = run_metadata(run_dir)
        problems = meta.get("validation_problems")
        if reference_problems is None:
            reference_problems = problems
        elif problems != reference_problems:
            raise ValueError(f"incompatible validation sets: {run_dir}")
        rows = read_metrics(Path(run_dir) / VALIDATION_FILE)
        if not rows:
            raise ValueError(f"no validation rows in {run_dir}")
        final = rows[-1]
        entry = {
            "run": str(run_dir),
            "method": meta["method"],
            "seed": meta["seed"],
            "final_pde_solves": int(final["pde_solves"]),
            "final_mean_val_J": final["mean_val_J"],
            "best_mean_val_J": min(r["mean_val_J"] for r in rows),
        }
        for threshold in thresholds:
            crossing = first_solves_below(rows, threshold)
            entry[f"solves_to_{threshold:g}"] = (
                NOT_REACHED if crossing is None else crossing
            )
        if baseline_mean is not None:
            entry["final_suboptimality"] = final["mean_val_J"] - baseline_mean
            entry["best_suboptimality"] = entry["best_mean_val_J"] - baseline_mean
        table.append(entry)
    return table


def write_comparison(path, table: list[dict]) -> None:
    if not table:
        raise ValueError("empty comparison table")
    fieldnames = list(table[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in table:
            writer.writerow(
                {
                    k: (f"{v:.12g}" if isinstance(v, float) else v)
                    for k, v in row.items()
                }
            )
            fh.flush()


def monotone_solves(rows: list[dict]) -> bool:
    solves = [row["pde_solves"] for row in rows]
    return bool(np.all(np.diff(solves) >= 0))
