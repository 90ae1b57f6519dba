"""Readers for the experiment harness's file formats.

This package consumes files only: the validation/training CSV schema
(``iter, pde_solves, mean_val_J, val_J_*, ...`` with ``#`` comment lines),
the baseline cache CSV, the per-run ``config.json``, and the binary
concentration-snapshot format (8-byte magic ``PDGRID1\\0``, two uint32
grid dimensions, float64 frames).
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

SNAPSHOT_MAGIC = b"PDGRID1\x00"
REQUIRED_VALIDATION_COLUMNS = ("iter", "pde_solves", "mean_val_J")


class SchemaError(ValueError):
    """Input file does not match the documented schema."""


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    rows = []
    for row in csv.DictReader(lines):
        parsed = {}
        for key, value in row.items():
            if value is None or value == "":
                parsed[key] = None
                continue
            try:
                parsed[key] = float(value)
            except ValueError:
                parsed[key] = value
        rows.append(parsed)
    return rows


def read_validation(path) -> list[dict]:
    rows = read_csv(path)
    if not rows:
        return rows
    missing = [c for c in REQUIRED_VALIDATION_COLUMNS if c not in rows[0]]
    if missing:
        raise SchemaError(
            f"{path}: missing columns {missing}; found {sorted(rows[0])}"
        )
    return rows


def run_label(csv_path) -> str:
    """Label a series by its run metadata when available."""
    config = Path(csv_path).parent / "config.json"
    if config.exists():
        meta = json.loads(config.read_text())
        method = meta.get("method", "?")
        seed = meta.get("seed", "?")
        return f"{method} (seed {seed})"
    return Path(csv_path).parent.name or str(csv_path)


def read_baseline_mean(path) -> float:
    rows = read_csv(path)
    if not rows or "objective" not in rows[0]:
        raise SchemaError(f"{path}: expected a baseline cache with an 'objective' column")
    return float(np.mean([row["objective"] for row in rows]))


def read_snapshots(path):
    """(n, frames) from the flat binary grid format."""
    raw = Path(path).read_bytes()
    if raw[: len(SNAPSHOT_MAGIC)] != SNAPSHOT_MAGIC:
        raise SchemaError(f"{path}: bad magic, not a snapshot file")
    rows, cols = struct.unpack("<II", raw[len(SNAPSHOT_MAGIC) : len(SNAPSHOT_MAGIC) + 8])
    body = raw[len(SNAPSHOT_MAGIC) + 8 :]
    frame_bytes = rows * cols * 8
    if frame_bytes == 0 or len(body) % frame_bytes:
        raise SchemaError(f"{path}: truncated snapshot payload")
    frames = np.frombuffer(body, dtype="<f8").reshape(-1, rows, cols)
    return rows, frames


def read_episode(path) -> dict:
    rows = read_csv(path)
    if not rows or "alpha" not in rows[0]:
        raise SchemaError(f"{path}: expected an episode dump with an 'alpha' column")
    return {
        "s": np.array([r["s"] for r in rows]),
        "alpha": np.array([r["alpha"] for r in rows]),
        "r": np.array([r["r"] for r in rows]),
    }
