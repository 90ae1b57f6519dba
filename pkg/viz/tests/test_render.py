"""Rendering checks: all four plot kinds from fixtures, series counts, purity."""

import json
import struct

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pytest

from pdepolicy_viz import io, render
from pdepolicy_viz.cli import main

VALIDATION_HEADER = "iter,pde_solves,mean_val_J,val_J_000,val_J_001,lr"


def write_validation_csv(path, rows, seed=1, method="hjb"):
    lines = ["# pde_solves counts training-time solves only", VALIDATION_HEADER]
    for it, solves, mean in rows:
        lines.append(f"{it},{solves},{mean},{mean * 0.9},{mean * 1.1},0.05")
    path.write_text("\n".join(lines) + "\n")
    (path.parent / "config.json").write_text(
        json.dumps({"method": method, "seed": seed})
    )
    return path


def write_baseline_csv(path, objectives):
    lines = ["setup,y_x1,y_x2,objective"]
    for i, obj in enumerate(objectives):
        lines.append(f"horizontal,0.125,0.{25 + i},{obj}")
    path.write_text("\n".join(lines) + "\n")
    return path


def write_snapshots(path, n=8, frames=5):
    rng = np.random.default_rng(0)
    payload = io.SNAPSHOT_MAGIC + struct.pack("<II", n, n)
    for _ in range(frames):
        payload += rng.standard_normal((n, n)).astype("<f8").tobytes()
    path.write_bytes(payload)
    return path


def write_episode_csv(path, steps=5):
    lines = ["s,alpha,u1,u2,r"]
    for i in range(steps):
        lines.append(f"{0.02 * i},{0.5 + 0.01 * i},-0.2,0.1,{0.001 * i}")
    lines.append(f"{0.02 * steps},{0.5 + 0.01 * steps},,,{0.3}")
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def fixture_runs(tmp_path):
    run_a = tmp_path / "run_a"
    run_b = tmp_path / "run_b"
    run_a.mkdir()
    run_b.mkdir()
    write_validation_csv(run_a / "validation.csv",
                         [(0, 0, 0.9), (5, 100, 0.5), (10, 200, 0.3)], method="hjb")
    write_validation_csv(run_b / "validation.csv",
                         [(0, 0, 0.95), (5, 500, 0.7), (10, 1000, 0.6)], method="ppo")
    return [run_a / "validation.csv", run_b / "validation.csv"]


class TestLossCurve:
    def test_one_series_per_run(self, fixture_runs, tmp_path):
        out = tmp_path / "loss.png"
        render.loss_curve([str(p) for p in fixture_runs], out)
        assert out.exists() and out.stat().st_size > 0
        fig, ax = plt.subplots()
        for path in fixture_runs:
            rows = io.read_validation(path)
            ax.plot([r["pde_solves"] for r in rows], [r["mean_val_J"] for r in rows])
        assert len(ax.lines) == len(fixture_runs)
        plt.close(fig)

    def test_series_count_via_figure_inspection(self, fixture_runs, tmp_path):
        # recreate what loss_curve draws and count its line artists directly
        calls = []
        original = plt.Axes.plot

        def spy(self, *a, **k):
            calls.append(k.get("label"))
            return original(self, *a, **k)

        plt.Axes.plot = spy
        try:
            render.loss_curve([str(p) for p in fixture_runs], tmp_path / "x.png")
        finally:
            plt.Axes.plot = original
        assert len(calls) == 2
        assert calls[0] != calls[1]

    def test_empty_but_valid_csv(self, tmp_path):
        empty = tmp_path / "validation.csv"
        empty.write_text(VALIDATION_HEADER + "\n")
        out = tmp_path / "empty.png"
        render.loss_curve([str(empty)], out)
        assert out.exists()

    def test_schema_mismatch_reports_columns(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,2\n")
        with pytest.raises(io.SchemaError) as err:
            render.loss_curve([str(bad)], tmp_path / "x.png")
        assert "mean_val_J" in str(err.value)


class TestOtherKinds:
    def test_solves_bar(self, fixture_runs, tmp_path):
        out = tmp_path / "bars.png"
        render.solves_bar([str(p) for p in fixture_runs], [0.65, 0.4], out)
        assert out.exists()

    def test_subopt(self, fixture_runs, tmp_path):
        base = write_baseline_csv(tmp_path / "baseline.csv", [0.25, 0.35])
        out = tmp_path / "subopt.png"
        render.suboptimality([str(p) for p in fixture_runs], str(base), out)
        assert out.exists()

    def test_episode_frames(self, tmp_path):
        snap = write_snapshots(tmp_path / "snapshots.bin")
        episode = write_episode_csv(tmp_path / "episode.csv")
        out = tmp_path / "frames.png"
        render.episode_frames(str(snap), out, episode_csv=str(episode))
        assert out.exists()

    def test_zero_field_frames(self, tmp_path):
        n = 6
        payload = io.SNAPSHOT_MAGIC + struct.pack("<II", n, n)
        payload += np.zeros((3, n, n)).astype("<f8").tobytes()
        snap = tmp_path / "zeros.bin"
        snap.write_bytes(payload)
        out = tmp_path / "zeros.png"
        render.episode_frames(str(snap), out)
        assert out.exists()


class TestCli:
    def test_all_kinds_via_cli(self, fixture_runs, tmp_path):
        inputs = [str(p) for p in fixture_runs]
        base = str(write_baseline_csv(tmp_path / "baseline.csv", [0.3]))
        snap = str(write_snapshots(tmp_path / "snapshots.bin"))
        assert main(["loss-curve", "--in", *inputs, "--out", str(tmp_path / "a.png")]) == 0
        assert main(["solves-bar", "--in", *inputs, "--threshold", "0.5",
                     "--out", str(tmp_path / "b.png")]) == 0
        assert main(["subopt", "--in", *inputs, "--baseline", base,
                     "--out", str(tmp_path / "c.png")]) == 0
        assert main(["episode-frames", "--in", snap,
                     "--out", str(tmp_path / "d.png")]) == 0

    def test_schema_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("x,y\n1,2\n")
        assert main(["loss-curve", "--in", str(bad),
                     "--out", str(tmp_path / "x.png")]) == 2

    def test_missing_file_exit_code(self, tmp_path):
        assert main(["episode-frames", "--in", str(tmp_path / "none.bin"),
                     "--out", str(tmp_path / "x.png")]) == 2


class TestPurity:
    def test_inputs_unchanged_and_output_stable(self, fixture_runs, tmp_path):
        inputs = [str(p) for p in fixture_runs]
        before = [p.read_bytes() for p in fixture_runs]
        render.loss_curve(inputs, tmp_path / "one.png")
        render.loss_curve(inputs, tmp_path / "two.png")
        assert [p.read_bytes() for p in fixture_runs] == before
        assert (tmp_path / "one.png").read_bytes() == (tmp_path / "two.png").read_bytes()
