import json
import struct
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from rankvol import io
from rankvol.calibrate import calibrate
from rankvol.cli import main
from rankvol.manifest import RunManifest, stable_hash
from rankvol.panel import panel_from_trajectory
from rankvol.simulate import SimConfig, simulate_path
from tests.conftest import make_small_params


@pytest.fixture(scope="module")
def traj(small_params):
    return simulate_path(small_params, np.full(5, 0.2), SimConfig(horizon=1.0, seed=51))


class TestTrajectoryFormat:
    def test_binary_round_trip(self, traj, tmp_path):
        path = tmp_path / "t.rvsm"
        io.write_trajectory(traj, path)
        back = io.read_trajectory(path)
        assert np.array_equal(back.weights, traj.weights)
        assert np.array_equal(back.times, traj.times)
        assert np.array_equal(back.log_total_cap, traj.log_total_cap)

    def test_documented_header_layout(self, traj, tmp_path):
        path = tmp_path / "t.rvsm"
        io.write_trajectory(traj, path)
        blob = path.read_bytes()
        assert blob[:4] == b"RVSM"
        version, d = struct.unpack("<II", blob[4:12])
        (n,) = struct.unpack("<Q", blob[12:20])
        assert (version, d, n) == (1, 5, traj.n_samples)
        first_row = np.frombuffer(blob[20 : 20 + 8 * 5], dtype="<f8")
        assert np.array_equal(first_row, traj.weights[0])
        assert len(blob) == 20 + 8 * n * d + 8 * n + 8 * n

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.rvsm"
        path.write_bytes(b"NOPE" + b"\0" * 32)
        with pytest.raises(Exception):
            io.read_trajectory(path)

    def test_csv_layout(self, traj, tmp_path):
        path = tmp_path / "t.csv"
        io.trajectory_to_csv(traj, path)
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["time", "rank", "weight", "log_total_cap"]
        assert len(frame) == traj.n_samples * traj.d
        first = frame[frame["time"] == 0.0].sort_values("rank")
        assert np.allclose(first["weight"].to_numpy(), np.sort(traj.weights[0])[::-1])


class TestPanelFormat:
    def test_binary_round_trip(self, traj, tmp_path):
        panel = panel_from_trajectory(traj)
        path = tmp_path / "p.rvsp"
        io.write_panel(panel, path)
        back = io.read_panel(path)
        assert np.array_equal(back.caps, panel.caps)
        assert np.array_equal(back.ids, panel.ids)
        assert back.id_table == panel.id_table
        assert np.array_equal(back.times, panel.times)

    def test_csv_round_trip(self, traj, tmp_path):
        panel = panel_from_trajectory(traj)
        path = tmp_path / "p.csv"
        io.panel_to_csv(panel, path)
        back = io.read_panel_csv(path, d=panel.d)
        assert np.array_equal(back.caps, panel.caps)

    def test_csv_schema_errors_carry_line_numbers(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("date,id,cap\n2020-01-02,A,1.0\n2020-01-02,B,oops\n")
        with pytest.raises(Exception, match="lines 3"):
            io.read_panel_csv(path, d=2)

    def test_missing_columns_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("when,id,cap\n2020-01-02,A,1.0\n")
        with pytest.raises(Exception, match="missing required columns"):
            io.read_panel_csv(path, d=2)


class TestEstimateAndCalibrationFiles:
    def test_estimates_csv_columns_and_sidecar(self, small_panel, tmp_path):
        result = calibrate(small_panel, 1.0)
        path = tmp_path / "est.csv"
        io.write_estimates(result.estimates, path)
        frame = pd.read_csv(path)
        assert list(frame.columns) == [
            "rank", "sigma2_raw", "sigma2", "phibar", "phi", "mu", "rho", "a",
        ]
        sidecar = json.loads(path.with_suffix(".json").read_text())
        for key in ("lambda_hat", "lambda_hat_log", "d", "span_years",
                    "smoothing_window", "delisting_policy", "skipped_increments"):
            assert key in sidecar

    def test_calibration_json_round_trip(self, small_panel, tmp_path):
        result = calibrate(small_panel, 1.0)
        path = tmp_path / "cal.json"
        io.write_calibration(result, path)
        back = io.read_calibration(path)
        assert np.allclose(back.params.a, result.params.a)
        assert np.allclose(back.estimates.phi, result.estimates.phi)
        assert back.lam == result.lam
        assert back.feller.satisfied == result.feller.satisfied

    def test_params_json_round_trip(self, tmp_path):
        params = make_small_params()
        path = tmp_path / "params.json"
        io.write_params(params, path)
        back = io.read_params(path)
        assert np.array_equal(back.a, params.a)
        assert "lambda" not in json.loads(path.read_text())


class TestManifest:
    def test_hash_stability(self):
        a = stable_hash({"x": 1, "y": [1, 2]})
        b = stable_hash({"y": [1, 2], "x": 1})
        assert a == b and len(a) == 64

    def test_written_beside_output(self, tmp_path):
        out = tmp_path / "thing.csv"
        out.write_text("a\n")
        man = RunManifest(command="test", config={"seed": 3}, seed=3)
        man.add_input(out)
        target = man.write(out)
        assert target.name == "thing.csv.manifest.json"
        payload = json.loads(target.read_text())
        assert payload["command"] == "test"
        assert payload["seed"] == 3
        assert payload["config_hash"] == man.config_hash
        assert str(out) in payload["input_digests"]


def run_cli(*args):
    return main([str(a) for a in args])


@pytest.fixture()
def params_file(tmp_path):
    path = tmp_path / "params.json"
    io.write_params(make_small_params(), path)
    return path


class TestCli:
    def test_synth_calibrate_pipeline(self, tmp_path, params_file):
        panel = tmp_path / "panel.rvsp"
        assert run_cli("synth", "--params", params_file, "--output", panel,
                       "--horizon", 4, "--seed", 7) == 0
        assert panel.with_suffix(".json").exists()
        est = tmp_path / "est.csv"
        assert run_cli("calibrate", "--input", panel, "--output", est, "--lambda", 1.0) == 0
        assert est.exists()
        assert est.with_suffix(".calibration.json").exists()
        assert (tmp_path / "est.csv.manifest.json").exists()

    def test_synth_deterministic_bytes(self, tmp_path, params_file):
        a, b = tmp_path / "a.rvsp", tmp_path / "b.rvsp"
        for out in (a, b):
            assert run_cli("synth", "--params", params_file, "--output", out,
                           "--horizon", 2, "--seed", 11) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_synth_csv_round_trip_lossless(self, tmp_path, params_file):
        csv_out = tmp_path / "panel.csv"
        bin_out = tmp_path / "panel.rvsp"
        for out in (csv_out, bin_out):
            assert run_cli("synth", "--params", params_file, "--output", out,
                           "--horizon", 2, "--seed", 13) == 0
        from_csv = io.read_panel_csv(csv_out, d=5)
        from_bin = io.read_panel(bin_out)
        assert np.array_equal(from_csv.caps, from_bin.caps)
        assert np.array_equal(
            np.array(from_csv.id_table)[from_csv.ids],
            np.array(from_bin.id_table)[from_bin.ids],
        )

    def test_ingest_toy_csv(self, tmp_path):
        raw = tmp_path / "raw.csv"
        raw.write_text(
            "date,id,cap\n"
            "2020-01-02,AAA,3.0\n"
            "2020-01-02,BBB,2.0\n"
            "2020-01-02,CCC,1.0\n"
        )
        out = tmp_path / "panel.rvsp"
        assert run_cli("ingest", "--input", raw, "--output", out, "--d", 2) == 0
        panel = io.read_panel(out)
        assert [panel.id_table[c] for c in panel.ids[0]] == ["AAA", "BBB"]

    def test_ingest_duplicates_exit_2(self, tmp_path):
        raw = tmp_path / "raw.csv"
        raw.write_text(
            "date,id,cap\n"
            "2020-01-02,AAA,3.0\n"
            "2020-01-02,AAA,2.0\n"
            "2020-01-02,BBB,1.0\n"
        )
        assert run_cli("ingest", "--input", raw, "--output", tmp_path / "p.rvsp", "--d", 2) == 2

    def test_strict_mode_exit_4(self, tmp_path):
        raw = tmp_path / "raw.csv"
        raw.write_text(
            "date,id,cap\n"
            "2020-01-02,AAA,3.0\n"
            "2020-01-02,BBB,-2.0\n"
            "2020-01-02,CCC,1.0\n"
            "2020-01-03,AAA,3.0\n"
            "2020-01-03,CCC,1.0\n"
        )
        assert run_cli("ingest", "--input", raw, "--output", tmp_path / "p.rvsp",
                       "--d", 2, "--strict") == 4

    def test_missing_input_exit_2(self, tmp_path):
        assert run_cli("calibrate", "--input", tmp_path / "nope.rvsp",
                       "--output", tmp_path / "e.csv", "--lambda", 0.1) == 2

    def test_unknown_subcommand_exit_2(self):
        proc = subprocess.run(
            [sys.executable, "-m", "rankvol.cli", "frobnicate"], capture_output=True
        )
        assert proc.returncode == 2

    def test_numerical_errors_exit_3(self, monkeypatch, tmp_path, params_file):
        from rankvol import cli
        from rankvol.errors import NumericalBlowupError

        def boom(args):
            raise NumericalBlowupError("injected", step_index=3, time=0.1)

        monkeypatch.setitem(cli._HANDLERS, "simulate", boom)
        assert run_cli("simulate", "--params", params_file,
                       "--output", tmp_path / "t.rvsm", "--horizon", 0.1) == 3

    def test_default_sweep_grid_matches_reference_set(self):
        from rankvol.cli import build_parser

        parser = build_parser()
        args = parser.parse_args(["sweep", "--input", "x", "--output", "y"])
        assert args.grid == "0,0.11,0.2"

    def test_moments_and_implied(self, tmp_path, params_file):
        panel = tmp_path / "panel.rvsp"
        run_cli("synth", "--params", params_file, "--output", panel, "--horizon", 3, "--seed", 3)
        est = tmp_path / "est.csv"
        run_cli("calibrate", "--input", panel, "--output", est, "--lambda", 1.0)
        mom = tmp_path / "mom.csv"
        assert run_cli("moments", "--params", params_file, "--output", mom,
                       "--paths", 4, "--horizon", 3, "--seed", 5) == 0
        back = io.read_moments(mom)
        assert abs(back.mu.sum() - 1.0) < 1e-9
        fit = tmp_path / "fit.csv"
        assert run_cli("implied", "--input", est.with_suffix(".calibration.json"),
                       "--output", fit, "--paths", 4, "--horizon", 3, "--seed", 5) == 0
        sidecar = json.loads(fit.with_suffix(".json").read_text())
        assert sidecar["max_identity_residual"] <= 1e-12

    def test_portfolio_snapshot_emits_weights_and_horizon(self, tmp_path, params_file):
        panel = tmp_path / "panel.rvsp"
        run_cli("synth", "--params", params_file, "--output", panel, "--horizon", 3, "--seed", 3)
        est = tmp_path / "est.csv"
        run_cli("calibrate", "--input", panel, "--output", est, "--lambda", 1.0)
        out = tmp_path / "weights.csv"
        assert run_cli("portfolio", "--input", est.with_suffix(".calibration.json"),
                       "--output", out, "--kind", "diversity", "--p", 0.8) == 0
        sidecar = json.loads(out.with_suffix(".json").read_text())
        assert sidecar["rule"] == {"kind": "diversity", "p": 0.8}
        assert sidecar["t_star_years"] > 0
        frame = pd.read_csv(out)
        assert frame["weight"].sum() == pytest.approx(1.0, abs=1e-9)

    def test_portfolio_wealth_mode(self, tmp_path, params_file):
        traj = tmp_path / "traj.rvsm"
        assert run_cli("simulate", "--params", params_file, "--output", traj,
                       "--horizon", 2, "--seed", 9) == 0
        out = tmp_path / "wealth.csv"
        assert run_cli("portfolio", "--input", traj, "--output", out,
                       "--kind", "large_cap", "--k-top", 2) == 0
        frame = pd.read_csv(out)
        assert list(frame.columns) == ["time", "log_wealth", "log_relative"]

    def test_config_file_provides_defaults(self, tmp_path, params_file):
        cfg = tmp_path / "defaults.json"
        cfg.write_text(json.dumps({"horizon": 2.0, "seed": 21}))
        out_a = tmp_path / "a.rvsp"
        out_b = tmp_path / "b.rvsp"
        assert run_cli("--config", cfg, "synth", "--params", params_file,
                       "--output", out_a) == 0
        assert run_cli("synth", "--params", params_file, "--output", out_b,
                       "--horizon", 2, "--seed", 21) == 0
        assert out_a.read_bytes() == out_b.read_bytes()

    def test_seed_drawn_and_recorded_when_omitted(self, tmp_path, params_file):
        out = tmp_path / "t.rvsm"
        assert run_cli("simulate", "--params", params_file, "--output", out,
                       "--horizon", 0.1) == 0
        manifest = json.loads((tmp_path / "t.rvsm.manifest.json").read_text())
        assert isinstance(manifest["seed"], int)

    def test_sweep_and_report(self, tmp_path, params_file):
        panel = tmp_path / "panel.rvsp"
        run_cli("synth", "--params", params_file, "--output", panel, "--horizon", 3, "--seed", 3)
        sweep = tmp_path / "sweep.csv"
        assert run_cli("sweep", "--input", panel, "--output", sweep, "--grid", "0.5,1.0",
                       "--paths", 3, "--horizon", 3, "--seed", 5) == 0
        frame = pd.read_csv(sweep)
        assert list(frame["lambda"]) == [0.5, 1.0]
        report_dir = tmp_path / "report"
        assert run_cli("report", "--input", panel, "--output", report_dir, "--lambda", 1.0,
                       "--grid", "0.5,1.0", "--paths", 3, "--horizon", 3, "--seed", 5) == 0
        expected = {
            "volatility_by_rank.csv",
            "collisions_by_rank.csv",
            "growth_params_by_rank.csv",
            "growth_tail_vs_variance.csv",
            "lambda_tradeoff.csv",
            "capital_distribution.csv",
            "collision_errors_by_rank.csv",
            "cdc_errors_by_rank.csv",
            "ranked_trajectories.csv",
            "portfolio_weights_by_rank.csv",
            "manifest.json",
        }
        assert expected <= {p.name for p in report_dir.iterdir()}

    def test_repeat_run_byte_identical_outputs(self, tmp_path, params_file):
        """Reproducibility: identical command and inputs, identical bytes."""
        outs = []
        for name in ("e1.csv", "e2.csv"):
            panel = tmp_path / "panel.rvsp"
            if not panel.exists():
                run_cli("synth", "--params", params_file, "--output", panel,
                        "--horizon", 3, "--seed", 3)
            out = tmp_path / name
            assert run_cli("calibrate", "--input", panel, "--output", out, "--lambda", 1.0) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
