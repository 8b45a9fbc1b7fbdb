"""Command-line interface: subcommands, file formats, exit codes."""

import csv
import json

import pytest

from dsse import cli
from dsse.measurements import (
    SensorSpec,
    build_plan,
    save_plan,
    simulate_frame,
    write_frames,
)
from dsse.network import load_network, save_network
from dsse.prior import fixed_point_power_flow


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, feeder):
    net, adm, v0 = feeder
    root = tmp_path_factory.mktemp("cli")
    net_file = root / "net123.json"
    save_network(net, net_file)
    sensors = [SensorSpec("voltage", "79", ph) for ph in "abc"] + [
        SensorSpec("current", "65", ph) for ph in "abc"
    ]
    plan = build_plan(sensors, adm, net.v_source, 0.01)
    plan_file = root / "plan.json"
    save_plan(plan, plan_file)
    truth = fixed_point_power_flow(net.base_load_vector(), adm, v0, net.v_source)
    frames = [simulate_frame(plan, truth.v, 99, timestep=t) for t in range(2)]
    frames_file = root / "frames.csv"
    write_frames(frames_file, plan, frames)
    return root, net_file, plan_file, frames_file


class TestConvertFeeder:
    def test_bundled_conversion(self, tmp_path):
        out = tmp_path / "net.json"
        assert cli.main(["convert-feeder", "--out", str(out)]) == 0
        net = load_network(out)
        assert net.n_state == 256

    def test_missing_feeder_dir_is_config_error(self, tmp_path):
        code = cli.main(
            ["convert-feeder", "--in", str(tmp_path / "nope"), "--out",
             str(tmp_path / "x.json")]
        )
        assert code == cli.EXIT_CONFIG


class TestPowerFlow:
    def test_pf_with_base_loads(self, workdir, capsys):
        root, net_file, _, _ = workdir
        out = root / "pf.csv"
        code = cli.main(["pf", "--network", str(net_file), "--out", str(out)])
        assert code == 0
        with out.open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 256
        mags = [abs(complex(float(r["re_v"]), float(r["im_v"]))) for r in rows]
        assert 0.85 < min(mags) < max(mags) <= 1.001

    def test_pf_with_loads_csv(self, workdir, tmp_path):
        root, net_file, _, _ = workdir
        loads = tmp_path / "loads.csv"
        loads.write_text("bus,phase,p_pu,q_pu\n65,a,-0.05,-0.02\n")
        out = tmp_path / "pf.csv"
        assert cli.main(
            ["pf", "--network", str(net_file), "--loads", str(loads), "--out", str(out)]
        ) == 0

    def test_pf_divergence_is_numerical_failure(self, workdir, tmp_path):
        root, net_file, _, _ = workdir
        loads = tmp_path / "heavy.csv"
        loads.write_text("bus,phase,p_pu,q_pu\n65,a,-500,-200\n")
        code = cli.main(
            ["pf", "--network", str(net_file), "--loads", str(loads)]
        )
        assert code == cli.EXIT_NUMERICAL

    def test_missing_network_is_config_error(self, tmp_path):
        code = cli.main(["pf", "--network", str(tmp_path / "none.json")])
        assert code == cli.EXIT_CONFIG


class TestPriorAndUpdate:
    def test_prior_then_update_roundtrip(self, workdir):
        root, net_file, plan_file, frames_file = workdir
        artifact = root / "prior.json"
        assert cli.main(
            ["prior", "--network", str(net_file), "--out", str(artifact)]
        ) == 0
        estimates = root / "estimates.csv"
        code = cli.main(
            [
                "update",
                "--prior", str(artifact),
                "--network", str(net_file),
                "--plan", str(plan_file),
                "--frames", str(frames_file),
                "--out", str(estimates),
            ]
        )
        assert code == 0
        with estimates.open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 * 256
        assert {r["t"] for r in rows} == {"0", "1"}
        assert float(rows[0]["std_v"]) >= 0.0

    def test_update_rejects_mismatched_network(self, workdir, tmp_path):
        root, net_file, plan_file, frames_file = workdir
        artifact = root / "prior2.json"
        assert cli.main(
            ["prior", "--network", str(net_file), "--out", str(artifact)]
        ) == 0
        other = tmp_path / "other.json"
        other.write_text(net_file.read_text() + "\n")
        code = cli.main(
            [
                "update",
                "--prior", str(artifact),
                "--network", str(other),
                "--plan", str(plan_file),
                "--frames", str(frames_file),
                "--out", str(tmp_path / "est.csv"),
            ]
        )
        assert code == cli.EXIT_CONFIG

    def test_wls_prior_method(self, workdir):
        root, net_file, _, _ = workdir
        artifact = root / "prior_wls.json"
        assert cli.main(
            [
                "prior",
                "--network", str(net_file),
                "--method", "wls",
                "--out", str(artifact),
            ]
        ) == 0
        data = json.loads(artifact.read_text())
        assert "cov_rect_lower" in data

    def test_update_with_magnitude_sensors(self, workdir, feeder, tmp_path):
        # a plan with magnitude sensors needs the rectangular prior
        root, net_file, _, _ = workdir
        net, adm, v0 = feeder
        sensors = [SensorSpec("voltage", "79", ph) for ph in "abc"] + [
            SensorSpec("voltage", "95", ph, sync=False) for ph in "abc"
        ]
        plan = build_plan(sensors, adm, net.v_source, 0.01)
        plan_file = tmp_path / "plan_mixed.json"
        save_plan(plan, plan_file)
        truth = fixed_point_power_flow(
            net.base_load_vector(), adm, v0, net.v_source
        )
        frames_file = tmp_path / "frames.csv"
        write_frames(frames_file, plan, [simulate_frame(plan, truth.v, 7)])

        artifact = tmp_path / "prior.json"
        assert cli.main(
            ["prior", "--network", str(net_file), "--method", "wls",
             "--out", str(artifact)]
        ) == 0
        out = tmp_path / "est.csv"
        assert cli.main(
            [
                "update",
                "--prior", str(artifact),
                "--network", str(net_file),
                "--plan", str(plan_file),
                "--frames", str(frames_file),
                "--out", str(out),
            ]
        ) == 0
        assert out.exists()
        assert out.with_suffix(".summary.json").exists()

    def test_update_magnitude_plan_needs_rect_prior(self, workdir, feeder, tmp_path):
        root, net_file, _, _ = workdir
        net, adm, v0 = feeder
        sensors = [SensorSpec("voltage", "95", ph, sync=False) for ph in "abc"]
        plan = build_plan(sensors, adm, net.v_source, 0.01)
        plan_file = tmp_path / "plan_mag.json"
        save_plan(plan, plan_file)
        truth = fixed_point_power_flow(net.base_load_vector(), adm, v0, net.v_source)
        frames_file = tmp_path / "frames.csv"
        write_frames(frames_file, plan, [simulate_frame(plan, truth.v, 7)])
        artifact = tmp_path / "prior_fp.json"
        assert cli.main(
            ["prior", "--network", str(net_file), "--out", str(artifact)]
        ) == 0
        code = cli.main(
            [
                "update",
                "--prior", str(artifact),
                "--network", str(net_file),
                "--plan", str(plan_file),
                "--frames", str(frames_file),
                "--out", str(tmp_path / "est.csv"),
            ]
        )
        assert code == cli.EXIT_CONFIG


class TestRun:
    def test_run_small_scenario(self, workdir):
        root, net_file, plan_file, _ = workdir
        out_dir = root / "run_out"
        scenario = root / "scenario.json"
        scenario.write_text(
            json.dumps(
                {
                    "network": net_file.name,
                    "plan": plan_file.name,
                    "horizon": 2,
                    "trials": 1,
                    "seed": 3,
                    "methods": ["prior", "post"],
                    "output_dir": str(out_dir),
                }
            )
        )
        assert cli.main(["run", "--config", str(scenario)]) == 0
        assert (out_dir / "nrmse.csv").exists()
        assert (out_dir / "timing.csv").exists()
        assert (out_dir / "summary.json").exists()

    def test_run_with_bad_config(self, tmp_path):
        cfg = tmp_path / "broken.json"
        cfg.write_text("{")
        assert cli.main(["run", "--config", str(cfg)]) == cli.EXIT_CONFIG
