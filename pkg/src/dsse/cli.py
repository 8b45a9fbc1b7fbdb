"""Command-line interface.

Subcommands:
  run            run a benchmark scenario and emit report files
  pf             solve a power flow for given (or base) loads
  prior          compute and serialize a prior estimate
  update         apply the online update to frames from a CSV stream
  convert-feeder convert the bundled or an external 123-bus feeder CSV set

Exit codes: 0 ok, 1 configuration error, 2 numerical failure,
3 partial result (some benchmark steps failed).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import bench, feeder123
from .errors import ConfigError, DsseError, NetworkDataError
from .estimator import LinearUpdater, SolverConfig
from .measurements import load_plan
from .network import build_admittance, load_network, no_load_voltage, save_network
from .prior import fixed_point_power_flow, load_prior, save_prior, wls_prior
from .subspace import rect_kernel_basis

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_PARTIAL = 3


def _read_loads_csv(path, net):
    """Load injections from CSV columns bus,phase,p_pu,q_pu (injection sign)."""
    s = np.zeros(net.n_state, dtype=complex)
    try:
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                idx = net.index_map.state_index(str(row["bus"]), row["phase"])
                s[idx] = complex(float(row["p_pu"]), float(row["q_pu"]))
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read loads file {path}: {exc}") from exc
    return s


def _write_estimate_csv(path, net, estimate):
    std = None
    if estimate.cov is not None:
        std = np.sqrt(np.maximum(np.diag(estimate.cov).real, 0.0))
    elif estimate.cov_rect is not None:
        n = net.n_state
        diag = np.diag(estimate.cov_rect)
        std = np.sqrt(np.maximum(diag[:n] + diag[n:], 0.0))
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "bus", "phase", "re_v", "im_v", "std_v"])
        t = getattr(estimate, "timestamp", 0)
        for i, (bus, ph) in enumerate(net.index_map.state_order()):
            writer.writerow(
                [t, bus, ph, f"{estimate.v[i].real:.12e}", f"{estimate.v[i].imag:.12e}",
                 f"{std[i]:.12e}" if std is not None else ""]
            )


def _cmd_run(args) -> int:
    cfg = bench.load_scenario(args.config)
    report = bench.run_scenario(cfg)
    written = bench.emit_report(report, cfg.output_dir)
    for path in written:
        print(f"wrote {path}")
    if report.failures:
        print(f"{len(report.failures)} step/method cells failed; see summary.json",
              file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _cmd_pf(args) -> int:
    net = load_network(args.network)
    adm = build_admittance(net)
    v0 = no_load_voltage(adm, net.v_source)
    s = _read_loads_csv(args.loads, net) if args.loads else net.base_load_vector()
    estimate = fixed_point_power_flow(s, adm, v0, net.v_source,
                                      SolverConfig(tol=args.tol))
    if not estimate.converged:
        print("power flow did not converge", file=sys.stderr)
        return EXIT_NUMERICAL
    if args.out:
        _write_estimate_csv(args.out, net, estimate)
        print(f"wrote {args.out}")
    else:
        for i, (bus, ph) in enumerate(net.index_map.state_order()):
            v = estimate.v[i]
            print(f"{bus}.{ph}: {abs(v):.6f} /_{np.degrees(np.angle(v)):8.3f} deg")
    print(f"converged in {estimate.iterations} iterations")
    return EXIT_OK


def _cmd_prior(args) -> int:
    net = load_network(args.network)
    adm = build_admittance(net)
    v0 = no_load_voltage(adm, net.v_source)
    s = _read_loads_csv(args.loads, net) if args.loads else net.base_load_vector()
    from .measurements import PseudoMeasurements

    pseudo = PseudoMeasurements(s=s, sigma=args.sigma_pseudo)
    if args.method == "wls":
        basis = rect_kernel_basis(adm, net.zero_injection_state_indices(), v0)
        estimate = wls_prior(pseudo, adm, basis, net.v_source)
    else:
        estimate = fixed_point_power_flow(pseudo, adm, v0, net.v_source)
    if not estimate.converged:
        print("prior solve did not converge", file=sys.stderr)
        return EXIT_NUMERICAL
    save_prior(estimate, args.out, network_file=args.network)
    print(f"wrote {args.out} (feasibility residual {estimate.feasibility:.3e})")
    return EXIT_OK


def _cmd_update(args) -> int:
    net = load_network(args.network)
    adm = build_admittance(net)
    prior = load_prior(args.prior, network_file=args.network)
    plan = load_plan(args.plan, adm, net.v_source)
    sync_only = all(s.sync for s in plan.sensors)
    if not sync_only:
        from .estimator import MixedUpdater

        if prior.cov_rect is None:
            raise ConfigError(
                "plan contains magnitude sensors but the prior artifact has no "
                "rectangular covariance; rebuild the prior with --method wls"
            )
        updater = MixedUpdater(prior, plan, circular=True)
    else:
        updater = LinearUpdater(prior, plan)
    from .measurements import read_frames

    frames = read_frames(args.frames, plan)
    if not frames:
        raise ConfigError(f"no frames found in {args.frames}")
    out_rows = []
    summary_frames = []
    for frame in frames:
        import time

        t0 = time.perf_counter()
        result = updater.update(frame)
        elapsed = time.perf_counter() - t0
        out_rows.append((frame.timestamp, result.estimate))
        summary_frames.append(
            {
                "t": frame.timestamp,
                "seconds": elapsed,
                "innovation_norm": float(np.max(np.abs(result.innovation))),
            }
        )
    with Path(args.out).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "bus", "phase", "re_v", "im_v", "std_v"])
        for t, estimate in out_rows:
            if estimate.cov is not None:
                std = np.sqrt(np.maximum(np.diag(estimate.cov).real, 0.0))
            else:
                n = net.n_state
                diag = np.diag(estimate.cov_rect)
                std = np.sqrt(np.maximum(diag[:n] + diag[n:], 0.0))
            for i, (bus, ph) in enumerate(net.index_map.state_order()):
                writer.writerow(
                    [t, bus, ph, f"{estimate.v[i].real:.12e}",
                     f"{estimate.v[i].imag:.12e}", f"{std[i]:.12e}"]
                )
    summary = {
        "frames": summary_frames,
        "prior_iterations": prior.iterations,
        "prior_feasibility": prior.feasibility,
    }
    summary_path = Path(args.out).with_suffix(".summary.json")
    summary_path.write_text(json.dumps(summary, indent=1))
    print(f"wrote {args.out} and {summary_path} ({len(out_rows)} frames)")
    return EXIT_OK


def _cmd_convert_feeder(args) -> int:
    net = feeder123.build_network(args.feeder_dir)
    save_network(net, args.out)
    print(f"wrote {args.out} ({len(net.buses)} buses, {net.n_state} state entries)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dsse",
        description="Two-step state estimation for unbalanced distribution feeders",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a benchmark scenario")
    p_run.add_argument("--config", required=True, help="scenario JSON file")
    p_run.set_defaults(func=_cmd_run)

    p_pf = sub.add_parser("pf", help="solve a power flow")
    p_pf.add_argument("--network", required=True)
    p_pf.add_argument("--loads", help="CSV bus,phase,p_pu,q_pu (defaults to base loads)")
    p_pf.add_argument("--out", help="write voltages as CSV instead of printing")
    p_pf.add_argument("--tol", type=float, default=1e-8)
    p_pf.set_defaults(func=_cmd_pf)

    p_prior = sub.add_parser("prior", help="compute and serialize a prior estimate")
    p_prior.add_argument("--network", required=True)
    p_prior.add_argument("--loads", help="pseudo loads CSV (defaults to base loads)")
    p_prior.add_argument("--sigma-pseudo", type=float, default=0.5)
    p_prior.add_argument("--method", choices=["fixed-point", "wls"], default="fixed-point")
    p_prior.add_argument("--out", required=True)
    p_prior.set_defaults(func=_cmd_prior)

    p_update = sub.add_parser("update", help="online update from a frames CSV")
    p_update.add_argument("--prior", required=True, help="prior artifact file")
    p_update.add_argument("--network", required=True)
    p_update.add_argument("--plan", required=True)
    p_update.add_argument("--frames", required=True)
    p_update.add_argument("--out", required=True)
    p_update.set_defaults(func=_cmd_update)

    p_conv = sub.add_parser("convert-feeder", help="feeder CSV tables to network JSON")
    p_conv.add_argument("--in", dest="feeder_dir", default=None,
                        help="feeder CSV directory (defaults to the bundled data)")
    p_conv.add_argument("--out", required=True)
    p_conv.set_defaults(func=_cmd_convert_feeder)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=1):
            return args.func(args)
    except (ConfigError, NetworkDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DsseError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
