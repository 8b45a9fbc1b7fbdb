"""Benchmark harness: multi-timestep scenarios, accuracy metric, reports.

For every step the harness solves the truth power flow from the trial's
load realization, simulates one measurement frame, runs the requested
estimation methods and records accuracy (nRMSE against the truth
voltages) and wall-clock time.

Timing convention (also recorded in summary.json): the two-step methods
``post``/``postNL`` are timed around the online update only, with the
offline prior and gain precursors excluded; ``WLS``/``WLSNL`` are timed
around the full iterative solve; ``prior`` reports the hourly power-flow
solve time.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError, DsseError
from .estimator import (
    LinearUpdater,
    MixedUpdater,
    SolverConfig,
    stack_measurements,
    wls_subspace,
)
from .measurements import MeasurementPlan, build_plan, load_plan, make_frame, simulate_frame
from .network import build_admittance, load_network, no_load_voltage
from .prior import fixed_point_power_flow, rect_fixed_point_power_flow
from .profiles import generate_profiles
from .subspace import rect_kernel_basis

ALL_METHODS = ("prior", "post", "postNL", "WLS", "WLSNL")


@dataclass(frozen=True)
class ScenarioConfig:
    """Inputs and knobs of one benchmark scenario."""

    network: str
    plan: str
    horizon: int = 96
    sigma_pseudo: float = 0.5
    sigma_meas: float = 0.01
    trials: int = 1
    seed: int = 0
    methods: tuple = ALL_METHODS
    output_dir: str = "out"
    load_noise: str = "gaussian"

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1")
        if self.sigma_pseudo <= 0 or self.sigma_meas <= 0:
            raise ConfigError("sigma_pseudo and sigma_meas must be positive")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if not self.methods:
            raise ConfigError("method set must not be empty")
        unknown = [m for m in self.methods if m not in ALL_METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; choose from {ALL_METHODS}")


def load_scenario(file_path) -> ScenarioConfig:
    """Read a scenario JSON file, resolving relative paths against it."""
    path = Path(file_path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
    base = path.parent
    try:
        return ScenarioConfig(
            network=str(base / data["network"]),
            plan=str(base / data["plan"]),
            horizon=int(data.get("horizon", 96)),
            sigma_pseudo=float(data.get("sigma_pseudo", 0.5)),
            sigma_meas=float(data.get("sigma_meas", 0.01)),
            trials=int(data.get("trials", 1)),
            seed=int(data.get("seed", 0)),
            methods=tuple(data.get("methods", ALL_METHODS)),
            output_dir=str(data.get("output_dir", base / "out")),
            load_noise=str(data.get("load_noise", "gaussian")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scenario {path}: {exc}") from exc


@dataclass
class RunReport:
    """Per-method accuracy and timing series plus failure bookkeeping."""

    methods: tuple
    horizon: int
    trials: int
    nrmse: dict = field(default_factory=dict)  # method -> (horizon*trials,) array
    timing: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)  # (t, trial, method, message)
    config: ScenarioConfig | None = None

    def summary(self) -> dict:
        def stats(series):
            finite = series[np.isfinite(series)]
            if finite.size == 0:
                return {"count": 0}
            q1, med, q3 = np.percentile(finite, [25, 50, 75])
            return {
                "count": int(finite.size),
                "median": float(med),
                "mean": float(finite.mean()),
                "q1": float(q1),
                "q3": float(q3),
            }

        return {
            "methods": {
                m: {"nrmse": stats(self.nrmse[m]), "timing_s": stats(self.timing[m])}
                for m in self.methods
            },
            "failures": [
                {"t": t, "trial": k, "method": m, "error": msg}
                for (t, k, m, msg) in self.failures
            ],
            "complete": not self.failures,
            "timing_definition": {
                "post/postNL": "online update only; offline prior and gain precursors excluded",
                "WLS/WLSNL": "full iterative solve per frame",
                "prior": "hourly offline power-flow solve",
            },
        }


def nrmse(v_est, v_true, v_base: float) -> float:
    """Root mean square voltage error normalized by the base voltage."""
    v_est = np.asarray(v_est)
    v_true = np.asarray(v_true)
    if v_est.shape != v_true.shape:
        raise ConfigError(f"shape mismatch {v_est.shape} vs {v_true.shape}")
    if v_base <= 0:
        raise ConfigError("v_base must be positive")
    return float(np.sqrt(np.mean(np.abs(v_est - v_true) ** 2)) / v_base)


def _subset_plan(plan: MeasurementPlan, adm, v_source) -> MeasurementPlan:
    """Plan restricted to the synchronized sensors, preserving order."""
    return build_plan(
        [s for s in plan.sensors if s.sync], adm, v_source, plan.sigma_meas
    )


class _HourCache:
    """Per-hour offline artifacts: priors and precomputed updaters."""

    def __init__(self, adm, v0, v_source, cfg_methods, plan_sync, plan_all):
        self.adm = adm
        self.v0 = v0
        self.v_source = v_source
        self.methods = cfg_methods
        self.plan_sync = plan_sync
        self.plan_all = plan_all
        self._cache = {}

    def get(self, hour: int, pseudo):
        if hour in self._cache:
            return self._cache[hour]
        entry = {}
        t0 = time.perf_counter()
        if {"prior", "post"} & set(self.methods):
            entry["prior"] = fixed_point_power_flow(
                pseudo, self.adm, self.v0, self.v_source
            )
        if "postNL" in self.methods:
            entry["prior_rect"] = rect_fixed_point_power_flow(
                pseudo, self.adm, self.v0, self.v_source
            )
        entry["prior_seconds"] = time.perf_counter() - t0
        if "post" in self.methods:
            entry["updater_sync"] = LinearUpdater(entry["prior"], self.plan_sync)
        if "postNL" in self.methods:
            entry["updater_mixed"] = MixedUpdater(
                entry["prior_rect"], self.plan_all, circular=True
            )
        self._cache[hour] = entry
        return entry


def run_scenario(cfg: ScenarioConfig) -> RunReport:
    """Run every requested method over the scenario and collect the report.

    Deterministic for a fixed config and seed: all randomness is
    counter-based per (timestep, sensor, trial).  Method errors abort the
    affected (step, trial, method) cell, are logged in the report and
    leave a NaN in the series.

    BLAS pools are capped at one thread for the duration of the run; at
    these matrix sizes thread synchronization costs far more than it
    saves, and capping also keeps the timing series comparable.
    """
    with threadpool_limits(limits=1):
        return _run_scenario(cfg)


def _run_scenario(cfg: ScenarioConfig) -> RunReport:
    net = load_network(cfg.network)
    adm = build_admittance(net)
    v0 = no_load_voltage(adm, net.v_source)
    eps = net.zero_injection_state_indices()
    plan_all = load_plan(cfg.plan, adm, net.v_source)
    if plan_all.sigma_meas != cfg.sigma_meas:
        plan_all = build_plan(plan_all.sensors, adm, net.v_source, cfg.sigma_meas)
    plan_sync = _subset_plan(plan_all, adm, net.v_source)
    needs_rect_basis = {"WLS", "WLSNL"} & set(cfg.methods)
    basis_rect = rect_kernel_basis(adm, eps, v0) if needs_rect_basis else None

    truth_cfg = SolverConfig(tol=1e-10, max_iter=80)
    wls_cfg = SolverConfig()

    report = RunReport(methods=tuple(cfg.methods), horizon=cfg.horizon,
                       trials=cfg.trials, config=cfg)
    size = cfg.horizon * cfg.trials
    for m in cfg.methods:
        report.nrmse[m] = np.full(size, np.nan)
        report.timing[m] = np.full(size, np.nan)

    hours = _HourCache(adm, v0, net.v_source, cfg.methods, plan_sync, plan_all)
    profiles = [
        generate_profiles(net, cfg.horizon, cfg.sigma_pseudo, cfg.seed,
                          trial=k, noise=cfg.load_noise)
        for k in range(cfg.trials)
    ]

    for t in range(cfg.horizon):
        for k in range(cfg.trials):
            cell = t * cfg.trials + k
            profile = profiles[k]
            pseudo = profile.pseudo_for_step(t)
            try:
                truth = fixed_point_power_flow(
                    profile.truth[t], adm, v0, net.v_source, truth_cfg
                )
                if not truth.converged:
                    raise DsseError("truth power flow did not converge")
                hour_entry = hours.get(profile.hour_of_step(t), pseudo)
                frame_all = simulate_frame(
                    plan_all, truth.v, cfg.seed, timestep=t, trial=k
                )
                frame_sync = make_frame(
                    plan_sync, frame_all.z_lin, np.zeros(0), timestamp=t
                )
            except DsseError as exc:
                for m in cfg.methods:
                    report.failures.append((t, k, m, str(exc)))
                continue

            for method in cfg.methods:
                try:
                    if method == "prior":
                        estimate = hour_entry["prior"]
                        elapsed = hour_entry["prior_seconds"]
                    elif method == "post":
                        t0 = time.perf_counter()
                        estimate = hour_entry["updater_sync"].update(frame_sync).estimate
                        elapsed = time.perf_counter() - t0
                    elif method == "postNL":
                        t0 = time.perf_counter()
                        estimate = hour_entry["updater_mixed"].update(frame_all).estimate
                        elapsed = time.perf_counter() - t0
                    else:  # WLS / WLSNL
                        plan = plan_sync if method == "WLS" else plan_all
                        frame = frame_sync if method == "WLS" else frame_all
                        t0 = time.perf_counter()
                        stacked, model = stack_measurements(
                            pseudo, adm, net.v_source, eps, plan, frame,
                            circular=True,
                        )
                        estimate = wls_subspace(stacked, model, basis_rect, wls_cfg)
                        elapsed = time.perf_counter() - t0
                    report.nrmse[method][cell] = nrmse(estimate.v, truth.v, 1.0)
                    report.timing[method][cell] = elapsed
                except DsseError as exc:
                    report.failures.append((t, k, method, str(exc)))
    return report


# ---------------------------------------------------------------------------
# report files

def _write_series_csv(path: Path, report: RunReport, series: dict, column: str) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "trial", "method", column])
        for t in range(report.horizon):
            for k in range(report.trials):
                cell = t * report.trials + k
                for m in report.methods:
                    writer.writerow([t, k, m, f"{series[m][cell]:.12e}"])


def _boxplot_svg(labels, datasets, title: str, y_label: str) -> str:
    """Minimal deterministic SVG box plot: quartile box, median, mean marker."""
    width, height = 640, 420
    left, right, top, bottom = 70, 20, 40, 50
    plot_w = width - left - right
    plot_h = height - top - bottom
    finite = [d[np.isfinite(d)] for d in datasets]
    all_vals = np.concatenate([d for d in finite if d.size] or [np.array([0.0])])
    lo = float(all_vals.min()) if all_vals.size else 0.0
    hi = float(all_vals.max()) if all_vals.size else 1.0
    if hi <= lo:
        hi = lo + 1.0
    pad = 0.08 * (hi - lo)
    lo, hi = lo - pad, hi + pad

    def y_px(v):
        return top + plot_h * (1.0 - (v - lo) / (hi - lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
        f'<text x="16" y="{top + plot_h / 2:.1f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 16 {top + plot_h / 2:.1f})">{y_label}</text>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" '
        f'y2="{top + plot_h}" stroke="black"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        v = lo + frac * (hi - lo)
        parts.append(
            f'<text x="{left - 6}" y="{y_px(v) + 4:.1f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="10">{v:.3g}</text>'
        )
    slot = plot_w / max(len(labels), 1)
    box_w = min(60.0, 0.5 * slot)
    for i, (label, data) in enumerate(zip(labels, finite)):
        cx = left + (i + 0.5) * slot
        parts.append(
            f'<text x="{cx:.1f}" y="{height - 20}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12">{label}</text>'
        )
        if data.size == 0:
            continue
        q1, med, q3 = np.percentile(data, [25, 50, 75])
        mean = data.mean()
        w_lo, w_hi = data.min(), data.max()
        parts += [
            f'<line x1="{cx:.1f}" y1="{y_px(w_lo):.2f}" x2="{cx:.1f}" '
            f'y2="{y_px(q1):.2f}" stroke="black"/>',
            f'<line x1="{cx:.1f}" y1="{y_px(q3):.2f}" x2="{cx:.1f}" '
            f'y2="{y_px(w_hi):.2f}" stroke="black"/>',
            f'<rect class="box" x="{cx - box_w / 2:.1f}" y="{y_px(q3):.2f}" '
            f'width="{box_w:.1f}" height="{max(y_px(q1) - y_px(q3), 0.5):.2f}" '
            f'fill="none" stroke="black"/>',
            f'<line x1="{cx - box_w / 2:.1f}" y1="{y_px(med):.2f}" '
            f'x2="{cx + box_w / 2:.1f}" y2="{y_px(med):.2f}" stroke="red" stroke-width="2"/>',
            f'<rect x="{cx - 3:.1f}" y="{y_px(mean) - 3:.2f}" width="6" height="6" fill="red"/>',
        ]
    parts.append("</svg>")
    return "\n".join(parts)


def emit_report(report: RunReport, out_dir) -> list:
    """Write nrmse.csv, timing.csv, summary.json and box-plot SVGs."""
    if not report.methods:
        raise ConfigError("report has an empty method set")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    nrmse_csv = out / "nrmse.csv"
    _write_series_csv(nrmse_csv, report, report.nrmse, "nrmse")
    written.append(nrmse_csv)

    timing_csv = out / "timing.csv"
    _write_series_csv(timing_csv, report, report.timing, "seconds")
    written.append(timing_csv)

    summary = report.summary()
    if report.config is not None:
        summary["config"] = {
            "network": report.config.network,
            "plan": report.config.plan,
            "horizon": report.config.horizon,
            "sigma_pseudo": report.config.sigma_pseudo,
            "sigma_meas": report.config.sigma_meas,
            "trials": report.config.trials,
            "seed": report.config.seed,
            "methods": list(report.config.methods),
            "load_noise": report.config.load_noise,
        }
    summary_json = out / "summary.json"
    summary_json.write_text(json.dumps(summary, indent=1))
    written.append(summary_json)

    for name, series, label in (
        ("nrmse_boxplot.svg", report.nrmse, "nRMSE (p.u.)"),
        ("timing_boxplot.svg", report.timing, "seconds"),
    ):
        svg_path = out / name
        svg_path.write_text(
            _boxplot_svg(
                list(report.methods),
                [series[m] for m in report.methods],
                name.replace("_", " ").removesuffix(".svg"),
                label,
            )
        )
        written.append(svg_path)
    return written
