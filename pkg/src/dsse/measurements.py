"""Sensor plans, measurement maps, noise covariances and frame simulation.

Every sensor reading is an affine function of the state voltage,
``w = c @ v + d``, where ``d`` carries the source-column contribution.
Synchronized sensors report the complex value ``w``; unsynchronized ones
report ``|w|`` and are therefore nonlinear in the state.

Noise is relative: a reading ``u`` is disturbed by ``u * (w_mag + j*w_ang)``
with independent gaussian magnitude and angle components of standard
deviation ``sigma_meas``.  An exact polar model
``(|u| + sigma*|u|*g1) * exp(j*(angle(u) + sigma*g2))`` is available for
validating that linearization.  Covariances are approximated from the
measured values, with a floor keeping the weight matrices invertible.

Plans are immutable and simulation is pure given a seed, so Monte-Carlo
trials can run in parallel without coordination.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, SensorError, SingularGradientError
from .network import AdmittanceBlocks

COV_FLOOR = 1e-12
KIND_VOLTAGE = "voltage"
KIND_CURRENT = "current"
KIND_BRANCH = "branch"

# seed namespaces for counter-based generators
_NS_FRAME = 17
_NS_PSEUDO = 23


@dataclass(frozen=True)
class SensorSpec:
    """One sensor: kind, location and synchronization capability."""

    kind: str  # voltage | current | branch
    bus: str
    phase: str
    to_bus: str | None = None  # branch sensors only
    sync: bool = True

    def __post_init__(self):
        if self.kind not in (KIND_VOLTAGE, KIND_CURRENT, KIND_BRANCH):
            raise SensorError(f"unknown sensor kind {self.kind!r}")
        if self.kind == KIND_BRANCH and self.to_bus is None:
            raise SensorError(f"branch sensor at {self.bus}.{self.phase} needs to_bus")

    @property
    def label(self) -> str:
        target = f"->{self.to_bus}" if self.to_bus else ""
        mode = "sync" if self.sync else "mag"
        return f"{self.kind}:{self.bus}{target}.{self.phase}[{mode}]"


@dataclass(frozen=True)
class PseudoMeasurements:
    """Load estimates used as low-accuracy injection measurements."""

    s: np.ndarray  # complex (N,), injection convention, exact zeros at eps
    sigma: float  # relative standard deviation

    def __post_init__(self):
        object.__setattr__(self, "s", np.asarray(self.s, dtype=complex))
        if self.sigma < 0:
            raise ConfigError("sigma_pseudo must be nonnegative")

    def cov_diag(self) -> np.ndarray:
        """Diagonal of the complex noise covariance, sigma^2 * |s|^2."""
        return self.sigma**2 * np.abs(self.s) ** 2


def _sensor_row(sensor: SensorSpec, adm: AdmittanceBlocks, v_source: np.ndarray):
    """Affine representation (c, d) of one sensor reading c @ v + d."""
    pim = adm.index_map
    n = adm.n_state
    if not pim.has_phase(sensor.bus, sensor.phase):
        raise SensorError(f"sensor {sensor.label}: no phase {sensor.phase} at bus {sensor.bus}")
    c = np.zeros(n, dtype=complex)
    gi = pim.global_index(sensor.bus, sensor.phase)
    if sensor.kind == KIND_VOLTAGE:
        if gi < 3:
            return c, complex(v_source[gi])
        c[gi - 3] = 1.0
        return c, 0.0 + 0.0j
    if sensor.kind == KIND_CURRENT:
        row = adm.y[gi, :]
        return row[3:].copy(), complex(row[:3] @ v_source)
    # branch current i -> m: (Y)_{i_l, m_l} * (V_{i_l} - V_{m_l})
    if not pim.has_phase(sensor.to_bus, sensor.phase):
        raise SensorError(
            f"sensor {sensor.label}: no phase {sensor.phase} at target bus {sensor.to_bus}"
        )
    gm = pim.global_index(sensor.to_bus, sensor.phase)
    coupling = adm.y[gi, gm]
    if coupling == 0:
        raise SensorError(
            f"sensor {sensor.label}: buses {sensor.bus} and {sensor.to_bus} share no "
            f"line on phase {sensor.phase}"
        )
    d = 0.0 + 0.0j
    if gi < 3:
        d += coupling * v_source[gi]
    else:
        c[gi - 3] += coupling
    if gm < 3:
        d -= coupling * v_source[gm]
    else:
        c[gm - 3] -= coupling
    return c, d


@dataclass(frozen=True)
class MeasurementPlan:
    """Ordered sensor list with the derived measurement maps.

    Plan order is stable and defines the measurement vector layout: the
    synchronized readings in plan order form z_measL, the magnitude-only
    readings in plan order form z_measNL.
    """

    sensors: tuple
    sigma_meas: float
    c_lin: np.ndarray  # complex (N_measL, N)
    d_lin: np.ndarray  # complex (N_measL,)
    c_nl: np.ndarray  # complex (N_measNL, N)
    d_nl: np.ndarray  # complex (N_measNL,)
    sync_positions: tuple  # indices into sensors, plan order
    nonsync_positions: tuple

    @property
    def n_lin(self) -> int:
        return self.c_lin.shape[0]

    @property
    def n_nl(self) -> int:
        return self.c_nl.shape[0]

    @property
    def n_state(self) -> int:
        return self.c_lin.shape[1]


def build_plan(sensors, adm: AdmittanceBlocks, v_source, sigma_meas: float) -> MeasurementPlan:
    """Derive the linear/nonlinear measurement maps for a sensor list."""
    if sigma_meas < 0:
        raise ConfigError("sigma_meas must be nonnegative")
    v_source = np.asarray(v_source, dtype=complex)
    sensors = tuple(sensors)
    rows = [_sensor_row(s, adm, v_source) for s in sensors]
    sync = [i for i, s in enumerate(sensors) if s.sync]
    nonsync = [i for i, s in enumerate(sensors) if not s.sync]
    n = adm.n_state

    def stack(indices):
        if not indices:
            return np.zeros((0, n), dtype=complex), np.zeros(0, dtype=complex)
        return (
            np.array([rows[i][0] for i in indices]),
            np.array([rows[i][1] for i in indices]),
        )

    c_lin, d_lin = stack(sync)
    c_nl, d_nl = stack(nonsync)
    return MeasurementPlan(
        sensors=sensors,
        sigma_meas=float(sigma_meas),
        c_lin=c_lin,
        d_lin=d_lin,
        c_nl=c_nl,
        d_nl=d_nl,
        sync_positions=tuple(sync),
        nonsync_positions=tuple(nonsync),
    )


def build_linear_map(plan: MeasurementPlan):
    """Affine map of the synchronized readings: (C, d) with z ~ C @ v + d."""
    return plan.c_lin, plan.d_lin


def eval_linear(plan: MeasurementPlan, v: np.ndarray) -> np.ndarray:
    return plan.c_lin @ np.asarray(v, dtype=complex) + plan.d_lin


def eval_nonlinear(plan: MeasurementPlan, v: np.ndarray) -> np.ndarray:
    """Magnitude readings |c @ v + d| of the unsynchronized sensors."""
    return np.abs(plan.c_nl @ np.asarray(v, dtype=complex) + plan.d_nl)


def nonlinear_jacobian(plan: MeasurementPlan, v_rect: np.ndarray) -> np.ndarray:
    """Gradient of the magnitude readings with respect to [Re v; Im v].

    For w = c @ v + d the row is [Re(conj(w) c), -Im(conj(w) c)] / |w|.
    Raises if any measured quantity is near zero (gradient undefined).
    """
    v_rect = np.asarray(v_rect, dtype=float)
    n = plan.n_state
    v = v_rect[:n] + 1j * v_rect[n:]
    w = plan.c_nl @ v + plan.d_nl
    mags = np.abs(w)
    for k, mag in enumerate(mags):
        if mag < 1e-9:
            sensor = plan.sensors[plan.nonsync_positions[k]]
            raise SingularGradientError(
                f"sensor {sensor.label}: measured quantity magnitude {mag:.2e} "
                "is too small for a magnitude gradient"
            )
    wc = (np.conj(w) / mags)[:, None] * plan.c_nl
    return np.hstack([wc.real, -wc.imag])


@dataclass(frozen=True)
class MeasurementFrame:
    """One timestep of readings with measurement-derived covariance diagonals."""

    z_lin: np.ndarray  # complex (N_measL,)
    z_nl: np.ndarray  # real nonnegative (N_measNL,)
    timestamp: int
    var_lin: np.ndarray  # 2 sigma^2 |z|^2, floored
    var_nl: np.ndarray  # sigma^2 z^2, floored
    sigma_meas: float


def make_frame(plan: MeasurementPlan, z_lin, z_nl, timestamp: int = 0) -> MeasurementFrame:
    z_lin = np.asarray(z_lin, dtype=complex).reshape(plan.n_lin)
    z_nl = np.asarray(z_nl, dtype=float).reshape(plan.n_nl)
    if np.any(z_nl < 0):
        raise ConfigError("magnitude readings must be nonnegative")
    sig2 = plan.sigma_meas**2
    var_lin = np.maximum(2.0 * sig2 * np.abs(z_lin) ** 2, COV_FLOOR)
    var_nl = np.maximum(sig2 * z_nl**2, COV_FLOOR)
    return MeasurementFrame(
        z_lin=z_lin,
        z_nl=z_nl,
        timestamp=int(timestamp),
        var_lin=var_lin,
        var_nl=var_nl,
        sigma_meas=plan.sigma_meas,
    )


def measurement_covariances(plan: MeasurementPlan, frame: MeasurementFrame,
                            circular: bool = False, values: np.ndarray | None = None):
    """Covariance blocks approximated from the measured values.

    Returns (cov_lin, cov_rect_lin, cov_nl):
      * cov_lin: complex-path diagonal, 2 sigma^2 diag(|z|^2);
      * cov_rect_lin: (2m x 2m) with diag(|z|^2) diagonal blocks and
        2 diag(Re z * Im z) off-diagonal blocks, times sigma^2
        (off-diagonal blocks dropped when ``circular``);
      * cov_nl: sigma^2 diag(z^2).

    ``values`` substitutes model-predicted readings for the measured ones.
    Diagonals are floored so the weight matrices stay invertible.
    """
    z = frame.z_lin if values is None else np.asarray(values, dtype=complex)
    if z.shape != (plan.n_lin,):
        raise ConfigError(f"frame has {z.shape[0]} synchronized readings, plan {plan.n_lin}")
    sig2 = plan.sigma_meas**2
    raw = sig2 * np.abs(z) ** 2
    floored = raw < COV_FLOOR
    if np.any(floored) or np.any(sig2 * frame.z_nl**2 < COV_FLOOR):
        warnings.warn(
            "near-zero readings: covariance diagonal floored to keep weights finite",
            RuntimeWarning,
            stacklevel=2,
        )
    diag = np.maximum(raw, COV_FLOOR)
    cov_lin = np.diag(2.0 * diag)
    cov_rect = np.zeros((2 * plan.n_lin, 2 * plan.n_lin))
    cov_rect[: plan.n_lin, : plan.n_lin] = np.diag(diag)
    cov_rect[plan.n_lin :, plan.n_lin :] = np.diag(diag)
    if not circular:
        off = 2.0 * sig2 * z.real * z.imag
        cov_rect[: plan.n_lin, plan.n_lin :] = np.diag(off)
        cov_rect[plan.n_lin :, : plan.n_lin] = np.diag(off)
    cov_nl = np.diag(np.maximum(sig2 * frame.z_nl**2, COV_FLOOR))
    return cov_lin, cov_rect, cov_nl


def _sensor_rng(seed, timestep: int, trial: int, sensor_index: int):
    return np.random.default_rng((seed, _NS_FRAME, int(trial), int(timestep), sensor_index))


def simulate_frame(plan: MeasurementPlan, v_true, rng_seed, *, timestep: int = 0,
                   trial: int = 0, exact_polar: bool = False) -> MeasurementFrame:
    """Simulate one frame of noisy readings at the true voltage.

    Noise draws are counter-based per (timestep, sensor, trial), so frames
    are reproducible independent of evaluation order.  ``exact_polar``
    switches the synchronized noise from the linearized relative model to
    the exact magnitude/angle model.  Magnitude readings are clipped at 0.
    """
    v_true = np.asarray(v_true, dtype=complex)
    exact_lin = eval_linear(plan, v_true)
    exact_nl_base = plan.c_nl @ v_true + plan.d_nl
    sigma = plan.sigma_meas

    z_lin = np.empty(plan.n_lin, dtype=complex)
    for k, pos in enumerate(plan.sync_positions):
        g = _sensor_rng(rng_seed, timestep, trial, pos).normal(size=2)
        u = exact_lin[k]
        if exact_polar:
            z_lin[k] = (np.abs(u) * (1.0 + sigma * g[0])) * np.exp(
                1j * (np.angle(u) + sigma * g[1])
            )
        else:
            z_lin[k] = u * (1.0 + sigma * g[0] + 1j * sigma * g[1])

    z_nl = np.empty(plan.n_nl)
    for k, pos in enumerate(plan.nonsync_positions):
        g = _sensor_rng(rng_seed, timestep, trial, pos).normal(size=2)
        z_nl[k] = max(np.abs(exact_nl_base[k]) * (1.0 + sigma * g[0]), 0.0)

    return make_frame(plan, z_lin, z_nl, timestamp=timestep)


def sample_pseudo(s_true, sigma_pseudo: float, rng_seed, *, timestep: int = 0,
                  trial: int = 0) -> PseudoMeasurements:
    """Draw pseudo-measurements around the true injections.

    Independent relative gaussian noise is applied to the real and
    imaginary parts, so exactly-zero entries (the zero-injection set)
    stay exactly zero.
    """
    s_true = np.asarray(s_true, dtype=complex)
    rng = np.random.default_rng((rng_seed, _NS_PSEUDO, int(trial), int(timestep)))
    g = rng.normal(size=(2, s_true.shape[0]))
    s = s_true.real * (1.0 + sigma_pseudo * g[0]) + 1j * s_true.imag * (
        1.0 + sigma_pseudo * g[1]
    )
    return PseudoMeasurements(s=s, sigma=sigma_pseudo)


# ---------------------------------------------------------------------------
# plan JSON and frame CSV interfaces

def plan_to_dict(plan: MeasurementPlan) -> dict:
    sensors = []
    for s in plan.sensors:
        entry = {"kind": s.kind, "bus": s.bus, "phase": s.phase, "sync": s.sync}
        if s.to_bus is not None:
            entry["to_bus"] = s.to_bus
        sensors.append(entry)
    return {"sigma_meas": plan.sigma_meas, "sensors": sensors}


def load_plan(file_path, adm: AdmittanceBlocks, v_source) -> MeasurementPlan:
    path = Path(file_path)
    try:
        data = json.loads(path.read_text())
        sensors = [
            SensorSpec(
                kind=e["kind"],
                bus=str(e["bus"]),
                phase=e["phase"],
                to_bus=str(e["to_bus"]) if "to_bus" in e else None,
                sync=bool(e.get("sync", True)),
            )
            for e in data["sensors"]
        ]
        sigma = float(data["sigma_meas"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"cannot read measurement plan {path}: {exc}") from exc
    return build_plan(sensors, adm, v_source, sigma)


def save_plan(plan: MeasurementPlan, file_path) -> None:
    Path(file_path).write_text(json.dumps(plan_to_dict(plan), indent=1))


def write_frames(file_path, plan: MeasurementPlan, frames) -> None:
    """Stream frames as CSV rows ``t, sensor_id, re, im`` (im empty for magnitudes)."""
    with Path(file_path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "sensor_id", "re", "im"])
        for frame in frames:
            for k, pos in enumerate(plan.sync_positions):
                writer.writerow(
                    [frame.timestamp, pos, f"{frame.z_lin[k].real:.17g}",
                     f"{frame.z_lin[k].imag:.17g}"]
                )
            for k, pos in enumerate(plan.nonsync_positions):
                writer.writerow([frame.timestamp, pos, f"{frame.z_nl[k]:.17g}", ""])


def read_frames(file_path, plan: MeasurementPlan):
    """Read frames written by :func:`write_frames`, ordered by timestep."""
    by_t = {}
    path = Path(file_path)
    try:
        with path.open(newline="") as fh:
            for row in csv.DictReader(fh):
                t = int(row["t"])
                sensor = int(row["sensor_id"])
                im = row["im"].strip()
                value = complex(float(row["re"]), float(im)) if im else float(row["re"])
                by_t.setdefault(t, {})[sensor] = value
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read frames file {path}: {exc}") from exc
    frames = []
    for t in sorted(by_t):
        readings = by_t[t]
        try:
            z_lin = [readings[pos] for pos in plan.sync_positions]
            z_nl = [readings[pos] for pos in plan.nonsync_positions]
        except KeyError as exc:
            raise ConfigError(f"frames file {path}: t={t} is missing sensor {exc}") from exc
        frames.append(make_frame(plan, z_lin, z_nl, timestamp=t))
    return frames
