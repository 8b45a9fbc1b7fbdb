"""Converter for the IEEE 123-bus test feeder CSV data.

The published feeder tables (line segments, switch states, per-mile phase
impedance configurations, spot loads) are bundled under ``data/ieee123``.
The converter turns them into the network JSON schema used by the rest of
the package, converting ohms and kW to per-unit on the feeder bases
(4.16 kV line-to-line, 5 MVA substation transformer).

Modeling choices for the lines-only network:
  * closed switches become short three-phase lines with a small
    uncoupled impedance (1e-4 + 1e-4j p.u. per phase);
  * the voltage regulators, the 61-610 step-down transformer and the
    shunt capacitor banks are not modeled;
  * all load models (wye/delta, PQ/I/Z) are taken as constant-power wye
    injections at the listed kW/kvar.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .errors import NetworkDataError
from .network import LineSpec, NetworkModel, default_source_voltage, make_network

DATA_DIR = Path(__file__).parent / "data" / "ieee123"

V_BASE_LL_V = 4160.0
S_BASE_VA = 5.0e6
SOURCE_BUS = "150"
FEET_PER_MILE = 5280.0
SWITCH_Z_PU = 1e-4 + 1e-4j


def _read_csv(directory: Path, name: str):
    path = directory / name
    if not path.exists():
        raise NetworkDataError(f"feeder file missing: {path}")
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def _load_configs(directory: Path):
    configs = {}
    for row in _read_csv(directory, "configs.csv"):
        cfg = row["config"]
        phasing = row["phasing"]
        p = len(phasing)
        if cfg not in configs:
            configs[cfg] = (phasing, np.zeros((p, p), dtype=complex))
        phasing_known, z = configs[cfg]
        if phasing_known != phasing:
            raise NetworkDataError(f"config {cfg}: inconsistent phasing rows")
        i = phasing.index(row["row_phase"])
        j = phasing.index(row["col_phase"])
        z[i, j] = z[j, i] = complex(float(row["r_ohm_per_mile"]), float(row["x_ohm_per_mile"]))
    return configs


def build_network(feeder_dir=None, *, s_base_va: float = S_BASE_VA,
                  v_base_ll_v: float = V_BASE_LL_V) -> NetworkModel:
    """Build the feeder NetworkModel from the CSV tables.

    ``feeder_dir`` defaults to the bundled data. Buses behind open
    switches are dropped; every loaded (bus, phase) keeps its base
    injection and every unloaded one is flagged zero-injection.
    """
    directory = Path(feeder_dir) if feeder_dir is not None else DATA_DIR
    configs = _load_configs(directory)
    v_base_ln = v_base_ll_v / math.sqrt(3.0)
    z_base = v_base_ll_v**2 / s_base_va
    s_base_phase = s_base_va / 3.0

    lines = []
    buses = {SOURCE_BUS: "abc"}

    def note_phases(bus, phasing):
        merged = "".join(p for p in "abc" if p in buses.get(bus, "") + phasing)
        buses[bus] = merged

    for row in _read_csv(directory, "lines.csv"):
        cfg = row["config"]
        if cfg not in configs:
            raise NetworkDataError(f"line {row['from']}-{row['to']}: unknown config {cfg}")
        phasing, z_mile = configs[cfg]
        z = z_mile * (float(row["length_ft"]) / FEET_PER_MILE) / z_base
        note_phases(row["from"], phasing)
        note_phases(row["to"], phasing)
        lines.append(LineSpec(row["from"], row["to"], phasing, z))

    for row in _read_csv(directory, "switches.csv"):
        if row["status"] != "closed":
            continue
        z = np.diag([SWITCH_Z_PU] * 3)
        note_phases(row["from"], "abc")
        note_phases(row["to"], "abc")
        lines.append(LineSpec(row["from"], row["to"], "abc", z))

    base_load = {}
    for row in _read_csv(directory, "loads.csv"):
        bus = row["bus"]
        if bus not in buses:
            raise NetworkDataError(f"load at unknown bus {bus}")
        for ph in "abc":
            p_kw = float(row[f"p_{ph}_kw"])
            q_kvar = float(row[f"q_{ph}_kvar"])
            if p_kw == 0 and q_kvar == 0:
                continue
            if ph not in buses[bus]:
                raise NetworkDataError(f"load on missing phase {ph} at bus {bus}")
            # injection convention: loads are negative
            base_load[(bus, ph)] = -complex(p_kw, q_kvar) * 1e3 / s_base_phase

    zero_injection = [
        (bus, ph)
        for bus in buses
        if bus != SOURCE_BUS
        for ph in buses[bus]
        if (bus, ph) not in base_load
    ]

    return make_network(
        s_base_va=s_base_va,
        v_base_v=v_base_ln,
        source_bus=SOURCE_BUS,
        v_source=default_source_voltage(),
        buses=buses,
        lines=lines,
        zero_injection=zero_injection,
        base_load=base_load,
    )
