"""Three-phase unbalanced network model and admittance algebra.

A network is a connected graph of buses, each carrying a subset of the
phases ``a``, ``b``, ``c``.  One bus is the source (slack) with known
voltage; every other (bus, phase) pair is a state variable.  Lines carry
square symmetric per-phase impedance matrices; the admittance matrix is
assembled from their elementwise reciprocals, so shunt-free networks have
exactly vanishing row sums per coupled phase group.

All quantities are per-unit.  ``s_base_va`` is the three-phase power base
and ``v_base_v`` the line-to-neutral voltage base.

Models and admittance blocks are immutable after construction and safe to
share across threads; the operations are pure functions of their inputs.
"""

from __future__ import annotations

import cmath
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import NetworkDataError, SingularNetworkError

PHASE_ORDER = "abc"


def default_source_voltage() -> np.ndarray:
    """Balanced 1 p.u. source with angles [0, -120, +120] degrees."""
    return np.array([1.0, cmath.exp(-2j * cmath.pi / 3), cmath.exp(2j * cmath.pi / 3)])


def _bus_sort_key(bus_id: str):
    # numeric ids sort numerically, anything else lexically after them
    try:
        return (0, int(bus_id), bus_id)
    except ValueError:
        return (1, 0, bus_id)


@dataclass(frozen=True)
class PhaseIndexMap:
    """Flat indexing of (bus, phase) pairs, source phases first.

    Global indices 0..N+2 cover all pairs; 0..2 are the three source
    phases, 3..N+2 the non-source state entries.  ``state_index`` maps a
    non-source pair to its 0-based position in the state vector.
    """

    source_bus: str
    bus_phases: dict
    order: tuple  # (bus, phase) for global indices 0..N+2

    def __post_init__(self):
        object.__setattr__(
            self, "_lookup", {pair: i for i, pair in enumerate(self.order)}
        )

    @property
    def n_state(self) -> int:
        return len(self.order) - 3

    @property
    def source_indices(self) -> tuple:
        return (0, 1, 2)

    def global_index(self, bus: str, phase: str) -> int:
        try:
            return self._lookup[(bus, phase)]
        except KeyError:
            raise NetworkDataError(f"no phase {phase!r} at bus {bus!r}") from None

    def state_index(self, bus: str, phase: str) -> int:
        g = self.global_index(bus, phase)
        if g < 3:
            raise NetworkDataError(f"({bus}, {phase}) is a source phase, not a state")
        return g - 3

    def state_order(self) -> tuple:
        """(bus, phase) pairs in state-vector order."""
        return self.order[3:]

    def has_phase(self, bus: str, phase: str) -> bool:
        return (bus, phase) in self._lookup


@dataclass(frozen=True)
class LineSpec:
    """One line (or closed switch) with a symmetric per-phase impedance matrix."""

    from_bus: str
    to_bus: str
    phases: str  # subset of "abc", in order
    z: np.ndarray  # complex (P, P), per-unit

    def __post_init__(self):
        z = np.asarray(self.z, dtype=complex)
        object.__setattr__(self, "z", z)
        p = len(self.phases)
        if z.shape != (p, p):
            raise NetworkDataError(
                f"line {self.from_bus}-{self.to_bus}: impedance shape {z.shape} "
                f"does not match phases {self.phases!r}"
            )

    @property
    def name(self) -> str:
        return f"{self.from_bus}-{self.to_bus}"


@dataclass(frozen=True)
class NetworkModel:
    """Validated network: buses, lines, source voltage and bases.

    ``zero_injection`` lists the (bus, phase) pairs that carry no load and
    therefore act as exact current constraints.  ``base_load`` holds the
    nominal complex power injection (loads are negative) per state pair.
    """

    s_base_va: float
    v_base_v: float
    source_bus: str
    v_source: np.ndarray  # complex (3,)
    buses: dict  # bus id -> phase string
    lines: tuple  # of LineSpec
    zero_injection: frozenset  # of (bus, phase)
    base_load: dict  # (bus, phase) -> complex p.u. injection
    index_map: PhaseIndexMap

    @property
    def n_state(self) -> int:
        return self.index_map.n_state

    def base_load_vector(self) -> np.ndarray:
        """Base injections in state order (zero where no load)."""
        s = np.zeros(self.n_state, dtype=complex)
        for i, pair in enumerate(self.index_map.state_order()):
            s[i] = self.base_load.get(pair, 0.0)
        return s

    def zero_injection_state_indices(self) -> np.ndarray:
        """Sorted state indices of the zero-injection pairs."""
        idx = [self.index_map.state_index(b, p) for (b, p) in self.zero_injection]
        return np.array(sorted(idx), dtype=int)


def _build_index_map(source_bus: str, buses: dict) -> PhaseIndexMap:
    order = [(source_bus, ph) for ph in PHASE_ORDER]
    for bus in sorted(buses, key=_bus_sort_key):
        if bus == source_bus:
            continue
        for ph in buses[bus]:
            order.append((bus, ph))
    return PhaseIndexMap(source_bus=source_bus, bus_phases=dict(buses), order=tuple(order))


def _validate(net: NetworkModel) -> None:
    if net.source_bus not in net.buses:
        raise NetworkDataError(f"source bus {net.source_bus!r} not in bus list")
    if net.buses[net.source_bus] != "abc":
        raise NetworkDataError("source bus must carry all three phases")
    if net.s_base_va <= 0 or net.v_base_v <= 0:
        raise NetworkDataError("power and voltage bases must be positive")
    for bus, phases in net.buses.items():
        if not phases or any(p not in PHASE_ORDER for p in phases):
            raise NetworkDataError(f"bus {bus!r}: invalid phase set {phases!r}")
        if list(phases) != sorted(phases, key=PHASE_ORDER.index):
            raise NetworkDataError(f"bus {bus!r}: phases must be in 'abc' order")

    adjacency = {bus: set() for bus in net.buses}
    for line in net.lines:
        for end in (line.from_bus, line.to_bus):
            if end not in net.buses:
                raise NetworkDataError(f"line {line.name}: unknown bus {end!r}")
        for ph in line.phases:
            for end in (line.from_bus, line.to_bus):
                if ph not in net.buses[end]:
                    raise NetworkDataError(
                        f"line {line.name}: phase {ph!r} missing at bus {end!r}"
                    )
        asym = np.max(np.abs(line.z - line.z.T))
        scale = max(np.max(np.abs(line.z)), 1e-30)
        if asym > 1e-9 * scale:
            raise NetworkDataError(f"line {line.name}: impedance matrix not symmetric")
        if np.any(np.abs(np.diag(line.z)) == 0):
            raise NetworkDataError(f"line {line.name}: zero diagonal impedance entry")
        adjacency[line.from_bus].add(line.to_bus)
        adjacency[line.to_bus].add(line.from_bus)

    seen = {net.source_bus}
    stack = [net.source_bus]
    while stack:
        for nxt in adjacency[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    missing = sorted(set(net.buses) - seen, key=_bus_sort_key)
    if missing:
        raise NetworkDataError(f"graph not connected; unreachable buses: {missing}")

    for bus, ph in net.zero_injection:
        if bus == net.source_bus:
            raise NetworkDataError("source bus cannot be zero-injection")
        if bus not in net.buses or ph not in net.buses[bus]:
            raise NetworkDataError(f"zero-injection entry ({bus}, {ph}) does not exist")
    for (bus, ph), s in net.base_load.items():
        if bus not in net.buses or ph not in net.buses[bus]:
            raise NetworkDataError(f"load entry ({bus}, {ph}) does not exist")
        if (bus, ph) in net.zero_injection and s != 0:
            raise NetworkDataError(
                f"({bus}, {ph}) is flagged zero-injection but has base load {s}"
            )


def make_network(
    *,
    s_base_va: float,
    v_base_v: float,
    source_bus: str,
    v_source,
    buses: dict,
    lines,
    zero_injection,
    base_load=None,
) -> NetworkModel:
    """Assemble and validate a NetworkModel from in-memory pieces."""
    net = NetworkModel(
        s_base_va=float(s_base_va),
        v_base_v=float(v_base_v),
        source_bus=str(source_bus),
        v_source=np.asarray(v_source, dtype=complex).reshape(3),
        buses={str(b): str(p) for b, p in buses.items()},
        lines=tuple(lines),
        zero_injection=frozenset((str(b), str(p)) for b, p in zero_injection),
        base_load={(str(b), str(p)): complex(s) for (b, p), s in (base_load or {}).items()},
        index_map=_build_index_map(str(source_bus), {str(b): str(p) for b, p in buses.items()}),
    )
    _validate(net)
    return net


def network_from_dict(data: dict) -> NetworkModel:
    """Build a NetworkModel from the network JSON structure."""
    try:
        source = data["source"]
        source_bus = str(source["bus"])
        v_source = np.array([complex(re, im) for re, im in source["v_pu"]])
        buses = {}
        zero_injection = []
        base_load = {}
        for entry in data["buses"]:
            bus = str(entry["id"])
            phases = entry["phases"]
            buses[bus] = phases
            zi = entry.get("zero_injection", [False] * len(phases))
            if len(zi) != len(phases):
                raise NetworkDataError(
                    f"bus {bus!r}: zero_injection length does not match phases"
                )
            for ph, flag in zip(phases, zi):
                if flag:
                    zero_injection.append((bus, ph))
            load = entry.get("load_pu")
            if load is not None:
                if len(load) != len(phases):
                    raise NetworkDataError(
                        f"bus {bus!r}: load_pu length does not match phases"
                    )
                for ph, (re, im) in zip(phases, load):
                    base_load[(bus, ph)] = complex(re, im)
        buses[source_bus] = "abc"
        lines = []
        for entry in data["lines"]:
            phases = entry["phases"]
            z = np.array(
                [[complex(re, im) for re, im in row] for row in entry["z_pu"]]
            )
            lines.append(
                LineSpec(str(entry["from"]), str(entry["to"]), phases, z)
            )
    except KeyError as exc:
        raise NetworkDataError(f"missing required network field: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise NetworkDataError(f"malformed network data: {exc}") from exc
    return make_network(
        s_base_va=data.get("s_base_va", 1.0),
        v_base_v=data.get("v_base_v", 1.0),
        source_bus=source_bus,
        v_source=v_source,
        buses=buses,
        lines=lines,
        zero_injection=zero_injection,
        base_load=base_load,
    )


def network_to_dict(net: NetworkModel) -> dict:
    """Inverse of :func:`network_from_dict` on the data model."""
    buses = []
    for bus in sorted(net.buses, key=_bus_sort_key):
        if bus == net.source_bus:
            continue
        phases = net.buses[bus]
        entry = {
            "id": bus,
            "phases": phases,
            "zero_injection": [(bus, ph) in net.zero_injection for ph in phases],
        }
        if any((bus, ph) in net.base_load for ph in phases):
            entry["load_pu"] = [
                [net.base_load.get((bus, ph), 0j).real, net.base_load.get((bus, ph), 0j).imag]
                for ph in phases
            ]
        buses.append(entry)
    lines = [
        {
            "from": line.from_bus,
            "to": line.to_bus,
            "phases": line.phases,
            "z_pu": [[[z.real, z.imag] for z in row] for row in line.z],
        }
        for line in net.lines
    ]
    return {
        "s_base_va": net.s_base_va,
        "v_base_v": net.v_base_v,
        "source": {
            "bus": net.source_bus,
            "v_pu": [[v.real, v.imag] for v in net.v_source],
        },
        "buses": buses,
        "lines": lines,
    }


def load_network(file_path) -> NetworkModel:
    """Load and validate a network JSON file."""
    path = Path(file_path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise NetworkDataError(f"cannot read network file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise NetworkDataError(f"network file {path} is not valid JSON: {exc}") from exc
    return network_from_dict(data)


def save_network(net: NetworkModel, file_path) -> None:
    Path(file_path).write_text(json.dumps(network_to_dict(net), indent=1))


@dataclass(frozen=True)
class AdmittanceBlocks:
    """Admittance matrix partitioned by source / non-source indices.

    ``y`` is the full (N+3) x (N+3) matrix; ``ya`` (3x3), ``yb`` (3xN),
    ``yc`` (Nx3) and ``yd`` (NxN) are views of its blocks.  A LU
    factorization of ``yd`` is cached at construction and reused by every
    solve; rebuilding the blocks is the only way to refactorize.
    """

    y: np.ndarray
    ya: np.ndarray
    yb: np.ndarray
    yc: np.ndarray
    yd: np.ndarray
    index_map: PhaseIndexMap

    def __post_init__(self):
        # contiguous copies keep the hot matvec/solve paths on the BLAS
        # fast path (the partition blocks are strided views of y)
        for name in ("ya", "yb", "yc", "yd"):
            object.__setattr__(self, name, np.ascontiguousarray(getattr(self, name)))
        try:
            lu = scipy.linalg.lu_factor(self.yd, check_finite=False)
        except (ValueError, scipy.linalg.LinAlgError) as exc:
            raise SingularNetworkError(f"cannot factorize Y_d: {exc}") from exc
        diag = np.abs(np.diag(lu[0]))
        if diag.min() <= 1e-14 * max(diag.max(), 1.0):
            raise SingularNetworkError(
                "Y_d is numerically singular; the network is degenerate "
                "(isolated state entries or zero-impedance cycles)"
            )
        object.__setattr__(self, "_lu", lu)
        object.__setattr__(self, "_yd_conj", np.conj(self.yd))

    @property
    def yd_conj(self) -> np.ndarray:
        return self._yd_conj

    @property
    def n_state(self) -> int:
        return self.yd.shape[0]

    def solve_yd(self, rhs: np.ndarray, refine: bool = True) -> np.ndarray:
        """Solve yd @ x = rhs using the cached factorization.

        One step of iterative refinement keeps residuals near machine
        precision even when switch branches make yd badly scaled.
        """
        x = scipy.linalg.lu_solve(self._lu, rhs, check_finite=False)
        if refine:
            resid = rhs - self.yd @ x
            x = x + scipy.linalg.lu_solve(self._lu, resid, check_finite=False)
        return x


def build_admittance(net: NetworkModel) -> AdmittanceBlocks:
    """Assemble the admittance matrix from per-line phase admittance blocks.

    Each line contributes the inverse of its phase impedance matrix: entry
    (l, k) of inv(Z_line) is subtracted from the coupling positions and
    added to both end-bus diagonal blocks.  Phase pairs not covered by any
    line stay exactly zero, and each coupled group cancels exactly, so
    shunt-free networks have vanishing row sums.
    """
    pim = net.index_map
    n_all = len(pim.order)
    y = np.zeros((n_all, n_all), dtype=complex)
    # self entries are accumulated separately with compensated summation so
    # that each row sums to zero at the ulp level (shunt-free invariant)
    self_re = [[] for _ in range(n_all)]
    self_im = [[] for _ in range(n_all)]
    for line in net.lines:
        try:
            y_block = np.linalg.inv(line.z)
        except np.linalg.LinAlgError:
            raise NetworkDataError(
                f"line {line.name}: impedance matrix is singular"
            ) from None
        # the inverse of a symmetric matrix is symmetric; enforce it exactly
        # so Y is symmetric by construction, not merely to roundoff
        y_block = 0.5 * (y_block + y_block.T)
        p = len(line.phases)
        for li in range(p):
            for ki in range(p):
                adm = y_block[li, ki]
                gi = pim.global_index(line.from_bus, line.phases[li])
                gj = pim.global_index(line.to_bus, line.phases[ki])
                gi2 = pim.global_index(line.to_bus, line.phases[li])
                gj2 = pim.global_index(line.from_bus, line.phases[ki])
                y[gi, gj] -= adm
                y[gi2, gj2] -= adm
                if gi == gj2:
                    self_re[gi].append(adm.real)
                    self_im[gi].append(adm.imag)
                    self_re[gi2].append(adm.real)
                    self_im[gi2].append(adm.imag)
                else:
                    y[gi, gj2] += adm
                    y[gi2, gj] += adm
    for g in range(n_all):
        y[g, g] = complex(math.fsum(self_re[g]), math.fsum(self_im[g]))
    return AdmittanceBlocks(
        y=y,
        ya=y[:3, :3],
        yb=y[:3, 3:],
        yc=y[3:, :3],
        yd=y[3:, 3:],
        index_map=pim,
    )


def no_load_voltage(adm: AdmittanceBlocks, v_source: np.ndarray) -> np.ndarray:
    """Voltage with all injections zero: solves yd @ v0 = -yc @ v_source."""
    return adm.solve_yd(-adm.yc @ np.asarray(v_source, dtype=complex))


def compute_injections(adm: AdmittanceBlocks, v_source, v):
    """Injected current and power at the non-source pairs.

    Returns (I, S) with I = yc @ v_source + yd @ v and S = conj(I) * v.
    """
    v = np.asarray(v, dtype=complex)
    if v.shape != (adm.n_state,):
        raise NetworkDataError(
            f"voltage vector has shape {v.shape}, expected ({adm.n_state},)"
        )
    current = adm.yc @ np.asarray(v_source, dtype=complex) + adm.yd @ v
    return current, np.conj(current) * v
