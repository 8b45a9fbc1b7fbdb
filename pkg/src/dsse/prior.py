"""Offline prior computation from pseudo-measurements and constraints.

Two variants produce the same fixed point on consistent data:
  (a) ``wls_prior`` runs the subspace Newton-WLS with the pseudo
      injections as the only measurements;
  (b) ``fixed_point_power_flow`` iterates the implicit power-flow map
      V <- Yd^-1 diag(conj V)^-1 conj(S) + V0, which stays feasible at
      every iterate when the constrained injections are zero.

The prior covariance of (b) uses the first-iteration linearization at V0
(a config flag switches to the converged point).  The result can be
serialized to a versioned artifact so the online step never refactorizes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, NetworkDataError
from .estimator import (
    SolverConfig,
    StateEstimate,
    make_estimate,
    rect_cov_to_complex,
    stack_measurements,
    wls_subspace,
)
from .measurements import PseudoMeasurements
from .network import AdmittanceBlocks, compute_injections
from .subspace import RectSubspaceBasis, realify_matrix, realify_vector

ARTIFACT_VERSION = 1


def _as_pseudo(s) -> PseudoMeasurements:
    if isinstance(s, PseudoMeasurements):
        return s
    return PseudoMeasurements(s=np.asarray(s, dtype=complex), sigma=0.0)


def _constrained_indices(s: np.ndarray) -> np.ndarray:
    return np.flatnonzero(s == 0)


def fixed_point_power_flow(
    pseudo,
    adm: AdmittanceBlocks,
    v0: np.ndarray,
    v_source,
    cfg: SolverConfig | None = None,
) -> StateEstimate:
    """Iterate the implicit power-flow map from the no-load voltage.

    ``pseudo`` is a PseudoMeasurements or a plain injection vector with
    exact zeros at the constrained entries.  Non-convergence within the
    iteration budget returns the last iterate flagged diverged.
    """
    cfg = cfg or SolverConfig()
    pseudo = _as_pseudo(pseudo)
    s = pseudo.s
    v0 = np.asarray(v0, dtype=complex)
    eps = _constrained_indices(s)

    v = v0.copy()
    converged = False
    iterations = 0
    worst_feas = 0.0
    for iterations in range(1, cfg.max_iter + 1):
        v_next = adm.solve_yd(np.conj(s) / np.conj(v)) + v0
        if eps.size:
            current = adm.yc @ np.asarray(v_source, dtype=complex) + adm.yd @ v_next
            worst_feas = max(worst_feas, float(np.max(np.abs(current[eps]))))
        step = np.max(np.abs(v_next - v))
        v = v_next
        if step < cfg.tol * max(np.max(np.abs(v)), 1.0):
            converged = True
            break

    if pseudo.sigma > 0:
        lin_point = v0 if cfg.cov_at_first_iteration else v
        scaled = np.diag(1.0 / np.conj(lin_point))
        propagate = adm.solve_yd(scaled)  # Yd^-1 diag(conj V)^-1
        cov = (propagate * pseudo.cov_diag()) @ propagate.conj().T
    else:
        cov = np.zeros((adm.n_state, adm.n_state), dtype=complex)

    current, _ = compute_injections(adm, v_source, v)
    feas = float(np.max(np.abs(current[eps]))) if eps.size else 0.0
    return make_estimate(
        v=v,
        cov=cov,
        representation="complex",
        feasibility=feas,
        iterate_feasibility_max=worst_feas,
        iterations=iterations,
        converged=converged,
    )


def _rect_b_matrix(yd_inv_rect: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Real propagation matrix of the rectangular iteration at voltage v."""
    mag2 = np.abs(v) ** 2
    inv_mag = np.concatenate([1.0 / mag2, 1.0 / mag2])
    rot = np.block(
        [
            [np.diag(v.real), np.diag(v.imag)],
            [np.diag(v.imag), -np.diag(v.real)],
        ]
    )
    return yd_inv_rect @ (inv_mag[:, None] * rot)


def rect_fixed_point_power_flow(
    pseudo,
    adm: AdmittanceBlocks,
    v0: np.ndarray,
    v_source,
    cfg: SolverConfig | None = None,
) -> StateEstimate:
    """Rectangular mirror of the fixed-point iteration.

    The iterates complexify to exactly the complex iterates; the
    covariance is propagated in real variables, B0 S B0^T with the
    per-part pseudo noise, which is the rectangular ground truth when
    real/imaginary noise is not circular.
    """
    cfg = cfg or SolverConfig()
    pseudo = _as_pseudo(pseudo)
    s = pseudo.s
    v0 = np.asarray(v0, dtype=complex)
    eps = _constrained_indices(s)
    n = adm.n_state

    yd_inv = adm.solve_yd(np.eye(n, dtype=complex))
    yd_inv_rect = realify_matrix(yd_inv)
    s_rect = realify_vector(s)
    v_rect0 = realify_vector(v0)

    v_rect = v_rect0.copy()
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iter + 1):
        v = v_rect[:n] + 1j * v_rect[n:]
        v_rect_next = _rect_b_matrix(yd_inv_rect, v) @ s_rect + v_rect0
        step = np.max(np.abs(v_rect_next - v_rect))
        v_rect = v_rect_next
        if step < cfg.tol * max(np.max(np.abs(v_rect)), 1.0):
            converged = True
            break

    lin_point = v0 if cfg.cov_at_first_iteration else v_rect[:n] + 1j * v_rect[n:]
    b0 = _rect_b_matrix(yd_inv_rect, lin_point)
    noise_diag = pseudo.sigma**2 * np.concatenate([s.real**2, s.imag**2])
    cov_rect = b0 @ (noise_diag[:, None] * b0.T)

    v = v_rect[:n] + 1j * v_rect[n:]
    current, _ = compute_injections(adm, v_source, v)
    feas = float(np.max(np.abs(current[eps]))) if eps.size else 0.0
    return make_estimate(
        v_rect=v_rect,
        cov_rect=cov_rect,
        cov=rect_cov_to_complex(cov_rect),
        representation="rect",
        feasibility=feas,
        iterations=iterations,
        converged=converged,
    )


def wls_prior(
    pseudo: PseudoMeasurements,
    adm: AdmittanceBlocks,
    basis_rect: RectSubspaceBasis,
    v_source,
    cfg: SolverConfig | None = None,
) -> StateEstimate:
    """Prior via subspace Newton-WLS on the pseudo injections alone."""
    stacked, model = stack_measurements(pseudo, adm, v_source, basis_rect.eps)
    estimate = wls_subspace(stacked, model, basis_rect, cfg)
    current, _ = compute_injections(adm, v_source, estimate.v)
    eps = basis_rect.eps
    feas = float(np.max(np.abs(current[eps]))) if eps.size else 0.0
    return StateEstimate(
        v=estimate.v,
        v_rect=estimate.v_rect,
        cov=estimate.cov,
        cov_rect=estimate.cov_rect,
        representation="rect",
        feasibility=feas,
        iterations=estimate.iterations,
        converged=estimate.converged,
        objective_history=estimate.objective_history,
    )


# ---------------------------------------------------------------------------
# prior artifact serialization

def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _pack_lower(mat: np.ndarray, complex_valued: bool):
    rows = []
    for i in range(mat.shape[0]):
        if complex_valued:
            rows.append([[mat[i, j].real, mat[i, j].imag] for j in range(i + 1)])
        else:
            rows.append([float(mat[i, j]) for j in range(i + 1)])
    return rows


def _unpack_lower(rows, complex_valued: bool) -> np.ndarray:
    n = len(rows)
    mat = np.zeros((n, n), dtype=complex if complex_valued else float)
    for i, row in enumerate(rows):
        for j, entry in enumerate(row):
            value = complex(entry[0], entry[1]) if complex_valued else float(entry)
            mat[i, j] = value
            mat[j, i] = np.conj(value) if complex_valued else value
    return mat


def save_prior(estimate: StateEstimate, file_path, network_file=None) -> None:
    """Serialize a prior (state + covariance) with a network-file hash guard."""
    data = {
        "version": ARTIFACT_VERSION,
        "representation": estimate.representation,
        "v": [[z.real, z.imag] for z in estimate.v],
        "feasibility": estimate.feasibility,
        "iterations": estimate.iterations,
        "converged": estimate.converged,
    }
    if network_file is not None:
        data["network_sha256"] = file_sha256(network_file)
    if estimate.cov is not None:
        data["cov_lower"] = _pack_lower(estimate.cov, complex_valued=True)
    if estimate.cov_rect is not None:
        data["cov_rect_lower"] = _pack_lower(estimate.cov_rect, complex_valued=False)
    Path(file_path).write_text(json.dumps(data))


def load_prior(file_path, network_file=None) -> StateEstimate:
    """Load a prior artifact, verifying the network hash when provided."""
    path = Path(file_path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read prior artifact {path}: {exc}") from exc
    if data.get("version") != ARTIFACT_VERSION:
        raise ConfigError(
            f"prior artifact {path} has version {data.get('version')}, "
            f"expected {ARTIFACT_VERSION}"
        )
    if network_file is not None and "network_sha256" in data:
        actual = file_sha256(network_file)
        if actual != data["network_sha256"]:
            raise NetworkDataError(
                f"prior artifact {path} was built for a different network file "
                f"(hash {data['network_sha256'][:12]}.. != {actual[:12]}..)"
            )
    v = np.array([complex(re, im) for re, im in data["v"]])
    cov = _unpack_lower(data["cov_lower"], True) if "cov_lower" in data else None
    cov_rect = (
        _unpack_lower(data["cov_rect_lower"], False)
        if "cov_rect_lower" in data
        else None
    )
    return make_estimate(
        v=v,
        cov=cov,
        cov_rect=cov_rect,
        representation=data.get("representation", "complex"),
        feasibility=data.get("feasibility"),
        iterations=int(data.get("iterations", 0)),
        converged=bool(data.get("converged", True)),
    )
