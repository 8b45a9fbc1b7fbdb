"""Zero-injection constraints as an orthonormal kernel basis.

The feasible voltages form an affine set V = F x + V0 where the columns
of F span the kernel of the constrained admittance rows.  Both a complex
basis (for the holomorphic update path) and a rectangular real basis (for
the mixed linear/nonlinear path) are provided, together with lift/project
maps between coordinates and voltage space.

Bases are not unique; downstream code only ever relies on the projector
F F*, so tests compare projectors rather than raw bases.  Bases are
immutable and cheap to rebuild, so they are never serialized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RankDeficiencyError
from .network import AdmittanceBlocks

KERNEL_RTOL = 1e-8  # singular values below this times sigma_max count as zero


def realify_matrix(m: np.ndarray) -> np.ndarray:
    """Real 2x2-block representation [[Re, -Im], [Im, Re]] of a complex matrix."""
    return np.block([[m.real, -m.imag], [m.imag, m.real]])


def realify_vector(v: np.ndarray) -> np.ndarray:
    return np.concatenate([v.real, v.imag])


def complexify_vector(v_rect: np.ndarray) -> np.ndarray:
    n = v_rect.shape[0] // 2
    return v_rect[:n] + 1j * v_rect[n:]


@dataclass(frozen=True)
class SubspaceBasis:
    """Complex orthonormal kernel basis with particular solution V0."""

    basis: np.ndarray  # complex (N, N - |eps|)
    v_particular: np.ndarray  # complex (N,)
    eps: np.ndarray  # constrained state indices, sorted

    @property
    def n_state(self) -> int:
        return self.basis.shape[0]

    @property
    def n_coords(self) -> int:
        return self.basis.shape[1]


@dataclass(frozen=True)
class RectSubspaceBasis:
    """Real kernel basis of the realified constraint block."""

    basis: np.ndarray  # real (2N, 2N - 2|eps|)
    v_particular: np.ndarray  # real (2N,)
    eps: np.ndarray

    @property
    def n_state(self) -> int:
        return self.basis.shape[0] // 2

    @property
    def n_coords(self) -> int:
        return self.basis.shape[1]


def _kernel_columns(rows: np.ndarray, n_cols: int, expected: int) -> np.ndarray:
    if rows.shape[0] == 0:
        return np.eye(n_cols, dtype=rows.dtype)
    _, sing, vh = np.linalg.svd(rows, full_matrices=True)
    cutoff = KERNEL_RTOL * sing[0] if sing.size else 0.0
    rank = int(np.sum(sing > cutoff))
    kernel_dim = n_cols - rank
    if kernel_dim != expected:
        raise RankDeficiencyError(
            f"constraint rows are rank deficient: kernel dimension {kernel_dim}, "
            f"expected {expected} (rank {rank} of {rows.shape[0]} rows)"
        )
    return vh[rank:].conj().T


def complex_kernel_basis(adm: AdmittanceBlocks, eps, v0: np.ndarray) -> SubspaceBasis:
    """Orthonormal basis of ker((Y_d)_eps) via SVD, with V0 as particular solution."""
    eps = np.array(sorted(int(i) for i in eps), dtype=int)
    n = adm.n_state
    if eps.size >= n:
        raise RankDeficiencyError(f"{eps.size} constraints leave no free coordinates")
    basis = _kernel_columns(adm.yd[eps, :], n, n - eps.size)
    return SubspaceBasis(basis=basis, v_particular=np.asarray(v0, dtype=complex), eps=eps)


def rect_kernel_basis(adm: AdmittanceBlocks, eps, v0: np.ndarray) -> RectSubspaceBasis:
    """Kernel basis of the realified constraint block [[Re, -Im], [Im, Re]]."""
    eps = np.array(sorted(int(i) for i in eps), dtype=int)
    n = adm.n_state
    if eps.size >= n:
        raise RankDeficiencyError(f"{eps.size} constraints leave no free coordinates")
    rows = realify_matrix(adm.yd[eps, :])
    basis = _kernel_columns(rows, 2 * n, 2 * (n - eps.size))
    return RectSubspaceBasis(
        basis=basis,
        v_particular=realify_vector(np.asarray(v0, dtype=complex)),
        eps=eps,
    )


def lift(basis, x: np.ndarray) -> np.ndarray:
    """Map subspace coordinates to a (feasible) voltage vector: F x + V0."""
    x = np.asarray(x)
    if x.shape != (basis.basis.shape[1],):
        raise ValueError(
            f"coordinate vector has shape {x.shape}, expected ({basis.basis.shape[1]},)"
        )
    return basis.basis @ x + basis.v_particular


def project(basis, v: np.ndarray) -> np.ndarray:
    """Coordinates of the closest feasible point: F* (v - V0)."""
    v = np.asarray(v)
    if isinstance(basis, RectSubspaceBasis):
        return basis.basis.T @ (v - basis.v_particular)
    return basis.basis.conj().T @ (v - basis.v_particular)


def feasibility_residual(adm: AdmittanceBlocks, eps, v_source, v) -> float:
    """Inf-norm of the constrained injection currents (Y_d)_eps v + (Y_c)_eps v_source."""
    eps = np.asarray(sorted(int(i) for i in eps), dtype=int)
    if eps.size == 0:
        return 0.0
    v = np.asarray(v)
    if v.dtype != complex and v.shape[0] == 2 * adm.n_state:
        v = complexify_vector(v)
    resid = adm.yd[eps, :] @ v + adm.yc[eps, :] @ np.asarray(v_source, dtype=complex)
    return float(np.max(np.abs(resid)))
