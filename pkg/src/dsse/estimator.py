"""Online estimation: subspace Newton-WLS and single-shot covariance updates.

Three interchangeable update paths are provided:
  * ``wls_subspace``: iterative weighted least squares over the feasible
    subspace coordinates (handles any measurement mix);
  * ``linear_update_complex`` / ``subspace_wls_update``: two algebraically
    equivalent closed forms for fusing synchronized (complex linear)
    measurements into a feasible prior;
  * ``mixed_update_rect``: one linearized gain step in rectangular
    variables for mixed synchronized/magnitude measurement sets.

The measurement offset ``d`` (source-column contribution of the affine
sensor maps) is subtracted from the readings before any gain algebra.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NotConvergedError, UnobservableError
from .measurements import (
    MeasurementFrame,
    MeasurementPlan,
    PseudoMeasurements,
    eval_linear,
    eval_nonlinear,
    measurement_covariances,
    nonlinear_jacobian,
)
from .network import AdmittanceBlocks, compute_injections
from .subspace import (
    RectSubspaceBasis,
    SubspaceBasis,
    complexify_vector,
    realify_matrix,
    realify_vector,
)

WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True)
class SolverConfig:
    """Iteration controls shared by the iterative solvers."""

    tol: float = 1e-8  # relative step inf-norm
    max_iter: int = 50
    damping: bool = True  # backtracking line search on Newton steps
    max_halvings: int = 20
    cov_at_first_iteration: bool = True  # linearize prior covariance at V0

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("tol must be positive and max_iter at least 1")


@dataclass(frozen=True)
class StateEstimate:
    """Voltage estimate with estimation-error covariance.

    Both representations of the state are always populated; covariances
    are carried in whichever representation the producing solver works in
    (``cov`` complex Hermitian, ``cov_rect`` real symmetric).
    """

    v: np.ndarray  # complex (N,)
    v_rect: np.ndarray  # real (2N,)
    cov: np.ndarray | None = None
    cov_rect: np.ndarray | None = None
    representation: str = "complex"
    feasibility: float | None = None
    iterate_feasibility_max: float | None = None  # worst residual over all iterates
    iterations: int = 0
    converged: bool = True
    objective_history: tuple = ()


def make_estimate(v=None, v_rect=None, **kwargs) -> StateEstimate:
    if v is None and v_rect is None:
        raise ValueError("need v or v_rect")
    if v is None:
        v_rect = np.asarray(v_rect, dtype=float)
        v = complexify_vector(v_rect)
    elif v_rect is None:
        v = np.asarray(v, dtype=complex)
        v_rect = realify_vector(v)
    return StateEstimate(v=np.asarray(v, dtype=complex),
                         v_rect=np.asarray(v_rect, dtype=float), **kwargs)


@dataclass(frozen=True)
class UpdateResult:
    """Posterior estimate plus the gain and innovation that produced it."""

    estimate: StateEstimate
    gain: np.ndarray
    innovation: np.ndarray
    innovation_cov: np.ndarray


@dataclass(frozen=True)
class StackedMeasurements:
    """Measurement vector and weight matrix in the stacked real layout.

    Layout order: [Re pseudo; Im pseudo; Re z_measL; Im z_measL; z_measNL],
    with the pseudo block restricted to the unconstrained entries.
    """

    z: np.ndarray  # real (m,)
    weight: np.ndarray  # real (m, m), symmetric PSD noise covariance
    layout: tuple  # of (block name, length)


@dataclass(frozen=True)
class RectMeasurementModel:
    """Evaluator and Jacobian of the stacked measurement function."""

    evaluate: object  # v_rect -> real (m,)
    jacobian: object  # v_rect -> real (m, 2N)


def psd_factor(mat: np.ndarray, context: str = "matrix"):
    """Cholesky-factor a symmetric/Hermitian PSD matrix, adding jitter on failure.

    Near-duplicate sensors can make innovation covariances numerically
    singular; a jitter of 1e-12 * trace/n is added and a warning recorded.
    """
    try:
        return scipy.linalg.cho_factor(mat, check_finite=False)
    except scipy.linalg.LinAlgError:
        n = mat.shape[0]
        jitter = 1e-12 * max(np.trace(mat).real / max(n, 1), 1.0)
        warnings.warn(
            f"{context} is numerically singular; regularizing with jitter {jitter:.3e}",
            RuntimeWarning,
            stacklevel=2,
        )
        return scipy.linalg.cho_factor(
            mat + jitter * np.eye(n, dtype=mat.dtype), check_finite=False
        )


def solve_psd(mat: np.ndarray, rhs: np.ndarray, context: str = "matrix"):
    """Solve against a symmetric/Hermitian PSD matrix with jitter fallback."""
    return scipy.linalg.cho_solve(psd_factor(mat, context), rhs, check_finite=False)


def rect_cov_to_complex(cov_rect: np.ndarray) -> np.ndarray:
    """Complex covariance from a rectangular one: Srr + Sii - j*Sri + j*Sri^T."""
    n = cov_rect.shape[0] // 2
    s_rr = cov_rect[:n, :n]
    s_ii = cov_rect[n:, n:]
    s_ri = cov_rect[:n, n:]
    return s_rr + s_ii - 1j * s_ri + 1j * s_ri.T


def complex_cov_to_rect(cov: np.ndarray) -> np.ndarray:
    """Rectangular covariance of a circular complex error with covariance cov."""
    return 0.5 * np.block([[cov.real, -cov.imag], [cov.imag, cov.real]])


def injection_jacobian_rect(adm: AdmittanceBlocks, v_source, v: np.ndarray,
                            out: np.ndarray | None = None,
                            scratch: np.ndarray | None = None) -> np.ndarray:
    """Jacobian of [Re S; Im S] with respect to [Re v; Im v] at voltage v.

    ``out`` (2N x 2N real) and ``scratch`` (N x N complex) buffers may be
    supplied to avoid reallocation in iterative solvers.
    """
    n = adm.n_state
    current = adm.yc @ np.asarray(v_source, dtype=complex) + adm.yd @ v
    coupled = np.multiply(v[:, None], adm.yd_conj, out=scratch)
    diag_idx = np.arange(n)
    jac = out if out is not None else np.empty((2 * n, 2 * n))
    jac[:n, :n] = coupled.real
    jac[:n, n:] = coupled.imag
    jac[n:, :n] = coupled.imag
    np.negative(coupled.real, out=jac[n:, n:])
    conj_i = np.conj(current)
    jac[diag_idx, diag_idx] += conj_i.real
    jac[diag_idx, n + diag_idx] -= conj_i.imag
    jac[n + diag_idx, diag_idx] += conj_i.imag
    jac[n + diag_idx, n + diag_idx] += conj_i.real
    return jac


def _lenient_nl_jacobian(plan: MeasurementPlan, v: np.ndarray) -> np.ndarray:
    """Magnitude-sensor Jacobian with degenerate rows zeroed.

    At the flat start the current magnitudes are exactly zero and the
    gradient is undefined; those rows are skipped for the iteration (zero
    row) and re-enter once the iterate leaves the no-load point.
    """
    w = plan.c_nl @ v + plan.d_nl
    mags = np.abs(w)
    rows = np.zeros((plan.n_nl, 2 * plan.n_state))
    ok = mags >= 1e-9
    if np.any(ok):
        wc = (np.conj(w[ok]) / mags[ok])[:, None] * plan.c_nl[ok]
        rows[ok] = np.hstack([wc.real, -wc.imag])
    return rows


def stack_measurements(
    pseudo: PseudoMeasurements,
    adm: AdmittanceBlocks,
    v_source,
    eps,
    plan: MeasurementPlan | None = None,
    frame: MeasurementFrame | None = None,
    circular: bool = False,
):
    """Assemble the stacked (z, W) data and its measurement model.

    With no plan/frame the stack holds the pseudo block only (the prior
    problem).  Weights come from the measured values, floored so W stays
    invertible; ``circular`` drops the real/imaginary correlation blocks
    of the synchronized noise covariance.
    """
    eps = np.asarray(sorted(int(i) for i in eps), dtype=int)
    n = adm.n_state
    free = np.setdiff1d(np.arange(n), eps)
    v_source = np.asarray(v_source, dtype=complex)

    blocks_z = [pseudo.s.real[free], pseudo.s.imag[free]]
    layout = [("pseudo_re", free.size), ("pseudo_im", free.size)]
    w_pseudo = pseudo.sigma**2 * np.concatenate(
        [pseudo.s.real[free] ** 2, pseudo.s.imag[free] ** 2]
    )
    weight_blocks = [np.diag(np.maximum(w_pseudo, WEIGHT_FLOOR))]

    if plan is not None and frame is not None:
        _, cov_rect, cov_nl = measurement_covariances(plan, frame, circular=circular)
        if plan.n_lin:
            blocks_z += [frame.z_lin.real, frame.z_lin.imag]
            layout += [("measL_re", plan.n_lin), ("measL_im", plan.n_lin)]
            weight_blocks.append(cov_rect)
        if plan.n_nl:
            blocks_z.append(frame.z_nl)
            layout.append(("measNL", plan.n_nl))
            weight_blocks.append(cov_nl)

    z = np.concatenate(blocks_z)
    weight = scipy.linalg.block_diag(*weight_blocks)
    stacked = StackedMeasurements(z=z, weight=weight, layout=tuple(layout))

    has_lin = plan is not None and frame is not None and plan.n_lin > 0
    has_nl = plan is not None and frame is not None and plan.n_nl > 0

    def evaluate(v_rect: np.ndarray) -> np.ndarray:
        v = complexify_vector(v_rect)
        _, s = compute_injections(adm, v_source, v)
        parts = [s.real[free], s.imag[free]]
        if has_lin:
            pred = eval_linear(plan, v)
            parts += [pred.real, pred.imag]
        if has_nl:
            parts.append(eval_nonlinear(plan, v))
        return np.concatenate(parts)

    # persistent buffers: fresh multi-MB allocations per iteration are
    # expensive, and the synchronized rows are constant anyway
    m_total = sum(length for _, length in layout)
    jac_buf = np.empty((m_total, 2 * n))
    inj_buf = np.empty((2 * n, 2 * n))
    coupled_buf = np.empty((n, n), dtype=complex)
    row0 = 2 * free.size
    if has_lin:
        jac_buf[row0 : row0 + 2 * plan.n_lin] = realify_matrix(plan.c_lin)
        row0 += 2 * plan.n_lin
    nl_row0 = row0

    def jacobian(v_rect: np.ndarray) -> np.ndarray:
        v = complexify_vector(v_rect)
        injection_jacobian_rect(adm, v_source, v, out=inj_buf, scratch=coupled_buf)
        jac_buf[: free.size] = inj_buf[free, :]
        jac_buf[free.size : 2 * free.size] = inj_buf[n + free, :]
        if has_nl:
            jac_buf[nl_row0:] = _lenient_nl_jacobian(plan, v)
        return jac_buf

    return stacked, RectMeasurementModel(evaluate=evaluate, jacobian=jacobian)


def wls_subspace(
    stacked: StackedMeasurements,
    model: RectMeasurementModel,
    basis_rect: RectSubspaceBasis,
    cfg: SolverConfig | None = None,
) -> StateEstimate:
    """Newton WLS over the feasible subspace coordinates.

    Minimizes ||z - h(F x + V0)||_{W^-1} over the real coordinates x; no
    Lagrange multipliers are needed because every iterate is feasible by
    construction.  Returns the lifted state with covariance
    F (H^T W^-1 H)^-1 F^T at the final iterate.
    """
    cfg = cfg or SolverConfig()
    f_tilde = basis_rect.basis
    k = basis_rect.n_coords
    m = stacked.z.shape[0]
    x = np.zeros(k)
    v_rect = basis_rect.v_particular.copy()

    w_factor = psd_factor(stacked.weight, context="measurement weight matrix")
    w_scratch = np.empty((m, k), order="F")
    h_buf = np.empty((m, k))
    normal = np.empty((k, k))
    normal_scratch = np.empty((k, k))

    def w_solve_vec(rhs):
        return scipy.linalg.cho_solve(w_factor, rhs, check_finite=False)

    resid = stacked.z - model.evaluate(v_rect)
    objective = float(resid @ w_solve_vec(resid))
    history = [objective]

    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iter + 1):
        jac = model.jacobian(v_rect)
        np.matmul(jac, f_tilde, out=h_buf)
        np.copyto(w_scratch, h_buf)
        wi_h = scipy.linalg.cho_solve(w_factor, w_scratch, overwrite_b=True,
                                      check_finite=False)
        np.matmul(h_buf.T, wi_h, out=normal)
        np.copyto(normal_scratch, normal)
        try:
            factor = scipy.linalg.cho_factor(normal_scratch, overwrite_a=True,
                                             check_finite=False)
        except scipy.linalg.LinAlgError:
            rank = np.linalg.matrix_rank(normal, hermitian=True)
            raise UnobservableError(
                f"normal matrix is singular: {k - rank} unobservable directions "
                f"out of {k} subspace coordinates"
            ) from None
        dx = scipy.linalg.cho_solve(factor, wi_h.T @ resid, check_finite=False)

        step = 1.0
        accepted = False
        for _ in range(cfg.max_halvings + 1):
            x_try = x + step * dx
            v_try = f_tilde @ x_try + basis_rect.v_particular
            resid_try = stacked.z - model.evaluate(v_try)
            obj_try = float(resid_try @ w_solve_vec(resid_try))
            if obj_try <= objective or not cfg.damping:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break  # no descent left at this linearization; flag non-convergence

        x, v_rect, resid, objective = x_try, v_try, resid_try, obj_try
        history.append(objective)
        if np.max(np.abs(step * dx)) < cfg.tol * max(np.max(np.abs(x)), 1.0):
            converged = True
            break

    cov_coords = scipy.linalg.cho_solve(
        scipy.linalg.cho_factor(normal, check_finite=False), np.eye(k), check_finite=False
    )
    cov_rect = f_tilde @ cov_coords @ f_tilde.T
    return make_estimate(
        v_rect=v_rect,
        cov_rect=cov_rect,
        cov=rect_cov_to_complex(cov_rect),
        representation="rect",
        iterations=iterations,
        converged=converged,
        objective_history=tuple(history),
    )


def _check_prior_feasible(prior: StateEstimate) -> None:
    if prior.feasibility is not None and prior.feasibility > 1e-6:
        raise NotConvergedError(
            f"prior is not feasible (residual {prior.feasibility:.3e} > 1e-6); "
            "the linear update would leave the constraint subspace"
        )


def linear_update_complex(
    prior: StateEstimate,
    plan: MeasurementPlan,
    frame: MeasurementFrame,
    basis: SubspaceBasis | None = None,
) -> UpdateResult:
    """Minimum-variance complex gain update with synchronized measurements.

    K = cov C* (C cov C* + cov_meas)^-1 applied to the offset-corrected
    innovation.  A feasible prior with subspace-supported covariance stays
    feasible because the gain columns lie in the constraint kernel.
    """
    if plan.n_nl:
        raise UnobservableError(
            "linear update requires an all-synchronized plan; "
            f"{plan.n_nl} magnitude sensors present"
        )
    _check_prior_feasible(prior)
    cov = prior.cov
    c_mat = plan.c_lin
    cov_c = cov @ c_mat.conj().T
    innov_cov = c_mat @ cov_c + np.diag(frame.var_lin.astype(complex))
    gain = solve_psd(innov_cov.conj().T, cov_c.conj().T,
                     context="innovation covariance").conj().T
    innovation = frame.z_lin - (c_mat @ prior.v + plan.d_lin)
    v_post = prior.v + gain @ innovation
    cov_post = (
        cov
        + gain @ innov_cov @ gain.conj().T
        - gain @ cov_c.conj().T
        - cov_c @ gain.conj().T
    )
    estimate = make_estimate(
        v=v_post,
        cov=cov_post,
        representation="complex",
        iterations=1,
        converged=True,
    )
    return UpdateResult(estimate=estimate, gain=gain, innovation=innovation,
                        innovation_cov=innov_cov)


def subspace_wls_update(
    prior: StateEstimate,
    plan: MeasurementPlan,
    frame: MeasurementFrame,
    basis: SubspaceBasis,
) -> UpdateResult:
    """Closed-form WLS update in subspace coordinates (equivalent gain-free form).

    Solves the stacked problem over x: prior pull-back x_prior = F*(v - V0)
    weighted by (F* cov F)^-1 against the offset-corrected measurements.
    """
    if plan.n_nl:
        raise UnobservableError(
            "subspace WLS update requires an all-synchronized plan; "
            f"{plan.n_nl} magnitude sensors present"
        )
    _check_prior_feasible(prior)
    f_mat = basis.basis
    x_prior = f_mat.conj().T @ (prior.v - basis.v_particular)
    cov_x = f_mat.conj().T @ prior.cov @ f_mat
    g_mat = plan.c_lin @ f_mat
    z_shift = frame.z_lin - plan.d_lin - plan.c_lin @ basis.v_particular
    w_inv_diag = 1.0 / frame.var_lin

    k = f_mat.shape[1]
    cov_x_inv = solve_psd(cov_x, np.eye(k, dtype=complex), context="prior coordinate covariance")
    normal = cov_x_inv + g_mat.conj().T @ (w_inv_diag[:, None] * g_mat)
    rhs = cov_x_inv @ x_prior + g_mat.conj().T @ (w_inv_diag * z_shift)
    x_post = solve_psd(normal, rhs, context="update normal matrix")
    cov_coords = solve_psd(normal, np.eye(k, dtype=complex), context="update normal matrix")

    v_post = f_mat @ x_post + basis.v_particular
    cov_post = f_mat @ cov_coords @ f_mat.conj().T
    innovation = frame.z_lin - (plan.c_lin @ prior.v + plan.d_lin)
    innov_cov = plan.c_lin @ prior.cov @ plan.c_lin.conj().T + np.diag(
        frame.var_lin.astype(complex)
    )
    # effective gain on the measurement vector (equals the optimal gain)
    gain = f_mat @ (cov_coords @ (g_mat.conj().T * w_inv_diag))
    estimate = make_estimate(
        v=v_post,
        cov=cov_post,
        representation="complex",
        iterations=1,
        converged=True,
    )
    return UpdateResult(estimate=estimate, gain=gain,
                        innovation=innovation, innovation_cov=innov_cov)


def mixed_update_rect(
    prior: StateEstimate,
    plan: MeasurementPlan,
    frame: MeasurementFrame,
    circular: bool = False,
    iterated: int = 0,
) -> UpdateResult:
    """Single linearized gain step in rectangular variables.

    Stacks the realified synchronized rows with the magnitude-sensor
    Jacobian at the prior, applies the rectangular optimal gain and the
    first-order posterior covariance.  ``iterated`` re-linearizes up to
    that many extra times (off by default).
    """
    if prior.cov_rect is None:
        raise ValueError("mixed update needs a prior with rectangular covariance")
    _check_prior_feasible(prior)
    cov_p = prior.cov_rect
    _, cov_rect_l, cov_nl = measurement_covariances(plan, frame, circular=circular)

    v_rect = prior.v_rect
    gain = innovation = innov_cov = c_lnl = None
    for _ in range(max(int(iterated), 0) + 1):
        v = complexify_vector(v_rect)
        blocks = []
        innov_parts = []
        if plan.n_lin:
            pred = eval_linear(plan, v)
            blocks.append(realify_matrix(plan.c_lin))
            innov_parts += [(frame.z_lin - pred).real, (frame.z_lin - pred).imag]
        if plan.n_nl:
            blocks.append(nonlinear_jacobian(plan, v_rect))
            innov_parts.append(frame.z_nl - eval_nonlinear(plan, v))
        c_lnl = np.vstack(blocks)
        innovation = np.concatenate(innov_parts)
        cov_meas = scipy.linalg.block_diag(
            *([cov_rect_l] if plan.n_lin else []), *([cov_nl] if plan.n_nl else [])
        )
        cov_c = cov_p @ c_lnl.T
        innov_cov = c_lnl @ cov_c + cov_meas
        gain = solve_psd(innov_cov, cov_c.T, context="innovation covariance").T
        v_rect = prior.v_rect + gain @ innovation

    cov_post = (
        cov_p
        + gain @ innov_cov @ gain.T
        - gain @ cov_c.T
        - cov_c @ gain.T
    )
    estimate = make_estimate(
        v_rect=v_rect,
        cov_rect=cov_post,
        representation="rect",
        iterations=1 + max(int(iterated), 0),
        converged=True,
    )
    return UpdateResult(estimate=estimate, gain=gain, innovation=innovation,
                        innovation_cov=innov_cov)


class LinearUpdater:
    """Precomputed gain precursors for repeated complex linear updates.

    The products cov C* and C cov C* depend only on the prior and the
    plan, so they are cached once (offline) and each frame costs one
    small innovation-covariance solve.
    """

    def __init__(self, prior: StateEstimate, plan: MeasurementPlan):
        if plan.n_nl:
            raise UnobservableError("LinearUpdater requires an all-synchronized plan")
        _check_prior_feasible(prior)
        self.prior = prior
        self.plan = plan
        self._cov_c = prior.cov @ plan.c_lin.conj().T
        self._c_cov_c = plan.c_lin @ self._cov_c
        self._pred = plan.c_lin @ prior.v + plan.d_lin

    def update(self, frame: MeasurementFrame) -> UpdateResult:
        innov_cov = self._c_cov_c + np.diag(frame.var_lin.astype(complex))
        gain = solve_psd(innov_cov.conj().T, self._cov_c.conj().T,
                         context="innovation covariance").conj().T
        innovation = frame.z_lin - self._pred
        v_post = self.prior.v + gain @ innovation
        cov_post = (
            self.prior.cov
            + gain @ innov_cov @ gain.conj().T
            - gain @ self._cov_c.conj().T
            - self._cov_c @ gain.conj().T
        )
        estimate = make_estimate(v=v_post, cov=cov_post, representation="complex",
                                 iterations=1, converged=True)
        return UpdateResult(estimate=estimate, gain=gain, innovation=innovation,
                            innovation_cov=innov_cov)


class MixedUpdater:
    """Precomputed precursors for repeated mixed rectangular updates."""

    def __init__(self, prior: StateEstimate, plan: MeasurementPlan,
                 circular: bool = False):
        if prior.cov_rect is None:
            raise ValueError("mixed update needs a prior with rectangular covariance")
        _check_prior_feasible(prior)
        self.prior = prior
        self.plan = plan
        self.circular = circular
        blocks = []
        if plan.n_lin:
            blocks.append(realify_matrix(plan.c_lin))
        if plan.n_nl:
            blocks.append(nonlinear_jacobian(plan, prior.v_rect))
        self._c_lnl = np.vstack(blocks)
        self._cov_c = prior.cov_rect @ self._c_lnl.T
        self._c_cov_c = self._c_lnl @ self._cov_c
        self._pred_lin = plan.c_lin @ prior.v + plan.d_lin if plan.n_lin else None
        self._pred_nl = eval_nonlinear(plan, prior.v) if plan.n_nl else None

    def update(self, frame: MeasurementFrame) -> UpdateResult:
        plan = self.plan
        _, cov_rect_l, cov_nl = measurement_covariances(plan, frame, circular=self.circular)
        cov_meas = scipy.linalg.block_diag(
            *([cov_rect_l] if plan.n_lin else []), *([cov_nl] if plan.n_nl else [])
        )
        innov_parts = []
        if plan.n_lin:
            diff = frame.z_lin - self._pred_lin
            innov_parts += [diff.real, diff.imag]
        if plan.n_nl:
            innov_parts.append(frame.z_nl - self._pred_nl)
        innovation = np.concatenate(innov_parts)
        innov_cov = self._c_cov_c + cov_meas
        gain = solve_psd(innov_cov, self._cov_c.T, context="innovation covariance").T
        v_rect = self.prior.v_rect + gain @ innovation
        cov_post = (
            self.prior.cov_rect
            + gain @ innov_cov @ gain.T
            - gain @ self._cov_c.T
            - self._cov_c @ gain.T
        )
        estimate = make_estimate(v_rect=v_rect, cov_rect=cov_post, representation="rect",
                                 iterations=1, converged=True)
        return UpdateResult(estimate=estimate, gain=gain, innovation=innovation,
                            innovation_cov=innov_cov)
