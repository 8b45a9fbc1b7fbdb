"""Prior solvers: fixed-point iteration, rectangular mirror, WLS variant, artifact IO."""

import numpy as np
import pytest

from dsse.errors import NetworkDataError
from dsse.estimator import SolverConfig, rect_cov_to_complex
from dsse.measurements import PseudoMeasurements, sample_pseudo
from dsse.network import compute_injections
from dsse.prior import (
    fixed_point_power_flow,
    load_prior,
    rect_fixed_point_power_flow,
    save_prior,
    wls_prior,
)
from dsse.subspace import rect_kernel_basis

TOY_Z = 0.01 + 0.05j


def toy_fixed_point_oracle(s, v_source):
    """Closed-form solution of conj(s) = conj(I) V on the 2-bus network.

    With u = V / V_source, the balance reduces to |u|^2 - u = c where
    c = s / conj(y) / |V_source|^2, giving a solvable real quadratic.
    """
    y = 1.0 / TOY_Z
    c = s / np.conj(y) / abs(v_source) ** 2
    q = -c.imag
    p = 0.5 * (1.0 + np.sqrt(1.0 - 4.0 * (q * q - c.real)))
    return (p + 1j * q) * v_source


class TestFixedPoint:
    def test_no_load_converges_immediately(self, toy2):
        net, adm, v0 = toy2
        est = fixed_point_power_flow(
            PseudoMeasurements(np.zeros(1, dtype=complex), 0.0), adm, v0, net.v_source
        )
        assert est.iterations == 1
        assert est.converged
        assert np.array_equal(est.v, v0)
        assert np.all(est.cov == 0)

    def test_toy_matches_quadratic_oracle(self, toy2):
        net, adm, v0 = toy2
        s = -0.1 - 0.05j
        est = fixed_point_power_flow(np.array([s]), adm, v0, net.v_source)
        assert est.converged
        oracle = toy_fixed_point_oracle(s, net.v_source[0])
        assert abs(est.v[0] - oracle) < 1e-8

    def test_feeder_base_load(self, feeder):
        net, adm, v0 = feeder
        s = net.base_load_vector()
        est = fixed_point_power_flow(s, adm, v0, net.v_source)
        assert est.converged
        assert est.iterations <= 30
        _, power = compute_injections(adm, net.v_source, est.v)
        eps = net.zero_injection_state_indices()
        free = np.setdiff1d(np.arange(net.n_state), eps)
        assert np.max(np.abs(power[free] - s[free])) < 1e-8
        assert est.iterate_feasibility_max < 1e-10

    def test_fixed_point_certificate(self, feeder):
        net, adm, v0 = feeder
        cfg = SolverConfig()
        est = fixed_point_power_flow(net.base_load_vector(), adm, v0, net.v_source, cfg)
        _, power = compute_injections(adm, net.v_source, est.v)
        eps = net.zero_injection_state_indices()
        free = np.setdiff1d(np.arange(net.n_state), eps)
        assert np.max(np.abs(power[free] - net.base_load_vector()[free])) < 10 * cfg.tol

    def test_heavy_load_flags_divergence(self, toy2):
        net, adm, v0 = toy2
        est = fixed_point_power_flow(
            np.array([-30.0 - 15.0j]), adm, v0, net.v_source, SolverConfig(max_iter=40)
        )
        assert not est.converged
        assert est.v.shape == (1,)  # last iterate is still returned

    def test_prior_covariance_first_iteration_linearization(self, toy2):
        net, adm, v0 = toy2
        pseudo = PseudoMeasurements(np.array([-0.1 - 0.05j]), 0.3)
        est = fixed_point_power_flow(pseudo, adm, v0, net.v_source)
        y = 1.0 / TOY_Z
        expect = (1 / y) * (1 / np.conj(v0[0])) * pseudo.cov_diag()[0] * (
            1 / v0[0]
        ) * (1 / np.conj(y))
        assert est.cov[0, 0] == pytest.approx(expect, rel=1e-10)

    def test_converged_point_covariance_flag(self, toy2):
        net, adm, v0 = toy2
        pseudo = PseudoMeasurements(np.array([-0.1 - 0.05j]), 0.3)
        alt = fixed_point_power_flow(
            pseudo, adm, v0, net.v_source, SolverConfig(cov_at_first_iteration=False)
        )
        base = fixed_point_power_flow(pseudo, adm, v0, net.v_source)
        assert abs(alt.cov[0, 0]) > abs(base.cov[0, 0])  # lower voltage, larger gain

    def test_covariance_consistency_monte_carlo(self, toy2):
        # sample covariance of the prior under pseudo-load noise tracks the
        # first-order formula (loose tolerance: linearization only)
        net, adm, v0 = toy2
        s_true = np.array([-0.1 - 0.05j])
        sigma = 0.1
        reference = fixed_point_power_flow(
            PseudoMeasurements(s_true, sigma), adm, v0, net.v_source
        )
        draws = []
        for k in range(600):
            pseudo = sample_pseudo(s_true, sigma, 101, trial=k)
            est = fixed_point_power_flow(pseudo, adm, v0, net.v_source)
            draws.append(est.v[0])
        draws = np.array(draws)
        sample_cov = np.cov(draws - draws.mean(), bias=False)
        sample_cov = np.atleast_2d(sample_cov.real + 0j)
        rel = abs(sample_cov[0, 0] - reference.cov[0, 0]) / abs(reference.cov[0, 0])
        assert rel < 0.25


class TestRectFixedPoint:
    def test_no_load_returns_rect_particular(self, toy2):
        net, adm, v0 = toy2
        est = rect_fixed_point_power_flow(
            np.zeros(1, dtype=complex), adm, v0, net.v_source
        )
        assert np.allclose(est.v_rect, [v0[0].real, v0[0].imag], atol=0)

    @pytest.mark.parametrize("n_iter", [1, 2, 3, 5])
    def test_iterates_match_complex_path_per_step(self, two_phase_net, n_iter):
        net, adm, v0 = two_phase_net
        s = net.base_load_vector()
        cfg = SolverConfig(max_iter=n_iter, tol=1e-30)
        comp = fixed_point_power_flow(s, adm, v0, net.v_source, cfg)
        rect = rect_fixed_point_power_flow(s, adm, v0, net.v_source, cfg)
        assert np.max(np.abs(rect.v - comp.v)) < 1e-12

    def test_rect_covariance_complexifies_to_complex_covariance(self, toy2):
        # circular pseudo noise (|Re| == |Im|) makes both paths agree
        net, adm, v0 = toy2
        pseudo = PseudoMeasurements(np.array([-0.1 - 0.1j]), 0.4)
        comp = fixed_point_power_flow(pseudo, adm, v0, net.v_source)
        rect = rect_fixed_point_power_flow(pseudo, adm, v0, net.v_source)
        assert np.max(np.abs(rect_cov_to_complex(rect.cov_rect) - comp.cov)) < 1e-8

    def test_feeder_state_matches_complex(self, feeder):
        # both paths approximate the same fixed point to the step tolerance;
        # they may stop one iteration apart
        net, adm, v0 = feeder
        s = net.base_load_vector()
        comp = fixed_point_power_flow(s, adm, v0, net.v_source)
        rect = rect_fixed_point_power_flow(s, adm, v0, net.v_source)
        assert np.max(np.abs(rect.v - comp.v)) < 1e-7


class TestWlsPrior:
    def test_zero_load_zero_noise_is_flat_start(self, two_phase_net):
        net, adm, v0 = two_phase_net
        eps = net.zero_injection_state_indices()
        basis = rect_kernel_basis(adm, eps, v0)
        pseudo = PseudoMeasurements(np.zeros(adm.n_state, dtype=complex), 0.0)
        est = wls_prior(pseudo, adm, basis, net.v_source)
        assert est.iterations == 1
        # S(V0) evaluates to ~1e-17 in floats, so the step is a few ulps
        assert np.max(np.abs(est.v - v0)) < 1e-14

    def test_agrees_with_fixed_point_on_consistent_data(self, toy2):
        net, adm, v0 = toy2
        basis = rect_kernel_basis(adm, [], v0)
        pseudo = PseudoMeasurements(np.array([-0.1 - 0.05j]), 0.5)
        wls = wls_prior(pseudo, adm, basis, net.v_source)
        fp = fixed_point_power_flow(pseudo, adm, v0, net.v_source)
        assert np.max(np.abs(wls.v - fp.v)) < 1e-7

    def test_variants_agree_on_feeder(self, feeder, feeder_bases):
        net, adm, v0 = feeder
        _, rect_basis = feeder_bases
        pseudo = PseudoMeasurements(net.base_load_vector(), 0.5)
        wls = wls_prior(pseudo, adm, rect_basis, net.v_source)
        fp = fixed_point_power_flow(pseudo, adm, v0, net.v_source)
        assert wls.converged
        assert np.max(np.abs(wls.v - fp.v)) < 1e-6

    def test_objective_non_increasing(self, feeder, feeder_bases):
        net, adm, v0 = feeder
        _, rect_basis = feeder_bases
        pseudo = PseudoMeasurements(net.base_load_vector(), 0.5)
        est = wls_prior(pseudo, adm, rect_basis, net.v_source)
        history = np.array(est.objective_history)
        assert np.all(np.diff(history) <= 1e-12)

    def test_feasibility_attached(self, feeder, feeder_bases):
        net, adm, v0 = feeder
        _, rect_basis = feeder_bases
        pseudo = PseudoMeasurements(net.base_load_vector(), 0.5)
        est = wls_prior(pseudo, adm, rect_basis, net.v_source)
        assert est.feasibility < 1e-8


class TestPriorArtifact:
    def test_roundtrip(self, toy2, tmp_path):
        net, adm, v0 = toy2
        pseudo = PseudoMeasurements(np.array([-0.1 - 0.05j]), 0.5)
        est = fixed_point_power_flow(pseudo, adm, v0, net.v_source)
        from dsse.network import save_network

        net_file = tmp_path / "net.json"
        save_network(net, net_file)
        artifact = tmp_path / "prior.json"
        save_prior(est, artifact, network_file=net_file)
        loaded = load_prior(artifact, network_file=net_file)
        assert np.allclose(loaded.v, est.v, atol=0)
        assert np.allclose(loaded.cov, est.cov, atol=1e-16)
        assert loaded.converged == est.converged

    def test_network_hash_guard(self, toy2, tmp_path):
        net, adm, v0 = toy2
        from dsse.network import save_network

        net_file = tmp_path / "net.json"
        save_network(net, net_file)
        est = fixed_point_power_flow(np.array([-0.1 - 0.05j]), adm, v0, net.v_source)
        artifact = tmp_path / "prior.json"
        save_prior(est, artifact, network_file=net_file)
        net_file.write_text(net_file.read_text() + " ")
        with pytest.raises(NetworkDataError, match="different network"):
            load_prior(artifact, network_file=net_file)
