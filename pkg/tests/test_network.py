"""Network model: loading, validation, admittance assembly, power-flow algebra."""

import math

import numpy as np
import pytest

from dsse.errors import NetworkDataError, SingularNetworkError
from dsse.network import (
    LineSpec,
    build_admittance,
    compute_injections,
    default_source_voltage,
    load_network,
    make_network,
    network_from_dict,
    network_to_dict,
    save_network,
)

TOY_Z = 0.01 + 0.05j
TOY_Y = 3.8461538461538463 - 19.230769230769234j  # 1 / (0.01 + 0.05j), by hand


def flat_profile(net):
    return np.array(
        [net.v_source["abc".index(ph)] for (_, ph) in net.index_map.state_order()]
    )


class TestAdmittance:
    def test_toy_admittance_matches_hand_computation(self, toy2):
        net, adm, _ = toy2
        assert abs(1.0 / TOY_Z - TOY_Y) < 1e-12
        ga = net.index_map.global_index("S", "a")
        gx = net.index_map.global_index("A", "a")
        assert adm.y[ga, gx] == pytest.approx(-TOY_Y, abs=1e-12)
        assert adm.y[gx, gx] == pytest.approx(TOY_Y, abs=1e-12)
        assert adm.yd.shape == (1, 1)

    def test_two_parallel_lines_double_the_diagonal(self):
        net = make_network(
            s_base_va=1e6,
            v_base_v=2400.0,
            source_bus="S",
            v_source=default_source_voltage(),
            buses={"S": "abc", "A": "a"},
            lines=[
                LineSpec("S", "A", "a", np.array([[TOY_Z]])),
                LineSpec("S", "A", "a", np.array([[TOY_Z]])),
            ],
            zero_injection=[("A", "a")],
        )
        adm = build_admittance(net)
        assert adm.yd[0, 0] == pytest.approx(2.0 / TOY_Z, abs=1e-12)

    def test_symmetry_is_exact(self, feeder):
        _, adm, _ = feeder
        assert np.max(np.abs(adm.y - adm.y.T)) == 0.0

    def test_row_sums_vanish_without_shunts(self, feeder):
        # compensated summation measures the matrix property itself,
        # independent of float accumulation order
        _, adm, _ = feeder
        worst = max(
            abs(complex(math.fsum(row.real), math.fsum(row.imag))) for row in adm.y
        )
        assert worst < 1e-12

    def test_line_blocks_are_negative_inverse_impedance(self, two_phase_net):
        net, adm, _ = two_phase_net
        line = net.lines[1]  # A-B
        expected = -np.linalg.inv(line.z)
        rows = [net.index_map.global_index("A", p) for p in "ab"]
        cols = [net.index_map.global_index("B", p) for p in "ab"]
        assert np.allclose(adm.y[np.ix_(rows, cols)], expected, atol=1e-14)

    def test_absent_connections_are_exact_zero(self, feeder):
        net, adm, _ = feeder
        # bus 3 (phase c lateral) has no line to bus 7
        g3 = net.index_map.global_index("3", "c")
        g7 = net.index_map.global_index("7", "a")
        assert adm.y[g3, g7] == 0.0

    def test_sparsity_matches_line_list(self, feeder):
        net, adm, _ = feeder
        pim = net.index_map
        connected = set()
        for line in net.lines:
            for pl in line.phases:
                for pk in line.phases:
                    gi = pim.global_index(line.from_bus, pl)
                    gj = pim.global_index(line.to_bus, pk)
                    connected.add((gi, gj))
                    connected.add((gj, gi))
        n_all = adm.y.shape[0]
        bus_of = [pim.order[i][0] for i in range(n_all)]
        for gi, gj in zip(*np.nonzero(adm.y)):
            if bus_of[gi] == bus_of[gj]:
                continue  # diagonal blocks
            assert (gi, gj) in connected

    @pytest.mark.filterwarnings("ignore::scipy.linalg.LinAlgWarning")
    def test_singular_yd_reports_degenerate_network(self):
        # phase b at bus A is declared but no line carries it
        with pytest.raises(SingularNetworkError):
            build_admittance(
                make_network(
                    s_base_va=1e6,
                    v_base_v=2400.0,
                    source_bus="S",
                    v_source=default_source_voltage(),
                    buses={"S": "abc", "A": "ab"},
                    lines=[LineSpec("S", "A", "a", np.array([[TOY_Z]]))],
                    zero_injection=[("A", "b")],
                )
            )


class TestNoLoadVoltage:
    def test_toy_no_load_equals_source(self, toy2):
        net, adm, v0 = toy2
        assert np.allclose(v0, flat_profile(net), atol=1e-14)

    def test_chain_no_load_is_flat(self, chain3):
        net, adm, v0 = chain3
        assert np.allclose(v0, flat_profile(net), atol=1e-14)

    def test_feeder_no_load_is_flat(self, feeder):
        net, adm, v0 = feeder
        assert np.max(np.abs(v0 - flat_profile(net))) < 1e-9


class TestComputeInjections:
    def test_no_load_voltage_gives_zero_current(self, feeder):
        net, adm, v0 = feeder
        current, power = compute_injections(adm, net.v_source, v0)
        assert np.max(np.abs(current)) < 1e-10
        assert np.max(np.abs(power)) < 1e-10

    def test_toy_hand_computation(self, toy2):
        net, adm, _ = toy2
        v = np.array([0.99 + 0.0j])
        current, power = compute_injections(adm, net.v_source, v)
        expected_i = TOY_Y * (0.99 - 1.0)
        assert current[0] == pytest.approx(expected_i, abs=1e-12)
        assert power[0] == pytest.approx(np.conj(expected_i) * 0.99, abs=1e-12)

    def test_dimension_mismatch(self, toy2):
        net, adm, _ = toy2
        with pytest.raises(NetworkDataError):
            compute_injections(adm, net.v_source, np.ones(5, dtype=complex))


class TestNetworkIO:
    def test_save_load_roundtrip_is_identity(self, feeder, tmp_path):
        net, _, _ = feeder
        path = tmp_path / "net.json"
        save_network(net, path)
        loaded = load_network(path)
        assert network_to_dict(loaded) == network_to_dict(net)

    def test_toy_roundtrip(self, toy2, tmp_path):
        net, _, _ = toy2
        path = tmp_path / "toy.json"
        save_network(net, path)
        assert network_to_dict(load_network(path)) == network_to_dict(net)

    def test_malformed_file_reports_parse_error(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(NetworkDataError, match="not valid JSON"):
            load_network(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(NetworkDataError, match="cannot read"):
            load_network(tmp_path / "absent.json")

    def test_asymmetric_impedance_names_the_line(self, toy2, tmp_path):
        net, _, _ = toy2
        data = network_to_dict(net)
        data["lines"][0]["phases"] = "ab"
        data["lines"][0]["z_pu"] = [
            [[0.01, 0.05], [0.001, 0.002]],
            [[0.005, 0.001], [0.01, 0.05]],
        ]
        data["buses"][0]["phases"] = "ab"
        data["buses"][0]["zero_injection"] = [False, False]
        data["buses"][0].pop("load_pu", None)
        with pytest.raises(NetworkDataError, match="S-A"):
            network_from_dict(data)

    def test_disconnected_graph_reports_unreachable_buses(self, toy2):
        net, _, _ = toy2
        data = network_to_dict(net)
        data["buses"].append({"id": "Z", "phases": "a", "zero_injection": [True]})
        with pytest.raises(NetworkDataError, match="unreachable.*Z"):
            network_from_dict(data)

    def test_zero_injection_flag_conflicts_with_load(self, toy2):
        net, _, _ = toy2
        data = network_to_dict(net)
        data["buses"][0]["zero_injection"] = [True]
        with pytest.raises(NetworkDataError, match="zero-injection"):
            network_from_dict(data)


class TestFeederStructure:
    def test_bus_and_state_counts(self, feeder):
        net, _, _ = feeder
        assert len(net.buses) == 124  # 123 plus the source
        assert net.n_state == 256

    def test_per_phase_counts_match_published_phasing(self, feeder):
        net, _, _ = feeder
        counts = {"a": 0, "b": 0, "c": 0}
        for _, ph in net.index_map.state_order():
            counts[ph] += 1
        assert counts == {"a": 90, "b": 78, "c": 88}

    def test_radial_edge_count(self, feeder):
        net, _, _ = feeder
        assert len(net.lines) == len(net.buses) - 1

    def test_total_base_load_matches_published_totals(self, feeder):
        net, _, _ = feeder
        s = net.base_load_vector()
        kw = -s.real.sum() * net.s_base_va / 3 / 1e3
        kvar = -s.imag.sum() * net.s_base_va / 3 / 1e3
        assert kw == pytest.approx(3490.0, abs=1e-6)
        assert kvar == pytest.approx(1920.0, abs=1e-6)

    def test_zero_injection_complements_loads(self, feeder):
        net, _, _ = feeder
        for pair in net.index_map.state_order():
            loaded = pair in net.base_load and net.base_load[pair] != 0
            assert loaded != (pair in net.zero_injection)
