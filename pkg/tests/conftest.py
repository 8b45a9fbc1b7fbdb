"""Shared fixtures: toy networks and the 123-bus feeder."""

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from dsse import feeder123
from dsse.network import (
    LineSpec,
    build_admittance,
    default_source_voltage,
    make_network,
    no_load_voltage,
)
from dsse.subspace import complex_kernel_basis, rect_kernel_basis

TOY_Z = 0.01 + 0.05j


@pytest.fixture(scope="session", autouse=True)
def single_threaded_blas():
    # thread sync costs dominate at these matrix sizes
    with threadpool_limits(limits=1):
        yield


@pytest.fixture(scope="session")
def toy2():
    """Source plus one single-phase bus over one line (z = 0.01 + 0.05j)."""
    net = make_network(
        s_base_va=1e6,
        v_base_v=2400.0,
        source_bus="S",
        v_source=default_source_voltage(),
        buses={"S": "abc", "A": "a"},
        lines=[LineSpec("S", "A", "a", np.array([[TOY_Z]]))],
        zero_injection=[],
        base_load={("A", "a"): -0.1 - 0.05j},
    )
    adm = build_admittance(net)
    v0 = no_load_voltage(adm, net.v_source)
    return net, adm, v0


@pytest.fixture(scope="session")
def chain3():
    """Single-phase chain source-A-B with equal lines; A is zero-injection."""
    net = make_network(
        s_base_va=1e6,
        v_base_v=2400.0,
        source_bus="S",
        v_source=default_source_voltage(),
        buses={"S": "abc", "A": "a", "B": "a"},
        lines=[
            LineSpec("S", "A", "a", np.array([[TOY_Z]])),
            LineSpec("A", "B", "a", np.array([[TOY_Z]])),
        ],
        zero_injection=[("A", "a")],
        base_load={("B", "a"): -0.08 - 0.04j},
    )
    adm = build_admittance(net)
    v0 = no_load_voltage(adm, net.v_source)
    return net, adm, v0


@pytest.fixture(scope="session")
def two_phase_net():
    """Small two-bus network with a coupled two-phase line and one constraint."""
    z = np.array([[0.02 + 0.06j, 0.005 + 0.02j], [0.005 + 0.02j, 0.021 + 0.058j]])
    net = make_network(
        s_base_va=1e6,
        v_base_v=2400.0,
        source_bus="S",
        v_source=default_source_voltage(),
        buses={"S": "abc", "A": "ab", "B": "ab"},
        lines=[
            LineSpec("S", "A", "ab", z),
            LineSpec("A", "B", "ab", 1.2 * z),
        ],
        zero_injection=[("A", "a"), ("A", "b")],
        base_load={("B", "a"): -0.05 - 0.02j, ("B", "b"): -0.04 - 0.025j},
    )
    adm = build_admittance(net)
    v0 = no_load_voltage(adm, net.v_source)
    return net, adm, v0


@pytest.fixture(scope="session")
def feeder():
    net = feeder123.build_network()
    adm = build_admittance(net)
    v0 = no_load_voltage(adm, net.v_source)
    return net, adm, v0


@pytest.fixture(scope="session")
def feeder_bases(feeder):
    net, adm, v0 = feeder
    eps = net.zero_injection_state_indices()
    return complex_kernel_basis(adm, eps, v0), rect_kernel_basis(adm, eps, v0)
