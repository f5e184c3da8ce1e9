import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topoqst.coupling import CouplingSet, classify_couplings, coupling_matrix
from topoqst.geometry import ChainParams, build_chain
from topoqst.hamiltonian import (bloch_hamiltonian, build_hamiltonian, hamiltonian_from_geometry,
                                 model_tag, read_matrix_csv, ssh_hamiltonian, sublattice_signs,
                                 write_matrix_csv)


def test_ssh_matrix_entries():
    H = ssh_hamiltonian(0.3, 1.0, 5, delta=0.2).H
    expected = np.diag([0.2, -0.2, 0.2, -0.2, 0.2])
    for i, t in enumerate([0.3, 1.0, 0.3, 1.0]):
        expected[i, i + 1] = expected[i + 1, i] = t
    np.testing.assert_array_equal(H, expected)


def test_tags():
    assert model_tag(0, "nn") == "SSH"
    assert model_tag(0, "full") == "eSSH"
    assert model_tag(0.1, "nn") == "RM"
    assert model_tag(-0.1, "full") == "eRM"
    assert sublattice_signs(4).tolist() == [1, -1, 1, -1]


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        build_hamiltonian(np.zeros((4, 4)), N=5)
    with pytest.raises(ValueError):
        build_hamiltonian(np.zeros((4, 3)))
    with pytest.raises(ValueError):
        build_hamiltonian(CouplingSet.nearest_neighbour(1, 1))


def test_nn_mode_drops_long_range():
    g = build_chain(ChainParams(8, b=0.7, h=-0.2))
    H = hamiltonian_from_geometry(g, 0.0, "nn").H
    V = coupling_matrix(g)
    assert np.count_nonzero(np.triu(H)) == 7
    np.testing.assert_array_equal(np.diag(H, 1), np.diag(V, 1))


@settings(max_examples=25, deadline=None)
@given(b=st.floats(0.25, 0.75), h=st.floats(-0.3, 0.3), delta=st.floats(-2, 2))
def test_hermitian_and_C3_linear(b, h, delta):
    g = build_chain(ChainParams(7, b=b, h=h))
    H1 = hamiltonian_from_geometry(g, delta).H
    assert np.array_equal(H1, H1.T)
    H7 = hamiltonian_from_geometry(g, 7.3 * delta, C3=7.3).H
    np.testing.assert_allclose(H7, 7.3 * H1, rtol=1e-13, atol=1e-13)


def test_bloch_nn_bands():
    """h(k) of the two-site cell has bands +-sqrt(delta^2 + |J' + J e^{ik}|^2)."""
    cset = CouplingSet.nearest_neighbour(0.4, 1.1, delta=0.3)
    k = np.linspace(-np.pi, np.pi, 33)
    E = np.linalg.eigvalsh(bloch_hamiltonian(cset, k))
    expected = np.sqrt(0.09 + 0.4**2 + 1.1**2 + 2 * 0.4 * 1.1 * np.cos(k))
    np.testing.assert_allclose(E[:, 1], expected, atol=1e-12)
    np.testing.assert_allclose(E[:, 0], -expected, atol=1e-12)


def test_bloch_matches_periodic_supercell():
    """Bulk bands from a ring of many cells sit on the Bloch bands."""
    cset = classify_couplings(build_chain(ChainParams(12, b=0.6, h=-0.2)))
    M = 3
    n_cells = 16
    N = 2 * n_cells
    H = np.zeros((N, N))
    for c in range(n_cells):
        for m in range(M):
            H[2 * c, (2 * (c + m) + 1) % N] += cset.J_prime[m]
            H[2 * c + 1, (2 * (c + m + 1)) % N] += cset.J[m]
            H[2 * c, (2 * (c + m + 1)) % N] += cset.J_even[m]
            H[2 * c + 1, (2 * (c + m + 1) + 1) % N] += cset.J_even[m]
    H = H + H.T
    ring = np.sort(np.linalg.eigvalsh(H))
    k = 2 * np.pi * np.arange(n_cells) / n_cells
    bloch = np.sort(np.linalg.eigvalsh(bloch_hamiltonian(cset, k, M=M)).ravel())
    np.testing.assert_allclose(ring, bloch, atol=1e-10)


def test_matrix_csv_roundtrip(tmp_path):
    H = hamiltonian_from_geometry(build_chain(ChainParams(6, b=0.3, h=0.1)), 0.4)
    np.testing.assert_array_equal(read_matrix_csv(write_matrix_csv(H, tmp_path / "h.csv")), H.H)
