import numpy as np
import pytest

from spin_model import (
    MODEL,
    HamiltonianSpec,
    all_configurations,
    apply_hamiltonian,
    check_configurations,
    connections,
    dense_matrix,
    hamiltonian_operator,
    index_to_spins,
    row_from_connections,
    spec_from_config,
    spins_to_index,
)
from utils import ConfigurationShapeError, ResourceLimitError


def test_single_spin_y_matrix_elements():
    H = HamiltonianSpec.single_spin_y()
    up = np.array([1])
    elements = {int(spins_to_index(s)): e for s, e in connections(H, up) if e != 0}
    # <up|Y|down> = -i
    assert elements == {1: -1j}
    down = np.array([-1])
    elements = {int(spins_to_index(s)): e for s, e in connections(H, down) if e != 0}
    assert elements == {0: 1j}


def test_single_spin_dense_is_pauli_y():
    mat = dense_matrix(HamiltonianSpec.single_spin_y())
    np.testing.assert_allclose(mat, np.array([[0, -1j], [1j, 0]]))


def test_tfim_diagonal_and_flip_elements():
    H = HamiltonianSpec(MODEL.tfim, 2, J=1.0, g=0.5)
    conn = connections(H, np.array([1, 1]))
    assert conn.elements[0] == -1.0
    assert len(conn) == 3
    assert all(e == 0.5 for e in conn.elements[1:])


def test_no_flips_without_field():
    H = HamiltonianSpec(MODEL.tfim, 3, J=1.0, g=0.0)
    conn = connections(H, np.array([1, -1, 1]))
    assert len(conn) == 1
    assert conn.elements[0] == 2.0


@pytest.mark.parametrize('model', [MODEL.tfim, MODEL.tilted_ising])
def test_rows_agree_with_dense(model):
    H = HamiltonianSpec(model, 4, J=0.7, g=1.3)
    mat = dense_matrix(H)
    for s in all_configurations(4):
        np.testing.assert_allclose(row_from_connections(H, s), mat[int(spins_to_index(s))], atol=1e-14)


@pytest.mark.parametrize('model', [MODEL.tfim, MODEL.tilted_ising])
def test_dense_hermitian(model):
    mat = dense_matrix(HamiltonianSpec(model, 5, J=1.0, g=0.4))
    np.testing.assert_allclose(mat, mat.conj().T, atol=1e-14)


def test_matrix_free_products_match_dense(tilted4, rng):
    psi = rng.normal(size=16) + 1j * rng.normal(size=16)
    mat = dense_matrix(tilted4)
    np.testing.assert_allclose(apply_hamiltonian(tilted4, psi), mat @ psi, atol=1e-12)
    np.testing.assert_allclose(hamiltonian_operator(tilted4).matvec(psi), mat @ psi, atol=1e-12)


def test_encoding_is_bijective():
    index = np.arange(32)
    np.testing.assert_array_equal(spins_to_index(index_to_spins(index, 5)), index)
    assert np.all(all_configurations(3)[0] == 1)


def test_dense_cap():
    with pytest.raises(ResourceLimitError):
        dense_matrix(HamiltonianSpec(MODEL.tfim, 15), cap=14)


def test_configuration_checks():
    H = HamiltonianSpec(MODEL.tfim, 3)
    with pytest.raises(ConfigurationShapeError):
        check_configurations(H, np.array([1, 1]))
    with pytest.raises(ConfigurationShapeError):
        check_configurations(H, np.array([1, 0, 1]))


def test_single_spin_needs_one_site():
    with pytest.raises(ValueError):
        HamiltonianSpec(MODEL.single_spin_y, 2)
    with pytest.raises(ValueError):
        spec_from_config('single_spin_y', 7, J=0.5, g=2.0)
    H = spec_from_config('single_spin_y', 1, J=0.5, g=2.0)
    assert (H.coupling, H.field) == (0.0, 1.0)
