"""
Spin-1/2 chains with matrix-free local connectivity.

Configurations are stored as arrays of spins in {+1, -1}. The integer label of a
configuration has bit i set when site i points down, so index 0 is the all-up state.
"""
from typing import List
from dataclasses import dataclass
from enum import Enum, auto
import logging

import numpy as np
from scipy.sparse.linalg import LinearOperator

from utils import ConfigurationShapeError, ResourceLimitError

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

DENSE_CAP = 14
MATVEC_CAP = 24


class MODEL(Enum):
    single_spin_y = auto()
    tilted_ising = auto()
    tfim = auto()

    @staticmethod
    def from_string(s):
        try:
            return MODEL[s.lower()]
        except KeyError:
            raise ValueError(f'unknown model {s}')


@dataclass(frozen=True)
class HamiltonianSpec:
    """
    Open chain of N sites.
      tilted_ising:  -J sum_i Z_i Z_{i+1} + g sum_i Y_i
      tfim:          -J sum_i Z_i Z_{i+1} + g sum_i X_i
      single_spin_y: Y on one site (tilted_ising with J = 0, g = 1)
    """
    model: MODEL
    n_sites: int
    J: float = 0.0
    g: float = 1.0

    def __post_init__(self):
        if self.n_sites < 1:
            raise ValueError(f'need at least one site, got {self.n_sites}')
        if self.model == MODEL.single_spin_y and self.n_sites != 1:
            raise ValueError('single_spin_y is defined on exactly one site')

    @classmethod
    def single_spin_y(cls):
        return cls(MODEL.single_spin_y, 1, J=0.0, g=1.0)

    @property
    def coupling(self) -> float:
        return 0.0 if self.model == MODEL.single_spin_y else self.J

    @property
    def field(self) -> float:
        return 1.0 if self.model == MODEL.single_spin_y else self.g

    @property
    def dim(self) -> int:
        return 2 ** self.n_sites


@dataclass
class LocalConnections:
    """(s', H_{s,s'}) pairs of one row; the diagonal entry comes first."""
    configs: List[np.ndarray]
    elements: List[complex]

    def __len__(self):
        return len(self.configs)

    def __iter__(self):
        return iter(zip(self.configs, self.elements))


def spins_to_index(spins: np.ndarray) -> np.ndarray:
    spins = np.asarray(spins)
    bits = (spins < 0).astype(np.int64)
    weights = np.left_shift(np.int64(1), np.arange(spins.shape[-1], dtype=np.int64))
    return bits @ weights


def index_to_spins(index, n_sites: int) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    bits = (index[..., None] >> np.arange(n_sites, dtype=np.int64)) & 1
    return (1 - 2 * bits).astype(np.int8)


def all_configurations(n_sites: int) -> np.ndarray:
    return index_to_spins(np.arange(2 ** n_sites, dtype=np.int64), n_sites)


def check_configurations(H: HamiltonianSpec, spins: np.ndarray) -> np.ndarray:
    spins = np.asarray(spins)
    if spins.shape[-1] != H.n_sites:
        raise ConfigurationShapeError(f'configuration of length {spins.shape[-1]} for a {H.n_sites}-site model')
    if not np.all(np.abs(spins) == 1):
        raise ConfigurationShapeError('spins must be +1 or -1')
    return spins


def diagonal_batch(H: HamiltonianSpec, spins: np.ndarray) -> np.ndarray:
    spins = np.asarray(spins, dtype=np.float64)
    if H.n_sites < 2 or H.coupling == 0.0:
        return np.zeros(spins.shape[:-1], dtype=np.complex128)
    bonds = np.sum(spins[..., :-1] * spins[..., 1:], axis=-1)
    return (-H.coupling * bonds).astype(np.complex128)


def flip_elements_batch(H: HamiltonianSpec, spins: np.ndarray) -> np.ndarray:
    """H_{s, flip_i(s)} for every site i, shape (..., N)."""
    spins = np.asarray(spins, dtype=np.float64)
    if H.model == MODEL.tfim:
        return np.full(spins.shape, H.field, dtype=np.complex128)
    # <up|Y|down> = -i, <down|Y|up> = +i
    return -1j * H.field * spins


def flipped_configurations(spins: np.ndarray) -> np.ndarray:
    """All single-flip neighbours, shape (..., N, N) with axis -2 the flipped site."""
    spins = np.asarray(spins)
    n_sites = spins.shape[-1]
    flips = np.repeat(spins[..., None, :], n_sites, axis=-2).copy()
    idx = np.arange(n_sites)
    flips[..., idx, idx] *= -1
    return flips


def connections(H: HamiltonianSpec, s: np.ndarray) -> LocalConnections:
    s = check_configurations(H, np.asarray(s).reshape(-1))
    configs = [s.copy()]
    elements = [complex(diagonal_batch(H, s[None])[0])]
    if H.field != 0.0:
        flips = flipped_configurations(s)
        elems = flip_elements_batch(H, s)
        for i in range(H.n_sites):
            configs.append(flips[i])
            elements.append(complex(elems[i]))
    return LocalConnections(configs, elements)


def _check_dense(H: HamiltonianSpec, cap: int):
    if H.n_sites > cap:
        raise ResourceLimitError(f'{H.n_sites} sites exceed the dense cap of {cap}')


def dense_matrix(H: HamiltonianSpec, cap: int = DENSE_CAP) -> np.ndarray:
    _check_dense(H, cap)
    dim = H.dim
    index = np.arange(dim, dtype=np.int64)
    spins = index_to_spins(index, H.n_sites)
    mat = np.zeros((dim, dim), dtype=np.complex128)
    mat[index, index] = diagonal_batch(H, spins)
    if H.field != 0.0:
        elems = flip_elements_batch(H, spins)
        for i in range(H.n_sites):
            mat[index, index ^ (1 << i)] = elems[:, i]
    return mat


def apply_hamiltonian(H: HamiltonianSpec, psi: np.ndarray, cap: int = MATVEC_CAP) -> np.ndarray:
    """Matrix-free H @ psi over the full basis."""
    _check_dense(H, cap)
    psi = np.asarray(psi, dtype=np.complex128)
    index = np.arange(H.dim, dtype=np.int64)
    spins = index_to_spins(index, H.n_sites)
    out = diagonal_batch(H, spins) * psi
    if H.field != 0.0:
        elems = flip_elements_batch(H, spins)
        for i in range(H.n_sites):
            out += elems[:, i] * psi[index ^ (1 << i)]
    return out


def hamiltonian_operator(H: HamiltonianSpec, cap: int = MATVEC_CAP) -> LinearOperator:
    _check_dense(H, cap)
    index = np.arange(H.dim, dtype=np.int64)
    spins = index_to_spins(index, H.n_sites)
    diag = diagonal_batch(H, spins)
    elems = flip_elements_batch(H, spins) if H.field != 0.0 else None
    partners = [index ^ (1 << i) for i in range(H.n_sites)]

    def matvec(v):
        v = np.asarray(v, dtype=np.complex128).reshape(-1)
        out = diag * v
        if elems is not None:
            for i, partner in enumerate(partners):
                out += elems[:, i] * v[partner]
        return out

    # H is Hermitian, so the adjoint product is the same map
    return LinearOperator((H.dim, H.dim), matvec=matvec, rmatvec=matvec, dtype=np.complex128)


def row_from_connections(H: HamiltonianSpec, s: np.ndarray) -> np.ndarray:
    row = np.zeros(H.dim, dtype=np.complex128)
    for config, element in connections(H, s):
        row[int(spins_to_index(config))] += element
    return row


def spec_from_config(model: str, n_sites: int, J: float = 0.0, g: float = 1.0) -> HamiltonianSpec:
    kind = model if isinstance(model, MODEL) else MODEL.from_string(model)
    if kind == MODEL.single_spin_y:
        # fixed H = Y; the site count is still checked
        return HamiltonianSpec(kind, int(n_sites), J=0.0, g=1.0)
    return HamiltonianSpec(kind, int(n_sites), J=float(J), g=float(g))
