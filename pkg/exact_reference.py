"""
Exact state-vector propagation and dense comparison metrics.
"""
from typing import Dict, List, Optional, Tuple
from dataclasses import dataclass
import logging

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.sparse.linalg import LinearOperator
from tqdm import tqdm

from spin_model import MATVEC_CAP, HamiltonianSpec, all_configurations, hamiltonian_operator
from models.ansatz import VariationalState, amplitudes_batch
from utils import (
    ConfigurationShapeError,
    NumericDomainError,
    PreconditionError,
    ResourceLimitError,
    UndefinedStateError,
)

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

KRYLOV_DIM = 30
KRYLOV_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class DenseState:
    amplitudes: np.ndarray

    def __post_init__(self):
        amp = np.array(self.amplitudes, dtype=np.complex128).reshape(-1)
        if not np.all(np.isfinite(amp)):
            raise NumericDomainError('non-finite amplitudes in dense state')
        if amp.size == 0 or not np.any(amp != 0):
            raise UndefinedStateError('dense state has zero norm')
        amp.setflags(write=False)
        object.__setattr__(self, 'amplitudes', amp)

    @property
    def n_sites(self) -> int:
        return int(np.log2(self.amplitudes.size))

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))


def _vector(psi) -> np.ndarray:
    v = psi.amplitudes if isinstance(psi, DenseState) else np.asarray(psi, dtype=np.complex128)
    if not np.any(v != 0):
        raise UndefinedStateError('zero vector has no defined state')
    return v


def _lanczos_exp(op: LinearOperator, v: np.ndarray, dt: float, krylov_dim: int,
                 tol: float) -> Tuple[np.ndarray, bool]:
    """exp(-i H dt) v in a Krylov space with full reorthogonalisation. Returns (vector, converged)."""
    beta0 = np.linalg.norm(v)
    basis = np.zeros((krylov_dim + 1, v.size), dtype=np.complex128)
    basis[0] = v / beta0
    alpha, beta = [], []
    coeffs = np.ones(1, dtype=np.complex128)
    converged = False
    for j in range(krylov_dim):
        w = op.matvec(basis[j])
        a = np.vdot(basis[j], w).real
        w = w - a * basis[j]
        if j > 0:
            w = w - beta[-1] * basis[j - 1]
        w = w - basis[:j + 1].T @ (basis[:j + 1].conj() @ w)
        b = np.linalg.norm(w)
        alpha.append(a)

        if j == 0:
            evals, evecs = np.array([a]), np.ones((1, 1))
        else:
            evals, evecs = eigh_tridiagonal(np.array(alpha), np.array(beta))
        coeffs = evecs @ (np.exp(-1j * evals * dt) * evecs[0])

        # invariant subspace: the projection is exact
        if b <= 1e-14 * max(1.0, abs(a)):
            converged = True
            break
        if beta0 * b * abs(coeffs[-1]) < tol:
            converged = True
            break
        beta.append(b)
        basis[j + 1] = w / b
    k = coeffs.size
    return beta0 * (basis[:k].T @ coeffs), converged


def krylov_propagate(H: HamiltonianSpec, psi: DenseState, dt: float, krylov_dim: int = KRYLOV_DIM,
                     tol: float = KRYLOV_TOL, operator: Optional[LinearOperator] = None,
                     _depth: int = 0) -> DenseState:
    """psi(t + dt) = exp(-i H dt) psi(t)."""
    if dt == 0:
        return DenseState(psi.amplitudes.copy())
    if psi.amplitudes.size != H.dim:
        raise ConfigurationShapeError(f'state of length {psi.amplitudes.size} for a {H.n_sites}-site model')
    operator = operator if operator is not None else hamiltonian_operator(H)
    out, converged = _lanczos_exp(operator, psi.amplitudes, dt, krylov_dim, tol)
    if not converged:
        if _depth >= 12:
            logger.warning(f'Krylov propagation did not reach tolerance {tol:.1e} for dt={dt}')
            return DenseState(out)
        half = krylov_propagate(H, psi, dt / 2, krylov_dim, tol, operator, _depth + 1)
        return krylov_propagate(H, half, dt / 2, krylov_dim, tol, operator, _depth + 1)
    return DenseState(out)


def variational_to_dense(state: VariationalState, cap: int = MATVEC_CAP, chunk: int = 1 << 16) -> DenseState:
    """All 2^N amplitudes in integer-encoding order (index 0 = all spins up)."""
    if state.n_sites > cap:
        raise ResourceLimitError(f'{state.n_sites} sites exceed the enumeration cap of {cap}')
    spins = all_configurations(state.n_sites)
    amps = np.concatenate([amplitudes_batch(state, spins[i:i + chunk]) for i in range(0, len(spins), chunk)])
    return DenseState(amps)


def infidelity(a, b) -> float:
    va, vb = _vector(a), _vector(b)
    if va.shape != vb.shape:
        raise ValueError(f'length mismatch: {va.size} vs {vb.size}')
    fidelity = abs(np.vdot(va, vb)) ** 2 / (np.vdot(va, va).real * np.vdot(vb, vb).real)
    return float(np.clip(1.0 - fidelity, 0.0, 1.0))


def observable_x_total(psi) -> float:
    """<sum_i X_i> / <psi|psi>; X_i maps a basis index to index ^ (1 << i)."""
    v = _vector(psi)
    n_sites = int(np.log2(v.size))
    index = np.arange(v.size, dtype=np.int64)
    total = sum(np.vdot(v, v[index ^ (1 << i)]).real for i in range(n_sites))
    return float(total / np.vdot(v, v).real)


def energy_expectation(H: HamiltonianSpec, psi, operator: Optional[LinearOperator] = None) -> complex:
    v = _vector(psi)
    operator = operator if operator is not None else hamiltonian_operator(H)
    return complex(np.vdot(v, operator.matvec(v)) / np.vdot(v, v).real)


class ExactReference(object):
    """
    Forward-only exact propagation that follows a variational run step by step, so that
    observers can compare at matching times without storing the whole trajectory.
    """
    def __init__(self, H: HamiltonianSpec, psi0: DenseState, krylov_dim: int = KRYLOV_DIM, tol: float = KRYLOV_TOL):
        self.H = H
        self.operator = hamiltonian_operator(H)
        self.krylov_dim = krylov_dim
        self.tol = tol
        self.t = 0.0
        self.state = psi0

    def state_at(self, t: float) -> DenseState:
        if t < self.t - 1e-12:
            raise PreconditionError(f'reference already at t={self.t}, cannot go back to t={t}')
        if t > self.t:
            self.state = krylov_propagate(self.H, self.state, t - self.t, self.krylov_dim, self.tol, self.operator)
            self.t = t
        return self.state

    def observe(self, t: float, state: VariationalState) -> Dict[str, float]:
        exact = self.state_at(t)
        return {
            'sx_exact': observable_x_total(exact),
            'infidelity': infidelity(exact, variational_to_dense(state)),
        }


def reference_trajectory(H: HamiltonianSpec, psi0: DenseState, dt: float, t_max: float,
                         krylov_dim: int = KRYLOV_DIM, progress: bool = False) -> Tuple[DenseState, List[Dict[str, float]]]:
    """Exact rows (t, energy, sx_total) on the same time grid as a variational run."""
    operator = hamiltonian_operator(H)
    n_steps = int(round(t_max / dt))
    psi = psi0
    rows = []
    for step in tqdm(range(n_steps + 1), desc='reference', disable=not progress):
        energy = energy_expectation(H, psi, operator)
        rows.append({
            't': step * dt,
            'energy_re': energy.real,
            'energy_im': energy.imag,
            'sx_total': observable_x_total(psi),
            'norm': psi.norm,
        })
        if step < n_steps:
            psi = krylov_propagate(H, psi, dt, krylov_dim, operator=operator)
    return psi, rows
