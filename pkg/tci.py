"""
Tensor-train cross interpolation of the centered local-energy and gradient functions,
and the tensor-network contractions that turn them into the force vector and QGT.

Site indices follow the spin encoding: physical index 0 is spin up, 1 is spin down.
The gradient target carries one extra trailing site whose index is the parameter k.
"""
from typing import Callable, List, Optional, Sequence, Tuple
from dataclasses import dataclass, field
from enum import Enum, auto
import logging

import numpy as np
from scipy import linalg
from tqdm import tqdm

from spin_model import DENSE_CAP, HamiltonianSpec, all_configurations, hamiltonian_operator
from models.ansatz import VariationalState, amplitudes_batch, evaluate_batch
from estimators import local_energy_unnormalized
from utils import (
    ConfigurationShapeError,
    InvalidReferenceError,
    PreconditionError,
    ResourceLimitError,
    derive_rng,
)

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


class TARGET(Enum):
    eloc = auto()
    grad = auto()

    @staticmethod
    def from_string(s):
        try:
            return TARGET[s.lower()]
        except KeyError:
            raise ValueError(f'unknown target function {s}')


class TOL_MODE(Enum):
    relative = auto()
    absolute = auto()

    @staticmethod
    def from_string(s):
        try:
            return TOL_MODE[s.lower()]
        except KeyError:
            raise ValueError(f'unknown tolerance mode {s}')


@dataclass
class TciConfig:
    chi_max: int = 64
    eps_tci: float = 1e-4
    max_sweeps: int = 10
    pivot_candidates: int = 32
    tol_mode: TOL_MODE = TOL_MODE.relative
    # two-site cross matrices with more entries than this use rook search
    full_search_cap: int = 1 << 16
    n_error_probes: int = 10000

    def __post_init__(self):
        if self.chi_max < 1:
            raise ValueError(f'chi_max must be >= 1, got {self.chi_max}')
        if not self.eps_tci > 0:
            raise ValueError(f'eps_tci must be positive, got {self.eps_tci}')
        if self.max_sweeps < 1 or self.pivot_candidates < 1:
            raise ValueError('max_sweeps and pivot_candidates must be >= 1')


@dataclass
class TciDiagnostics:
    sweeps: int = 0
    converged: bool = False
    max_local_error: float = float('nan')
    sup_error: float = float('nan')
    bond_dims_history: List[List[int]] = field(default_factory=list)
    zero_target: bool = False
    n_evaluations: int = 0
    # (I_b, J_b) for every bond b = 1 .. L-1
    pivots: List[Tuple[List[tuple], List[tuple]]] = field(default_factory=list)


@dataclass
class TensorTrain:
    """Cores of shape (left bond, physical, right bond)."""
    cores: List[np.ndarray]
    ortho_center: Optional[int] = None
    info: Optional[TciDiagnostics] = None

    def __post_init__(self):
        if not self.cores:
            raise ConfigurationShapeError('a tensor train needs at least one core')
        if self.cores[0].shape[0] != 1 or self.cores[-1].shape[2] != 1:
            raise ConfigurationShapeError('boundary bonds must have dimension 1')
        for k in range(len(self.cores) - 1):
            if self.cores[k].shape[2] != self.cores[k + 1].shape[0]:
                raise ConfigurationShapeError(f'bond mismatch between sites {k} and {k + 1}')

    @property
    def n_sites(self) -> int:
        return len(self.cores)

    @property
    def phys_dims(self) -> List[int]:
        return [c.shape[1] for c in self.cores]

    @property
    def bond_dims(self) -> List[int]:
        return [c.shape[2] for c in self.cores[:-1]]


@dataclass(eq=False)
class TargetFunction:
    """
    Centered, norm-divided amplitude functions whose contractions give the covariances:
      eloc: f(s)    = (E_loc(s) - psi(s) E) / sqrt(<psi|psi>)
      grad: f(s, k) = (d_k psi(s) - psi(s) <psi|d_k psi>/<psi|psi>) / sqrt(<psi|psi>)
    The expectations are computed once by full summation.
    """
    kind: TARGET
    state: VariationalState
    H: HamiltonianSpec
    exact_norm: float
    exact_energy: complex
    exact_grad_overlap: np.ndarray

    @property
    def n_sites(self) -> int:
        return self.state.n_sites

    @property
    def phys_dims(self) -> List[int]:
        dims = [2] * self.n_sites
        if self.kind == TARGET.grad:
            dims.append(self.state.n_params)
        return dims


def make_target(kind: TARGET, state: VariationalState, H: HamiltonianSpec, cap: int = DENSE_CAP) -> TargetFunction:
    if state.n_sites > cap:
        raise ResourceLimitError(f'{state.n_sites} sites exceed the enumeration cap of {cap}')
    amp = evaluate_batch(state, all_configurations(state.n_sites))
    norm = float(np.vdot(amp.psi, amp.psi).real)
    if not norm > 0:
        raise InvalidReferenceError('variational state has zero norm')
    energy = complex(np.vdot(amp.psi, hamiltonian_operator(H).matvec(amp.psi)) / norm)
    overlap = amp.psi.conj() @ amp.grad_psi / norm
    return TargetFunction(kind, state, H, norm, energy, overlap)


def evaluate_target(tf: TargetFunction, indices, chunk: int = 4096):
    """Exact target values at one index tuple or at a (B, L) array of them."""
    idx = np.asarray(indices, dtype=np.int64)
    single = idx.ndim == 1
    idx = np.atleast_2d(idx)
    dims = np.asarray(tf.phys_dims)
    if idx.shape[1] != dims.size or np.any(idx < 0) or np.any(idx >= dims):
        raise ConfigurationShapeError(f'index tuples must have {dims.size} entries within {dims.tolist()}')
    n = tf.n_sites
    scale = 1.0 / np.sqrt(tf.exact_norm)
    out = np.empty(idx.shape[0], dtype=np.complex128)
    for start in range(0, idx.shape[0], chunk):
        block = idx[start:start + chunk]
        spins = (1 - 2 * block[:, :n]).astype(np.int8)
        if tf.kind == TARGET.eloc:
            psi = amplitudes_batch(tf.state, spins)
            e_loc = local_energy_unnormalized(tf.state, tf.H, spins, psi=psi)
            out[start:start + chunk] = (e_loc - psi * tf.exact_energy) * scale
        else:
            amp = evaluate_batch(tf.state, spins)
            k = block[:, n]
            grad = amp.grad_psi[np.arange(k.size), k]
            out[start:start + chunk] = (grad - amp.psi * tf.exact_grad_overlap[k]) * scale
    return complex(out[0]) if single else out


@dataclass(eq=False)
class CallableTarget:
    """Any vectorized function of (B, L) index arrays with the given physical dimensions."""
    fn: Callable[[np.ndarray], np.ndarray]
    phys_dims: List[int]
    kind: TARGET = TARGET.eloc


def _evaluator(tf) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(tf, CallableTarget):
        return tf.fn
    return lambda idx: evaluate_target(tf, idx)


def target_tensor(tf: TargetFunction) -> np.ndarray:
    """Every value of the target, shaped by its physical dimensions."""
    dims = tf.phys_dims
    grid = np.stack(np.unravel_index(np.arange(int(np.prod(dims))), dims), axis=-1)
    return np.asarray(_evaluator(tf)(grid)).reshape(dims)


class _Oracle(object):
    """Memoized batch evaluation keyed by index tuple."""
    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn
        self.cache = {}
        self.max_abs = 0.0

    def __call__(self, points: Sequence[tuple]) -> np.ndarray:
        missing = [p for p in dict.fromkeys(points) if p not in self.cache]
        if missing:
            values = np.asarray(self.fn(np.array(missing, dtype=np.int64)), dtype=np.complex128)
            self.cache.update(zip(missing, values))
            self.max_abs = max(self.max_abs, float(np.abs(values).max()))
        return np.array([self.cache[p] for p in points], dtype=np.complex128)

    def block(self, left: Sequence[tuple], right: Sequence[tuple]) -> np.ndarray:
        return self([l + r for l in left for r in right]).reshape(len(left), len(right))


def _extend_left(I: List[tuple], d: int) -> List[tuple]:
    return [i + (s,) for i in I for s in range(d)]


def _extend_right(d: int, J: List[tuple]) -> List[tuple]:
    return [(s,) + j for s in range(d) for j in J]


def _full_pivot_cross(A: np.ndarray, max_rank: int, tol: float) -> Tuple[List[int], List[int], float]:
    """Partial rank-revealing LU with complete pivoting: greedy crosses until the residual drops below tol."""
    R = A.copy()
    rows, cols = [], []
    err = 0.0
    for _ in range(min(max_rank, *A.shape)):
        i, j = np.unravel_index(np.argmax(np.abs(R)), R.shape)
        err = float(abs(R[i, j]))
        if err <= tol and rows:
            break
        if err == 0.0:
            break
        rows.append(int(i))
        cols.append(int(j))
        R = R - np.outer(R[:, j], R[i, :]) / R[i, j]
        err = float(np.abs(R).max())
    if not rows:
        rows, cols = [0], [0]
    return rows, cols, err


def _rook_cross(oracle: _Oracle, row_idx: List[tuple], col_idx: List[tuple], max_rank: int, tol: float,
                rng: np.random.Generator, n_candidates: int) -> Tuple[List[int], List[int], float]:
    """Adaptive cross approximation with rook pivoting; only full rows and columns are evaluated."""
    m, n = len(row_idx), len(col_idx)
    U = np.zeros((m, 0), dtype=np.complex128)
    V = np.zeros((0, n), dtype=np.complex128)
    rows, cols = [], []
    err = 0.0

    def column(j):
        return oracle([r + col_idx[j] for r in row_idx]) - U @ V[:, j]

    def row(i):
        return oracle([row_idx[i] + c for c in col_idx]) - U[i] @ V

    for _ in range(min(max_rank, m, n)):
        starts = rng.choice(n, size=min(n_candidates, n), replace=False)
        block = np.stack([column(j) for j in starts], axis=1)
        i, c = np.unravel_index(np.argmax(np.abs(block)), block.shape)
        j = int(starts[c])
        for _ in range(5):
            j_new = int(np.argmax(np.abs(row(i))))
            i_new = int(np.argmax(np.abs(column(j_new))))
            if (i_new, j_new) == (i, j):
                break
            i, j = i_new, j_new
        r_vec, c_vec = row(i), column(j)
        pivot = c_vec[i]
        err = float(abs(pivot))
        if err == 0.0 or (err <= tol and rows):
            break
        rows.append(int(i))
        cols.append(int(j))
        U = np.column_stack([U, c_vec / pivot])
        V = np.vstack([V, r_vec])
    if not rows:
        rows, cols = [0], [0]
    return rows, cols, err


def _select_rows(B: np.ndarray, rank_tol: float = 1e-14) -> Tuple[np.ndarray, int]:
    """Column-pivoted QR of B^T: row order by decreasing independence and numerical rank."""
    _, R, piv = linalg.qr(B.T, mode='economic', pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > rank_tol * diag[0])) if diag.size and diag[0] > 0 else 0
    return piv, max(rank, 1)


def _interpolation_cores(oracle: _Oracle, I: List[List[tuple]], J: List[List[tuple]],
                         dims: List[int]) -> List[np.ndarray]:
    L = len(dims)
    cores = []
    for k in range(L):
        T = oracle.block(_extend_left(I[k], dims[k]), J[k + 1])
        r_left, r_right = len(I[k]), len(J[k + 1])
        if k < L - 1:
            P = oracle.block(I[k + 1], J[k + 1])
            try:
                T = linalg.solve(P.T, T.T).T
            except linalg.LinAlgError:
                logger.debug(f'singular pivot matrix at bond {k + 1}, using a pseudo-inverse')
                T = T @ linalg.pinv(P)
        cores.append(T.reshape(r_left, dims[k], r_right))
    return cores


def tci_build(tf: TargetFunction, config: TciConfig = None, seed: int = 0, progress: bool = False) -> TensorTrain:
    """
    Two-site cross interpolation. Each bond keeps nested pivot lists I_b (prefixes) and
    J_b (suffixes); a bond update factorizes the cross matrix over (I_{b-1} x sigma) and
    (sigma x J_{b+1}) and keeps the pivots of that factorization, up to chi_max.
    """
    config = config or TciConfig()
    dims = tf.phys_dims
    L = len(dims)
    rng = derive_rng(seed, tf.kind.value)
    oracle = _Oracle(_evaluator(tf))
    info = TciDiagnostics()

    probes = np.stack([rng.integers(0, d, size=max(4 * config.pivot_candidates, 64)) for d in dims], axis=-1)
    probes = [tuple(int(v) for v in p) for p in probes] + [tuple([0] * L)]
    values = oracle(probes)
    if oracle.max_abs == 0.0:
        logger.warning(f'{tf.kind.name} target vanishes on every probe: returning the zero train')
        info.zero_target = True
        info.converged = True
        info.n_evaluations = len(oracle.cache)
        cores = [np.zeros((1, d, 1), dtype=np.complex128) for d in dims]
        return TensorTrain(cores, info=info)
    x0 = probes[int(np.argmax(np.abs(values)))]

    I = [[x0[:b]] for b in range(L + 1)]
    J = [[x0[b:]] for b in range(L + 1)]

    def tolerance():
        return config.eps_tci * (oracle.max_abs if config.tol_mode == TOL_MODE.relative else 1.0)

    def update_bond(b):
        row_idx = _extend_left(I[b - 1], dims[b - 1])
        col_idx = _extend_right(dims[b], J[b + 1])
        if len(row_idx) * len(col_idx) <= config.full_search_cap:
            A = oracle.block(row_idx, col_idx)
            rows, cols, err = _full_pivot_cross(A, config.chi_max, tolerance())
        else:
            rows, cols, err = _rook_cross(oracle, row_idx, col_idx, config.chi_max, tolerance(), rng,
                                          config.pivot_candidates)
        I[b] = [row_idx[i] for i in rows]
        J[b] = [col_idx[j] for j in cols]
        return err

    previous = None
    for sweep in tqdm(range(config.max_sweeps), desc=f'tci {tf.kind.name}', disable=not progress):
        errors = [update_bond(b) for b in range(1, L)]
        errors += [update_bond(b) for b in range(L - 1, 0, -1)]
        scale = oracle.max_abs if config.tol_mode == TOL_MODE.relative else 1.0
        info.max_local_error = max(errors) / scale if errors else 0.0
        dims_now = [len(I[b]) for b in range(1, L)]
        info.bond_dims_history.append(dims_now)
        info.sweeps = sweep + 1
        logger.debug(f'sweep {sweep}: bond dims {dims_now}, local error {info.max_local_error:.3e}')
        if info.max_local_error < config.eps_tci and dims_now == previous:
            info.converged = True
            break
        previous = dims_now

    # the backward half-sweep leaves J nested; restore nesting of I against the final J
    for k in range(L - 1):
        row_idx = _extend_left(I[k], dims[k])
        B = oracle.block(row_idx, J[k + 1])
        piv, rank = _select_rows(B)
        if rank < len(J[k + 1]):
            logger.debug(f'bond {k + 1} loses rank {len(J[k + 1])} -> {rank} while nesting pivots')
            cpiv, _ = _select_rows(B[piv[:rank]].T)
            J[k + 1] = [J[k + 1][c] for c in cpiv[:rank]]
        I[k + 1] = [row_idx[p] for p in piv[:len(J[k + 1])]]

    tt = TensorTrain(_interpolation_cores(oracle, I, J, dims), info=info)
    info.pivots = [(list(I[b]), list(J[b])) for b in range(1, L)]
    info.sup_error = _sup_error(tt, oracle, I, J, dims, config, rng)
    info.n_evaluations = len(oracle.cache)
    logger.info(f'TCI {tf.kind.name}: bond dims {tt.bond_dims}, sweeps {info.sweeps}, '
                f'sup error {info.sup_error:.3e}, {info.n_evaluations} evaluations')
    return tt


def _sup_error(tt: TensorTrain, oracle: _Oracle, I, J, dims, config: TciConfig, rng) -> float:
    """Largest deviation on the pivot crosses and on random probes."""
    points = []
    for k in range(len(dims)):
        points += [l + r for l in _extend_left(I[k], dims[k]) for r in J[k + 1]]
    probes = np.stack([rng.integers(0, d, size=config.n_error_probes) for d in dims], axis=-1)
    points += [tuple(int(v) for v in p) for p in probes]
    points = list(dict.fromkeys(points))
    exact = oracle(points)
    approx = evaluate_tt(tt, np.array(points, dtype=np.int64))
    err = float(np.abs(exact - approx).max())
    return err / oracle.max_abs if config.tol_mode == TOL_MODE.relative else err


def evaluate_tt(tt: TensorTrain, indices):
    idx = np.asarray(indices, dtype=np.int64)
    single = idx.ndim == 1
    idx = np.atleast_2d(idx)
    if idx.shape[1] != tt.n_sites:
        raise ConfigurationShapeError(f'index tuples must have {tt.n_sites} entries')
    v = np.ones((idx.shape[0], 1), dtype=np.complex128)
    for k, core in enumerate(tt.cores):
        v = np.einsum('bl,lbr->br', v, core[:, idx[:, k], :])
    return complex(v[0, 0]) if single else v[:, 0]


def tt_from_dense(tensor: np.ndarray, tol: float = 1e-14) -> TensorTrain:
    """Exact train by successive SVDs; only singular values below tol * largest are dropped."""
    tensor = np.asarray(tensor, dtype=np.complex128)
    dims = tensor.shape
    cores = []
    r = 1
    M = tensor.reshape(1, -1)
    for d in dims[:-1]:
        M = M.reshape(r * d, -1)
        U, s, Vh = linalg.svd(M, full_matrices=False)
        keep = max(1, int(np.sum(s > tol * s[0]))) if s[0] > 0 else 1
        cores.append(U[:, :keep].reshape(r, d, keep))
        M = s[:keep, None] * Vh[:keep]
        r = keep
    cores.append(M.reshape(r, dims[-1], 1))
    return TensorTrain(cores, ortho_center=len(dims) - 1)


def exact_train(tf: TargetFunction) -> TensorTrain:
    return tt_from_dense(target_tensor(tf))


def move_ortho_center(tt: TensorTrain, site: int) -> TensorTrain:
    """QR sweeps from both ends towards `site`; the represented function is unchanged."""
    if not 0 <= site < tt.n_sites:
        raise ValueError(f'site {site} out of range for {tt.n_sites} sites')
    cores = [c.copy() for c in tt.cores]
    for k in range(site):
        Dl, d, Dr = cores[k].shape
        Q, R = linalg.qr(cores[k].reshape(Dl * d, Dr), mode='economic')
        cores[k] = Q.reshape(Dl, d, Q.shape[1])
        cores[k + 1] = np.einsum('ij,jsk->isk', R, cores[k + 1])
    for k in range(tt.n_sites - 1, site, -1):
        Dl, d, Dr = cores[k].shape
        Q, R = linalg.qr(cores[k].reshape(Dl, d * Dr).T, mode='economic')
        cores[k] = Q.T.reshape(Q.shape[1], d, Dr)
        cores[k - 1] = np.einsum('isj,jk->isk', cores[k - 1], R.T)
    return TensorTrain(cores, ortho_center=site, info=tt.info)


def isometry_defect(tt: TensorTrain) -> float:
    """Largest deviation from identity of the left (right) isometries left (right) of the center."""
    if tt.ortho_center is None:
        raise PreconditionError('train has no orthogonality center')
    defect = 0.0
    for k, core in enumerate(tt.cores):
        if k < tt.ortho_center:
            gram = np.einsum('isj,isk->jk', core.conj(), core)
        elif k > tt.ortho_center:
            gram = np.einsum('isj,ksj->ik', core, core.conj())
        else:
            continue
        defect = max(defect, float(np.abs(gram - np.eye(gram.shape[0])).max()))
    return defect


def contract_force(tE: TensorTrain, tG: TensorTrain) -> np.ndarray:
    """F_k = sum_s conj(f_grad(s, k)) f_eloc(s), zipped site by site from the left."""
    n = tE.n_sites
    if tG.n_sites != n + 1 or tG.phys_dims[:n] != tE.phys_dims:
        raise ConfigurationShapeError(f'gradient train {tG.phys_dims} does not extend '
                                      f'local-energy train {tE.phys_dims} by one parameter site')
    env = np.ones((1, 1), dtype=np.complex128)
    for G, E in zip(tG.cores[:n], tE.cores):
        env = np.einsum('gsh,gsf->hf', G.conj(), np.einsum('ge,esf->gsf', env, E))
    return np.einsum('gk,g->k', tG.cores[-1][:, :, 0].conj(), env[:, 0])


def contract_qgt(tG: TensorTrain) -> np.ndarray:
    """With the center on the parameter site the spin sites contract to the identity: S = Gamma^dagger Gamma."""
    if tG.ortho_center != tG.n_sites - 1:
        raise PreconditionError(f'orthogonality center must be the parameter site {tG.n_sites - 1}, '
                                f'got {tG.ortho_center}')
    gamma = tG.cores[-1][:, :, 0]
    return gamma.conj().T @ gamma


def contract_gram(tG: TensorTrain) -> np.ndarray:
    """The same QGT contracted through every spin site, valid in any gauge."""
    env = np.ones((1, 1), dtype=np.complex128)
    for G in tG.cores[:-1]:
        env = np.einsum('ab,asc,bsd->cd', env, G.conj(), G)
    gamma = tG.cores[-1][:, :, 0]
    return gamma.conj().T @ env @ gamma


def relative_error(X, X_exact) -> float:
    X, X_exact = np.asarray(X), np.asarray(X_exact)
    if X.shape != X_exact.shape:
        raise ValueError(f'shape mismatch: {X.shape} vs {X_exact.shape}')
    ref = np.linalg.norm(X_exact)
    if ref == 0:
        raise InvalidReferenceError('relative error against a zero reference')
    return float(np.linalg.norm(X - X_exact) / ref)


@dataclass
class TciEstimate:
    F_hat: np.ndarray
    S_hat: np.ndarray
    train_eloc: TensorTrain
    train_grad: TensorTrain


def tci_tdvp_quantities(state: VariationalState, H: HamiltonianSpec, config: TciConfig = None,
                        seed: int = 0, cap: int = DENSE_CAP) -> TciEstimate:
    """Force vector and QGT from cross-interpolated trains of both target functions."""
    tE = tci_build(make_target(TARGET.eloc, state, H, cap), config, seed)
    tG = tci_build(make_target(TARGET.grad, state, H, cap), config, seed)
    tG = move_ortho_center(tG, tG.n_sites - 1)
    return TciEstimate(contract_force(tE, tG), contract_qgt(tG), tE, tG)
