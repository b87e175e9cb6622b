from dataclasses import dataclass, field
from enum import Enum, auto
import logging

import numpy as np
from scipy.optimize import minimize

from spin_model import all_configurations
from utils import ConfigurationShapeError, NumericDomainError, derive_rng

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


class ANSATZ(Enum):
    direct2 = auto()
    rbm = auto()

    @staticmethod
    def from_string(s):
        try:
            return ANSATZ[s.lower()]
        except KeyError:
            raise ValueError(f'unknown ansatz {s}')


def num_params(kind: ANSATZ, n_sites: int, n_hidden: int = 0) -> int:
    if kind == ANSATZ.direct2:
        return 4
    return 2 * (n_sites + n_hidden + n_sites * n_hidden)


@dataclass(frozen=True, eq=False)
class VariationalState:
    """
    Ansatz kind plus the real parameter vector theta.

    Complex parameters are stored as interleaved (Re, Im) pairs:
      direct2: (Re alpha, Im alpha, Re beta, Im beta) with psi(down) = alpha, psi(up) = beta
      rbm:     a (N visible biases), b (M hidden biases), W (M x N weights, row-major)
    """
    kind: ANSATZ
    n_sites: int
    theta: np.ndarray
    n_hidden: int = 0

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        theta.setflags(write=False)
        object.__setattr__(self, 'theta', theta)
        if self.kind == ANSATZ.direct2 and self.n_sites != 1:
            raise ConfigurationShapeError('the two-parameter ansatz describes a single spin')
        expected = num_params(self.kind, self.n_sites, self.n_hidden)
        if theta.size != expected:
            raise ConfigurationShapeError(f'{self.kind.name} with N={self.n_sites}, M={self.n_hidden} '
                                          f'needs {expected} parameters, got {theta.size}')
        if not np.all(np.isfinite(theta)):
            raise NumericDomainError(f'non-finite parameters in {self.kind.name} state')

    @property
    def n_params(self) -> int:
        return self.theta.size

    def with_theta(self, theta: np.ndarray) -> 'VariationalState':
        return VariationalState(self.kind, self.n_sites, theta, self.n_hidden)

    def complex_params(self) -> np.ndarray:
        return self.theta[0::2] + 1j * self.theta[1::2]


@dataclass
class AmplitudeAndGradient:
    psi: np.ndarray
    grad_psi: np.ndarray
    log_psi: np.ndarray
    grad_log_psi: np.ndarray
    # log_psi and grad_log_psi hold nan where psi == 0
    log_valid: np.ndarray = field(default=None)

    def __getitem__(self, i):
        return AmplitudeAndGradient(self.psi[i], self.grad_psi[i], self.log_psi[i],
                                    self.grad_log_psi[i], self.log_valid[i])


def direct_state(alpha: complex, beta: complex) -> VariationalState:
    alpha, beta = complex(alpha), complex(beta)
    return VariationalState(ANSATZ.direct2, 1, [alpha.real, alpha.imag, beta.real, beta.imag])


def init_state(kind: ANSATZ, n_sites: int, hidden_density: float = 2.0, std: float = 0.01,
               seed: int = 0) -> VariationalState:
    if kind == ANSATZ.direct2:
        # |+> = (|up> + |down>)/sqrt(2)
        return direct_state(1 / np.sqrt(2), 1 / np.sqrt(2))
    n_hidden = max(1, int(round(hidden_density * n_sites)))
    rng = derive_rng(seed)
    theta = rng.normal(0.0, std, size=num_params(kind, n_sites, n_hidden))
    return VariationalState(kind, n_sites, theta, n_hidden)


def _check_spins(state: VariationalState, spins: np.ndarray) -> np.ndarray:
    spins = np.asarray(spins)
    if spins.shape[-1] != state.n_sites:
        raise ConfigurationShapeError(f'configuration of length {spins.shape[-1]} '
                                      f'for a {state.n_sites}-site ansatz')
    return spins.astype(np.float64)


def _log_2cosh(x: np.ndarray) -> np.ndarray:
    # cosh is even, so fold onto Re x >= 0 before expanding
    x = np.where(x.real < 0, -x, x)
    return x + np.log1p(np.exp(-2 * x))


def _rbm_split(state: VariationalState):
    n, m = state.n_sites, state.n_hidden
    c = state.complex_params()
    return c[:n], c[n:n + m], c[n + m:].reshape(m, n)


def _interleave(o: np.ndarray) -> np.ndarray:
    """d/d(Re c) = O and d/d(Im c) = iO for holomorphic dependence on c."""
    out = np.empty(o.shape[:-1] + (2 * o.shape[-1],), dtype=np.complex128)
    out[..., 0::2] = o
    out[..., 1::2] = 1j * o
    return out


def log_amplitudes_batch(state: VariationalState, spins: np.ndarray) -> np.ndarray:
    spins = _check_spins(state, spins)
    if state.kind == ANSATZ.direct2:
        with np.errstate(divide='ignore'):
            return np.log(amplitudes_batch(state, spins).astype(np.complex128))
    a, b, W = _rbm_split(state)
    hidden = b + spins @ W.T
    return spins @ a + np.sum(_log_2cosh(hidden), axis=-1)


def amplitudes_batch(state: VariationalState, spins: np.ndarray) -> np.ndarray:
    spins = _check_spins(state, spins)
    if state.kind == ANSATZ.direct2:
        c = state.complex_params()
        return np.where(spins[..., 0] > 0, c[1], c[0]).astype(np.complex128)
    return np.exp(log_amplitudes_batch(state, spins))


def evaluate_batch(state: VariationalState, spins: np.ndarray) -> AmplitudeAndGradient:
    spins = _check_spins(state, spins)
    batch = spins.shape[:-1]
    if state.kind == ANSATZ.direct2:
        up = spins[..., 0] > 0
        psi = amplitudes_batch(state, spins)
        grad_psi = np.zeros(batch + (4,), dtype=np.complex128)
        grad_psi[..., 0] = np.where(up, 0, 1)
        grad_psi[..., 1] = np.where(up, 0, 1j)
        grad_psi[..., 2] = np.where(up, 1, 0)
        grad_psi[..., 3] = np.where(up, 1j, 0)
        valid = psi != 0
        with np.errstate(divide='ignore', invalid='ignore'):
            log_psi = np.where(valid, np.log(np.where(valid, psi, 1)), np.nan)
            grad_log_psi = np.where(valid[..., None], grad_psi / np.where(valid, psi, 1)[..., None], np.nan)
        return AmplitudeAndGradient(psi, grad_psi, log_psi, grad_log_psi, valid)

    a, b, W = _rbm_split(state)
    hidden = b + spins @ W.T
    log_psi = spins @ a + np.sum(_log_2cosh(hidden), axis=-1)
    tanh = np.tanh(hidden)
    o_weights = (tanh[..., :, None] * spins[..., None, :]).reshape(batch + (-1,))
    o = np.concatenate([spins.astype(np.complex128), tanh, o_weights], axis=-1)
    grad_log_psi = _interleave(o)
    psi = np.exp(log_psi)
    grad_psi = psi[..., None] * grad_log_psi
    valid = (psi != 0) & np.isfinite(psi)
    return AmplitudeAndGradient(psi, grad_psi, log_psi, grad_log_psi, valid)


def evaluate(state: VariationalState, s: np.ndarray) -> AmplitudeAndGradient:
    """Amplitude and gradients at a single configuration."""
    out = evaluate_batch(state, np.asarray(s).reshape(1, -1))
    return out[0]


def finite_difference_gradient(state: VariationalState, s: np.ndarray, h: float = 1e-5) -> np.ndarray:
    if h <= 0:
        raise ValueError(f'step must be positive, got {h}')
    s = np.asarray(s).reshape(1, -1)
    grad = np.zeros(state.n_params, dtype=np.complex128)
    for k in range(state.n_params):
        shift = np.zeros(state.n_params)
        shift[k] = h
        plus = amplitudes_batch(state.with_theta(state.theta + shift), s)[0]
        minus = amplitudes_batch(state.with_theta(state.theta - shift), s)[0]
        grad[k] = (plus - minus) / (2 * h)
    return grad


def fit_to_state(state: VariationalState, target: np.ndarray, max_iter: int = 2000,
                 tol: float = 1e-14) -> VariationalState:
    """Minimize the infidelity to a dense target vector over all parameters (L-BFGS)."""
    spins = all_configurations(state.n_sites)
    target = np.asarray(target, dtype=np.complex128)
    target = target / np.linalg.norm(target)

    def objective(theta):
        amp = evaluate_batch(state.with_theta(theta), spins)
        norm = np.vdot(amp.psi, amp.psi).real
        overlap = np.vdot(target, amp.psi)
        fidelity = abs(overlap) ** 2 / norm
        d_overlap = target.conj() @ amp.grad_psi
        d_norm = 2 * np.real(amp.psi.conj() @ amp.grad_psi)
        d_fidelity = (2 * np.real(np.conj(overlap) * d_overlap) - fidelity * d_norm) / norm
        return 1.0 - fidelity, -d_fidelity

    result = minimize(objective, state.theta, jac=True, method='L-BFGS-B',
                      options={'maxiter': max_iter, 'ftol': tol, 'gtol': 1e-12})
    logger.info(f'Pre-fit finished after {result.nit} iterations, infidelity {result.fun:.3e}')
    return state.with_theta(result.x)


def product_state_x(n_sites: int) -> np.ndarray:
    return np.full(2 ** n_sites, 2.0 ** (-n_sites / 2), dtype=np.complex128)


def prepare_initial_state(kind: ANSATZ, n_sites: int, hidden_density: float = 2.0, std: float = 0.01,
                          seed: int = 0, prefit: bool = True) -> VariationalState:
    """Small random parameters, optionally pre-converged onto the x-polarized product state."""
    state = init_state(kind, n_sites, hidden_density=hidden_density, std=std, seed=seed)
    if kind == ANSATZ.rbm and prefit:
        state = fit_to_state(state, product_state_x(n_sites))
    return state
