from typing import Callable, Dict, List, Optional, Sequence, Tuple
from dataclasses import dataclass, field
from enum import Enum, auto
import logging

import numpy as np
from scipy import linalg
from tqdm import tqdm

from spin_model import HamiltonianSpec
from models.ansatz import VariationalState
from estimators import (
    BACKEND,
    CutoffDistributionSpec,
    SamplerConfig,
    TdvpQuantities,
    estimate_quantities,
    pilot_psi2_max,
)
from utils import NumericDomainError, RankCollapseError, derive_rng

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


class SCHEME(Enum):
    heun = auto()
    rk4 = auto()

    @staticmethod
    def from_string(s):
        try:
            return SCHEME[s.lower()]
        except KeyError:
            raise ValueError(f'unknown integration scheme {s}')


@dataclass
class Regularization:
    svd_cutoff: float = 1e-8
    diagonal_shift: float = 0.0


@dataclass
class IntegratorConfig:
    scheme: SCHEME = SCHEME.heun
    dt: float = 1e-3
    t_max: float = 1.0
    regularization: Regularization = field(default_factory=Regularization)
    halt_on_rank_collapse: bool = False

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f'time step must be positive, got {self.dt}')
        if not 0 <= self.regularization.svd_cutoff < 1:
            raise ValueError(f'svd_cutoff must lie in [0, 1), got {self.regularization.svd_cutoff}')

    @property
    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))


@dataclass
class TdvpStep:
    S: np.ndarray
    F: np.ndarray
    theta_dot: np.ndarray
    r_squared: Optional[float]
    energy: complex
    norm_ratio: float
    rank: int = 0
    step_failed: bool = False
    quantities: Optional[TdvpQuantities] = None


def assemble_qgt(q: TdvpQuantities) -> np.ndarray:
    """S_hat[k, k'] = <d_k psi|d_k' psi> - <d_k psi|psi><psi|d_k' psi>, all normalized."""
    return q.M_grad2 - np.outer(q.M_psiGrad.conj(), q.M_psiGrad)


def assemble_force(q: TdvpQuantities) -> np.ndarray:
    return q.M_gradE - q.M_psiGrad.conj() * q.M_psiE


def real_projection(S_hat: np.ndarray, F_hat: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Stationary-action form over real parameters: S = Im[S_hat], F = Im[-i F_hat] = -Re[F_hat].
    Im of a Hermitian matrix is antisymmetric; the antisymmetric part is kept exactly.
    """
    S = np.imag(S_hat)
    S = 0.5 * (S - S.T)
    F = np.imag(-1j * F_hat)
    return S, F


def solve_update(S: np.ndarray, F: np.ndarray, reg: Regularization = None) -> Tuple[np.ndarray, int]:
    """Pseudo-inverse solution of S theta_dot = F, dropping singular values below svd_cutoff * max."""
    reg = reg or Regularization()
    if S.shape[0] != S.shape[1] or S.shape[0] != F.shape[0]:
        raise ValueError(f'shape mismatch: S {S.shape}, F {F.shape}')
    A = S + reg.diagonal_shift * np.eye(S.shape[0])
    U, s, Vh = linalg.svd(A)
    if s.size == 0 or not s[0] > 0:
        raise RankCollapseError('every mode of the linear system was discarded')
    keep = s > reg.svd_cutoff * s[0]
    rank = int(keep.sum())
    if rank == 0:
        raise RankCollapseError('every mode of the linear system was discarded')
    theta_dot = Vh[keep].T @ ((U[:, keep].T @ F) / s[keep])
    return theta_dot, rank


def tdvp_residual(q: TdvpQuantities, theta_dot: np.ndarray, S_hat: np.ndarray = None, F_hat: np.ndarray = None,
                  var_floor: float = 1e-12) -> Optional[float]:
    """
    Normalized projection error of the tangent vector against -i(H - E)psi:
        R^2 = (theta_dot Re[S_hat] theta_dot - 2 theta_dot Im[F_hat] + VarH) / VarH.
    Returns None when the energy variance is below var_floor * <H^2>.
    """
    S_hat = assemble_qgt(q) if S_hat is None else S_hat
    F_hat = assemble_force(q) if F_hat is None else F_hat
    var_h = q.energy_variance
    if var_h <= var_floor * max(q.M_EE, 0.0):
        logger.warning(f'R^2 undefined: energy variance {var_h:.3e} is below the floor')
        return None
    quad = float(theta_dot @ np.real(S_hat) @ theta_dot)
    lin = float(theta_dot @ np.imag(F_hat))
    return max(0.0, (quad - 2 * lin + var_h) / var_h)


def tdvp_step(q: TdvpQuantities, reg: Regularization = None) -> TdvpStep:
    S_hat = assemble_qgt(q)
    F_hat = assemble_force(q)
    S, F = real_projection(S_hat, F_hat)
    theta_dot, rank = solve_update(S, F, reg)
    r_squared = tdvp_residual(q, theta_dot, S_hat, F_hat)
    return TdvpStep(S, F, theta_dot, r_squared, q.M_psiE, q.norm_ratio, rank=rank, quantities=q)


Observer = Callable[[float, VariationalState], Dict[str, float]]


class TdvpDriver(object):
    """
    Integrates theta(t) with Heun or RK4. Each stage re-estimates the moments at the stage
    parameters with a generator derived from (seed, step, stage).
    """
    def __init__(
        self,
        H: HamiltonianSpec,
        sampler: SamplerConfig,
        integrator: IntegratorConfig,
        cutoff: Optional[CutoffDistributionSpec] = None,
        observers: Sequence[Observer] = (),
        checkpoint_fn: Optional[Callable[[int, float, VariationalState], None]] = None,
        checkpoint_every: int = 0,
        progress: bool = True):
        self.H = H
        self.sampler = sampler
        self.integrator = integrator
        self.cutoff = cutoff
        self.observers = list(observers)
        self.checkpoint_fn = checkpoint_fn
        self.checkpoint_every = checkpoint_every
        self.progress = progress
        self.rank_collapses = 0
        self._stage_psi2 = []

        if sampler.backend in (BACKEND.cutoff, BACKEND.categorical) and cutoff is None:
            raise ValueError(f'backend {sampler.backend.name} needs a cutoff distribution')

    def derivative(self, state: VariationalState, step: int, stage: int) -> TdvpStep:
        rng = derive_rng(self.sampler.seed, step, stage)
        q = estimate_quantities(state, self.H, self.sampler, cutoff=self.cutoff, rng=rng)
        self._stage_psi2.append(q.psi2_max_observed)
        try:
            return tdvp_step(q, self.integrator.regularization)
        except RankCollapseError:
            if self.integrator.halt_on_rank_collapse:
                raise
            self.rank_collapses += 1
            logger.warning(f'Rank collapse at step {step}, stage {stage}: parameters frozen for this stage')
            zero = np.zeros(state.n_params)
            S_hat = assemble_qgt(q)
            F_hat = assemble_force(q)
            S, F = real_projection(S_hat, F_hat)
            return TdvpStep(S, F, zero, tdvp_residual(q, zero, S_hat, F_hat), q.M_psiE, q.norm_ratio,
                            rank=0, step_failed=True, quantities=q)

    def _advance(self, state: VariationalState, k1: TdvpStep, step: int) -> Tuple[VariationalState, bool]:
        dt = self.integrator.dt
        theta = state.theta
        failed = k1.step_failed
        if self.integrator.scheme == SCHEME.heun:
            k2 = self.derivative(state.with_theta(theta + dt * k1.theta_dot), step, 1)
            new_theta = theta + 0.5 * dt * (k1.theta_dot + k2.theta_dot)
            failed |= k2.step_failed
        else:
            k2 = self.derivative(state.with_theta(theta + 0.5 * dt * k1.theta_dot), step, 1)
            k3 = self.derivative(state.with_theta(theta + 0.5 * dt * k2.theta_dot), step, 2)
            k4 = self.derivative(state.with_theta(theta + dt * k3.theta_dot), step, 3)
            new_theta = theta + dt / 6 * (k1.theta_dot + 2 * k2.theta_dot + 2 * k3.theta_dot + k4.theta_dot)
            failed |= k2.step_failed or k3.step_failed or k4.step_failed
        return state.with_theta(new_theta), failed

    def _update_reference(self):
        if self.cutoff is None or not self._stage_psi2:
            return
        observed = max(self._stage_psi2)
        if observed > self.cutoff.psi2_max_tracked:
            logger.warning(f'Cutoff reference stale: observed {observed:.4e} > tracked {self.cutoff.psi2_max_tracked:.4e}')
        self.cutoff.psi2_max_tracked = observed

    def _row(self, t: float, state: VariationalState, info: TdvpStep, failed: bool) -> Dict[str, float]:
        q = info.quantities
        row = {
            't': t,
            'energy_re': float(np.real(info.energy)),
            'energy_im': float(np.imag(info.energy)),
            'r_squared': info.r_squared if info.r_squared is not None else np.nan,
            'norm_ratio': info.norm_ratio,
            'var_gradE_mean': float(np.mean(q.var_gradE)) if q.var_gradE is not None else np.nan,
            'var_grad2_mean': float(np.mean(q.var_grad2)) if q.var_grad2 is not None else np.nan,
            'rank': info.rank,
            'step_failed': bool(failed),
        }
        if self.cutoff is not None:
            row['psi2_max_tracked'] = self.cutoff.psi2_max_tracked
        for observer in self.observers:
            row.update(observer(t, state))
        return row

    def evolve(self, state: VariationalState) -> Tuple[VariationalState, List[Dict[str, float]]]:
        if self.cutoff is not None and self.cutoff.epsilon > 0:
            self.cutoff.psi2_max_tracked = pilot_psi2_max(state, self.sampler,
                                                          rng=derive_rng(self.sampler.seed, 0, 0, 1))
            logger.info(f'Initial cutoff reference max|psi|^2 = {self.cutoff.psi2_max_tracked:.6e}')

        n_steps = self.integrator.n_steps
        rows = []
        failed = False
        for step in tqdm(range(n_steps + 1), desc='tdvp', disable=not self.progress):
            t = step * self.integrator.dt
            self._stage_psi2 = []
            k1 = self.derivative(state, step, 0)
            rows.append(self._row(t, state, k1, failed or k1.step_failed))
            if self.checkpoint_fn is not None and self.checkpoint_every and step % self.checkpoint_every == 0:
                self.checkpoint_fn(step, t, state)
            if step == n_steps:
                break
            try:
                state, failed = self._advance(state, k1, step)
            except NumericDomainError:
                logger.error(f'Non-finite parameters after step {step} (t={t:.4f}); '
                             f'last energy {k1.energy}, rank {k1.rank}')
                raise
            self._update_reference()
        if self.rank_collapses:
            logger.warning(f'{self.rank_collapses} stage(s) hit a rank collapse')
        return state, rows


def evolve(state: VariationalState, H: HamiltonianSpec, sampler: SamplerConfig, integrator: IntegratorConfig,
           cutoff: Optional[CutoffDistributionSpec] = None, observers: Sequence[Observer] = (),
           progress: bool = False, **kwargs) -> Tuple[VariationalState, List[Dict[str, float]]]:
    driver = TdvpDriver(H, sampler, integrator, cutoff=cutoff, observers=observers, progress=progress, **kwargs)
    return driver.evolve(state)
