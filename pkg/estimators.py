"""
Monte-Carlo and exact estimators for the expectation values entering the TDVP equation.

Four moments are produced (all divided by <psi|psi>):
    M_grad2[k, k'] = <d_k psi | d_k' psi>
    M_gradE[k]     = <d_k psi | H | psi>
    M_psiGrad[k']  = <psi | d_k' psi>
    M_psiE         = <psi | H | psi>
plus M_EE = <psi | H^2 | psi> for the energy variance.

With a sampling weight q and Born weight p = |psi|^2 every moment is estimated
self-normalized as sum(integrand / q) / sum(p / q), so configurations with
psi(s) = 0 contribute finite terms whenever q(s) > 0.
"""
from typing import Callable, Iterator, Optional
from dataclasses import dataclass, field
from enum import Enum, auto
import logging

import numpy as np

from spin_model import (
    DENSE_CAP,
    HamiltonianSpec,
    all_configurations,
    diagonal_batch,
    flip_elements_batch,
    flipped_configurations,
    index_to_spins,
)
from models.ansatz import AmplitudeAndGradient, VariationalState, amplitudes_batch, evaluate_batch
from utils import (
    DegenerateTargetError,
    DegenerateWeightsError,
    InvalidReferenceError,
    ResourceLimitError,
    derive_rng,
)

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


class BACKEND(Enum):
    full = auto()
    born = auto()
    cutoff = auto()
    categorical = auto()

    @staticmethod
    def from_string(s):
        try:
            return BACKEND[s.lower()]
        except KeyError:
            raise ValueError(f'unknown backend {s}')


class FLOOR_MODE(Enum):
    relative = auto()
    absolute = auto()

    @staticmethod
    def from_string(s):
        try:
            return FLOOR_MODE[s.lower()]
        except KeyError:
            raise ValueError(f'unknown floor mode {s}')


@dataclass
class CutoffDistributionSpec:
    epsilon: float
    psi2_max_tracked: float = 1.0
    floor_mode: FLOOR_MODE = FLOOR_MODE.relative

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f'cutoff must be non-negative, got {self.epsilon}')


@dataclass
class SamplerConfig:
    backend: BACKEND = BACKEND.cutoff
    n_samples: int = 1000
    chains: int = 16
    burn_in: int = 100
    thin: int = 2
    seed: int = 0
    dense_cap: int = DENSE_CAP
    chunk_size: int = 2048

    def __post_init__(self):
        if self.backend in (BACKEND.born, BACKEND.cutoff) and self.n_samples % self.chains != 0:
            raise ValueError(f'n_samples={self.n_samples} is not divisible by chains={self.chains}')
        if self.thin < 1 or self.burn_in < 0:
            raise ValueError('thin must be >= 1 and burn_in >= 0')


@dataclass
class SampleBatch:
    configs: np.ndarray
    p: np.ndarray
    q: np.ndarray
    w: np.ndarray
    amp_grad: AmplitudeAndGradient
    e_loc_unnorm: np.ndarray
    e_loc_ratio: np.ndarray
    e_loc_valid: np.ndarray

    def __len__(self):
        return len(self.p)


@dataclass
class TdvpQuantities:
    M_grad2: np.ndarray
    M_gradE: np.ndarray
    M_psiGrad: np.ndarray
    M_psiE: complex
    M_EE: float
    norm_ratio: float = 1.0
    var_gradE: Optional[np.ndarray] = None
    var_grad2: Optional[np.ndarray] = None
    psi2_max_observed: float = 0.0
    n_samples: int = 0
    backend: BACKEND = BACKEND.full

    @property
    def energy(self) -> complex:
        return self.M_psiE

    @property
    def energy_variance(self) -> float:
        return float(self.M_EE - abs(self.M_psiE) ** 2)


def cutoff_weight(psi2, spec: CutoffDistributionSpec):
    """Born weight with a floor: psi2 above eps * reference, the floor below it."""
    psi2 = np.asarray(psi2, dtype=np.float64)
    if spec.epsilon == 0:
        return psi2
    if spec.psi2_max_tracked <= 0:
        raise InvalidReferenceError(f'reference max |psi|^2 must be positive, got {spec.psi2_max_tracked}')
    ref = spec.psi2_max_tracked
    floor = spec.epsilon * ref if spec.floor_mode == FLOOR_MODE.relative else spec.epsilon
    out = np.where(psi2 / ref > spec.epsilon, psi2, floor)
    return out if out.ndim else float(out)


def metropolis_sample(weight_fn: Callable[[np.ndarray], np.ndarray], n_sites: int, n_samples: int,
                      chains: int = 16, burn_in: int = 100, thin: int = 2, seed=0,
                      return_acceptance: bool = False):
    """
    Lazy single-spin-flip Metropolis-Hastings, all chains advanced together.

    Each chain holds its state with probability 1/2 per update and otherwise proposes a
    flip; a flip changes the spin parity, so without the hold a flat target gives a
    periodic chain. A chain sitting on a zero-weight configuration always moves to a
    positive-weight proposal.

    A sweep is n_sites updates per chain. Each chain discards `burn_in` sweeps and then
    records its state every `thin` sweeps. Samples are returned chain-major, and the
    acceptance rate counts only the updates that proposed a flip.
    """
    if n_samples % chains != 0:
        raise ValueError(f'n_samples={n_samples} is not divisible by chains={chains}')
    rng = seed if isinstance(seed, np.random.Generator) else derive_rng(seed)
    per_chain = n_samples // chains

    state = np.where(rng.random((chains, n_sites)) < 0.5, 1, -1).astype(np.int8)
    with np.errstate(divide='ignore'):
        log_w = np.log(np.asarray(weight_fn(state), dtype=np.float64))

    samples = np.empty((chains, per_chain, n_sites), dtype=np.int8)
    sample_log_w = np.empty((chains, per_chain))
    accepted = 0
    proposed = 0
    rows = np.arange(chains)
    n_sweeps = burn_in + per_chain * thin
    recorded = 0
    for sweep in range(n_sweeps):
        for _ in range(n_sites):
            sites = rng.integers(0, n_sites, size=chains)
            proposal = state.copy()
            proposal[rows, sites] *= -1
            with np.errstate(divide='ignore'):
                log_w_new = np.log(np.asarray(weight_fn(proposal), dtype=np.float64))
            log_u = np.log(rng.random(chains))
            move = rng.random(chains) < 0.5
            escape = np.isneginf(log_w) & np.isfinite(log_w_new)
            with np.errstate(invalid='ignore'):
                accept = (move & (log_u < log_w_new - log_w)) | escape
            state[accept] = proposal[accept]
            log_w[accept] = log_w_new[accept]
            accepted += int(accept.sum())
            proposed += int((move | escape).sum())
        if sweep >= burn_in and (sweep - burn_in + 1) % thin == 0:
            samples[:, recorded] = state
            sample_log_w[:, recorded] = log_w
            recorded += 1

    if np.all(np.isneginf(sample_log_w)):
        raise DegenerateTargetError('the sampling weight vanished on every visited configuration')
    out = samples.reshape(n_samples, n_sites)
    if return_acceptance:
        return out, accepted / max(proposed, 1)
    return out


def exact_categorical_sample(weight_fn: Callable[[np.ndarray], np.ndarray], n_sites: int, n_samples: int,
                             seed=0, cap: int = DENSE_CAP) -> np.ndarray:
    """I.i.d. draws from the exactly normalized weight table over all 2^N configurations."""
    if n_sites > cap:
        raise ResourceLimitError(f'{n_sites} sites exceed the enumeration cap of {cap}')
    rng = seed if isinstance(seed, np.random.Generator) else derive_rng(seed)
    table = np.asarray(weight_fn(all_configurations(n_sites)), dtype=np.float64)
    total = table.sum()
    if not total > 0:
        raise DegenerateTargetError('the weight table is identically zero')
    index = rng.choice(table.size, size=n_samples, p=table / total)
    return index_to_spins(index, n_sites)


def _self_normalized(weighted_sum, sum_w: float):
    if not sum_w > 0:
        raise DegenerateWeightsError('importance weights sum to zero')
    return weighted_sum / sum_w


def _inverse_mean_weight(n: int, sum_w: float) -> float:
    if not sum_w > 0:
        raise DegenerateWeightsError('importance weights sum to zero')
    return float(n / sum_w)


def _delta_method_variance(sum_ww_ff, sum_ww_f, sum_ww: float, mu, sum_w: float, n: int) -> np.ndarray:
    """mean(w^2 |f - mu|^2) / mean(w)^2 from the running sums of w^2|f|^2, w^2 f and w^2."""
    mean_dev = (sum_ww_ff - 2 * np.real(np.conj(mu) * sum_ww_f) + np.abs(mu) ** 2 * sum_ww) / n
    return np.maximum(mean_dev, 0.0) / (sum_w / n) ** 2


def snis_mean(values, w) -> complex:
    """sum(w f) / sum(w) over the leading (sample) axis."""
    values = np.asarray(values)
    w = np.asarray(w, dtype=np.float64)
    return _self_normalized(np.tensordot(w, values, axes=(0, 0)), w.sum())


def norm_ratio(w) -> float:
    """N_q / N_p estimated as the inverse sample mean of p/q."""
    w = np.asarray(w, dtype=np.float64)
    return _inverse_mean_weight(w.size, w.sum())


def snis_component_variance(values, w) -> np.ndarray:
    """
    Delta-method variance mean(w^2 |f - mu|^2) / mean(w)^2, per component.
    The 1/N_S factor of the estimator variance is left to the caller.
    """
    values = np.asarray(values)
    w = np.asarray(w, dtype=np.float64)
    mu = snis_mean(values, w)
    ww = w ** 2
    return _delta_method_variance(np.tensordot(ww, np.abs(values) ** 2, axes=(0, 0)),
                                  np.tensordot(ww, values, axes=(0, 0)), float(ww.sum()), mu, float(w.sum()),
                                  w.size)


def local_energy_unnormalized(state: VariationalState, H: HamiltonianSpec, spins: np.ndarray,
                              psi: Optional[np.ndarray] = None) -> np.ndarray:
    """E_loc(s) = sum_{s'} H_{s,s'} psi(s')."""
    spins = np.asarray(spins)
    if psi is None:
        psi = amplitudes_batch(state, spins)
    e_loc = diagonal_batch(H, spins) * psi
    if H.field != 0.0:
        psi_flips = amplitudes_batch(state, flipped_configurations(spins))
        e_loc = e_loc + np.sum(flip_elements_batch(H, spins) * psi_flips, axis=-1)
    return e_loc


def build_sample_batch(state: VariationalState, H: HamiltonianSpec, configs: np.ndarray,
                       q: Optional[np.ndarray] = None) -> SampleBatch:
    amp = evaluate_batch(state, configs)
    p = np.abs(amp.psi) ** 2
    q = p.copy() if q is None else np.asarray(q, dtype=np.float64)
    with np.errstate(divide='ignore', invalid='ignore'):
        w = np.where(q > 0, p / q, 0.0)
    e_loc = local_energy_unnormalized(state, H, configs, psi=amp.psi)
    valid = amp.log_valid
    with np.errstate(divide='ignore', invalid='ignore'):
        ratio = np.where(valid, e_loc / np.where(valid, amp.psi, 1), np.nan)
    return SampleBatch(configs, p, q, w, amp, e_loc, ratio, valid)


@dataclass
class _MomentSums:
    """Ordered fold of per-sample integrands; combine() is associative in a fixed order."""
    n_params: int
    with_variance: bool = True
    n: int = 0
    sum_w: float = 0.0
    sum_ww: float = 0.0
    grad2: np.ndarray = field(default=None)
    gradE: np.ndarray = field(default=None)
    psiGrad: np.ndarray = field(default=None)
    psiE: complex = 0.0
    EE: float = 0.0
    gg_grad2: np.ndarray = field(default=None)
    wg_grad2: np.ndarray = field(default=None)
    gg_gradE: np.ndarray = field(default=None)
    wg_gradE: np.ndarray = field(default=None)
    psi2_max: float = 0.0

    def __post_init__(self):
        k = self.n_params
        self.grad2 = np.zeros((k, k), dtype=np.complex128)
        self.gradE = np.zeros(k, dtype=np.complex128)
        self.psiGrad = np.zeros(k, dtype=np.complex128)
        self.gg_grad2 = np.zeros((k, k))
        self.wg_grad2 = np.zeros((k, k), dtype=np.complex128)
        self.gg_gradE = np.zeros(k)
        self.wg_gradE = np.zeros(k, dtype=np.complex128)

    def add(self, grad: np.ndarray, e_loc: np.ndarray, psi: np.ndarray, inv_q: np.ndarray, w: np.ndarray,
            psi2: np.ndarray):
        """
        grad, e_loc, psi are the amplitude-level quantities of each sample (or their
        log-derivative counterparts with psi = 1 for plain Born estimators).
        """
        grad_c = grad.conj()
        self.n += len(w)
        self.sum_w += float(w.sum())
        self.sum_ww += float(np.dot(w, w))
        self.grad2 += (grad_c * inv_q[:, None]).T @ grad
        self.gradE += (grad_c * inv_q[:, None]).T @ e_loc
        self.psiGrad += (psi.conj() * inv_q) @ grad
        self.psiE += complex(np.sum(psi.conj() * e_loc * inv_q))
        self.EE += float(np.sum(np.abs(e_loc) ** 2 * inv_q))
        self.psi2_max = max(self.psi2_max, float(np.max(psi2)) if len(psi2) else 0.0)
        if self.with_variance:
            abs_g = np.abs(grad) ** 2 * inv_q[:, None]
            self.gg_grad2 += abs_g.T @ abs_g
            self.wg_grad2 += (grad_c * (w * inv_q)[:, None]).T @ grad
            self.gg_gradE += abs_g.T @ (np.abs(e_loc) ** 2 * inv_q)
            self.wg_gradE += (grad_c * (w * inv_q)[:, None]).T @ e_loc

    def _variance(self, mu, gg, wg):
        return _delta_method_variance(gg, wg, self.sum_ww, mu, self.sum_w, self.n)

    def finalize(self, backend: BACKEND, with_norm_ratio: bool) -> TdvpQuantities:
        grad2 = _self_normalized(self.grad2, self.sum_w)
        grad2 = 0.5 * (grad2 + grad2.conj().T)
        gradE = _self_normalized(self.gradE, self.sum_w)
        var_gradE = var_grad2 = None
        if self.with_variance:
            var_grad2 = self._variance(grad2, self.gg_grad2, self.wg_grad2)
            var_gradE = self._variance(gradE, self.gg_gradE, self.wg_gradE)
        return TdvpQuantities(
            M_grad2=grad2,
            M_gradE=gradE,
            M_psiGrad=_self_normalized(self.psiGrad, self.sum_w),
            M_psiE=_self_normalized(self.psiE, self.sum_w),
            M_EE=_self_normalized(self.EE, self.sum_w),
            norm_ratio=_inverse_mean_weight(self.n, self.sum_w) if with_norm_ratio else 1.0,
            var_gradE=var_gradE,
            var_grad2=var_grad2,
            psi2_max_observed=self.psi2_max,
            n_samples=self.n,
            backend=backend,
        )


def _chunks(n: int, size: int) -> Iterator[slice]:
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def _born_weight_fn(state: VariationalState):
    return lambda spins: np.abs(amplitudes_batch(state, spins)) ** 2


def _cutoff_weight_fn(state: VariationalState, spec: CutoffDistributionSpec):
    return lambda spins: cutoff_weight(np.abs(amplitudes_batch(state, spins)) ** 2, spec)


def draw_samples(state: VariationalState, sampler: SamplerConfig, weight_fn, rng) -> np.ndarray:
    if sampler.backend == BACKEND.categorical:
        return exact_categorical_sample(weight_fn, state.n_sites, sampler.n_samples, seed=rng,
                                        cap=sampler.dense_cap)
    return metropolis_sample(weight_fn, state.n_sites, sampler.n_samples, chains=sampler.chains,
                             burn_in=sampler.burn_in, thin=sampler.thin, seed=rng)


def estimate_quantities(state: VariationalState, H: HamiltonianSpec, sampler: SamplerConfig,
                        cutoff: Optional[CutoffDistributionSpec] = None, rng=None) -> TdvpQuantities:
    if rng is None:
        rng = derive_rng(sampler.seed)
    backend = sampler.backend
    sums = _MomentSums(state.n_params, with_variance=backend != BACKEND.full)

    if backend == BACKEND.full:
        if state.n_sites > sampler.dense_cap:
            raise ResourceLimitError(f'{state.n_sites} sites exceed the full-summation cap of {sampler.dense_cap}')
        configs = all_configurations(state.n_sites)
        for sl in _chunks(len(configs), sampler.chunk_size):
            batch = build_sample_batch(state, H, configs[sl])
            ones = np.ones(len(batch))
            sums.add(batch.amp_grad.grad_psi, batch.e_loc_unnorm, batch.amp_grad.psi, ones, batch.p, batch.p)
        return sums.finalize(backend, with_norm_ratio=False)

    if backend == BACKEND.born:
        configs = draw_samples(state, sampler, _born_weight_fn(state), rng)
        for sl in _chunks(len(configs), sampler.chunk_size):
            batch = build_sample_batch(state, H, configs[sl])
            ones = np.ones(len(batch))
            # log-derivative forms: d_k(log psi)* and the local energy ratio
            sums.add(batch.amp_grad.grad_log_psi, batch.e_loc_ratio, ones.astype(np.complex128), ones, ones,
                     batch.p)
        return sums.finalize(backend, with_norm_ratio=False)

    if cutoff is None:
        raise ValueError(f'backend {backend.name} needs a cutoff distribution')
    configs = draw_samples(state, sampler, _cutoff_weight_fn(state, cutoff), rng)
    q = cutoff_weight(np.abs(amplitudes_batch(state, configs)) ** 2, cutoff)
    return moments_from_samples(state, H, configs, q, backend=backend, chunk_size=sampler.chunk_size)


def moments_from_samples(state: VariationalState, H: HamiltonianSpec, configs: np.ndarray, q: np.ndarray,
                         backend: BACKEND = BACKEND.cutoff, chunk_size: int = 2048) -> TdvpQuantities:
    """Self-normalized moments of configurations drawn from a distribution proportional to q."""
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0):
        raise DegenerateWeightsError('sampled a configuration with vanishing sampling weight')
    sums = _MomentSums(state.n_params)
    for sl in _chunks(len(configs), chunk_size):
        batch = build_sample_batch(state, H, configs[sl], q=q[sl])
        sums.add(batch.amp_grad.grad_psi, batch.e_loc_unnorm, batch.amp_grad.psi, 1.0 / batch.q, batch.w,
                 batch.p)
    return sums.finalize(backend, with_norm_ratio=True)


def pilot_psi2_max(state: VariationalState, sampler: SamplerConfig, rng=None) -> float:
    """Largest |psi|^2 seen in a Born-distributed batch, the starting cutoff reference."""
    if rng is None:
        rng = derive_rng(sampler.seed, 0, 0, 1)
    configs = draw_samples(state, sampler, _born_weight_fn(state), rng)
    psi2 = np.abs(amplitudes_batch(state, configs)) ** 2
    return float(psi2.max())


def exact_norm_ratio(state: VariationalState, spec: CutoffDistributionSpec, cap: int = DENSE_CAP) -> float:
    if state.n_sites > cap:
        raise ResourceLimitError(f'{state.n_sites} sites exceed the enumeration cap of {cap}')
    psi2 = np.abs(amplitudes_batch(state, all_configurations(state.n_sites))) ** 2
    return float(np.sum(cutoff_weight(psi2, spec)) / np.sum(psi2))


def born_bias(state: VariationalState, H: HamiltonianSpec, root_tol: float = 0.0,
              cap: int = DENSE_CAP) -> TdvpQuantities:
    """
    The part of each moment the Born estimator cannot see: the sum restricted to
    configurations with |psi|^2 <= root_tol * max|psi|^2, divided by <psi|psi>.
    """
    if state.n_sites > cap:
        raise ResourceLimitError(f'{state.n_sites} sites exceed the enumeration cap of {cap}')
    batch = build_sample_batch(state, H, all_configurations(state.n_sites))
    norm = batch.p.sum()
    roots = batch.p <= root_tol * batch.p.max()
    grad = batch.amp_grad.grad_psi[roots]
    e_loc = batch.e_loc_unnorm[roots]
    psi = batch.amp_grad.psi[roots]
    return TdvpQuantities(
        M_grad2=grad.conj().T @ grad / norm,
        M_gradE=grad.conj().T @ e_loc / norm,
        M_psiGrad=psi.conj() @ grad / norm,
        M_psiE=complex(np.sum(psi.conj() * e_loc) / norm),
        M_EE=float(np.sum(np.abs(e_loc) ** 2) / norm),
        n_samples=int(roots.sum()),
        backend=BACKEND.full,
    )
