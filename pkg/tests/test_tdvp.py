import logging

import numpy as np
import pytest

import tdvp
from conftest import random_rbm
from spin_model import MODEL, HamiltonianSpec, all_configurations
from models.ansatz import ANSATZ, VariationalState, amplitudes_batch, direct_state, init_state
from estimators import (
    BACKEND,
    CutoffDistributionSpec,
    SamplerConfig,
    cutoff_weight,
    estimate_quantities,
    moments_from_samples,
)
from exact_reference import observable_x_total, variational_to_dense
from tdvp import (
    SCHEME,
    IntegratorConfig,
    Regularization,
    TdvpDriver,
    assemble_force,
    assemble_qgt,
    evolve,
    real_projection,
    solve_update,
    tdvp_residual,
    tdvp_step,
)
from utils import RankCollapseError

FULL = SamplerConfig(BACKEND.full)


def test_solve_update_drops_small_modes():
    theta_dot, rank = solve_update(np.diag([1.0, 1e-16]), np.array([1.0, 1.0]), Regularization(svd_cutoff=1e-8))
    np.testing.assert_allclose(theta_dot, [1.0, 0.0])
    assert rank == 1


def test_solve_update_zero_matrix():
    with pytest.raises(RankCollapseError):
        solve_update(np.zeros((3, 3)), np.ones(3))


def test_solve_update_diagonal_shift():
    theta_dot, rank = solve_update(np.zeros((2, 2)), np.array([1.0, 2.0]), Regularization(diagonal_shift=0.5))
    np.testing.assert_allclose(theta_dot, [2.0, 4.0])
    assert rank == 2


def test_real_projection(tfim4, rbm4):
    q = estimate_quantities(rbm4, tfim4, FULL)
    S_hat, F_hat = assemble_qgt(q), assemble_force(q)
    np.testing.assert_allclose(S_hat, S_hat.conj().T, atol=1e-12)
    S, F = real_projection(S_hat, F_hat)
    np.testing.assert_allclose(S, -S.T, atol=0)
    np.testing.assert_allclose(F, -np.real(F_hat), atol=1e-15)


def test_residual_without_motion_is_one(tfim4, rbm4):
    q = estimate_quantities(rbm4, tfim4, FULL)
    assert tdvp_residual(q, np.zeros(rbm4.n_params)) == pytest.approx(1.0)


def test_residual_undefined_for_eigenstate(caplog):
    H = HamiltonianSpec(MODEL.tfim, 4, J=0.0, g=1.0)
    state = VariationalState(ANSATZ.rbm, 4, np.zeros(2 * (4 + 4 + 16)), 4)
    q = estimate_quantities(state, H, FULL)
    with caplog.at_level(logging.WARNING, logger='tdvp'):
        assert tdvp_residual(q, np.zeros(state.n_params)) is None
    assert any('R^2 undefined' in r.message for r in caplog.records)


def test_single_spin_follows_exact_precession():
    H = HamiltonianSpec.single_spin_y()
    integrator = IntegratorConfig(SCHEME.rk4, dt=0.01, t_max=0.5)
    state, rows = evolve(init_state(ANSATZ.direct2, 1), H, FULL, integrator)
    assert len(rows) == 51
    sx = observable_x_total(variational_to_dense(state))
    assert sx == pytest.approx(np.cos(2 * 0.5), abs=1e-6)
    assert max(r['r_squared'] for r in rows) < 1e-10
    assert max(abs(r['energy_re'] - rows[0]['energy_re']) for r in rows) < 1e-8


def test_energy_conserved_for_tfim(tfim4):
    state = random_rbm(4, 4, std=0.3, seed=7)
    integrator = IntegratorConfig(SCHEME.rk4, dt=0.01, t_max=0.2)
    _, rows = evolve(state, tfim4, FULL, integrator)
    energies = np.array([r['energy_re'] for r in rows])
    assert np.abs(energies - energies[0]).max() < 1e-5
    assert not any(r['step_failed'] for r in rows)


def test_moments_invariant_under_sampling_weight_scale(tfim4, rbm4, rng):
    configs = all_configurations(4)[rng.integers(0, 16, size=64)]
    psi2 = np.ones(64)
    a = moments_from_samples(rbm4, tfim4, configs, psi2)
    b = moments_from_samples(rbm4, tfim4, configs, 7.0 * psi2)
    for name in ('M_grad2', 'M_gradE', 'M_psiGrad', 'M_psiE', 'M_EE'):
        np.testing.assert_allclose(getattr(a, name), getattr(b, name), atol=1e-12)


def test_cutoff_weight_scale_does_not_change_moments(tfim4, rbm4, rng):
    configs = all_configurations(4)[rng.integers(0, 16, size=64)]
    psi2 = np.abs(amplitudes_batch(rbm4, configs)) ** 2
    spec = CutoffDistributionSpec(0.1, psi2_max_tracked=psi2.max())
    a = moments_from_samples(rbm4, tfim4, configs, cutoff_weight(psi2, spec))
    b = moments_from_samples(rbm4, tfim4, configs, 3.0 * cutoff_weight(psi2, spec))
    np.testing.assert_allclose(a.M_gradE, b.M_gradE, atol=1e-12)


def test_amplitude_scale_scales_velocity():
    H = HamiltonianSpec.single_spin_y()
    base = tdvp_step(estimate_quantities(direct_state(0.6, 0.8j), H, FULL))
    scaled = tdvp_step(estimate_quantities(direct_state(1.8, 2.4j), H, FULL))
    np.testing.assert_allclose(scaled.theta_dot, 3.0 * base.theta_dot, atol=1e-12)


def test_rbm_sign_flip_leaves_velocity_unchanged():
    H = HamiltonianSpec(MODEL.tfim, 3, J=1.0, g=0.8)
    state = random_rbm(3, 3, std=0.3, seed=2)
    theta = state.theta.copy()
    # Im a_i += pi multiplies psi by (-1)^N
    theta[1:6:2] += np.pi
    flipped = state.with_theta(theta)
    configs = all_configurations(3)
    np.testing.assert_allclose(amplitudes_batch(flipped, configs), -amplitudes_batch(state, configs), rtol=1e-12)
    base = tdvp_step(estimate_quantities(state, H, FULL)).theta_dot
    other = tdvp_step(estimate_quantities(flipped, H, FULL)).theta_dot
    assert np.linalg.norm(other - base) < 1e-10 * np.linalg.norm(base)


def _collapse(*args, **kwargs):
    raise RankCollapseError('forced')


def test_rank_collapse_freezes_parameters(monkeypatch, tfim4, rbm4):
    monkeypatch.setattr(tdvp, 'solve_update', _collapse)
    integrator = IntegratorConfig(SCHEME.heun, dt=0.01, t_max=0.03)
    driver = TdvpDriver(tfim4, FULL, integrator, progress=False)
    state, rows = driver.evolve(rbm4)
    np.testing.assert_array_equal(state.theta, rbm4.theta)
    assert all(r['step_failed'] for r in rows)
    assert driver.rank_collapses > 0


def test_rank_collapse_can_halt(monkeypatch, tfim4, rbm4):
    monkeypatch.setattr(tdvp, 'solve_update', _collapse)
    integrator = IntegratorConfig(SCHEME.heun, dt=0.01, t_max=0.03, halt_on_rank_collapse=True)
    with pytest.raises(RankCollapseError):
        evolve(rbm4, tfim4, FULL, integrator)


def test_cutoff_reference_is_tracked():
    H = HamiltonianSpec.single_spin_y()
    sampler = SamplerConfig(BACKEND.categorical, n_samples=200, seed=3)
    cutoff = CutoffDistributionSpec(0.1)
    integrator = IntegratorConfig(SCHEME.heun, dt=0.01, t_max=0.02)
    _, rows = evolve(init_state(ANSATZ.direct2, 1), H, sampler, integrator, cutoff=cutoff)
    assert all(r['psi2_max_tracked'] > 0 for r in rows)
    assert all(np.isfinite(r['var_gradE_mean']) for r in rows)


def test_stale_cutoff_reference_is_reported(caplog):
    H = HamiltonianSpec.single_spin_y()
    sampler = SamplerConfig(BACKEND.categorical, n_samples=2000, seed=4)
    integrator = IntegratorConfig(SCHEME.heun, dt=0.01, t_max=0.02)
    with caplog.at_level(logging.WARNING, logger='tdvp'):
        evolve(init_state(ANSATZ.direct2, 1), H, sampler, integrator, cutoff=CutoffDistributionSpec(0.1))
    assert any('reference stale' in r.message for r in caplog.records)


def test_cutoff_backend_requires_distribution(tfim4):
    with pytest.raises(ValueError):
        TdvpDriver(tfim4, SamplerConfig(BACKEND.cutoff, n_samples=16, chains=16), IntegratorConfig())


def test_integrator_validation():
    with pytest.raises(ValueError):
        IntegratorConfig(dt=0.0)
    assert IntegratorConfig(dt=0.01, t_max=1.0).n_steps == 100
    assert SCHEME.from_string('RK4') == SCHEME.rk4
