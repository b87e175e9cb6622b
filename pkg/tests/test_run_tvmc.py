import json
import os

import numpy as np
import pandas as pd
import pytest

import run_tvmc
from run_tvmc import load_arguments, main, repetition_seed
from spin_model import MODEL
from estimators import BACKEND
from utils import read_table


@pytest.fixture(autouse=True)
def no_slurm(monkeypatch):
    monkeypatch.delenv('SLURM_JOB_ID', raising=False)


def _write_config(path, values):
    with open(path, 'w') as fout:
        json.dump(values, fout)
    return str(path)


def test_presets_load():
    for name in ('single_spin', 'tilted_ising_n10', 'tfim_n12', 'tfim_n8', 'tci_bench'):
        config = load_arguments(preset=name)
        config.validate()
    config = load_arguments(preset='single_spin', seed=9, out='elsewhere')
    assert config.model.model == MODEL.single_spin_y
    assert config.sampler.backend == BACKEND.cutoff
    assert config.experiment.seed == 9
    assert config.experiment.output_dir == 'elsewhere'


def test_unknown_key_is_rejected(tmp_path, capsys):
    path = _write_config(tmp_path / 'bad.json', {'N': 4, 'bogus': 1})
    assert main(['validate-config', '--config', path]) == 2
    assert 'error' in json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_invalid_value_is_rejected(tmp_path):
    path = _write_config(tmp_path / 'bad.json', {'backend': 'cutoff', 'n_samples': 1001, 'chains': 10})
    assert main(['run-tfim', '--config', path]) == 2


def test_single_spin_with_many_sites_is_rejected(tmp_path, capsys):
    path = _write_config(tmp_path / 'bad.json', {'N': 7})
    assert main(['run-single-spin', '--preset', 'single_spin', '--config', path]) == 2
    assert 'error' in json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_validate_config(tmp_path, capsys):
    assert main(['validate-config', '--preset', 'tfim_n12']) == 0
    out = capsys.readouterr().out
    payload = json.loads(out[out.index('{\n'):])
    assert payload['valid']
    assert payload['config']['model']['N'] == 12


def test_repetition_seed():
    assert repetition_seed(0, 1) == repetition_seed(0, 1)
    assert len({repetition_seed(0, r) for r in range(5)}) == 5


def test_single_spin_run(tmp_path):
    out = tmp_path / 'single'
    path = _write_config(tmp_path / 'tiny.json', {
        'dt': 0.005, 't_max': 0.01, 'repetitions': 2, 'n_samples': 20, 'chains': 10, 'burn_in': 2,
    })
    assert main(['run-single-spin', '--preset', 'single_spin', '--config', path, '--out', str(out)]) == 0
    df = read_table(os.path.join(out, 'trajectory.csv'))
    assert set(df['label']) == {'full', 'eps=0', 'eps=0.1'}
    assert set(df[df['label'] == 'eps=0.1']['repetition']) == {0, 1}
    assert len(df[df['label'] == 'full']) == 3
    np.testing.assert_allclose(df['sx_exact'], np.cos(2 * df['t']), atol=1e-10)
    with open(os.path.join(out, 'summary.json')) as fin:
        summary = json.load(fin)
    assert summary['schema'] == 'tvmc-summary/1'
    assert set(summary['max_deviation']) == {'full', 'eps=0', 'eps=0.1'}
    assert os.path.exists(os.path.join(out, 'magnetization.csv'))


def test_tci_benchmark_needs_checkpoints(tmp_path):
    path = _write_config(tmp_path / 'bench.json', {
        'N': 4, 'hidden_density': 1.0, 'checkpoint_dir': str(tmp_path / 'missing'), 'chi_max_list': [4],
        'output_dir': str(tmp_path / 'bench'),
    })
    assert main(['run-tci-bench', '--config', path]) == 1


def test_quench_then_benchmark(tmp_path):
    quench_out = tmp_path / 'quench'
    quench = _write_config(tmp_path / 'quench.json', {
        'model': 'tfim', 'N': 4, 'hidden_density': 1.0, 'backend': 'cutoff', 'epsilons': [1e-4],
        'n_samples': 40, 'chains': 10, 'burn_in': 5, 'dt': 0.01, 't_max': 0.02, 'checkpoint_every': 1,
        'output_dir': str(quench_out),
    })
    assert main(['run-tfim', '--config', quench]) == 0
    diagnostics = read_table(os.path.join(quench_out, 'diagnostics.csv'))
    assert {'norm_ratio', 'norm_ratio_exact', 'r_squared'} <= set(diagnostics.columns)
    ckpt_dir = quench_out / 'checkpoints' / 'eps=0.0001'
    assert len(os.listdir(ckpt_dir)) == 3

    bench_out = tmp_path / 'bench'
    bench = _write_config(tmp_path / 'bench.json', {
        'model': 'tfim', 'N': 4, 'hidden_density': 1.0, 'checkpoint_dir': str(ckpt_dir),
        'chi_max_list': [16], 'eps_tci': 1e-12, 'repetitions': 1, 'output_dir': str(bench_out),
    })
    assert main(['run-tci-bench', '--config', bench]) == 0
    df = read_table(os.path.join(bench_out, 'tci_error.csv'))
    assert set(df['method']) == {'reference', 'tci'}
    assert (df[df['method'] == 'reference'][['delta_F', 'delta_S']] == 0).all().all()
    assert len(df[df['method'] == 'tci']) == 3
    assert (df[df['method'] == 'tci']['delta_S'] < 1e-6).all()


def test_jobs_cover_epsilons_and_repetitions():
    config = load_arguments(preset='tilted_ising_n10')
    jobs = run_tvmc._sampled_jobs(config, with_n_samples_sweep=True)
    assert jobs[0].label == 'full'
    assert len(jobs) == 1 + 2 * 2 * 5
    assert pd.Series([j.seed for j in jobs[1:]]).nunique() == 5


@pytest.mark.slow
def test_born_sampling_stalls_where_cutoff_does_not(tmp_path):
    config = load_arguments(preset='single_spin', out=str(tmp_path))
    config.experiment.repetitions = 1
    summary = run_tvmc.run_single_spin(config)
    assert summary['max_deviation_late']['eps=0'] > 0.2
    assert summary['max_deviation']['eps=0.1'] < 0.05


@pytest.mark.slow
def test_cutoff_lowers_tilted_ising_infidelity(tmp_path):
    config = load_arguments(preset='tilted_ising_n10', out=str(tmp_path))
    config.experiment.n_samples_list = None
    summary = run_tvmc.run_tilted_ising(config)
    medians = {row['label']: row['infidelity_median'] for row in summary['final_infidelity']}
    assert 10 * medians['eps=0.001'] <= medians['eps=0']
