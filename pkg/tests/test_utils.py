import json
from argparse import Namespace

import numpy as np
import pandas as pd
import pytest

from utils import (
    MissingCheckpointError,
    RankCollapseError,
    TvmcError,
    aggregate_repetitions,
    derive_rng,
    error_payload,
    list_checkpoints,
    load_checkpoint,
    read_table,
    save_checkpoint,
    setup_workers_slurm,
    write_summary,
    write_table,
)


def test_checkpoint_metadata(tmp_path):
    theta = np.array([0.1, -2.5, 3e-9])
    path = str(tmp_path / 'ckpt' / 'theta_0000010.txt')
    save_checkpoint(path, theta, 'rbm', 4, 8, t=0.1)
    loaded, meta = load_checkpoint(path)
    np.testing.assert_array_equal(loaded, theta)
    assert meta == {'kind': 'rbm', 'n_sites': 4, 'n_hidden': 8, 't': 0.1}


def test_checkpoints_are_listed_by_time(tmp_path):
    for step, t in [(20, 0.2), (0, 0.0), (10, 0.1)]:
        save_checkpoint(str(tmp_path / f'theta_{step:07d}.txt'), np.zeros(2), 'rbm', 1, 0, t=t)
    assert [t for t, _ in list_checkpoints(str(tmp_path))] == [0.0, 0.1, 0.2]


def test_missing_checkpoints(tmp_path):
    with pytest.raises(MissingCheckpointError):
        load_checkpoint(str(tmp_path / 'nope.txt'))
    with pytest.raises(MissingCheckpointError):
        list_checkpoints(str(tmp_path / 'nowhere'))
    with pytest.raises(MissingCheckpointError):
        list_checkpoints(str(tmp_path))


def test_csv_table_carries_schema(tmp_path):
    df = pd.DataFrame({'t': [0.0, 0.5], 'label': ['full', 'eps=0.1'], 'infidelity': [0.0, 1e-3]})
    path = str(tmp_path / 'infidelity.csv')
    write_table(df, path, 'tvmc-infidelity/1')
    with open(path) as fin:
        assert fin.readline().strip() == '# schema: tvmc-infidelity/1'
    pd.testing.assert_frame_equal(read_table(path), df)


def test_jsonl_table(tmp_path):
    df = pd.DataFrame({'t': [0.0], 'r_squared': [np.nan]})
    path = str(tmp_path / 'trajectory.jsonl')
    write_table(df, path, 'tvmc-trajectory/1', 'jsonl')
    with open(path) as fin:
        header = json.loads(fin.readline())
        record = json.loads(fin.readline())
    assert header == {'schema': 'tvmc-trajectory/1', 'columns': ['t', 'r_squared']}
    assert record['r_squared'] is None
    with pytest.raises(ValueError):
        write_table(df, str(tmp_path / 'x.txt'), 'tvmc-trajectory/1', 'xml')


def test_summary_is_plain_json(tmp_path):
    path = str(tmp_path / 'summary.json')
    write_summary({'value': np.float64(0.5), 'count': np.int64(3), 'flag': np.bool_(True)}, path)
    with open(path) as fin:
        assert json.load(fin) == {'schema': 'tvmc-summary/1', 'value': 0.5, 'count': 3, 'flag': True}


def test_aggregate_repetitions():
    df = pd.DataFrame({'label': ['a', 'a', 'b'], 'infidelity': [1.0, 3.0, 5.0]})
    out = aggregate_repetitions(df, ['label'], 'infidelity')
    assert list(out.columns) == ['label', 'infidelity_mean', 'infidelity_std', 'infidelity_median',
                                 'infidelity_count']
    assert out.set_index('label').loc['a', 'infidelity_mean'] == 2.0
    assert out.set_index('label').loc['b', 'infidelity_count'] == 1


def test_error_payload():
    payload = json.loads(error_payload(RankCollapseError('all modes dropped')))
    assert payload == {'error': 'RankCollapseError', 'message': 'all modes dropped'}
    assert issubclass(RankCollapseError, TvmcError)


def test_derived_streams():
    a = derive_rng(3, 1, 2).random(4)
    np.testing.assert_array_equal(a, derive_rng(3, 1, 2).random(4))
    assert not np.allclose(a, derive_rng(3, 2, 1).random(4))


def test_worker_count_from_slurm(monkeypatch):
    monkeypatch.setenv('SLURM_JOB_ID', '42')
    monkeypatch.setenv('SLURM_CPUS_PER_TASK', '6')
    args = Namespace(num_workers=0)
    setup_workers_slurm(args)
    assert args.num_workers == 6
    monkeypatch.delenv('SLURM_JOB_ID')
    args = Namespace(num_workers=0)
    setup_workers_slurm(args)
    assert args.num_workers == 1
