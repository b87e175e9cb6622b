from typing import Any, Dict, List, Tuple
import os
import json
import logging
from argparse import Namespace
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)
logger.setLevel(20)

SCHEMA_TRAJECTORY = 'tvmc-trajectory/1'
SCHEMA_INFIDELITY = 'tvmc-infidelity/1'
SCHEMA_TCI = 'tvmc-tci-error/1'
SCHEMA_SUMMARY = 'tvmc-summary/1'


class TvmcError(Exception):
    """Base class of every error the driver reports as machine-readable JSON."""


class ConfigurationShapeError(TvmcError, ValueError):
    pass


class ResourceLimitError(TvmcError, ValueError):
    pass


class NumericDomainError(TvmcError, ValueError):
    pass


class DegenerateTargetError(TvmcError, ValueError):
    pass


class DegenerateWeightsError(TvmcError, ValueError):
    pass


class InvalidReferenceError(TvmcError, ValueError):
    pass


class UndefinedStateError(TvmcError, ValueError):
    pass


class PreconditionError(TvmcError, ValueError):
    pass


class RankCollapseError(TvmcError, RuntimeError):
    pass


class MissingCheckpointError(TvmcError, FileNotFoundError):
    pass


def setup_workers_slurm(args: Namespace):
    # a SLURM allocation decides how many job processes we may fork
    is_slurm = os.getenv('SLURM_JOB_ID') is not None
    if is_slurm and not getattr(args, 'num_workers', None):
        args.num_workers = int(os.getenv('SLURM_CPUS_PER_TASK', '1'))
        logger.info(f'SLURM job {os.getenv("SLURM_JOB_ID")}: using {args.num_workers} workers')
    elif not getattr(args, 'num_workers', None):
        args.num_workers = 1


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Generator for a (seed, step, stage, ...) tuple; identical keys give identical streams."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


def save_checkpoint(path: str, theta: np.ndarray, kind: str, n_sites: int, n_hidden: int = 0, t: float = 0.0):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    header = f'{kind} {n_sites} {n_hidden} {t:.12g}'
    np.savetxt(path, np.asarray(theta, dtype=np.float64), header=header, fmt='%.17g')


def load_checkpoint(path: str) -> Tuple[np.ndarray, Dict[str, Any]]:
    if not os.path.exists(path):
        raise MissingCheckpointError(f'no checkpoint at {path}')
    with open(path, 'r') as fin:
        header = fin.readline().lstrip('#').split()
    kind, n_sites, n_hidden = header[0], int(header[1]), int(header[2])
    t = float(header[3]) if len(header) > 3 else 0.0
    theta = np.atleast_1d(np.loadtxt(path, dtype=np.float64))
    return theta, {'kind': kind, 'n_sites': n_sites, 'n_hidden': n_hidden, 't': t}


def list_checkpoints(checkpoint_dir: str) -> List[Tuple[float, str]]:
    """(t, path) pairs sorted by time."""
    if not os.path.isdir(checkpoint_dir):
        raise MissingCheckpointError(f'checkpoint directory {checkpoint_dir} does not exist')
    found = []
    for name in sorted(os.listdir(checkpoint_dir)):
        if not name.endswith('.txt'):
            continue
        path = os.path.join(checkpoint_dir, name)
        _, meta = load_checkpoint(path)
        found.append((meta['t'], path))
    if not found:
        raise MissingCheckpointError(f'no checkpoints found in {checkpoint_dir}')
    return sorted(found)


def write_table(df: pd.DataFrame, path: str, schema: str, output_format: str = 'csv'):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as fout:
        if output_format == 'csv':
            fout.write(f'# schema: {schema}\n')
            df.to_csv(fout, index=False, float_format='%.12g')
        elif output_format == 'jsonl':
            fout.write(json.dumps({'schema': schema, 'columns': list(df.columns)}) + '\n')
            for record in df.to_dict(orient='records'):
                fout.write(json.dumps(_to_jsonable(record)) + '\n')
        else:
            raise ValueError(f'unknown output format {output_format}')
    logger.info(f'Wrote {len(df)} rows to {path}')


def read_table(path: str) -> pd.DataFrame:
    if path.endswith('.jsonl'):
        with open(path, 'r') as fin:
            fin.readline()
            return pd.DataFrame([json.loads(l) for l in fin if l.strip()])
    return pd.read_csv(path, comment='#')


def write_summary(summary: Dict[str, Any], path: str, schema: str = SCHEMA_SUMMARY):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as fout:
        json.dump(_to_jsonable({'schema': schema, **summary}), fout, indent=2, sort_keys=True)


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if not np.isfinite(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _to_jsonable(obj.tolist())
    return obj


def error_payload(ex: Exception) -> str:
    return json.dumps({'error': type(ex).__name__, 'message': str(ex)})


def aggregate_repetitions(df: pd.DataFrame, keys: List[str], value: str) -> pd.DataFrame:
    """Mean and standard deviation of `value` over repetitions for each `keys` group."""
    grouped = df.groupby(keys)[value]
    out = grouped.agg(['mean', 'std', 'median', 'count']).reset_index()
    out = out.rename(columns={c: f'{value}_{c}' for c in ['mean', 'std', 'median', 'count']})
    return out
