#!/usr/bin/env python
# coding=utf-8
"""
Experiment driver for time-dependent variational Monte Carlo runs.

    python run_tvmc.py run-single-spin --preset single_spin
    python run_tvmc.py run-tilted-ising --preset tilted_ising_n10 --seed 3 --out outputs/tilted
    python run_tvmc.py run-tfim --config my_quench.json
    python run_tvmc.py run-tci-bench --preset tci_bench
    python run_tvmc.py validate-config --config my_quench.json

A config is one flat JSON document whose keys are the fields of the argument groups below.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from multiprocessing import Pool as ProcessPool
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

import transformers
from transformers import HfArgumentParser, set_seed

from spin_model import MATVEC_CAP, MODEL, HamiltonianSpec, spec_from_config
from models.ansatz import ANSATZ, VariationalState, prepare_initial_state, product_state_x
from estimators import (
    BACKEND,
    FLOOR_MODE,
    CutoffDistributionSpec,
    SamplerConfig,
    estimate_quantities,
    exact_norm_ratio,
)
from tdvp import SCHEME, IntegratorConfig, Regularization, TdvpDriver, assemble_force, assemble_qgt
from exact_reference import (
    DenseState,
    ExactReference,
    observable_x_total,
    reference_trajectory,
    variational_to_dense,
)
from tci import TOL_MODE, TciConfig, relative_error, tci_tdvp_quantities
from utils import (
    SCHEMA_INFIDELITY,
    SCHEMA_SUMMARY,
    SCHEMA_TCI,
    SCHEMA_TRAJECTORY,
    MissingCheckpointError,
    TvmcError,
    aggregate_repetitions,
    error_payload,
    list_checkpoints,
    load_checkpoint,
    save_checkpoint,
    setup_workers_slurm,
    write_summary,
    write_table,
)

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

PRESET_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'presets')


def _as_enum(value, enum_cls):
    return value if isinstance(value, enum_cls) else enum_cls.from_string(value)


@dataclass
class ModelArguments:
    model: MODEL.from_string = field(default=MODEL.tfim, metadata={"help": "single_spin_y, tilted_ising or tfim."})
    N: int = field(default=4, metadata={"help": "Number of sites of the open chain."})
    J: float = field(default=1.0, metadata={"help": "Nearest-neighbour ZZ coupling."})
    g: float = field(default=1.0, metadata={"help": "Field strength (Y for tilted_ising, X for tfim)."})

    def __post_init__(self):
        self.model = _as_enum(self.model, MODEL)


@dataclass
class AnsatzArguments:
    ansatz: ANSATZ.from_string = field(default=ANSATZ.rbm, metadata={"help": "direct2 or rbm."})
    hidden_density: float = field(default=2.0, metadata={"help": "Hidden units per site (M = density * N)."})
    init_std: float = field(default=0.01)
    init_seed: int = field(default=0, metadata={"help": "Initialization seed; repetitions never change it."})
    prefit: bool = field(default=True, metadata={"help": "Pre-converge the RBM onto the x-polarized state."})

    def __post_init__(self):
        self.ansatz = _as_enum(self.ansatz, ANSATZ)


@dataclass
class SamplerArguments:
    backend: BACKEND.from_string = field(default=BACKEND.cutoff, metadata={"help": "full, born, cutoff or categorical."})
    epsilon: float = field(default=0.0, metadata={"help": "Cutoff used when `epsilons` is not given."})
    floor_mode: FLOOR_MODE.from_string = field(default=FLOOR_MODE.relative)
    n_samples: int = field(default=1000)
    chains: int = field(default=10)
    burn_in: int = field(default=100)
    thin: int = field(default=2)

    def __post_init__(self):
        self.backend = _as_enum(self.backend, BACKEND)
        self.floor_mode = _as_enum(self.floor_mode, FLOOR_MODE)


@dataclass
class IntegratorArguments:
    scheme: SCHEME.from_string = field(default=SCHEME.heun, metadata={"help": "heun or rk4."})
    dt: float = field(default=1e-3)
    t_max: float = field(default=1.0)
    svd_cutoff: float = field(default=1e-8, metadata={"help": "Relative singular-value cutoff of the solver."})
    diagonal_shift: float = field(default=0.0)
    halt_on_rank_collapse: bool = field(default=False)

    def __post_init__(self):
        self.scheme = _as_enum(self.scheme, SCHEME)


@dataclass
class TciArguments:
    chi_max: int = field(default=64)
    chi_max_list: List[int] = field(default_factory=lambda: [32, 64, 128, 256])
    eps_tci: float = field(default=1e-4)
    tol_mode: TOL_MODE.from_string = field(default=TOL_MODE.relative)
    max_sweeps: int = field(default=10)
    pivot_candidates: int = field(default=32)
    full_search_cap: int = field(default=1 << 16)
    n_error_probes: int = field(default=10000)
    times: Optional[List[float]] = field(default=None, metadata={"help": "Checkpoint times to benchmark."})
    checkpoint_dir: Optional[str] = field(default=None)

    def __post_init__(self):
        self.tol_mode = _as_enum(self.tol_mode, TOL_MODE)


@dataclass
class ExperimentArguments:
    output_dir: str = field(default='outputs')
    seed: int = field(default=0, metadata={"help": "Sampler seed; repetition r uses a stream derived from (seed, r)."})
    repetitions: int = field(default=1)
    epsilons: Optional[List[float]] = field(default=None)
    n_samples_list: Optional[List[int]] = field(default=None)
    output_format: str = field(default='csv', metadata={"help": "csv or jsonl for tables."})
    checkpoint_every: int = field(default=0, metadata={"help": "Write theta every this many steps (0: never)."})
    num_workers: int = field(default=0)
    dense_cap: int = field(default=14)
    description: str = field(default='')

    def __post_init__(self):
        if self.output_format not in ('csv', 'jsonl'):
            raise ValueError(f'output_format must be csv or jsonl, got {self.output_format}')
        if self.repetitions < 1:
            raise ValueError(f'repetitions must be >= 1, got {self.repetitions}')


ARGUMENT_GROUPS = (ModelArguments, AnsatzArguments, SamplerArguments, IntegratorArguments, TciArguments,
                   ExperimentArguments)


@dataclass
class ExperimentConfig:
    model: ModelArguments
    ansatz: AnsatzArguments
    sampler: SamplerArguments
    integrator: IntegratorArguments
    tci: TciArguments
    experiment: ExperimentArguments

    def hamiltonian(self) -> HamiltonianSpec:
        return spec_from_config(self.model.model, self.model.N, self.model.J, self.model.g)

    def integrator_config(self) -> IntegratorConfig:
        reg = Regularization(self.integrator.svd_cutoff, self.integrator.diagonal_shift)
        return IntegratorConfig(self.integrator.scheme, self.integrator.dt, self.integrator.t_max, reg,
                                self.integrator.halt_on_rank_collapse)

    def sampler_config(self, backend: BACKEND, n_samples: int, seed: int) -> SamplerConfig:
        return SamplerConfig(backend, n_samples, self.sampler.chains, self.sampler.burn_in, self.sampler.thin,
                             seed, self.experiment.dense_cap)

    def cutoff(self, backend: BACKEND, epsilon: float) -> Optional[CutoffDistributionSpec]:
        if backend not in (BACKEND.cutoff, BACKEND.categorical):
            return None
        return CutoffDistributionSpec(epsilon, floor_mode=self.sampler.floor_mode)

    def tci_config(self, chi_max: int) -> TciConfig:
        return TciConfig(chi_max, self.tci.eps_tci, self.tci.max_sweeps, self.tci.pivot_candidates,
                         self.tci.tol_mode, self.tci.full_search_cap, self.tci.n_error_probes)

    def initial_state(self) -> VariationalState:
        n_sites = self.hamiltonian().n_sites
        return prepare_initial_state(self.ansatz.ansatz, n_sites, self.ansatz.hidden_density,
                                     self.ansatz.init_std, self.ansatz.init_seed, self.ansatz.prefit)

    def validate(self):
        """Builds every module-level config once so that invalid combinations fail early."""
        H = self.hamiltonian()
        self.integrator_config()
        for n_samples in self.experiment.n_samples_list or [self.sampler.n_samples]:
            self.sampler_config(self.sampler.backend, n_samples, self.experiment.seed)
        for epsilon in self.experiment.epsilons or [self.sampler.epsilon]:
            self.cutoff(self.sampler.backend, epsilon)
        for chi in self.tci.chi_max_list or [self.tci.chi_max]:
            self.tci_config(chi)
        if self.ansatz.ansatz == ANSATZ.direct2 and H.n_sites != 1:
            raise ValueError('the direct2 ansatz describes a single spin')
        return H


def load_arguments(preset: Optional[str] = None, config: Optional[str] = None, seed: Optional[int] = None,
                   out: Optional[str] = None) -> ExperimentConfig:
    """Preset, then config file on top, then command-line overrides."""
    values = {}
    if preset is not None:
        path = os.path.join(PRESET_DIR, f'{preset}.json')
        if not os.path.exists(path):
            raise ValueError(f'unknown preset {preset}')
        with open(path, 'r') as fin:
            values.update(json.load(fin))
    if config is not None:
        with open(config, 'r') as fin:
            values.update(json.load(fin))
    if seed is not None:
        values['seed'] = seed
    if out is not None:
        values['output_dir'] = out
    parser = HfArgumentParser(ARGUMENT_GROUPS)
    groups = parser.parse_dict(values, allow_extra_keys=False)
    return ExperimentConfig(*groups)


@dataclass
class Job:
    label: str
    backend: BACKEND
    epsilon: float
    n_samples: int
    repetition: int
    seed: int


def repetition_seed(seed: int, repetition: int) -> int:
    return int(np.random.SeedSequence([seed, repetition]).generate_state(1)[0])


def _sampled_jobs(config: ExperimentConfig, with_n_samples_sweep: bool = False) -> List[Job]:
    exp = config.experiment
    epsilons = exp.epsilons if exp.epsilons is not None else [config.sampler.epsilon]
    n_samples_list = exp.n_samples_list if with_n_samples_sweep and exp.n_samples_list else [config.sampler.n_samples]
    jobs = [Job('full', BACKEND.full, 0.0, 0, 0, exp.seed)]
    if config.sampler.backend == BACKEND.full:
        return jobs
    for epsilon in epsilons:
        for n_samples in n_samples_list:
            for rep in range(exp.repetitions):
                jobs.append(Job(f'eps={epsilon:g}', config.sampler.backend, epsilon, n_samples, rep,
                                repetition_seed(exp.seed, rep)))
    return jobs


def run_job(payload) -> List[Dict]:
    """Evolves one (backend, epsilon, n_samples, repetition) point with exact observers attached."""
    config, job = payload
    H = config.hamiltonian()
    state0 = config.initial_state()
    cutoff = config.cutoff(job.backend, job.epsilon)
    sampler = config.sampler_config(job.backend, max(job.n_samples, 1), job.seed)
    dense_cap = config.experiment.dense_cap

    reference = ExactReference(H, DenseState(product_state_x(H.n_sites)))
    observers = [
        lambda t, s: {'sx_total': observable_x_total(variational_to_dense(s))},
        reference.observe,
    ]
    if cutoff is not None and H.n_sites <= dense_cap:
        observers.append(lambda t, s: {'norm_ratio_exact': exact_norm_ratio(s, cutoff, dense_cap)})

    checkpoint_fn = None
    if config.experiment.checkpoint_every and job.repetition == 0:
        ckpt_dir = os.path.join(config.experiment.output_dir, 'checkpoints', job.label)

        def checkpoint_fn(step, t, state):
            save_checkpoint(os.path.join(ckpt_dir, f'theta_{step:07d}.txt'), state.theta, state.kind.name,
                            state.n_sites, state.n_hidden, t)

    driver = TdvpDriver(H, sampler, config.integrator_config(), cutoff=cutoff, observers=observers,
                        checkpoint_fn=checkpoint_fn, checkpoint_every=config.experiment.checkpoint_every,
                        progress=config.experiment.num_workers <= 1)
    logger.info(f'Job {job.label} rep {job.repetition}: backend {job.backend.name}, N_S {job.n_samples}')
    _, rows = driver.evolve(state0)
    for row in rows:
        row.update({'label': job.label, 'backend': job.backend.name, 'epsilon': job.epsilon,
                    'n_samples': job.n_samples, 'repetition': job.repetition})
    return rows


def _map_jobs(fn, items, num_workers: int):
    if num_workers > 1:
        with ProcessPool(processes=num_workers) as pool:
            return pool.map(fn, items)
    return [fn(item) for item in tqdm(items, desc='jobs')]


def _table_path(config: ExperimentConfig, name: str) -> str:
    return os.path.join(config.experiment.output_dir, f'{name}.{config.experiment.output_format}')


def _run_trajectories(config: ExperimentConfig, with_n_samples_sweep: bool = False) -> pd.DataFrame:
    jobs = _sampled_jobs(config, with_n_samples_sweep)
    results = _map_jobs(run_job, [(config, job) for job in jobs], config.experiment.num_workers)
    df = pd.DataFrame([row for rows in results for row in rows])
    write_table(df, _table_path(config, 'trajectory'), SCHEMA_TRAJECTORY, config.experiment.output_format)
    return df


def _reference_table(config: ExperimentConfig) -> pd.DataFrame:
    H = config.hamiltonian()
    _, rows = reference_trajectory(H, DenseState(product_state_x(H.n_sites)), config.integrator.dt,
                                   config.integrator.t_max)
    df = pd.DataFrame(rows)
    df['label'] = 'exact'
    write_table(df, _table_path(config, 'reference'), SCHEMA_TRAJECTORY, config.experiment.output_format)
    return df


def _final_rows(df: pd.DataFrame) -> pd.DataFrame:
    return df[df['t'] == df['t'].max()]


def run_single_spin(config: ExperimentConfig) -> Dict:
    H = config.hamiltonian()
    if H.n_sites != 1:
        raise ValueError('run-single-spin needs the one-site model')
    df = _run_trajectories(config)
    exact = _reference_table(config)

    wide = df.groupby(['t', 'label'])['sx_total'].mean().unstack('label')
    wide['exact'] = exact.set_index('t')['sx_total']
    wide = wide.reset_index()
    write_table(wide, _table_path(config, 'magnetization'), SCHEMA_TRAJECTORY, config.experiment.output_format)

    df['deviation'] = np.abs(df['sx_total'] - np.cos(2 * df['t']))
    late = df[(df['t'] >= np.pi / 4) & (df['t'] <= np.pi / 2)]
    summary = {
        'command': 'run-single-spin',
        'max_deviation': df.groupby('label')['deviation'].max().to_dict(),
        'max_deviation_late': late.groupby('label')['deviation'].max().to_dict(),
        'description': config.experiment.description,
    }
    write_summary(summary, os.path.join(config.experiment.output_dir, 'summary.json'), SCHEMA_SUMMARY)
    return summary


def run_tilted_ising(config: ExperimentConfig) -> Dict:
    df = _run_trajectories(config, with_n_samples_sweep=True)
    final = _final_rows(df)[['label', 'backend', 'epsilon', 'n_samples', 'repetition', 'infidelity']]
    write_table(final.reset_index(drop=True), _table_path(config, 'infidelity'), SCHEMA_INFIDELITY,
                config.experiment.output_format)
    agg = aggregate_repetitions(final, ['label', 'epsilon', 'n_samples'], 'infidelity')
    summary = {
        'command': 'run-tilted-ising',
        'final_infidelity': agg.to_dict(orient='records'),
        'description': config.experiment.description,
    }
    write_summary(summary, os.path.join(config.experiment.output_dir, 'summary.json'), SCHEMA_SUMMARY)
    return summary


def run_tfim_quench(config: ExperimentConfig) -> Dict:
    df = _run_trajectories(config)
    _reference_table(config)
    final = _final_rows(df)
    agg = aggregate_repetitions(final, ['label', 'epsilon'], 'infidelity')
    columns = [c for c in ('norm_ratio', 'norm_ratio_exact', 'r_squared', 'var_gradE_mean', 'var_grad2_mean')
               if c in df.columns]
    diagnostics = df.groupby(['label', 't'])[columns].mean().reset_index()
    write_table(diagnostics, _table_path(config, 'diagnostics'), SCHEMA_TRAJECTORY, config.experiment.output_format)
    summary = {
        'command': 'run-tfim',
        'final_infidelity': agg.to_dict(orient='records'),
        'rank_collapse_rows': int(df['step_failed'].sum()),
        'description': config.experiment.description,
    }
    write_summary(summary, os.path.join(config.experiment.output_dir, 'summary.json'), SCHEMA_SUMMARY)
    return summary


def _select_checkpoints(checkpoint_dir: Optional[str], times: Optional[List[float]]):
    if checkpoint_dir is None:
        raise MissingCheckpointError('run-tci-bench needs checkpoint_dir')
    found = list_checkpoints(checkpoint_dir)
    if not times:
        return found
    stamps = np.array([t for t, _ in found])
    return [found[int(np.argmin(np.abs(stamps - t)))] for t in times]


def run_tci_benchmark(config: ExperimentConfig) -> Dict:
    H = config.hamiltonian()
    rows = []
    exact_sampler = config.sampler_config(BACKEND.full, 1, config.experiment.seed)
    for t, path in tqdm(_select_checkpoints(config.tci.checkpoint_dir, config.tci.times), desc='checkpoints'):
        theta, meta = load_checkpoint(path)
        state = VariationalState(ANSATZ.from_string(meta['kind']), meta['n_sites'], theta, meta['n_hidden'])
        q = estimate_quantities(state, H, exact_sampler)
        F_exact, S_exact = assemble_force(q), assemble_qgt(q)
        rows.append({'t': t, 'method': 'reference', 'chi_max': 0, 'repetition': 0,
                     'delta_F': relative_error(F_exact, F_exact), 'delta_S': relative_error(S_exact, S_exact)})
        for chi in config.tci.chi_max_list or [config.tci.chi_max]:
            for rep in range(config.experiment.repetitions):
                est = tci_tdvp_quantities(state, H, config.tci_config(chi),
                                          seed=repetition_seed(config.experiment.seed, rep),
                                          cap=config.experiment.dense_cap)
                rows.append({
                    't': t, 'method': 'tci', 'chi_max': chi, 'repetition': rep,
                    'delta_F': relative_error(est.F_hat, F_exact),
                    'delta_S': relative_error(est.S_hat, S_exact),
                    'bond_max_eloc': max(est.train_eloc.bond_dims, default=1),
                    'bond_max_grad': max(est.train_grad.bond_dims, default=1),
                    'sup_error_eloc': est.train_eloc.info.sup_error,
                    'sup_error_grad': est.train_grad.info.sup_error,
                })
    df = pd.DataFrame(rows)
    write_table(df, _table_path(config, 'tci_error'), SCHEMA_TCI, config.experiment.output_format)
    tci_rows = df[df['method'] == 'tci']
    summary = {
        'command': 'run-tci-bench',
        'median_delta_F': tci_rows.groupby('chi_max')['delta_F'].median().to_dict(),
        'median_delta_S': tci_rows.groupby('chi_max')['delta_S'].median().to_dict(),
        'description': config.experiment.description,
    }
    write_summary(summary, os.path.join(config.experiment.output_dir, 'summary.json'), SCHEMA_SUMMARY)
    return summary


def validate_config(config: ExperimentConfig) -> Dict:
    H = config.validate()
    if H.n_sites > MATVEC_CAP:
        raise ValueError(f'{H.n_sites} sites exceed the exact-reference cap of {MATVEC_CAP}')
    groups = {name: asdict(getattr(config, name)) for name in
              ('model', 'ansatz', 'sampler', 'integrator', 'tci', 'experiment')}
    return {'valid': True, 'config': json.loads(json.dumps(groups, default=lambda o: getattr(o, 'name', str(o))))}


COMMANDS = {
    'run-single-spin': run_single_spin,
    'run-tilted-ising': run_tilted_ising,
    'run-tfim': run_tfim_quench,
    'run-tci-bench': run_tci_benchmark,
    'validate-config': validate_config,
}


def parse_cli(argv=None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description='t-VMC experiments')
    parser.add_argument('command', choices=sorted(COMMANDS))
    parser.add_argument('--config', type=str, default=None, help='JSON config file')
    parser.add_argument('--preset', type=str, default=None, help='name of a file in presets/')
    parser.add_argument('--seed', type=int, default=None)
    parser.add_argument('--out', type=str, default=None)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    cli = parse_cli(argv)

    logging.basicConfig(
        format="%(asctime)s - %(levelname)s - %(name)s - %(message)s",
        datefmt="%m/%d/%Y %H:%M:%S",
        handlers=[logging.StreamHandler(sys.stdout)],
    )
    transformers.utils.logging.set_verbosity(logging.INFO)

    try:
        config = load_arguments(cli.preset, cli.config, cli.seed, cli.out)
        if cli.command != 'validate-config':
            config.validate()
    except (ValueError, OSError) as ex:
        print(error_payload(ex))
        return 2

    logger.info(f'Command {cli.command}')
    logger.info(f'Model parameters {config.model}')
    logger.info(f'Sampler parameters {config.sampler}')
    logger.info(f'Integrator parameters {config.integrator}')

    set_seed(config.experiment.seed)
    setup_workers_slurm(config.experiment)
    try:
        result = COMMANDS[cli.command](config)
    except (TvmcError, ValueError) as ex:
        logger.error(f'{cli.command} failed: {ex}')
        print(error_payload(ex))
        return 1
    if cli.command == 'validate-config':
        print(json.dumps(result, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
