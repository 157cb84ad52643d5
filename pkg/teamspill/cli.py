"""
Command-line entry point.

    teamspill simulate  --case I --seed 1 --out-dir data/
    teamspill estimate  --players data/players.csv --sessions data/sessions.csv --out-dir out/
    teamspill mc-eval   --case II --replicates 100 --workers 4 --out-dir out/
    teamspill report    --results out/mc-eval.json --out-dir out/

Options may also come from a flat TOML file (`--config`), whose keys mirror the
 long flags; flags given on the command line win.

Exit status: 0 success, 2 configuration/usage error, 3 data error, 4 runtime failure.
"""
from typing import Any
from collections.abc import Sequence
from dataclasses import dataclass, fields
from pathlib import Path
import argparse
import logging
import sys
import tomllib

from .basic import TeamspillError, ConfigError, InvalidDataError
from .simulator import SimulationConfig, case_study_config, parse_case, simulate_experiment
from .propensity import PropensityFit
from .estimators import EstimatorSettings, BaselineMode, POOLED, TREATED, run_estimation
from .evaluation import McConfig, run_monte_carlo, bias_comparison
from .ingest import IngestionOptions, load_dataset, write_dataset, DEFAULT_OUTLIER_CAP, DEFAULT_INGEST_THRESHOLD
from .report import FORMATS, build_report, emit_report, load_report, dumps


logger = logging.getLogger(__name__)


EXIT_OK: int = 0
EXIT_CONFIG: int = 2
EXIT_DATA: int = 3
EXIT_RUNTIME: int = 4

COMMANDS: tuple[str, ...] = ('simulate', 'estimate', 'mc-eval', 'report')
SCENARIOS: tuple[str, ...] = ('cases', 'case-study')


@dataclass(frozen=True)
class RunConfig:
    """
    Effective configuration of one CLI invocation. Fields left as `None`
     take command-dependent defaults (see the `effective_*` properties).
    """
    command: str
    seed: int = 0
    case: str = 'I'
    scenario: str = 'cases'
    n_players: int = 1000
    replicates: int = 100
    truncate_at: int | None = None
    outlier_cap: float | None = None
    baseline: str | None = None
    propensity: str = 'linear'
    epsilon: float = 0.01
    cv_folds: int = 0
    oracle_draws: int = 20_000
    workers: int = 1
    out_dir: Path = Path()
    format: str = 'both'
    players: Path | None = None
    sessions: Path | None = None
    exposures: Path | None = None
    results: Path | None = None
    fit_dir: Path | None = None

    def __post_init__(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f'Unknown command "{self.command}"')
        if self.scenario not in SCENARIOS:
            raise ConfigError(f'Unknown scenario "{self.scenario}", expected one of {SCENARIOS}')
        parse_case(self.case)
        if self.format not in FORMATS:
            raise ConfigError(f'Unknown format "{self.format}", expected one of {FORMATS}')
        for name in ('players', 'sessions', 'exposures', 'results'):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ConfigError(f'--{name} file does not exist: {path}')
        if self.command == 'estimate':
            if self.players is None:
                raise ConfigError('estimate needs --players')
            if self.sessions is None and self.exposures is None:
                raise ConfigError('estimate needs --sessions or --exposures')
            if self.propensity == 'oracle':
                raise ConfigError('Oracle propensities are only available for simulated data (mc-eval)')
        if self.command == 'report' and self.results is None:
            raise ConfigError('report needs --results')

    @property
    def effective_threshold(self) -> int:
        if self.truncate_at is not None:
            return self.truncate_at
        return DEFAULT_INGEST_THRESHOLD if self.command == 'estimate' else 10

    @property
    def effective_outlier_cap(self) -> float | None:
        if self.outlier_cap is not None:
            return self.outlier_cap if self.outlier_cap > 0 else None
        return DEFAULT_OUTLIER_CAP if self.command == 'estimate' else None

    @property
    def effective_baseline(self) -> str:
        if self.baseline is not None:
            return self.baseline
        if self.command == 'estimate' or self.scenario == 'case-study':
            return BaselineMode.DidLinear.value
        return BaselineMode.KnownMu.value

    def simulation_config(self) -> SimulationConfig:
        if self.scenario == 'case-study':
            return case_study_config(seed=self.seed, truncation=self.effective_threshold)
        return SimulationConfig.from_case(self.case, n_players=self.n_players, seed=self.seed,
                                          truncation=self.effective_threshold)

    def estimator_settings(self) -> EstimatorSettings:
        return EstimatorSettings(
            threshold=self.effective_threshold,
            baseline=self.effective_baseline,
            propensity=self.propensity,
            epsilon=self.epsilon,
            cv_folds=self.cv_folds,
            seed=self.seed,
            )

    def mc_config(self) -> McConfig:
        return McConfig(
            simulation=self.simulation_config(),
            replicates=self.replicates,
            seed=self.seed,
            settings=self.estimator_settings(),
            oracle_draws=self.oracle_draws,
            workers=self.workers,
            )

    def ingestion_options(self) -> IngestionOptions:
        return IngestionOptions(
            threshold=self.effective_threshold,
            outlier_cap=self.effective_outlier_cap,
            require_pre=self.effective_baseline == BaselineMode.DidLinear.value,
            )

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for ff in fields(self):
            value = getattr(self, ff.name)
            out[ff.name] = str(value) if isinstance(value, Path) else value
        out['effective'] = {
            'truncate_at': self.effective_threshold,
            'outlier_cap': self.effective_outlier_cap,
            'baseline': self.effective_baseline,
            }
        return out


'''
    Argument parsing
'''
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, help='flat TOML file of option values')
    common.add_argument('--seed', type=int)
    common.add_argument('--case', choices=('I', 'II', 'III'))
    common.add_argument('--scenario', choices=SCENARIOS)
    common.add_argument('--n-players', type=int)
    common.add_argument('--replicates', type=int)
    common.add_argument('--truncate-at', type=int)
    common.add_argument('--outlier-cap', type=float, help='drop rows with y >= cap (0 disables)')
    common.add_argument('--baseline', choices=[bb.value for bb in BaselineMode])
    common.add_argument('--propensity', choices=('linear', 'boosted', 'oracle'))
    common.add_argument('--epsilon', type=float)
    common.add_argument('--cv-folds', type=int)
    common.add_argument('--oracle-draws', type=int)
    common.add_argument('--workers', type=int)
    common.add_argument('--out-dir', type=Path)
    common.add_argument('--format', choices=FORMATS)
    common.add_argument('--players', type=Path)
    common.add_argument('--sessions', type=Path)
    common.add_argument('--exposures', type=Path)
    common.add_argument('--results', type=Path)
    common.add_argument('--fit-dir', type=Path, help='reuse/store fitted propensity models here')
    common.add_argument('-v', '--verbose', action='count', default=0)

    parser = argparse.ArgumentParser(prog='teamspill', description='Spillover-aware effect estimation for team-session experiments')
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('simulate', parents=[common], help='simulate one experiment and write its CSVs')
    sub.add_parser('estimate', parents=[common], help='estimate effects on one dataset')
    sub.add_parser('mc-eval', parents=[common], help='Monte Carlo evaluation against the known truth')
    sub.add_parser('report', parents=[common], help='re-render a stored JSON report')
    return parser


_PATH_KEYS = {'out_dir', 'players', 'sessions', 'exposures', 'results', 'fit_dir'}


def load_config_file(path: str | Path) -> dict[str, Any]:
    """
    Read a flat TOML config. Keys may use dashes or underscores.

    Raises:
        ConfigError: if the file is unreadable, nested, or has unknown keys.
    """
    try:
        with Path(path).open('rb') as ff:
            raw = tomllib.load(ff)
    except FileNotFoundError:
        raise ConfigError(f'Config file not found: {path}') from None
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f'Config file {path} is not valid TOML: {err}') from err

    known = {ff.name for ff in fields(RunConfig)} - {'command'}
    values = {}
    for key, value in raw.items():
        name = key.replace('-', '_')
        if name not in known:
            raise ConfigError(f'Unknown key "{key}" in config file {path}')
        if isinstance(value, dict | list):
            raise ConfigError(f'Config key "{key}" must be a plain value')
        values[name] = Path(path).parent / value if name in _PATH_KEYS else value
    return values


def make_run_config(args: argparse.Namespace) -> RunConfig:
    """
    Merge defaults, config-file values and command-line flags (in increasing priority).
    """
    values: dict[str, Any] = {}
    if args.config is not None:
        values.update(load_config_file(args.config))
    for ff in fields(RunConfig):
        if ff.name == 'command':
            continue
        given = getattr(args, ff.name, None)
        if given is not None:
            values[ff.name] = given
    try:
        return RunConfig(command=args.command, **values)
    except TypeError as err:
        raise ConfigError(f'Invalid configuration: {err}') from err


'''
    Commands
'''
def _cmd_simulate(run: RunConfig) -> None:
    config = run.simulation_config()
    dataset = simulate_experiment(config)
    write_dataset(dataset, run.out_dir)
    shares = {gg.value: ss for gg, ss in dataset.groups.shares().items()}
    report = build_report('simulate', run.seed, run.to_dict() | {'simulation': config.to_dict()},
                          {'n_players': dataset.n_players, 'n_sessions': len(dataset.sessions or []), 'shares': shares})
    (Path(run.out_dir) / 'simulation.json').write_text(dumps(report))


def _load_fits(fit_dir: Path | None) -> dict[str, PropensityFit]:
    fits = {}
    if fit_dir is not None:
        for name in (POOLED, TREATED):
            path = Path(fit_dir) / f'{name}.psm'
            if path.is_file():
                fits[name] = PropensityFit.load(path)
                logger.info(f'Reusing propensity model {path}')
    return fits


def _cmd_estimate(run: RunConfig) -> None:
    dataset, ingestion = load_dataset(run.players, run.sessions, run.exposures, run.ingestion_options())    # type: ignore[arg-type]
    settings = run.estimator_settings()
    result = run_estimation(dataset, settings, fits=_load_fits(run.fit_dir))
    if run.fit_dir is not None:
        Path(run.fit_dir).mkdir(parents=True, exist_ok=True)
        for name, fit in result.fits.items():
            fit.save(Path(run.fit_dir) / f'{name}.psm')

    results = {
        'estimates': [est.to_dict() for est in result.estimates.values()],
        'ingestion': ingestion.to_dict(),
        'diagnostics': result.diagnostics(),
        }
    report = build_report('estimate', run.seed, run.to_dict() | {'settings': settings.to_dict()}, results)
    emit_report(report, run.out_dir, run.format, stem='estimate')


def _cmd_mc_eval(run: RunConfig) -> None:
    mc = run.mc_config()
    summary = run_monte_carlo(mc)
    results = {
        'summary': summary.to_dict(),
        'comparison': bias_comparison(summary).to_dict(),
        }
    report = build_report('mc-eval', run.seed, run.to_dict() | {'mc': mc.to_dict()}, results)
    emit_report(report, run.out_dir, run.format, stem='mc-eval')


def _cmd_report(run: RunConfig) -> None:
    report = load_report(run.results)       # type: ignore[arg-type]
    emit_report(report, run.out_dir, run.format, stem=Path(run.results).stem)       # type: ignore[arg-type]


def dispatch(run: RunConfig) -> int:
    """
    Run the configured command.

    Returns:
        Exit status.
    """
    handler = {
        'simulate': _cmd_simulate,
        'estimate': _cmd_estimate,
        'mc-eval': _cmd_mc_eval,
        'report': _cmd_report,
        }[run.command]
    try:
        handler(run)
    except ConfigError as err:
        logger.error(f'Configuration error: {err}')
        return EXIT_CONFIG
    except InvalidDataError as err:
        logger.error(f'Data error: {err}')
        return EXIT_DATA
    except TeamspillError as err:
        logger.error(f'Failed: {err}')
        return EXIT_RUNTIME
    except Exception:
        logger.exception(f'Unexpected failure running {run.command}')
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG

    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s')
    try:
        run = make_run_config(args)
    except ConfigError as err:
        logger.error(f'Configuration error: {err}')
        return EXIT_CONFIG
    return dispatch(run)


if __name__ == '__main__':
    sys.exit(main())
