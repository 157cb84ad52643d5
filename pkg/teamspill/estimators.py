"""
Treatment-effect estimators for experiments with team-session spillover.

  - naive: difference in means between treated players (optionally at one
        exposure level) and the whole control group.
  - naive-wo-cm: as above, but against never-contaminated controls only.
  - proposed: Hajek (self-normalized inverse-propensity) mean of the outcome at
        each exposure level, pooled over treated and contaminated-control players,
        minus the average baseline outcome.
  - proposed-wo-cm: as above, with the Hajek mean taken over treated players only.
"""
from typing import Any
from collections.abc import Mapping, MutableMapping
from dataclasses import dataclass, asdict
from enum import Enum
import logging
import math

import numpy
from numpy.typing import NDArray, ArrayLike
import statsmodels.api as sm

from .basic import TeamspillError, ConfigError, InvalidDataError, UndefinedLevelError
from .domain import ExperimentDataset, GroupLabel, POOLED, TREATED, level_label, truncate_levels
from .propensity import (
    ModelKind, PropensityFit, PropensityTable, CvReport, fit_propensity, cross_validate,
    stabilize_weights, LINEAR_GRID, BOOSTED_GRID, DEFAULT_EPSILON,
    DEFAULT_LEARNING_RATE, DEFAULT_MAX_DEPTH, DEFAULT_N_ROUNDS,
    )
from .simulator import true_mu, rng_stream


logger = logging.getLogger(__name__)


class EstimatorKind(Enum):
    Naive = 'naive'
    NaiveWithoutControlMixed = 'naive-wo-cm'
    Proposed = 'proposed'
    ProposedWithoutControlMixed = 'proposed-wo-cm'


class BaselineMode(Enum):
    KnownMu = 'known-mu'
    DidLinear = 'did-linear'


PROPENSITY_SOURCES: tuple[str, ...] = ('linear', 'boosted', 'oracle')


@dataclass(frozen=True)
class EstimatorSettings:
    """
    Options shared by all estimators of one run.
    """
    threshold: int = 10
    baseline: str = BaselineMode.KnownMu.value
    propensity: str = 'linear'
    """'linear', 'boosted', or 'oracle' (caller supplies the tables)"""

    epsilon: float = DEFAULT_EPSILON
    degree: int | None = None
    learning_rate: float = DEFAULT_LEARNING_RATE
    max_depth: int = DEFAULT_MAX_DEPTH
    n_rounds: int = DEFAULT_N_ROUNDS
    cv_folds: int = 0
    """folds for hyperparameter search; 0 disables it"""

    seed: int = 0

    def __post_init__(self) -> None:
        if self.threshold < 1:
            raise ConfigError(f'Truncation threshold must be >= 1, got {self.threshold}')
        if self.baseline not in {bb.value for bb in BaselineMode}:
            self._bad('baseline')
        if self.propensity not in PROPENSITY_SOURCES:
            self._bad('propensity')
        if not 0 <= self.epsilon < 0.5:
            raise ConfigError(f'epsilon must be in [0, 0.5), got {self.epsilon}')
        if self.epsilon * (self.threshold + 1) > 1:
            raise ConfigError(f'epsilon={self.epsilon} is infeasible for {self.threshold + 1} exposure levels')
        if self.degree is not None and self.degree < 1:
            raise ConfigError(f'degree must be >= 1, got {self.degree}')
        if self.max_depth < 1:
            raise ConfigError(f'max_depth must be >= 1, got {self.max_depth}')
        if not 0 < self.learning_rate <= 1:
            raise ConfigError(f'learning_rate must be in (0, 1], got {self.learning_rate}')
        if self.n_rounds < 0:
            raise ConfigError(f'n_rounds must be >= 0, got {self.n_rounds}')
        if self.cv_folds == 1 or self.cv_folds < 0:
            raise ConfigError(f'cv_folds must be 0 (off) or >= 2, got {self.cv_folds}')

    def _bad(self, name: str) -> None:
        choices = {
            'baseline': [bb.value for bb in BaselineMode],
            'propensity': list(PROPENSITY_SOURCES),
            }[name]
        raise ConfigError(f'Unknown {name} "{getattr(self, name)}", expected one of {choices}')

    @property
    def baseline_mode(self) -> BaselineMode:
        return BaselineMode(self.baseline)

    def model_options(self) -> dict[str, Any]:
        """
        Keyword options for the configured propensity model kind.
        """
        if self.propensity == 'boosted':
            return {'learning_rate': self.learning_rate, 'max_depth': self.max_depth, 'n_rounds': self.n_rounds}
        return {'degree': self.degree}

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


'''
    Results
'''
class LevelEstimate:
    """
    Estimate at one truncated exposure level
    """
    level: int
    label: str
    estimate: float | None
    """`None` when the level is undefined"""

    n_units: int
    """analysis units at this level"""

    ess: float
    """effective sample size, (sum w)^2 / sum w^2"""

    def __init__(self, level: int, label: str, estimate: float | None, n_units: int, ess: float) -> None:
        self.level = level
        self.label = label
        self.estimate = estimate
        self.n_units = n_units
        self.ess = ess

    @property
    def defined(self) -> bool:
        return self.estimate is not None

    def to_dict(self) -> dict[str, Any]:
        return {
            'level': self.level,
            'label': self.label,
            'estimate': self.estimate,
            'n_units': self.n_units,
            'ess': self.ess,
            'defined': self.defined,
            }

    def __repr__(self) -> str:
        return f'LevelEstimate({self.label}: {self.estimate}, n={self.n_units})'


class TauEstimate:
    """
    All per-level estimates and the overall estimate of one estimator.
    """
    kind: EstimatorKind
    threshold: int
    levels: dict[int, LevelEstimate]
    overall: float | None

    dropped_mass: float
    """treated exposure mass of levels >0 left out of `overall` for being undefined"""

    error: str | None
    """set when the estimator failed as a whole"""

    def __init__(
            self,
            kind: EstimatorKind,
            threshold: int,
            levels: dict[int, LevelEstimate] | None = None,
            overall: float | None = None,
            dropped_mass: float = 0.0,
            error: str | None = None,
            ) -> None:
        self.kind = kind
        self.threshold = threshold
        self.levels = {} if levels is None else levels
        self.overall = overall
        self.dropped_mass = dropped_mass
        self.error = error

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def undefined_levels(self) -> list[int]:
        return [ll for ll, est in self.levels.items() if not est.defined]

    def estimate(self, level: int) -> float | None:
        est = self.levels.get(level)
        return None if est is None else est.estimate

    def to_dict(self) -> dict[str, Any]:
        return {
            'kind': self.kind.value,
            'threshold': self.threshold,
            'overall': self.overall,
            'dropped_mass': self.dropped_mass,
            'error': self.error,
            'undefined_levels': self.undefined_levels,
            'levels': [est.to_dict() for _ll, est in sorted(self.levels.items())],
            }

    def __repr__(self) -> str:
        if self.error:
            return f'TauEstimate({self.kind.value}: failed, {self.error})'
        return f'TauEstimate({self.kind.value}: overall={self.overall}, {len(self.levels)} levels)'


'''
    Naive estimators
'''
def _group_mean(y: NDArray[numpy.float64], mask: NDArray[numpy.bool_], what: str) -> float:
    if not mask.any():
        raise InvalidDataError(f'{what} is empty')
    return float(numpy.mean(y[mask]))


def _level_mask(dataset: ExperimentDataset, level: int, threshold: int | None) -> NDArray[numpy.bool_]:
    levels = dataset.m if threshold is None else truncate_levels(dataset.m, threshold)
    return levels == level


def naive_overall(dataset: ExperimentDataset) -> float:
    """
    Mean outcome of treated players minus mean outcome of all control players.

    Raises:
        InvalidDataError: if either group is empty.
    """
    return (_group_mean(dataset.y, dataset.treated, 'Treatment group')
            - _group_mean(dataset.y, dataset.control, 'Control group'))


def _naive_level(dataset: ExperimentDataset, level: int, threshold: int | None, control: NDArray[numpy.bool_], what: str) -> float:
    base = _group_mean(dataset.y, control, what)
    at_level = dataset.treated & _level_mask(dataset, level, threshold)
    if not at_level.any():
        raise UndefinedLevelError(f'No treated players at exposure level {level}', level)
    return float(numpy.mean(dataset.y[at_level])) - base


def naive_per_m(dataset: ExperimentDataset, level: int, threshold: int | None = None) -> float:
    """
    Mean outcome of treated players at exposure `level`, minus the mean outcome
     of the whole control group.

    Args:
        dataset: Dataset.
        level: Exposure level.
        threshold: Truncation threshold (`None` compares raw exposure counts).

    Raises:
        UndefinedLevelError: if no treated players are at `level`.
        InvalidDataError: if the control group is empty.
    """
    return _naive_level(dataset, level, threshold, dataset.control, 'Control group')


def naive_without_control_mixed(dataset: ExperimentDataset, level: int, threshold: int | None = None) -> float:
    """
    As `naive_per_m()`, against the control-control group only.

    Raises:
        UndefinedLevelError: if no treated players are at `level`.
        InvalidDataError: if the control-control group is empty.
    """
    return _naive_level(dataset, level, threshold, dataset.mask(GroupLabel.ControlControl),
                        'Control-control group (controls never in a treated session)')


'''
    Hajek estimator
'''
def analysis_population(dataset: ExperimentDataset, include_control_mixed: bool = True) -> NDArray[numpy.bool_]:
    """
    Treated players, plus control-mixed players if `include_control_mixed`.
    """
    if include_control_mixed:
        return dataset.mask(GroupLabel.Treatment, GroupLabel.ControlMixed)
    return dataset.mask(GroupLabel.Treatment)


def effective_sample_size(weights: NDArray[numpy.float64]) -> float:
    total = float(numpy.sum(weights))
    return total * total / float(numpy.sum(weights ** 2))


def _propensity_column(propensities: PropensityTable | ArrayLike, level: int) -> NDArray[numpy.float64]:
    if isinstance(propensities, PropensityTable):
        return propensities.column(level)
    return numpy.asarray(propensities, dtype=numpy.float64)


def hajek_level(
        dataset: ExperimentDataset,
        level: int,
        propensities: PropensityTable | ArrayLike,
        include_control_mixed: bool = True,
        threshold: int | None = None,
        ) -> LevelEstimate:
    """
    Self-normalized inverse-propensity mean of the outcome at one exposure level,
        sum_i w_i Y_i / sum_i w_i,   w_i = 1{level_i = level} / e_level(X_i),
     over the analysis population.

    Args:
        dataset: Dataset.
        level: Exposure level.
        propensities: `PropensityTable`, or per-unit probability of `level`.
        include_control_mixed: Pool control-mixed players with treated players.
        threshold: Truncation threshold (defaults to the table's; `None` with a
            plain array compares raw exposure counts).

    Returns:
        `LevelEstimate` with the Hajek mean as its estimate.

    Raises:
        UndefinedLevelError: if no analysis units are at `level`, or the propensity
            table does not cover it.
        InvalidDataError: if a unit at `level` has a zero or missing propensity.
    """
    if threshold is None and isinstance(propensities, PropensityTable):
        threshold = propensities.threshold
    e_m = _propensity_column(propensities, level)
    if e_m.shape != (dataset.n_players,):
        raise InvalidDataError(f'Need one propensity per player ({dataset.n_players}), got shape {e_m.shape}')

    units = analysis_population(dataset, include_control_mixed) & _level_mask(dataset, level, threshold)
    label = str(level) if threshold is None else level_label(level, threshold)
    if not units.any():
        raise UndefinedLevelError(f'No analysis units at exposure level {label}', level)

    e_units = e_m[units]
    if not (e_units > 0).all():
        bad = dataset.ids[units][~(e_units > 0)]
        raise InvalidDataError(f'Zero or missing propensity at level {label} for {bad.size} units'
                               f' (e.g. player {bad[0]}); apply stabilize_weights() first')
    weights = 1 / e_units
    estimate = float(numpy.sum(weights * dataset.y[units]) / numpy.sum(weights))
    return LevelEstimate(level, label, estimate, int(units.sum()), effective_sample_size(weights))


def hajek_mean(
        dataset: ExperimentDataset,
        level: int,
        propensities: PropensityTable | ArrayLike,
        include_control_mixed: bool = True,
        threshold: int | None = None,
        ) -> float:
    """
    Hajek mean outcome at `level`; see `hajek_level()`.
    """
    estimate = hajek_level(dataset, level, propensities, include_control_mixed, threshold).estimate
    assert estimate is not None
    return estimate


'''
    Baseline
'''
class BaselineModel:
    """
    Baseline (untreated) outcome model mu(x).

    'known-mu' uses the simulation's analytic untreated mean of the first covariate.
    'did-linear' adds a linear increment, fit by OLS of (y - y_pre) on the
     covariates over control-control players, to each player's own y_pre.
    """
    mode: BaselineMode
    coef: NDArray[numpy.float64] | None
    """intercept followed by one slope per covariate (did-linear only)"""

    n_fit: int
    """number of control-control players the increment was fit on"""

    def __init__(self, mode: BaselineMode, coef: NDArray[numpy.float64] | None = None, n_fit: int = 0) -> None:
        self.mode = mode
        self.coef = coef
        self.n_fit = n_fit

    def predict(self, dataset: ExperimentDataset) -> NDArray[numpy.float64]:
        """
        mu_hat for every player.

        Raises:
            InvalidDataError: if did-linear is used without pre-period outcomes.
        """
        if self.mode == BaselineMode.KnownMu:
            return numpy.asarray(true_mu(dataset.x[:, 0]), dtype=numpy.float64).reshape(dataset.n_players)
        assert self.coef is not None
        if dataset.y_pre is None:
            raise InvalidDataError('did-linear baseline needs a pre-period outcome for every player')
        if dataset.x.shape[1] + 1 != self.coef.size:
            raise InvalidDataError(f'Baseline was fit on {self.coef.size - 1} covariates, dataset has {dataset.x.shape[1]}')
        return dataset.y_pre + sm.add_constant(dataset.x, has_constant='add') @ self.coef

    def to_dict(self) -> dict[str, Any]:
        return {
            'mode': self.mode.value,
            'coef': None if self.coef is None else self.coef.tolist(),
            'n_fit': self.n_fit,
            }


def estimate_baseline(dataset: ExperimentDataset, mode: BaselineMode | str = BaselineMode.KnownMu) -> BaselineModel:
    """
    Construct the baseline model.

    Args:
        dataset: Dataset.
        mode: 'known-mu' or 'did-linear'.

    Returns:
        `BaselineModel`.

    Raises:
        InvalidDataError: if did-linear lacks pre-period outcomes, has too few
            control-control players, or a rank-deficient design.
    """
    try:
        mode = BaselineMode(mode)
    except ValueError:
        raise ConfigError(f'Unknown baseline "{mode}"') from None
    if mode == BaselineMode.KnownMu:
        return BaselineModel(mode)

    if dataset.y_pre is None:
        raise InvalidDataError('did-linear baseline needs a pre-period outcome (y_pre) for every player')
    cc = dataset.mask(GroupLabel.ControlControl)
    n_cc = int(cc.sum())
    n_params = dataset.x.shape[1] + 1
    if n_cc <= n_params:
        raise InvalidDataError(f'did-linear baseline needs more than {n_params} control-control players, got {n_cc}')

    exog = sm.add_constant(dataset.x[cc], has_constant='add')
    if numpy.linalg.matrix_rank(exog) < n_params:
        raise InvalidDataError(f'did-linear design over {n_cc} control-control players is rank deficient'
                               f' (covariates {list(dataset.feature_names)})')
    result = sm.OLS(dataset.y[cc] - dataset.y_pre[cc], exog).fit()
    coef = numpy.asarray(result.params, dtype=numpy.float64)
    logger.info(f'did-linear baseline fit on {n_cc} control-control players: coef {numpy.round(coef, 4).tolist()}')
    return BaselineModel(mode, coef, n_cc)


'''
    Proposed estimator
'''
def estimate_tau_m(
        dataset: ExperimentDataset,
        level: int,
        propensities: PropensityTable | ArrayLike,
        baseline: BaselineModel | NDArray[numpy.float64],
        include_control_mixed: bool = True,
        threshold: int | None = None,
        ) -> float:
    """
    Effect of exposure `level`: the Hajek mean at `level` minus the average of
     mu_hat over all players.

    Args:
        dataset: Dataset.
        level: Exposure level.
        propensities: As for `hajek_level()`.
        baseline: `BaselineModel`, or precomputed mu_hat per player.
        include_control_mixed: Pool control-mixed players.
        threshold: Truncation threshold.

    Raises:
        UndefinedLevelError: if the level has no analysis units.
    """
    mu_hat = baseline.predict(dataset) if isinstance(baseline, BaselineModel) else numpy.asarray(baseline)
    return hajek_mean(dataset, level, propensities, include_control_mixed, threshold) - float(numpy.mean(mu_hat))


def treated_level_distribution(dataset: ExperimentDataset, threshold: int) -> dict[int, float]:
    """
    Empirical P(level = l | Z = 1) for l = 0..threshold.
    """
    levels = dataset.levels(threshold)[dataset.treated]
    counts = numpy.bincount(levels, minlength=threshold + 1)
    return {ll: float(nn) / levels.size for ll, nn in enumerate(counts.tolist())}


def estimate_overall_tau(
        per_level: Mapping[int, float | None],
        dataset: ExperimentDataset,
        threshold: int,
        ) -> tuple[float, float]:
    """
    Overall effect, sum over levels l > 0 of tau_hat(l) P(level = l | Z = 1).

    Levels without an estimate are dropped and the remaining weights are
     rescaled to the total mass of levels > 0.

    Args:
        per_level: level -> estimate (`None` if undefined).
        dataset: Dataset, for the treated exposure distribution.
        threshold: Truncation threshold.

    Returns:
        (overall estimate, dropped mass)

    Raises:
        InvalidDataError: if every level with treated support is undefined.
    """
    dist = treated_level_distribution(dataset, threshold)
    positive = {ll: pp for ll, pp in dist.items() if ll > 0 and pp > 0}
    if not positive:
        return 0.0, 0.0
    defined = {ll: pp for ll, pp in positive.items() if per_level.get(ll) is not None}
    if not defined:
        raise InvalidDataError(f'All exposure levels with treated support are undefined: {sorted(positive)}')

    total = math.fsum(positive.values())
    kept = math.fsum(defined.values())
    overall = math.fsum(per_level[ll] * pp for ll, pp in defined.items()) * (total / kept)     # type: ignore[operator]
    return overall, total - kept


'''
    Orchestration
'''
def _naive_estimate(dataset: ExperimentDataset, threshold: int, without_control_mixed: bool) -> TauEstimate:
    kind = EstimatorKind.NaiveWithoutControlMixed if without_control_mixed else EstimatorKind.Naive
    per_level = naive_without_control_mixed if without_control_mixed else naive_per_m
    treated_levels = dataset.levels(threshold)[dataset.treated]

    levels = {}
    for level in range(threshold + 1):
        n_units = int(numpy.count_nonzero(treated_levels == level))
        try:
            value: float | None = per_level(dataset, level, threshold)
        except UndefinedLevelError:
            value = None
        levels[level] = LevelEstimate(level, level_label(level, threshold), value, n_units, float(n_units))

    control = dataset.mask(GroupLabel.ControlControl) if without_control_mixed else dataset.control
    overall = float(numpy.mean(dataset.y[dataset.treated])) - float(numpy.mean(dataset.y[control]))
    return TauEstimate(kind, threshold, levels, overall)


def _proposed_estimate(
        dataset: ExperimentDataset,
        table: PropensityTable,
        mu_bar: float,
        include_control_mixed: bool,
        ) -> TauEstimate:
    kind = EstimatorKind.Proposed if include_control_mixed else EstimatorKind.ProposedWithoutControlMixed
    threshold = table.threshold
    levels = {}
    for level in range(threshold + 1):
        try:
            est = hajek_level(dataset, level, table, include_control_mixed, threshold)
            assert est.estimate is not None
            est.estimate -= mu_bar
        except UndefinedLevelError:
            est = LevelEstimate(level, level_label(level, threshold), None, 0, 0.0)
        levels[level] = est

    overall, dropped = estimate_overall_tau({ll: ee.estimate for ll, ee in levels.items()}, dataset, threshold)
    if dropped > 0:
        logger.info(f'{kind.value}: dropped treated exposure mass {dropped:.4f} from undefined levels')
    return TauEstimate(kind, threshold, levels, overall, dropped)


class EstimationRun:
    """
    Everything produced by `run_estimation()`.
    """
    estimates: dict[EstimatorKind, TauEstimate]
    fits: dict[str, PropensityFit]
    """population name ('pooled', 'treated') -> fitted propensity model"""

    cv_reports: dict[str, CvReport]
    baseline: BaselineModel | None
    settings: EstimatorSettings

    def __init__(self, settings: EstimatorSettings) -> None:
        self.settings = settings
        self.estimates = {}
        self.fits = {}
        self.cv_reports = {}
        self.baseline = None

    def diagnostics(self) -> dict[str, Any]:
        return {
            'settings': self.settings.to_dict(),
            'baseline': None if self.baseline is None else self.baseline.to_dict(),
            'propensity': {name: fit.diagnostics for name, fit in sorted(self.fits.items())},
            'cross_validation': {name: cv.to_dict() for name, cv in sorted(self.cv_reports.items())},
            }


def _population_propensities(
        dataset: ExperimentDataset,
        settings: EstimatorSettings,
        population: str,
        run: EstimationRun,
        oracle: Mapping[str, NDArray[numpy.float64]] | None,
        stored: Mapping[str, PropensityFit],
        ) -> PropensityTable:
    threshold = settings.threshold
    rows = analysis_population(dataset, include_control_mixed=(population == POOLED))
    if settings.propensity == 'oracle':
        if oracle is None:
            raise ConfigError('propensity="oracle" needs oracle propensity tables')
        if population not in oracle:
            raise ConfigError(f'No oracle propensity table for the "{population}" population')
        table = numpy.asarray(oracle[population], dtype=numpy.float64)
        if table.shape != (dataset.n_players, threshold + 1):
            raise InvalidDataError(f'Oracle propensities ({population}) have shape {table.shape},'
                                   f' expected ({dataset.n_players}, {threshold + 1})')
        values = numpy.full(table.shape, numpy.nan)
        values[rows] = stabilize_weights(table[rows], settings.epsilon)
        return PropensityTable(range(threshold + 1), values, threshold)

    fit = stored.get(population)
    if fit is None:
        kind = ModelKind.parse(settings.propensity)
        features = dataset.x[rows]
        categories = dataset.levels(threshold)[rows]
        options = settings.model_options()
        if settings.cv_folds:
            grid = [options | gg for gg in (LINEAR_GRID if kind == ModelKind.MultinomialLinear else BOOSTED_GRID)]
            folds_seed = int(rng_stream(settings.seed, 'folds').integers(2**32))
            cv = cross_validate(features, categories, grid, settings.cv_folds, kind=kind, seed=folds_seed)
            run.cv_reports[population] = cv
            options = cv.selected
        fit = fit_propensity(kind, features, categories, threshold=threshold, **options)
    elif fit.n_features != dataset.x.shape[1] or fit.threshold != threshold:
        raise InvalidDataError(f'Stored propensity model {fit!r} (threshold {fit.threshold}) does not match'
                               f' the dataset ({dataset.x.shape[1]} features, threshold {threshold})')
    run.fits[population] = fit
    return PropensityTable.from_fit(fit, dataset.x, rows, settings.epsilon)


def run_estimation(
        dataset: ExperimentDataset,
        settings: EstimatorSettings | None = None,
        *,
        oracle: Mapping[str, NDArray[numpy.float64]] | None = None,
        fits: Mapping[str, PropensityFit] | None = None,
        ) -> EstimationRun:
    """
    Compute all four estimators on one dataset. One propensity model is fit per
     analysis population and shared; a failure in one estimator leaves the
     others intact.

    Args:
        dataset: Dataset.
        settings: Estimator settings.
        oracle: Design-based propensity tables by population name (`POOLED`, `TREATED`),
            each `(n_players, threshold + 1)`; required when `settings.propensity == 'oracle'`.
        fits: Previously fit propensity models by population name, reused as-is.

    Returns:
        `EstimationRun` with the four `TauEstimate`s, the fits and diagnostics.
    """
    settings = EstimatorSettings() if settings is None else settings
    stored = {} if fits is None else fits
    threshold = settings.threshold
    run = EstimationRun(settings)

    for without_cm in (False, True):
        kind = EstimatorKind.NaiveWithoutControlMixed if without_cm else EstimatorKind.Naive
        try:
            run.estimates[kind] = _naive_estimate(dataset, threshold, without_cm)
        except TeamspillError as err:
            logger.warning(f'{kind.value} estimator failed: {err}')
            run.estimates[kind] = TauEstimate(kind, threshold, error=str(err))

    mu_bar: float | None = None
    baseline_error = ''
    try:
        run.baseline = estimate_baseline(dataset, settings.baseline_mode)
        mu_bar = float(numpy.mean(run.baseline.predict(dataset)))
    except TeamspillError as err:
        baseline_error = f'baseline: {err}'

    for population, kind in ((POOLED, EstimatorKind.Proposed), (TREATED, EstimatorKind.ProposedWithoutControlMixed)):
        try:
            if mu_bar is None:
                raise InvalidDataError(baseline_error)
            table = _population_propensities(dataset, settings, population, run, oracle, stored)
            run.estimates[kind] = _proposed_estimate(dataset, table, mu_bar, population == POOLED)
        except TeamspillError as err:
            logger.warning(f'{kind.value} estimator failed: {err}')
            run.estimates[kind] = TauEstimate(kind, threshold, error=str(err))

    run.estimates = {kk: run.estimates[kk] for kk in EstimatorKind}
    logger.info('Estimates: ' + ', '.join(f'{kk.value}={ee.overall}' for kk, ee in run.estimates.items()))
    return run


def run_all_estimators(
        dataset: ExperimentDataset,
        settings: EstimatorSettings | None = None,
        *,
        oracle: Mapping[str, NDArray[numpy.float64]] | None = None,
        fits: MutableMapping[str, PropensityFit] | None = None,
        ) -> dict[EstimatorKind, TauEstimate]:
    """
    The four `TauEstimate`s of `run_estimation()`. Newly fit propensity models
     are stored into `fits` when it is given.
    """
    run = run_estimation(dataset, settings, oracle=oracle, fits=fits)
    if fits is not None:
        fits.update(run.fits)
    return run.estimates
