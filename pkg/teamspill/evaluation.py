"""
Monte Carlo evaluation: simulate many experiments, run every estimator on each,
 and summarize the estimates against the known truth.
"""
from typing import Any
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import repeat
import logging
import math

import numpy
from scipy import stats

from .basic import ConfigError, InvalidDataError
from .domain import GroupLabel, level_label
from .simulator import (
    SimulationConfig, simulate_experiment, oracle_propensities, rng_stream,
    true_tau, level_truth, overall_truth,
    )
from .estimators import EstimatorKind, EstimatorSettings, TauEstimate, run_all_estimators, treated_level_distribution


logger = logging.getLogger(__name__)


REPLICATE_KEY: int = 0x5eed
"""spawn-key prefix separating replicate seeds from the named streams"""


def replicate_seed(master: int, index: int) -> int:
    """
    Seed of replicate `index`, derived from the master seed.
    """
    state = numpy.random.SeedSequence(master, spawn_key=(REPLICATE_KEY, index)).generate_state(1, dtype=numpy.uint64)
    return int(state[0]) >> 1


@dataclass(frozen=True)
class McConfig:
    """
    Monte Carlo run definition.
    """
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    replicates: int = 100
    seed: int = 0
    settings: EstimatorSettings = field(default_factory=EstimatorSettings)
    oracle_draws: int = 20_000
    """replayed matching rounds per treated-count value, for oracle propensities"""

    workers: int = 1

    def __post_init__(self) -> None:
        if self.replicates < 1:
            raise ConfigError(f'replicates must be >= 1, got {self.replicates}')
        if self.workers < 1:
            raise ConfigError(f'workers must be >= 1, got {self.workers}')
        if self.oracle_draws < 1:
            raise ConfigError(f'oracle_draws must be >= 1, got {self.oracle_draws}')

    def replicate_seed(self, index: int) -> int:
        return replicate_seed(self.seed, index)

    def seeds(self) -> list[int]:
        seeds = [self.replicate_seed(ii) for ii in range(self.replicates)]
        if len(set(seeds)) != len(seeds):
            raise ConfigError(f'Replicate seeds derived from master seed {self.seed} collide')
        return seeds

    def to_dict(self) -> dict[str, Any]:
        return {
            'simulation': self.simulation.to_dict(),
            'replicates': self.replicates,
            'seed': self.seed,
            'settings': self.settings.to_dict(),
            'oracle_draws': self.oracle_draws,
            'workers': self.workers,
            }


class ReplicateResult:
    """
    Outcome of one replicate
    """
    index: int
    seed: int
    estimates: dict[EstimatorKind, TauEstimate]
    truth: dict[int, float]
    """level -> true effect (top bucket: realized-exposure average)"""

    overall_truth: float | None
    support: dict[int, float]
    """level -> share of treated players at that level"""

    shares: dict[str, float]
    """group label value -> share of players"""

    error: str | None

    def __init__(
            self,
            index: int,
            seed: int,
            estimates: dict[EstimatorKind, TauEstimate] | None = None,
            truth: dict[int, float] | None = None,
            overall_truth: float | None = None,
            support: dict[int, float] | None = None,
            shares: dict[str, float] | None = None,
            error: str | None = None,
            ) -> None:
        self.index = index
        self.seed = seed
        self.estimates = {} if estimates is None else estimates
        self.truth = {} if truth is None else truth
        self.overall_truth = overall_truth
        self.support = {} if support is None else support
        self.shares = {} if shares is None else shares
        self.error = error

    @property
    def ok(self) -> bool:
        return self.error is None

    def __repr__(self) -> str:
        status = 'ok' if self.ok else f'failed: {self.error}'
        return f'ReplicateResult(#{self.index}, seed={self.seed}, {status})'


def run_replication(mc: McConfig, index: int) -> ReplicateResult:
    """
    Simulate replicate `index` and run every estimator on it. Fully determined
     by `(mc, index)`.

    Failures are recorded in the result rather than raised.
    """
    seed = mc.replicate_seed(index)
    sim = mc.simulation.replace(seed=seed)
    threshold = mc.settings.threshold
    try:
        dataset = simulate_experiment(sim)
        oracle = None
        if mc.settings.propensity == 'oracle':
            oracle = oracle_propensities(dataset, sim, rng_stream(seed, 'oracle'), mc.oracle_draws, threshold)
        settings = replace(mc.settings, seed=seed)
        estimates = run_all_estimators(dataset, settings, oracle=oracle)
    except Exception as err:
        logger.warning(f'Replicate {index} (seed {seed}) failed: {err}')
        return ReplicateResult(index, seed, error=f'{type(err).__name__}: {err}')

    shares = {gg.value: ss for gg, ss in dataset.groups.shares().items()}
    result = ReplicateResult(
        index,
        seed,
        estimates,
        truth=level_truth(dataset, threshold, sim.covariate_params),
        overall_truth=overall_truth(dataset, sim.covariate_params),
        support=treated_level_distribution(dataset, threshold),
        shares=shares,
        )
    logger.debug(f'Replicate {index} done')
    return result


def _map_replicates(
        func: Callable[[McConfig, int], Any],
        mc: McConfig,
        indices: Iterable[int] | None = None,
        ) -> list[Any]:
    indices = list(range(mc.replicates) if indices is None else indices)
    if mc.workers > 1 and len(indices) > 1:
        with ProcessPoolExecutor(max_workers=mc.workers) as pool:
            return list(pool.map(func, repeat(mc), indices))
    return [func(mc, ii) for ii in indices]


'''
    Summaries
'''
class LevelSummary:
    """
    Monte Carlo summary of one estimator at one level (or overall)
    """
    level: int | None
    """`None` for the overall effect"""

    label: str
    n: int
    """replicates contributing an estimate"""

    mean: float
    lower: float
    """2.5% nearest-rank percentile"""

    upper: float
    """97.5% nearest-rank percentile"""

    truth: float
    bias: float
    rmse: float
    defined_fraction: float
    support: float
    """mean share of treated players at this level"""

    def __init__(
            self,
            level: int | None,
            label: str,
            values: Sequence[float],
            truths: Sequence[float],
            truth: float,
            defined_fraction: float,
            support: float,
            ) -> None:
        vals = numpy.array(values, dtype=numpy.float64)
        self.level = level
        self.label = label
        self.n = int(vals.size)
        self.mean = math.fsum(values) / vals.size
        self.lower, self.upper = (float(vv) for vv in numpy.percentile(vals, [2.5, 97.5], method='inverted_cdf'))
        self.truth = truth
        self.bias = self.mean - truth
        self.rmse = math.sqrt(math.fsum((vv - tt) ** 2 for vv, tt in zip(values, truths, strict=True)) / vals.size)
        self.defined_fraction = defined_fraction
        self.support = support

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def to_dict(self) -> dict[str, Any]:
        return {
            'level': self.level,
            'label': self.label,
            'n': self.n,
            'mean': self.mean,
            'lower': self.lower,
            'upper': self.upper,
            'truth': self.truth,
            'bias': self.bias,
            'rmse': self.rmse,
            'defined_fraction': self.defined_fraction,
            'support': self.support,
            }


class EstimatorSummary:
    kind: EstimatorKind
    levels: dict[int, LevelSummary]
    censored: dict[int, float]
    """levels defined in fewer than half the replicates -> defined fraction"""

    overall: LevelSummary | None
    n_failed: int
    """replicates in which this estimator failed as a whole"""

    def __init__(
            self,
            kind: EstimatorKind,
            levels: dict[int, LevelSummary],
            censored: dict[int, float],
            overall: LevelSummary | None,
            n_failed: int,
            ) -> None:
        self.kind = kind
        self.levels = levels
        self.censored = censored
        self.overall = overall
        self.n_failed = n_failed

    def to_dict(self) -> dict[str, Any]:
        return {
            'kind': self.kind.value,
            'levels': [ls.to_dict() for _ll, ls in sorted(self.levels.items())],
            'censored': {str(ll): ff for ll, ff in sorted(self.censored.items())},
            'overall': None if self.overall is None else self.overall.to_dict(),
            'n_failed': self.n_failed,
            }


class McSummary:
    """
    Aggregate of all replicates of a Monte Carlo run.
    """
    config: dict[str, Any]
    threshold: int
    n_replicates: int
    failures: list[tuple[int, str]]
    """(replicate index, error) of failed replicates"""

    estimators: dict[EstimatorKind, EstimatorSummary]
    mean_shares: dict[str, float]

    def __init__(
            self,
            config: dict[str, Any],
            threshold: int,
            n_replicates: int,
            failures: list[tuple[int, str]],
            estimators: dict[EstimatorKind, EstimatorSummary],
            mean_shares: dict[str, float],
            ) -> None:
        self.config = config
        self.threshold = threshold
        self.n_replicates = n_replicates
        self.failures = failures
        self.estimators = estimators
        self.mean_shares = mean_shares

    @property
    def n_failed(self) -> int:
        return len(self.failures)

    def to_dict(self) -> dict[str, Any]:
        return {
            'config': self.config,
            'threshold': self.threshold,
            'n_replicates': self.n_replicates,
            'n_failed': self.n_failed,
            'failures': [{'index': ii, 'error': ee} for ii, ee in self.failures],
            'mean_shares': self.mean_shares,
            'estimators': [es.to_dict() for es in self.estimators.values()],
            }


def summarize_replicates(results: Iterable[ReplicateResult], mc: McConfig) -> McSummary:
    """
    Fold replicate results into an `McSummary`. The result depends only on the
     set of replicates, not on the order they are given in.

    Raises:
        InvalidDataError: if every replicate failed.
    """
    ordered = sorted(results, key=lambda rr: rr.index)
    failures = [(rr.index, rr.error or '') for rr in ordered if not rr.ok]
    ok = [rr for rr in ordered if rr.ok]
    if not ok:
        details = '; '.join(f'#{ii}: {ee}' for ii, ee in failures)
        raise InvalidDataError(f'All {len(ordered)} replicates failed: {details}')

    threshold = mc.settings.threshold
    cov = mc.simulation.covariate_params
    estimators = {}
    for kind in EstimatorKind:
        runs = [rr for rr in ok if rr.estimates[kind].ok]
        levels = {}
        censored = {}
        for level in range(threshold + 1):
            contributing = [rr for rr in runs if rr.estimates[kind].estimate(level) is not None]
            fraction = len(contributing) / len(runs) if runs else 0.0
            if not contributing or fraction < 0.5:
                censored[level] = fraction
                continue
            values = [rr.estimates[kind].estimate(level) for rr in contributing]
            truths = [rr.truth[level] for rr in contributing]
            truth = float(true_tau(level, cov)) if level < threshold else math.fsum(truths) / len(truths)
            support = math.fsum(rr.support[level] for rr in ok) / len(ok)
            levels[level] = LevelSummary(level, level_label(level, threshold), values, truths, truth, fraction, support)  # type: ignore[arg-type]

        overall = None
        with_overall = [rr for rr in runs if rr.estimates[kind].overall is not None]
        if with_overall:
            values = [rr.estimates[kind].overall for rr in with_overall]
            truths = [rr.overall_truth for rr in with_overall]
            truth = math.fsum(truths) / len(truths)                                     # type: ignore[arg-type]
            overall = LevelSummary(None, 'overall', values, truths, truth, len(with_overall) / len(ok), 1.0)  # type: ignore[arg-type]
        estimators[kind] = EstimatorSummary(kind, levels, censored, overall, len(ok) - len(runs))

    mean_shares = {gg.value: math.fsum(rr.shares[gg.value] for rr in ok) / len(ok) for gg in GroupLabel}
    if failures:
        logger.warning(f'{len(failures)} of {len(ordered)} replicates failed')
    return McSummary(mc.to_dict(), threshold, len(ordered), failures, estimators, mean_shares)


def run_monte_carlo(mc: McConfig) -> McSummary:
    """
    Run `mc.replicates` replicates (in a process pool when `mc.workers > 1`)
     and summarize them.

    Raises:
        InvalidDataError: if every replicate failed.
    """
    mc.seeds()
    logger.info(f'Running {mc.replicates} replicates ({mc.workers} workers)')
    results = _map_replicates(run_replication, mc)
    summary = summarize_replicates(results, mc)
    logger.info(f'Monte Carlo done: {summary.n_replicates - summary.n_failed} replicates succeeded')
    return summary


'''
    Group shares and exposure profile
'''
class GroupShareReport:
    """
    Per-replicate group shares and the averaged exposure profile.
    """
    threshold: int
    shares: list[dict[str, float]]
    """per replicate: group label value -> share of players"""

    mean_shares: dict[str, float]
    profile: dict[str, list[float]]
    """group label value -> mean share of all players at each truncated level"""

    def __init__(self, threshold: int, shares: list[dict[str, float]], profile: dict[str, list[float]]) -> None:
        self.threshold = threshold
        self.shares = shares
        self.mean_shares = {gg.value: math.fsum(ss[gg.value] for ss in shares) / len(shares) for gg in GroupLabel}
        self.profile = profile

    def to_dict(self) -> dict[str, Any]:
        return {
            'threshold': self.threshold,
            'shares': self.shares,
            'mean_shares': self.mean_shares,
            'profile': self.profile,
            }


def _replicate_profile(mc: McConfig, index: int) -> tuple[dict[str, float], dict[str, list[float]]]:
    threshold = mc.settings.threshold
    dataset = simulate_experiment(mc.simulation.replace(seed=mc.replicate_seed(index)))
    levels = dataset.levels(threshold)
    shares = {gg.value: ss for gg, ss in dataset.groups.shares().items()}
    profile = {}
    for gg in GroupLabel:
        counts = numpy.bincount(levels[dataset.mask(gg)], minlength=threshold + 1)
        profile[gg.value] = (counts / dataset.n_players).tolist()
    return shares, profile


def exposure_profile(mc: McConfig) -> dict[str, list[float]]:
    """
    Mean share of players at each (group, truncated level), over replicates.
    """
    return group_share_report(mc).profile


def group_share_report(mc: McConfig) -> GroupShareReport:
    """
    Simulate every replicate and report the treatment, control-mixed and
     control-control shares, plus the averaged exposure profile per group.
    """
    per_replicate = _map_replicates(_replicate_profile, mc)
    shares = [ss for ss, _pp in per_replicate]
    profile = {}
    for gg in GroupLabel:
        stacked = numpy.array([pp[gg.value] for _ss, pp in per_replicate])
        profile[gg.value] = stacked.mean(axis=0).tolist()
    return GroupShareReport(mc.settings.threshold, shares, profile)


'''
    Estimator comparison
'''
class BiasComparison:
    """
    Per-level ranking of estimators by |bias| and by interval width.
     Rank 1 is best; ties share the lowest rank.
    """
    bias_ranks: dict[int, dict[EstimatorKind, int]]
    width_ranks: dict[int, dict[EstimatorKind, int]]

    proposed_best_fraction: float
    """share of compared levels where the proposed estimator has the smallest |bias|"""

    wider_without_cm_fraction: float
    """share of levels where proposed-wo-cm has an interval at least as wide as proposed"""

    def __init__(
            self,
            bias_ranks: dict[int, dict[EstimatorKind, int]],
            width_ranks: dict[int, dict[EstimatorKind, int]],
            proposed_best_fraction: float,
            wider_without_cm_fraction: float,
            ) -> None:
        self.bias_ranks = bias_ranks
        self.width_ranks = width_ranks
        self.proposed_best_fraction = proposed_best_fraction
        self.wider_without_cm_fraction = wider_without_cm_fraction

    def to_dict(self) -> dict[str, Any]:
        def _ranks(table: dict[int, dict[EstimatorKind, int]]) -> dict[str, dict[str, int]]:
            return {str(ll): {kk.value: rr for kk, rr in row.items()} for ll, row in sorted(table.items())}
        return {
            'bias_ranks': _ranks(self.bias_ranks),
            'width_ranks': _ranks(self.width_ranks),
            'proposed_best_fraction': self.proposed_best_fraction,
            'wider_without_cm_fraction': self.wider_without_cm_fraction,
            }


def bias_comparison(summary: McSummary, min_support: float = 0.0) -> BiasComparison:
    """
    Rank estimators at every level they share.

    Args:
        summary: Monte Carlo summary.
        min_support: Skip levels whose treated-support share is below this.

    Returns:
        `BiasComparison`.
    """
    all_levels = sorted({ll for es in summary.estimators.values() for ll in es.levels})
    bias_ranks = {}
    width_ranks = {}
    best = []
    wider = []
    naive_kinds = (EstimatorKind.Naive, EstimatorKind.NaiveWithoutControlMixed)
    for level in all_levels:
        present = {kk: es.levels[level] for kk, es in summary.estimators.items() if level in es.levels}
        if not present or max(ls.support for ls in present.values()) < min_support:
            continue
        kinds = list(present)
        b_ranks = stats.rankdata([abs(present[kk].bias) for kk in kinds], method='min')
        w_ranks = stats.rankdata([present[kk].width for kk in kinds], method='min')
        bias_ranks[level] = {kk: int(rr) for kk, rr in zip(kinds, b_ranks, strict=True)}
        width_ranks[level] = {kk: int(rr) for kk, rr in zip(kinds, w_ranks, strict=True)}

        if EstimatorKind.Proposed in present and all(kk in present for kk in naive_kinds):
            pb = abs(present[EstimatorKind.Proposed].bias)
            best.append(all(pb <= abs(present[kk].bias) for kk in naive_kinds))
        if EstimatorKind.Proposed in present and EstimatorKind.ProposedWithoutControlMixed in present:
            wider.append(present[EstimatorKind.ProposedWithoutControlMixed].width >= present[EstimatorKind.Proposed].width)

    return BiasComparison(
        bias_ranks,
        width_ranks,
        sum(best) / len(best) if best else math.nan,
        sum(wider) / len(wider) if wider else math.nan,
        )
