"""
Synthetic experiments: randomized assignment, a single activity covariate,
 weighted per-game team matching, and exponential outcomes whose mean grows
 with both activity and the number of treated games played.

Also provides the analytic ground truth (`true_mu()`, `true_tau()`) and
 brute-force oracles used to validate estimators against it.
"""
from typing import Any, Self
from collections.abc import Sequence
from dataclasses import dataclass, asdict, replace
from enum import Enum
import logging
import math
import warnings

import numpy
from numpy.typing import NDArray, ArrayLike
from numpy.polynomial import Polynomial
from scipy import stats

from .basic import ConfigError, InvalidDataError
from .domain import (
    PlayerRecord, GameSession, ExperimentDataset, DEFAULT_TEAM_SIZE, POOLED, TREATED, truncate_levels,
    )


logger = logging.getLogger(__name__)


'''
    Random streams
'''
STREAMS: tuple[str, ...] = (
    'assignment',
    'covariates',
    'matching',
    'outcomes',
    'pre_period',
    'features',
    'oracle',
    'folds',
    )


def rng_stream(seed: int, name: str) -> numpy.random.Generator:
    """
    Independent random stream derived from a master seed.

    Each named stream depends only on `(seed, name)`, so e.g. changing the
     number of games never perturbs the covariate draws.

    Args:
        seed: Master seed.
        name: One of `STREAMS`.

    Returns:
        A seeded `numpy.random.Generator`.
    """
    if name not in STREAMS:
        raise ConfigError(f'Unknown random stream "{name}", expected one of {STREAMS}')
    return numpy.random.default_rng(numpy.random.SeedSequence(seed, spawn_key=(STREAMS.index(name),)))


'''
    Configuration
'''
class CasePreset(Enum):
    """
    Preset (number of games, per-game treated-count distribution) pairs
    """
    I = 'I'         # noqa: E741
    II = 'II'
    III = 'III'

    @property
    def n_games(self) -> int:
        return _CASES[self][0]

    @property
    def treated_count_probs(self) -> tuple[float, ...]:
        return _CASES[self][1]


_CASES: dict[CasePreset, tuple[int, tuple[float, ...]]] = {
    CasePreset.I: (2000, (0.40, 0.10, 0.10, 0.10, 0.10, 0.20)),
    CasePreset.II: (1000, (0.06, 0.02, 0.19, 0.23, 0.34, 0.16)),
    CasePreset.III: (1000, (0.20, 0.34, 0.07, 0.16, 0.06, 0.17)),
    }


MATCHING_MODES: tuple[str, ...] = ('mixed', 'activity')


@dataclass(frozen=True)
class SimulationConfig:
    """
    Parameters of one synthetic experiment.
    """
    n_players: int = 1000
    p_treat: float = 0.5
    n_games: int = CasePreset.I.n_games
    team_size: int = DEFAULT_TEAM_SIZE
    treated_count_probs: tuple[float, ...] = CasePreset.I.treated_count_probs
    """P(n_T(j) = k) for k = 0..team_size"""

    covariate_params: tuple[float, float] = (0.5, 0.5)
    """Beta shape parameters of the activity covariate"""

    truncation: int = 10
    seed: int = 0

    matching: str = 'mixed'
    """
    'mixed': near-uniform weights, all-control games drawn from players with x < `all_control_cutoff`;
    'activity': every slot weighted by x ** `activity_exponent`.
    """

    all_control_cutoff: float = 0.2
    activity_exponent: float = 1.0

    pre_period: bool = False
    """draw a pre-period outcome for every player"""

    pre_scale: float = 1.1
    """pre-period outcome mean, relative to the untreated outcome mean"""

    extra_features: int = 0
    """number of standard-normal covariates appended after the activity covariate"""

    def __post_init__(self) -> None:
        object.__setattr__(self, 'treated_count_probs', tuple(float(pp) for pp in self.treated_count_probs))
        object.__setattr__(self, 'covariate_params', tuple(float(pp) for pp in self.covariate_params))
        probs = self.treated_count_probs

        if self.team_size < 1:
            raise ConfigError(f'team_size must be >= 1, got {self.team_size}')
        if self.n_players < self.team_size:
            raise ConfigError(f'n_players ({self.n_players}) must be >= team_size ({self.team_size})')
        if self.n_games < 1:
            raise ConfigError(f'n_games must be >= 1, got {self.n_games}')
        if not 0 <= self.p_treat <= 1:
            raise ConfigError(f'p_treat must be in [0, 1], got {self.p_treat}')
        if len(probs) != self.team_size + 1:
            raise ConfigError(f'treated_count_probs needs {self.team_size + 1} entries (0..team_size), got {len(probs)}')
        if any(not 0 <= pp <= 1 for pp in probs):
            raise ConfigError(f'treated_count_probs entries must be in [0, 1]: {probs}')
        if abs(math.fsum(probs) - 1) > 1e-12:
            raise ConfigError(f'treated_count_probs must sum to 1, got {math.fsum(probs)!r}')
        if len(self.covariate_params) != 2 or min(self.covariate_params) <= 0:
            raise ConfigError(f'covariate_params must be two positive Beta shapes, got {self.covariate_params}')
        if self.truncation < 1:
            raise ConfigError(f'truncation must be >= 1, got {self.truncation}')
        if self.matching not in MATCHING_MODES:
            raise ConfigError(f'matching must be one of {MATCHING_MODES}, got "{self.matching}"')
        if not 0 < self.all_control_cutoff <= 1:
            raise ConfigError(f'all_control_cutoff must be in (0, 1], got {self.all_control_cutoff}')
        if self.activity_exponent < 0:
            raise ConfigError(f'activity_exponent must be >= 0, got {self.activity_exponent}')
        if self.pre_scale <= 0:
            raise ConfigError(f'pre_scale must be positive, got {self.pre_scale}')
        if self.extra_features < 0:
            raise ConfigError(f'extra_features must be >= 0, got {self.extra_features}')

    @classmethod
    def from_case(cls: type[Self], case: CasePreset | str, **overrides) -> Self:
        """
        Configuration for one of the preset cases.

        Args:
            case: `CasePreset` or its name ('I', 'II', 'III').
            **overrides: Any other `SimulationConfig` fields.

        Returns:
            New `SimulationConfig`.
        """
        case = parse_case(case)
        return cls(n_games=case.n_games, treated_count_probs=case.treated_count_probs, **overrides)

    def replace(self, **changes) -> 'SimulationConfig':
        return replace(self, **changes)

    @property
    def feature_names(self) -> tuple[str, ...]:
        return ('x',) + tuple(f'aux{ii}' for ii in range(1, self.extra_features + 1))

    @property
    def mean_covariate(self) -> float:
        aa, bb = self.covariate_params
        return aa / (aa + bb)

    def to_dict(self) -> dict[str, Any]:
        dd = asdict(self)
        dd['treated_count_probs'] = list(self.treated_count_probs)
        dd['covariate_params'] = list(self.covariate_params)
        return dd


def parse_case(case: CasePreset | str) -> CasePreset:
    if isinstance(case, CasePreset):
        return case
    try:
        return CasePreset(str(case).upper())
    except ValueError:
        raise ConfigError(f'Unknown case "{case}", expected one of I, II, III') from None


def case_study_config(seed: int = 0, **overrides) -> SimulationConfig:
    """
    Scenario resembling an ingested case study: matching favours active
     players (so never-contaminated controls are mostly low-activity), a
     pre-period outcome is available, and two uninformative covariates ride
     along with the activity covariate.

    Args:
        seed: Master seed.
        **overrides: Any other `SimulationConfig` fields.

    Returns:
        New `SimulationConfig`.
    """
    params: dict[str, Any] = dict(
        n_players=2000,
        n_games=2000,
        treated_count_probs=CasePreset.I.treated_count_probs,
        matching='activity',
        activity_exponent=1.0,
        pre_period=True,
        extra_features=2,
        truncation=10,
        seed=seed,
        )
    params.update(overrides)
    return SimulationConfig(**params)


'''
    Outcome model
'''
class OutcomeModel:
    """
    Exponential outcomes with mean
        lambda(m, x) = 0.5 sqrt(m) + 2 x + 0.5 x 1{x > 0.5} + 0.5 sqrt(m) x

    "Exponential(1/lambda)" is read as rate 1/lambda, i.e. mean lambda.
    """
    @staticmethod
    def mean(m: ArrayLike, x: ArrayLike) -> NDArray[numpy.float64]:
        root_m = numpy.sqrt(numpy.asarray(m, dtype=numpy.float64))
        x = numpy.asarray(x, dtype=numpy.float64)
        return 0.5 * root_m + 2 * x + 0.5 * x * (x > 0.5) + 0.5 * root_m * x

    @staticmethod
    def sample(m: ArrayLike, x: ArrayLike, rng: numpy.random.Generator) -> NDArray[numpy.float64]:
        return rng.exponential(scale=OutcomeModel.mean(m, x))


def true_mu(x: ArrayLike) -> NDArray[numpy.float64] | float:
    """
    Untreated outcome mean, lambda(0, x).
    """
    mu = OutcomeModel.mean(0, x)
    return float(mu) if mu.ndim == 0 else mu


def true_tau(m: ArrayLike, covariate_params: tuple[float, float] = (0.5, 0.5)) -> NDArray[numpy.float64] | float:
    """
    Average effect of m treated games versus none,
        E_X[lambda(m, X) - lambda(0, X)] = 0.5 sqrt(m) (1 + E[X]).

    Args:
        m: Exposure count(s).
        covariate_params: Beta shape parameters of X.

    Returns:
        tau(m), 0.75 sqrt(m) for the default Beta(0.5, 0.5).
    """
    aa, bb = covariate_params
    tau = 0.5 * numpy.sqrt(numpy.asarray(m, dtype=numpy.float64)) * (1 + aa / (aa + bb))
    return float(tau) if tau.ndim == 0 else tau


def potential_outcome_oracle(
        m: int,
        rng: numpy.random.Generator,
        n_draws: int = 1_000_000,
        covariate_params: tuple[float, float] = (0.5, 0.5),
        ) -> float:
    """
    Monte Carlo average of lambda(m, X) - lambda(0, X) over fresh covariate draws.
    """
    xx = rng.beta(*covariate_params, size=n_draws)
    return float(numpy.mean(OutcomeModel.mean(m, xx) - OutcomeModel.mean(0, xx)))


def level_truth(
        dataset: ExperimentDataset,
        threshold: int,
        covariate_params: tuple[float, float] = (0.5, 0.5),
        ) -> dict[int, float]:
    """
    True effect per truncated level. Levels below the threshold use `true_tau()`
     directly; the top bucket uses the average of `true_tau(m)` over the treated
     players whose exposure landed in it (falling back to all such players, then
     to `true_tau(threshold)`).

    Args:
        dataset: Realized dataset.
        threshold: Truncation threshold.
        covariate_params: Beta shape parameters of X.

    Returns:
        level -> true effect.
    """
    truth = {level: float(true_tau(level, covariate_params)) for level in range(threshold)}
    top = dataset.m >= threshold
    if (top & dataset.treated).any():
        top &= dataset.treated
    if top.any():
        truth[threshold] = float(numpy.mean(true_tau(dataset.m[top], covariate_params)))
    else:
        truth[threshold] = float(true_tau(threshold, covariate_params))
    return truth


def overall_truth(dataset: ExperimentDataset, covariate_params: tuple[float, float] = (0.5, 0.5)) -> float:
    """
    Overall effect under the realized treated exposure distribution,
     sum_m tau(m) P(M = m | Z = 1).
    """
    return float(numpy.mean(true_tau(dataset.m[dataset.treated], covariate_params)))


'''
    Data-generating process
'''
def assign_treatments(config: SimulationConfig, rng: numpy.random.Generator) -> NDArray[numpy.int64]:
    """
    i.i.d. Bernoulli(p_treat) initial assignment.

    Args:
        config: Simulation parameters.
        rng: Random stream.

    Returns:
        Assignment vector (0/1).

    Raises:
        InvalidDataError: if either group came out empty. The draw is not
            repeated, to keep the seed -> data map stable.
    """
    z = rng.binomial(1, config.p_treat, size=config.n_players).astype(numpy.int64)
    if not z.any():
        raise InvalidDataError(f'Treatment group is empty (p_treat={config.p_treat}, n_players={config.n_players});'
                               ' use a larger n_players or p_treat')
    if z.all():
        raise InvalidDataError(f'Control group is empty (p_treat={config.p_treat}, n_players={config.n_players});'
                               ' use a larger n_players or smaller p_treat')
    return z


def draw_covariates(config: SimulationConfig, rng: numpy.random.Generator) -> NDArray[numpy.float64]:
    """
    i.i.d. Beta activity covariate, one per player.
    """
    return rng.beta(*config.covariate_params, size=config.n_players)


def matching_weights(
        x: NDArray[numpy.float64],
        all_control: bool,
        config: SimulationConfig,
        ) -> NDArray[numpy.float64]:
    """
    Unnormalized selection weights for one group (treated or control) in one game.

    In 'mixed' mode the weight is `0.8 / n + 0.2 (x / sum(x)) ** 2`, with `n`
     and `sum(x)` taken over the group being sampled from; in an all-control game
     the control weights are instead `x 1{x < cutoff}`.

    Args:
        x: Activity covariate of the group's members.
        all_control: `True` when drawing controls for a game with no treated slots.
        config: Simulation parameters.

    Returns:
        Weights, same shape as `x`.
    """
    if all_control and config.matching != 'activity':
        return x * (x < config.all_control_cutoff)
    return member_weights(x, x, config)


def member_weights(x: NDArray[numpy.float64], pool_x: NDArray[numpy.float64], config: SimulationConfig) -> NDArray[numpy.float64]:
    """
    Mixed-game matching weight each `x` would get as a member of the group `pool_x`.
    """
    if config.matching == 'activity':
        return numpy.power(x, config.activity_exponent)
    return 0.8 / pool_x.size + 0.2 * (x / pool_x.sum()) ** 2


def sample_without_replacement(
        weights: NDArray[numpy.float64],
        k: int,
        n_draws: int,
        rng: numpy.random.Generator,
        chunk: int = 4096,
        ) -> NDArray[numpy.int64]:
    """
    `n_draws` independent weighted samples of `k` distinct indices each.

    Each draw is equivalent to picking indices one at a time with probability
     proportional to weight, renormalizing over those not yet picked
     (exponential-race keys `E_i / w_i`, keep the `k` smallest).

    Args:
        weights: Non-negative weights.
        k: Sample size per draw.
        n_draws: Number of draws.
        rng: Random stream.
        chunk: Number of draws generated per block.

    Returns:
        Index array of shape `(n_draws, k)`, in selection order.

    Raises:
        InvalidDataError: if fewer than `k` indices have positive weight.
    """
    weights = numpy.asarray(weights, dtype=numpy.float64)
    n_positive = int(numpy.count_nonzero(weights > 0))
    if k == 0 or n_draws == 0:
        return numpy.empty((n_draws, k), dtype=numpy.int64)
    if n_positive == 0:
        raise InvalidDataError('Matching weights sum to zero')
    if n_positive < k:
        raise InvalidDataError(f'Only {n_positive} players have positive matching weight, need {k}')

    out = numpy.empty((n_draws, k), dtype=numpy.int64)
    with numpy.errstate(divide='ignore'):
        inv_w = 1.0 / weights
    for start in range(0, n_draws, chunk):
        stop = min(start + chunk, n_draws)
        keys = rng.exponential(size=(stop - start, weights.size)) * inv_w
        if k < weights.size:
            picked = numpy.argpartition(keys, k - 1, axis=1)[:, :k]
        else:
            picked = numpy.broadcast_to(numpy.arange(k), (stop - start, k)).copy()
        order = numpy.argsort(numpy.take_along_axis(keys, picked, axis=1), axis=1)
        out[start:stop] = numpy.take_along_axis(picked, order, axis=1)
    return out


def effective_treated_count_probs(
        x_control: NDArray[numpy.float64],
        config: SimulationConfig,
        ) -> NDArray[numpy.float64]:
    """
    Per-game treated-count distribution after the all-control fallback:
     if too few controls are eligible for an all-control game, games which
     would have had no treated slots are redrawn from the `n_T >= 1` part
     of the distribution.

    Raises:
        InvalidDataError: if the fallback is needed but impossible.
    """
    probs = numpy.array(config.treated_count_probs, dtype=numpy.float64)
    if probs[0] == 0:
        return probs
    eligible = numpy.count_nonzero(matching_weights(x_control, all_control=True, config=config) > 0)
    if eligible >= config.team_size:
        return probs
    rest = probs[1:].sum()
    if rest == 0:
        raise InvalidDataError(f'Only {eligible} controls are eligible for all-control games and'
                               ' treated_count_probs allows no other kind of game')
    probs[0] = 0
    return probs / rest


def _draw_rosters(
        z: NDArray[numpy.int64],
        x: NDArray[numpy.float64],
        config: SimulationConfig,
        rng: numpy.random.Generator,
        ) -> tuple[NDArray[numpy.int64], NDArray[numpy.int64]]:
    """
    Vectorized game generation.

    Returns:
        (n_t, rosters): per-game treated count, and player indices of shape
            `(n_games, team_size)` with the treated members first.
    """
    team = config.team_size
    treated_idx = numpy.flatnonzero(z == 1)
    control_idx = numpy.flatnonzero(z == 0)
    if treated_idx.size < team or control_idx.size < team:
        raise InvalidDataError(f'Matching needs at least {team} treated and {team} control players,'
                               f' got {treated_idx.size} and {control_idx.size}')

    probs = numpy.array(config.treated_count_probs, dtype=numpy.float64)
    n_t = rng.choice(team + 1, size=config.n_games, p=probs)

    x_t = x[treated_idx]
    x_c = x[control_idx]
    effective = effective_treated_count_probs(x_c, config)
    if effective[0] == 0 and probs[0] > 0:
        n_redraw = int(numpy.count_nonzero(n_t == 0))
        if n_redraw:
            msg = (f'Fewer than {team} controls are eligible for all-control games;'
                   f' redrawing the treated count of {n_redraw} games')
            logger.warning(msg)
            warnings.warn(msg, stacklevel=3)
            n_t[n_t == 0] = rng.choice(team + 1, size=n_redraw, p=effective)

    rosters = numpy.empty((config.n_games, team), dtype=numpy.int64)
    w_t = matching_weights(x_t, all_control=False, config=config)
    for kk in range(team + 1):
        games = numpy.flatnonzero(n_t == kk)
        if games.size == 0:
            continue
        picked_t = sample_without_replacement(w_t, kk, games.size, rng)
        w_c = matching_weights(x_c, all_control=(kk == 0), config=config)
        picked_c = sample_without_replacement(w_c, team - kk, games.size, rng)
        rosters[games, :kk] = treated_idx[picked_t]
        rosters[games, kk:] = control_idx[picked_c]
        logger.debug(f'{games.size} games with {kk} treated slots')
    return n_t, rosters


def _activity(players: Sequence[PlayerRecord]) -> NDArray[numpy.float64]:
    return numpy.array([pp.x[0] for pp in players], dtype=numpy.float64)


def simulate_matching(
        players: Sequence[PlayerRecord],
        config: SimulationConfig,
        rng: numpy.random.Generator,
        ) -> list[GameSession]:
    """
    Generate `config.n_games` team rosters. For each game, draw the number of
     treated slots, then fill the treated and control slots with distinct players
     sampled without replacement according to `matching_weights()`. Games are
     independent, so players recur across games.

    Args:
        players: Players; the first covariate is the activity covariate.
        config: Simulation parameters.
        rng: Random stream.

    Returns:
        List of `GameSession` (treated flag not yet derived).

    Raises:
        InvalidDataError: if a group is too small or all weights are zero.
    """
    z = numpy.array([pp.z for pp in players], dtype=numpy.int64)
    ids = [pp.id for pp in players]
    _n_t, rosters = _draw_rosters(z, _activity(players), config, rng)
    return [GameSession(str(jj), [ids[ii] for ii in roster]) for jj, roster in enumerate(rosters.tolist())]


def generate_outcomes(
        m: ArrayLike,
        x: ArrayLike,
        rng: numpy.random.Generator,
        ) -> NDArray[numpy.float64]:
    """
    Draw outcomes with mean `OutcomeModel.mean(m, x)`.

    Args:
        m: Exposure counts.
        x: Activity covariate.
        rng: Random stream.

    Returns:
        Outcome vector.
    """
    return OutcomeModel.sample(m, x, rng)


def simulate_experiment(config: SimulationConfig) -> ExperimentDataset:
    """
    Run the full data-generating process. Deterministic given `config`
     (including `config.seed`).

    Args:
        config: Simulation parameters.

    Returns:
        Fully populated `ExperimentDataset`.
    """
    seed = config.seed
    z = assign_treatments(config, rng_stream(seed, 'assignment'))
    x = draw_covariates(config, rng_stream(seed, 'covariates'))
    features = x[:, None]
    if config.extra_features:
        aux = rng_stream(seed, 'features').standard_normal((config.n_players, config.extra_features))
        features = numpy.hstack([features, aux])

    ids = [str(ii) for ii in range(config.n_players)]
    skeleton = [PlayerRecord(ids[ii], int(z[ii]), features[ii], 0.0) for ii in range(config.n_players)]
    sessions = simulate_matching(skeleton, config, rng_stream(seed, 'matching'))
    skeleton_ds = ExperimentDataset.build(skeleton, sessions, team_size=config.team_size)
    m = skeleton_ds.m

    y = generate_outcomes(m, x, rng_stream(seed, 'outcomes'))
    if config.pre_period:
        y_pre = rng_stream(seed, 'pre_period').exponential(scale=config.pre_scale * OutcomeModel.mean(0, x))
    else:
        y_pre = None

    players = [
        PlayerRecord(ids[ii], int(z[ii]), features[ii], float(y[ii]), m=int(m[ii]),
                     y_pre=None if y_pre is None else float(y_pre[ii]))
        for ii in range(config.n_players)]
    dataset = ExperimentDataset(players, skeleton_ds.sessions, feature_names=config.feature_names, team_size=config.team_size)
    logger.info(f'Simulated {dataset!r} (seed {seed})')
    return dataset


def _inclusion_curve(
        weights: NDArray[numpy.float64],
        rate: NDArray[numpy.float64],
        at: NDArray[numpy.float64],
        ) -> NDArray[numpy.float64]:
    """
    Smooth the per-member selection rates as a cubic in the matching weight,
     and evaluate it at `at` (clamped into the observed weight range).
    """
    n_unique = numpy.unique(weights).size
    if n_unique == 1:
        return numpy.full(at.shape, rate.mean())
    curve = Polynomial.fit(weights, rate, deg=min(3, n_unique - 1))
    return numpy.clip(curve(numpy.clip(at, weights.min(), weights.max())), 0, 1)


def oracle_inclusion(
        dataset: ExperimentDataset,
        config: SimulationConfig,
        rng: numpy.random.Generator,
        n_draws: int = 20_000,
        ) -> tuple[NDArray[numpy.float64], NDArray[numpy.float64]]:
    """
    Per-game probability of playing in a game with at least one treated player,
     as a function of the activity covariate only.

    One round of matching is replayed `n_draws` times per treated-count value.
     Selection rates of the pool members are smoothed against their matching
     weight, and the curve is read off at every player's weight, once as a
     member of the treated group and once as a member of the control group.

    Args:
        dataset: Dataset generated from `config`.
        config: Simulation parameters.
        rng: Random stream (use the 'oracle' stream).
        n_draws: Number of replayed rounds per treated-count value.

    Returns:
        `(q_treated, q_control)`, each of shape `(n_players,)`.
    """
    team = config.team_size
    x = dataset.x[:, 0]
    x_t = x[dataset.treated]
    x_c = x[dataset.control]
    probs = effective_treated_count_probs(x_c, config)

    w_t = matching_weights(x_t, all_control=False, config=config)
    w_c = matching_weights(x_c, all_control=False, config=config)
    at_t = member_weights(x, x_t, config)
    at_c = member_weights(x, x_c, config)
    q_t = numpy.zeros(dataset.n_players)
    q_c = numpy.zeros(dataset.n_players)
    for kk in range(1, team + 1):
        if probs[kk] == 0:
            continue
        hits_t = numpy.bincount(sample_without_replacement(w_t, kk, n_draws, rng).ravel(), minlength=x_t.size)
        q_t += probs[kk] * _inclusion_curve(w_t, hits_t / n_draws, at_t)
        if kk < team:
            hits_c = numpy.bincount(sample_without_replacement(w_c, team - kk, n_draws, rng).ravel(), minlength=x_c.size)
            q_c += probs[kk] * _inclusion_curve(w_c, hits_c / n_draws, at_c)
    return numpy.clip(q_t, 0, 1), numpy.clip(q_c, 0, 1)


def _level_distribution(q: NDArray[numpy.float64], n_games: int, threshold: int) -> NDArray[numpy.float64]:
    levels = numpy.arange(threshold)
    out = numpy.empty((q.size, threshold + 1))
    out[:, :threshold] = stats.binom.pmf(levels[None, :], n_games, q[:, None])
    out[:, threshold] = stats.binom.sf(threshold - 1, n_games, q)
    return out / out.sum(axis=1, keepdims=True)


def oracle_propensities(
        dataset: ExperimentDataset,
        config: SimulationConfig,
        rng: numpy.random.Generator,
        n_draws: int = 20_000,
        threshold: int | None = None,
        ) -> dict[str, NDArray[numpy.float64]]:
    """
    Design-based generalized propensities P(level = l | X, population) for every
     player, one table per analysis population.

    Rounds are i.i.d. given the assignment, so a player assigned treatment has
     M ~ Binomial(n_games, q_treated(x)), and likewise for control. The tables
     depend on `x` alone, never on the player's own assignment:

    - `TREATED`: the treated level distribution.
    - `POOLED`: the mixture `p P_T(l) + (1 - p) P_C(l) 1{l >= 1}` over treated
        and control-mixed players, renormalized by `p + (1 - p) P_C(l >= 1)`.

    Args:
        dataset: Dataset generated from `config`.
        config: Simulation parameters.
        rng: Random stream (use the 'oracle' stream).
        n_draws: Number of replayed rounds per treated-count value.
        threshold: Truncation threshold (default `config.truncation`).

    Returns:
        `{POOLED: ..., TREATED: ...}`, each of shape `(n_players, threshold + 1)`;
         column l is level l.
    """
    threshold = config.truncation if threshold is None else threshold
    q_t, q_c = oracle_inclusion(dataset, config, rng, n_draws)
    treated = _level_distribution(q_t, config.n_games, threshold)
    control = _level_distribution(q_c, config.n_games, threshold)

    pooled = config.p_treat * treated
    pooled[:, 1:] += (1 - config.p_treat) * control[:, 1:]
    pooled /= pooled.sum(axis=1, keepdims=True)
    return {POOLED: pooled, TREATED: treated}


def exposure_histogram(dataset: ExperimentDataset, threshold: int) -> NDArray[numpy.int64]:
    """
    Count of players at each truncated level `0..threshold`.
    """
    return numpy.bincount(truncate_levels(dataset.m, threshold), minlength=threshold + 1)
