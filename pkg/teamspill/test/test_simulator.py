import numpy
import pytest
from scipy import stats

from ..basic import ConfigError, InvalidDataError
from ..domain import GroupLabel, PlayerRecord, ExperimentDataset, POOLED, TREATED
from ..simulator import (
    CasePreset, SimulationConfig, OutcomeModel, case_study_config, parse_case, rng_stream,
    assign_treatments, draw_covariates, matching_weights, member_weights, sample_without_replacement,
    effective_treated_count_probs, simulate_experiment, simulate_matching, oracle_propensities,
    oracle_inclusion, true_mu, true_tau, potential_outcome_oracle, level_truth, overall_truth, exposure_histogram,
    )


def test_case_presets() -> None:
    assert CasePreset.I.n_games == 2000
    assert CasePreset.I.treated_count_probs == (0.40, 0.10, 0.10, 0.10, 0.10, 0.20)
    assert CasePreset.II.n_games == 1000
    assert CasePreset.II.treated_count_probs == (0.06, 0.02, 0.19, 0.23, 0.34, 0.16)
    assert CasePreset.III.n_games == 1000
    assert CasePreset.III.treated_count_probs == (0.20, 0.34, 0.07, 0.16, 0.06, 0.17)

    config = SimulationConfig.from_case('ii', seed=3)
    assert config.n_games == 1000
    assert config.seed == 3
    assert parse_case(CasePreset.III) is CasePreset.III
    with pytest.raises(ConfigError):
        parse_case('IV')


def test_config_errors() -> None:
    with pytest.raises(ConfigError):
        SimulationConfig(treated_count_probs=(0.5, 0.5, 0, 0, 0, 0.1))
    with pytest.raises(ConfigError):
        SimulationConfig(treated_count_probs=(0.5, 0.5))
    with pytest.raises(ConfigError):
        SimulationConfig(n_players=3)
    with pytest.raises(ConfigError):
        SimulationConfig(p_treat=1.5)
    with pytest.raises(ConfigError):
        SimulationConfig(covariate_params=(0.5, 0))
    with pytest.raises(ConfigError):
        SimulationConfig(matching='queue')
    with pytest.raises(ConfigError):
        SimulationConfig(truncation=0)
    with pytest.raises(ConfigError):
        rng_stream(0, 'nonexistent')


def test_config_dict() -> None:
    config = SimulationConfig.from_case('III', seed=7)
    dd = config.to_dict()
    assert dd['n_games'] == 1000
    assert dd['treated_count_probs'] == [0.20, 0.34, 0.07, 0.16, 0.06, 0.17]
    assert config.replace(seed=8).seed == 8
    assert config.mean_covariate == 0.5


def test_assignment() -> None:
    config = SimulationConfig()
    for seed in range(20):
        z = assign_treatments(config, rng_stream(seed, 'assignment'))
        assert 0.45 <= z.mean() <= 0.55

    first = assign_treatments(config, rng_stream(11, 'assignment'))
    second = assign_treatments(config, rng_stream(11, 'assignment'))
    assert (first == second).all()


def test_assignment_degenerate() -> None:
    with pytest.raises(InvalidDataError, match='Treatment group is empty'):
        assign_treatments(SimulationConfig(p_treat=0), rng_stream(0, 'assignment'))
    with pytest.raises(InvalidDataError, match='Control group is empty'):
        assign_treatments(SimulationConfig(p_treat=1), rng_stream(0, 'assignment'))


def test_covariates() -> None:
    x = draw_covariates(SimulationConfig(n_players=1_000_000), rng_stream(5, 'covariates'))
    assert abs(x.mean() - 0.5) < 0.01
    assert abs(x.var() - 0.125) < 0.01
    assert ((x > 0) & (x < 1)).all()


def test_outcome_mean() -> None:
    assert OutcomeModel.mean(0, 0.5) == pytest.approx(1.0)
    assert OutcomeModel.mean(4, 0.25) == pytest.approx(1.75)
    assert OutcomeModel.mean(1, 0.75) == pytest.approx(0.5 + 1.5 + 0.375 + 0.375)

    rng = numpy.random.default_rng(0)
    for m, x, lam in ((0, 0.5, 1.0), (4, 0.25, 1.75)):
        draws = OutcomeModel.sample(numpy.full(1_000_000, m), numpy.full(1_000_000, x), rng)
        assert (draws > 0).all()
        assert abs(draws.mean() - lam) < 0.01


def test_true_mu() -> None:
    assert true_mu(0.25) == pytest.approx(0.5)
    assert true_mu(0.75) == pytest.approx(1.875)
    assert true_mu(0.0) == 0
    assert isinstance(true_mu(0.1), float)
    assert true_mu(numpy.array([0.25, 0.75])).tolist() == pytest.approx([0.5, 1.875])


def test_true_tau() -> None:
    assert true_tau(0) == 0
    assert true_tau(1) == pytest.approx(0.75)
    assert true_tau(4) == pytest.approx(1.5)
    assert true_tau(4, (1.0, 1.0)) == pytest.approx(1.5)
    assert true_tau(4, (3.0, 1.0)) == pytest.approx(1.75)

    rng = numpy.random.default_rng(42)
    assert abs(potential_outcome_oracle(1, rng) - 0.75) < 0.01
    assert abs(potential_outcome_oracle(4, rng) - 1.5) < 0.01


def test_matching_weights() -> None:
    config = SimulationConfig()
    x = numpy.array([0.1, 0.3, 0.6])
    expected = 0.8 / 3 + 0.2 * (x / 1.0) ** 2
    assert matching_weights(x, all_control=False, config=config) == pytest.approx(expected)
    assert matching_weights(x, all_control=True, config=config).tolist() == pytest.approx([0.1, 0, 0])

    activity = SimulationConfig(matching='activity', activity_exponent=2.0)
    assert matching_weights(x, all_control=True, config=activity) == pytest.approx(x ** 2)

    pool = numpy.array([0.2, 0.8])
    assert member_weights(x, pool, config) == pytest.approx(0.8 / 2 + 0.2 * x ** 2)
    assert member_weights(x, pool, activity) == pytest.approx(x ** 2)


def test_sample_without_replacement() -> None:
    rng = numpy.random.default_rng(1)
    weights = numpy.array([1.0, 0.0, 2.0, 3.0, 0.5, 0.0])
    picked = sample_without_replacement(weights, 3, 500, rng, chunk=64)
    assert picked.shape == (500, 3)
    for row in picked:
        assert len(set(row.tolist())) == 3
    assert not numpy.isin(picked, [1, 5]).any()

    assert sample_without_replacement(weights, 0, 10, rng).shape == (10, 0)
    with pytest.raises(InvalidDataError):
        sample_without_replacement(weights, 5, 1, rng)
    with pytest.raises(InvalidDataError):
        sample_without_replacement(numpy.zeros(4), 1, 1, rng)


def test_sample_frequencies() -> None:
    rng = numpy.random.default_rng(2)
    weights = numpy.array([1.0, 3.0])
    first = sample_without_replacement(weights, 1, 100_000, rng)[:, 0]
    assert abs(first.mean() - 0.75) < 0.01


def test_effective_probs() -> None:
    config = SimulationConfig()
    enough = numpy.array([0.1, 0.05, 0.15, 0.01, 0.02, 0.9])
    assert effective_treated_count_probs(enough, config).tolist() == pytest.approx(list(config.treated_count_probs))

    too_few = numpy.array([0.1, 0.5, 0.9, 0.8, 0.7, 0.6])
    probs = effective_treated_count_probs(too_few, config)
    assert probs[0] == 0
    assert probs.sum() == pytest.approx(1)
    assert probs[1:].tolist() == pytest.approx([1 / 6] * 4 + [1 / 3])


def test_simulate_case_one() -> None:
    config = SimulationConfig.from_case('I', seed=1)
    data = simulate_experiment(config)

    assert data.n_players == 1000
    assert data.sessions is not None
    assert len(data.sessions) == 2000
    for session in data.sessions:
        assert len(set(session.roster)) == 5
    data.check_invariants()

    shares = data.groups.shares()
    assert sum(shares.values()) == pytest.approx(1)
    assert 0 < shares[GroupLabel.ControlControl] < 0.05
    assert shares[GroupLabel.ControlMixed] > 0.4


def test_all_control_games() -> None:
    data = simulate_experiment(SimulationConfig.from_case('III', seed=2))
    position = {pid: ii for ii, pid in enumerate(data.ids.tolist())}
    untreated = [ss for ss in data.sessions or [] if not ss.treated]
    assert untreated
    for session in untreated:
        for pid in session.roster:
            assert data.z[position[pid]] == 0
            assert data.x[position[pid], 0] < 0.2


def test_simulate_deterministic() -> None:
    config = SimulationConfig.from_case('II', seed=9)
    first = simulate_experiment(config)
    second = simulate_experiment(config)
    assert first == second
    assert (first.y == second.y).all()
    assert first.sessions is not None
    assert len(first.sessions) == 1000

    other = simulate_experiment(config.replace(seed=10))
    assert not (first.y == other.y).all()


def test_streams_independent_of_games() -> None:
    short = simulate_experiment(SimulationConfig(n_games=100, seed=4))
    long = simulate_experiment(SimulationConfig(n_games=300, seed=4))
    assert (short.x == long.x).all()
    assert (short.z == long.z).all()


def test_all_control_fallback() -> None:
    config = SimulationConfig(n_players=100, n_games=50, covariate_params=(50.0, 1.0), seed=3)
    with pytest.warns(UserWarning, match='redrawing'):
        data = simulate_experiment(config)
    assert all(ss.treated for ss in data.sessions or [])


def test_simulate_matching_rosters() -> None:
    data = simulate_experiment(SimulationConfig(n_players=50, n_games=20, seed=6))
    config = SimulationConfig(n_players=50, n_games=20)
    sessions = simulate_matching(data.players, config, rng_stream(0, 'matching'))
    assert len(sessions) == config.n_games
    known = set(data.ids.tolist())
    assert all(set(ss.roster) <= known for ss in sessions)


def test_case_study_config() -> None:
    config = case_study_config(seed=2, n_players=400, n_games=400)
    assert config.matching == 'activity'
    assert config.feature_names == ('x', 'aux1', 'aux2')

    data = simulate_experiment(config)
    assert data.y_pre is not None
    assert data.x.shape == (400, 3)
    assert data.feature_names == ('x', 'aux1', 'aux2')


def test_truth() -> None:
    data = simulate_experiment(SimulationConfig.from_case('I', seed=1))
    truth = level_truth(data, 10)
    assert sorted(truth) == list(range(11))
    assert truth[4] == pytest.approx(1.5)
    top = data.treated & (data.m >= 10)
    assert truth[10] == pytest.approx(numpy.mean(true_tau(data.m[top])))
    assert overall_truth(data) == pytest.approx(numpy.mean(true_tau(data.m[data.treated])))

    hist = exposure_histogram(data, 10)
    assert hist.shape == (11,)
    assert hist.sum() == data.n_players


def test_oracle_propensities() -> None:
    config = SimulationConfig.from_case('II', n_players=200, seed=5)
    data = simulate_experiment(config)
    props = oracle_propensities(data, config, rng_stream(5, 'oracle'), n_draws=2000)
    assert set(props) == {POOLED, TREATED}
    for table in props.values():
        assert table.shape == (200, 11)
        assert (table >= 0).all()
        assert table.sum(axis=1) == pytest.approx(numpy.ones(200))

    q_t, q_c = oracle_inclusion(data, config, rng_stream(5, 'oracle'), n_draws=2000)
    assert ((q_t >= 0) & (q_t <= 1)).all()
    assert ((q_c >= 0) & (q_c <= 1)).all()
    treated_zero = stats.binom.pmf(0, config.n_games, q_t)
    control_zero = stats.binom.pmf(0, config.n_games, q_c)
    assert props[TREATED][:, 0] == pytest.approx(treated_zero)
    p = config.p_treat
    assert props[POOLED][:, 0] == pytest.approx(p * treated_zero / (p + (1 - p) * (1 - control_zero)))

    narrow = oracle_propensities(data, config, rng_stream(5, 'oracle'), n_draws=2000, threshold=3)
    assert narrow[POOLED].shape == narrow[TREATED].shape == (200, 4)


def test_oracle_depends_on_covariate_only() -> None:
    config = SimulationConfig.from_case('I', n_players=300, seed=8)
    data = simulate_experiment(config)
    treated = int(numpy.flatnonzero(data.treated)[0])
    control = int(numpy.flatnonzero(data.control)[0])

    players = list(data.players)
    cc = players[control]
    players[control] = PlayerRecord(cc.id, cc.z, players[treated].x, cc.y, m=cc.m)
    twin = ExperimentDataset(players, data.sessions, feature_names=data.feature_names, team_size=data.team_size)

    props = oracle_propensities(twin, config, rng_stream(8, 'oracle'), n_draws=2000)
    for table in props.values():
        assert numpy.array_equal(table[control], table[treated])
