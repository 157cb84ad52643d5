import numpy
import pytest

from .utils import make_players, make_sessions, random_sessions
from ..basic import InvalidDataError, ConfigError
from ..domain import (
    GroupLabel, PlayerRecord, GameSession, ExperimentDataset, ExposureCategory,
    count_exposures, classify_groups, classify_player, truncate_exposure, truncate_levels,
    exposure_mismatches,
    )


def test_all_control_session() -> None:
    players = make_players([0] * 5, [1.0] * 5)
    table = count_exposures(make_sessions([[0, 1, 2, 3, 4]]), players)
    assert table.exposures == dict.fromkeys([f'p{ii}' for ii in range(5)], 0)
    assert table.sessions[0].treated is False
    assert table.n_treated_sessions == 0


def test_one_treated_member() -> None:
    players = make_players([0, 0, 1, 0, 0], [1.0] * 5)
    table = count_exposures(make_sessions([[0, 1, 2, 3, 4]]), players)
    assert set(table.exposures.values()) == {1}
    assert table.sessions[0].treated is True


def test_multiple_sessions() -> None:
    players = make_players([0, 1, 0, 0, 0, 0, 1], [1.0] * 7)
    rosters = [
        [0, 1, 2],      # treated
        [0, 6, 3],      # treated
        [0, 2, 3],      # all control
        [0, 4, 1],      # treated
        [0, 5, 4],      # all control
        ]
    table = count_exposures(make_sessions(rosters), players)
    assert table.exposures['p0'] == 3
    assert table.exposures['p1'] == 2
    assert table.exposures['p5'] == 0
    assert table.n_treated_sessions == 3


def test_unused_player_has_zero_exposure() -> None:
    players = make_players([1, 0, 0], [1.0] * 3)
    table = count_exposures(make_sessions([[0, 1]]), players)
    assert table.exposures['p2'] == 0


def test_unknown_player() -> None:
    players = make_players([0, 1], [1.0] * 2)
    with pytest.raises(InvalidDataError, match='s0'):
        count_exposures([GameSession('s0', ['p0', 'nobody'])], players)


def test_duplicate_roster_entry() -> None:
    with pytest.raises(InvalidDataError):
        GameSession('s0', ['p0', 'p1', 'p0'])


def test_duplicate_player_id() -> None:
    players = [PlayerRecord('a', 0, 0.1, 1.0), PlayerRecord('a', 1, 0.2, 1.0)]
    with pytest.raises(InvalidDataError):
        count_exposures([], players)


def test_classify_player() -> None:
    assert classify_player(1, 7) == GroupLabel.Treatment
    assert classify_player(1, 0) == GroupLabel.Treatment
    assert classify_player(0, 0) == GroupLabel.ControlControl
    assert classify_player(0, 2) == GroupLabel.ControlMixed


def test_classify_groups_needs_exposure() -> None:
    with pytest.raises(InvalidDataError):
        classify_groups(make_players([0, 1], [1.0, 1.0]))

    groups = classify_groups(make_players([0, 1, 0], [1.0] * 3, m=[0, 3, 1]))
    assert groups.sizes == {GroupLabel.Treatment: 1, GroupLabel.ControlMixed: 1, GroupLabel.ControlControl: 1}
    assert sum(groups.shares().values()) == pytest.approx(1.0)


def test_truncate_exposure() -> None:
    assert truncate_exposure(3, 10).level == 3
    assert not truncate_exposure(3, 10).is_top

    top = truncate_exposure(15, 10)
    assert top == ExposureCategory(10, 10)
    assert top.is_top
    assert top.label == '10+'

    assert truncate_exposure(25, 21).label == '21+'
    assert truncate_exposure(21, 21).is_top
    assert truncate_exposure(20, 21).label == '20'

    assert truncate_levels(numpy.array([0, 9, 10, 11, 40]), 10).tolist() == [0, 9, 10, 10, 10]


def test_truncate_bad_threshold() -> None:
    with pytest.raises(ConfigError):
        truncate_exposure(3, 0)
    with pytest.raises(ConfigError):
        truncate_levels(numpy.array([1]), -1)
    with pytest.raises(InvalidDataError):
        truncate_exposure(-1, 10)


def test_player_record_validation() -> None:
    with pytest.raises(InvalidDataError):
        PlayerRecord('a', 2, 0.5, 1.0)
    with pytest.raises(InvalidDataError):
        PlayerRecord('a', 1, 0.5, -1.0)
    with pytest.raises(InvalidDataError):
        PlayerRecord('a', 1, float('nan'), 1.0)
    with pytest.raises(InvalidDataError):
        PlayerRecord('a', 1, 0.5, 1.0, y_pre=-0.1)

    rec = PlayerRecord('a', 1, [0.5, 2], 1.0)
    assert rec.x == (0.5, 2.0)
    assert rec.with_exposure(4).m == 4
    assert rec.m is None


def test_dataset_arrays() -> None:
    players = make_players([1, 0, 0, 1, 0], [5.0, 1.0, 2.0, 3.0, 0.5], [0.1, 0.2, 0.3, 0.4, 0.5])
    sessions = make_sessions([[0, 1, 2], [2, 4, 3], [1, 2, 4]])
    data = ExperimentDataset.build(players, sessions, feature_names=('x',))

    assert data.n_players == 5
    assert data.m.tolist() == [1, 1, 2, 1, 1]
    assert data.labels.tolist() == ['T', 'C1', 'C1', 'T', 'C1']
    assert data.x.shape == (5, 1)
    assert data.y_pre is None
    assert data.treated.tolist() == [True, False, False, True, False]
    assert data.mask(GroupLabel.ControlControl).sum() == 0
    data.check_invariants()

    sub = data.subset(data.treated)
    assert sub.n_players == 2
    assert sub.m.tolist() == [1, 1]


def test_dataset_rejects_inconsistent_features() -> None:
    players = [PlayerRecord('a', 1, [0.1, 0.2], 1.0, m=0), PlayerRecord('b', 0, [0.1], 1.0, m=0)]
    with pytest.raises(InvalidDataError):
        ExperimentDataset(players)
    with pytest.raises(InvalidDataError):
        ExperimentDataset([])


def test_exposure_mismatches() -> None:
    assert exposure_mismatches({'a': 1, 'b': 2}, {'a': 1, 'b': 3}) == {'b': (2, 3)}
    assert exposure_mismatches({'a': 1}, {'a': 1, 'zz': 4}) == {}


def test_exposure_against_brute_force() -> None:
    rng = numpy.random.default_rng(12345)
    seen_games = set()
    for _ in range(1000):
        n_players = int(rng.integers(5, 20))
        n_games = int(rng.integers(0, 11))
        seen_games.add(n_games)
        z = rng.integers(0, 2, size=n_players).tolist()
        rosters = random_sessions(rng, n_players, n_games)
        players = make_players(z, [1.0] * n_players)

        data = ExperimentDataset.build(players, make_sessions(rosters))

        for ii in range(n_players):
            expected = sum(1 for roster in rosters if ii in roster and any(z[jj] for jj in roster))
            assert data.m[ii] == expected
            played = sum(1 for roster in rosters if ii in roster)
            if z[ii] == 1:
                assert data.m[ii] == played
            else:
                assert data.m[ii] <= played
        assert sum(data.groups.sizes.values()) == n_players
        data.check_invariants()
    assert seen_games == set(range(11))
