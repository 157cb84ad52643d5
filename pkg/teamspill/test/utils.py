from collections.abc import Sequence

import numpy

from ..domain import PlayerRecord, GameSession, ExperimentDataset


def make_players(
        z: Sequence[int],
        y: Sequence[float],
        x: Sequence[float] | None = None,
        *,
        m: Sequence[int] | None = None,
        y_pre: Sequence[float] | None = None,
        ) -> list[PlayerRecord]:
    """
    Players `p0, p1, ...` built column-wise.
    """
    xs = [0.0] * len(z) if x is None else x
    return [
        PlayerRecord(
            f'p{ii}', z[ii], xs[ii], y[ii],
            m=None if m is None else m[ii],
            y_pre=None if y_pre is None else y_pre[ii],
            )
        for ii in range(len(z))
        ]


def make_dataset(
        z: Sequence[int],
        m: Sequence[int],
        y: Sequence[float],
        x: Sequence[float] | None = None,
        y_pre: Sequence[float] | None = None,
        ) -> ExperimentDataset:
    """
    Dataset with given exposures and no session information.
    """
    return ExperimentDataset(make_players(z, y, x, m=m, y_pre=y_pre), feature_names=('x',))


def make_sessions(rosters: Sequence[Sequence[int]]) -> list[GameSession]:
    """
    Sessions `s0, s1, ...` whose rosters are given as player indices.
    """
    return [GameSession(f's{ss}', [f'p{ii}' for ii in roster]) for ss, roster in enumerate(rosters)]


def random_sessions(
        rng: numpy.random.Generator,
        n_players: int,
        n_games: int,
        team_size: int = 5,
        ) -> list[list[int]]:
    return [rng.choice(n_players, size=team_size, replace=False).tolist() for _ in range(n_games)]
