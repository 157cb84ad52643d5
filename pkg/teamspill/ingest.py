"""
CSV ingestion of experiment exports, and the matching dataset dump.

File layouts:
    players.csv:   id, z, y, [y_pre], feature columns...
    sessions.csv:  session_id, one column per roster slot (player ids; blank for empty slots)
    exposures.csv: id, m

Exposures are re-derived from sessions whenever sessions are given; an
 exposures file is only authoritative when session logs are unavailable.
"""
from typing import Any
from collections.abc import Sequence
from dataclasses import dataclass, asdict
from pathlib import Path
import logging
import math
import warnings

import pandas

from .basic import ConfigError, InvalidDataError
from .domain import PlayerRecord, GameSession, ExperimentDataset, count_exposures, exposure_mismatches


logger = logging.getLogger(__name__)


PLAYER_COLUMNS: tuple[str, ...] = ('id', 'z', 'y', 'y_pre')
DEFAULT_OUTLIER_CAP: float = 60.0
DEFAULT_INGEST_THRESHOLD: int = 21


@dataclass(frozen=True)
class IngestionOptions:
    threshold: int = DEFAULT_INGEST_THRESHOLD
    outlier_cap: float | None = DEFAULT_OUTLIER_CAP
    """rows with y >= cap are dropped; `None` keeps everything"""

    require_pre: bool = False
    """fail unless every kept player has a pre-period outcome"""

    feature_columns: tuple[str, ...] | None = None
    """covariate columns (default: every column not in `PLAYER_COLUMNS`)"""

    def __post_init__(self) -> None:
        if self.threshold < 1:
            raise ConfigError(f'Truncation threshold must be >= 1, got {self.threshold}')
        if self.outlier_cap is not None and not self.outlier_cap > 0:
            raise ConfigError(f'outlier_cap must be positive, got {self.outlier_cap}')

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


class IngestionReport:
    """
    What happened while loading a dataset
    """
    n_rows: int
    """player rows read"""

    outlier_ids: list[str]
    exposure_source: str
    """'sessions' or 'exposures'"""

    mismatches: dict[str, tuple[int, int]]
    """player id -> (derived, reported) exposure, where they differ"""

    def __init__(
            self,
            n_rows: int,
            outlier_ids: list[str],
            exposure_source: str,
            mismatches: dict[str, tuple[int, int]],
            ) -> None:
        self.n_rows = n_rows
        self.outlier_ids = outlier_ids
        self.exposure_source = exposure_source
        self.mismatches = mismatches

    @property
    def n_outliers(self) -> int:
        return len(self.outlier_ids)

    def to_dict(self) -> dict[str, Any]:
        return {
            'n_rows': self.n_rows,
            'n_outliers': self.n_outliers,
            'outlier_ids': self.outlier_ids,
            'exposure_source': self.exposure_source,
            'mismatches': {pid: list(vv) for pid, vv in sorted(self.mismatches.items())},
            }


def _read_csv(path: str | Path, what: str) -> pandas.DataFrame:
    try:
        frame = pandas.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError:
        raise InvalidDataError(f'{what} file not found: {path}') from None
    except pandas.errors.EmptyDataError:
        raise InvalidDataError(f'{what} file is empty: {path}') from None
    except pandas.errors.ParserError as err:
        raise InvalidDataError(f'{what} file {path} is malformed: {err}') from err
    if frame.empty:
        raise InvalidDataError(f'{what} file has no rows: {path}')
    return frame


def _parse_float(text: str, where: str, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise InvalidDataError(f'{where}: column "{column}" is not a number: {text!r}') from None
    if not math.isfinite(value):
        raise InvalidDataError(f'{where}: column "{column}" is not finite: {text!r}')
    return value


def _parse_int(text: str, where: str, column: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise InvalidDataError(f'{where}: column "{column}" is not an integer: {text!r}') from None


def read_players(path: str | Path, feature_columns: Sequence[str] | None = None) -> tuple[list[PlayerRecord], tuple[str, ...]]:
    """
    Read players.csv.

    Returns:
        (players, feature column names)

    Raises:
        InvalidDataError: on a missing column, a malformed row (with its line
            number), or a duplicate id.
    """
    frame = _read_csv(path, 'Players')
    missing = [cc for cc in ('id', 'z', 'y') if cc not in frame.columns]
    if missing:
        raise InvalidDataError(f'Players file {path} lacks columns {missing}')
    if feature_columns is None:
        feature_columns = tuple(cc for cc in frame.columns if cc not in PLAYER_COLUMNS)
    else:
        absent = [cc for cc in feature_columns if cc not in frame.columns]
        if absent:
            raise InvalidDataError(f'Players file {path} lacks feature columns {absent}')
    if not feature_columns:
        raise InvalidDataError(f'Players file {path} has no feature columns')
    has_pre = 'y_pre' in frame.columns

    players = []
    seen: dict[str, int] = {}
    for row_index, record in enumerate(_frame_rows(frame)):
        line = row_index + 2
        where = f'{path}:{line}'
        pid = record['id']
        if not pid:
            raise InvalidDataError(f'{where}: empty player id')
        if pid in seen:
            raise InvalidDataError(f'{where}: duplicate player id {pid} (first on line {seen[pid]})')
        seen[pid] = line
        if record['z'] not in ('0', '1'):
            raise InvalidDataError(f'{where}: column "z" must be 0 or 1, got {record["z"]!r}')
        y = _parse_float(record['y'], where, 'y')
        y_pre = _parse_float(record['y_pre'], where, 'y_pre') if has_pre and record['y_pre'] != '' else None
        x = [_parse_float(record[cc], where, cc) for cc in feature_columns]
        try:
            players.append(PlayerRecord(pid, int(record['z']), x, y, y_pre=y_pre))
        except InvalidDataError as err:
            raise InvalidDataError(f'{where}: {err}') from err
    return players, tuple(feature_columns)


def _frame_rows(frame: pandas.DataFrame) -> list[dict[str, str]]:
    return frame.to_dict(orient='records')


def read_sessions(path: str | Path) -> tuple[list[GameSession], int]:
    """
    Read sessions.csv.

    Returns:
        (sessions, number of roster slot columns)
    """
    frame = _read_csv(path, 'Sessions')
    if 'session_id' not in frame.columns:
        raise InvalidDataError(f'Sessions file {path} lacks a "session_id" column')
    slots = [cc for cc in frame.columns if cc != 'session_id']
    if not slots:
        raise InvalidDataError(f'Sessions file {path} has no roster columns')

    sessions = []
    for row_index, record in enumerate(_frame_rows(frame)):
        roster = [record[cc] for cc in slots if record[cc] != '']
        try:
            sessions.append(GameSession(record['session_id'], roster))
        except InvalidDataError as err:
            raise InvalidDataError(f'{path}:{row_index + 2}: {err}') from err
    return sessions, len(slots)


def read_exposures(path: str | Path) -> dict[str, int]:
    """
    Read exposures.csv into player id -> m.
    """
    frame = _read_csv(path, 'Exposures')
    missing = [cc for cc in ('id', 'm') if cc not in frame.columns]
    if missing:
        raise InvalidDataError(f'Exposures file {path} lacks columns {missing}')
    exposures = {}
    for row_index, record in enumerate(_frame_rows(frame)):
        where = f'{path}:{row_index + 2}'
        mm = _parse_int(record['m'], where, 'm')
        if mm < 0:
            raise InvalidDataError(f'{where}: exposure must be non-negative, got {mm}')
        if record['id'] in exposures:
            raise InvalidDataError(f'{where}: duplicate player id {record["id"]}')
        exposures[record['id']] = mm
    return exposures


def load_dataset(
        players_path: str | Path,
        sessions_path: str | Path | None = None,
        exposures_path: str | Path | None = None,
        options: IngestionOptions | None = None,
        ) -> tuple[ExperimentDataset, IngestionReport]:
    """
    Load an experiment export.

    Exposures are derived from sessions when available (before outliers are
     removed, so every session still counts); a disagreeing exposures file
     triggers a warning and the derived values win. Players with `y >= outlier_cap`
     are then dropped.

    Args:
        players_path: players.csv.
        sessions_path: sessions.csv, if available.
        exposures_path: exposures.csv, used when sessions are unavailable.
        options: Ingestion options.

    Returns:
        (dataset, ingestion report)

    Raises:
        InvalidDataError: for malformed files, missing exposures, an empty result,
            or missing pre-period outcomes when `options.require_pre`.
    """
    options = IngestionOptions() if options is None else options
    if sessions_path is None and exposures_path is None:
        raise InvalidDataError('Need a sessions file or an exposures file to determine exposure')

    players, feature_names = read_players(players_path, options.feature_columns)
    reported = None if exposures_path is None else read_exposures(exposures_path)

    team_size = 5
    sessions = None
    mismatches: dict[str, tuple[int, int]] = {}
    if sessions_path is not None:
        sessions_in, team_size = read_sessions(sessions_path)
        table = count_exposures(sessions_in, players)
        sessions = table.sessions
        exposures = table.exposures
        source = 'sessions'
        if reported is not None:
            mismatches = exposure_mismatches(exposures, reported)
            if mismatches:
                listed = ', '.join(f'{pid} (derived {dd}, reported {rr})' for pid, (dd, rr) in sorted(mismatches.items())[:10])
                msg = f'{len(mismatches)} reported exposures differ from session-derived values; using derived: {listed}'
                logger.warning(msg)
                warnings.warn(msg, stacklevel=2)
    else:
        assert reported is not None
        absent = [pp.id for pp in players if pp.id not in reported]
        if absent:
            raise InvalidDataError(f'Exposures file lacks {len(absent)} players, e.g. {absent[:5]}')
        exposures = reported
        source = 'exposures'

    counted = [pp.with_exposure(exposures[pp.id]) for pp in players]
    outliers: list[str] = []
    if options.outlier_cap is not None:
        outliers = [pp.id for pp in counted if pp.y >= options.outlier_cap]
        counted = [pp for pp in counted if pp.y < options.outlier_cap]
    if not counted:
        raise InvalidDataError('No players left after outlier removal')
    if options.require_pre:
        lacking = [pp.id for pp in counted if pp.y_pre is None]
        if lacking:
            raise InvalidDataError(f'{len(lacking)} players lack y_pre, which the did-linear baseline needs (e.g. {lacking[:5]})')

    dataset = ExperimentDataset(counted, sessions, feature_names=feature_names, team_size=team_size)
    report = IngestionReport(len(players), outliers, source, mismatches)
    logger.info(f'Loaded {dataset!r} from {players_path}; dropped {report.n_outliers} outliers')
    return dataset, report


def write_dataset(dataset: ExperimentDataset, out_dir: str | Path) -> dict[str, Path]:
    """
    Write players.csv, exposures.csv and (if known) sessions.csv.

    Returns:
        file kind -> path written
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    columns: dict[str, list[Any]] = {
        'id': [pp.id for pp in dataset.players],
        'z': [pp.z for pp in dataset.players],
        'y': [pp.y for pp in dataset.players],
        }
    if any(pp.y_pre is not None for pp in dataset.players):
        columns['y_pre'] = [pp.y_pre for pp in dataset.players]
    for ii, name in enumerate(dataset.feature_names):
        columns[name] = [pp.x[ii] for pp in dataset.players]
    paths['players'] = out / 'players.csv'
    pandas.DataFrame(columns).to_csv(paths['players'], index=False, lineterminator='\n')

    paths['exposures'] = out / 'exposures.csv'
    pandas.DataFrame({'id': dataset.ids, 'm': dataset.m}).to_csv(paths['exposures'], index=False, lineterminator='\n')

    if dataset.sessions is not None:
        width = max([dataset.team_size] + [len(ss.roster) for ss in dataset.sessions])
        rows = [[ss.session_id] + list(ss.roster) + [''] * (width - len(ss.roster)) for ss in dataset.sessions]
        frame = pandas.DataFrame(rows, columns=['session_id'] + [f'p{ii}' for ii in range(1, width + 1)])
        paths['sessions'] = out / 'sessions.csv'
        frame.to_csv(paths['sessions'], index=False, lineterminator='\n')

    logger.info(f'Wrote dataset to {out}')
    return paths
