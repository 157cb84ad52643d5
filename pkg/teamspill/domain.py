"""
Core data model: players, game sessions, the contamination rule which turns
 a session into a "treated game", and the treatment-receipt groups derived
 from it.

Everything here is a pure function of its inputs; records are never mutated
 after construction.
"""
from typing import Any
from collections.abc import Sequence, Mapping, Iterable
from enum import Enum
import logging
import math

import numpy
from numpy.typing import NDArray

from .basic import InvalidDataError, ConfigError


logger = logging.getLogger(__name__)


DEFAULT_TEAM_SIZE: int = 5

POOLED = 'pooled'
"""analysis population: treated and control-mixed players"""

TREATED = 'treated'
"""analysis population: treated players only"""


class GroupLabel(Enum):
    """
    Treatment-receipt group of a player
    """
    Treatment = 'T'
    ControlMixed = 'C1'
    ControlControl = 'C0'


class PlayerRecord:
    """
    One experimental unit.
    """
    __slots__ = ('id', 'z', 'x', 'm', 'y', 'y_pre')

    id: str
    """unique player identifier"""

    z: int
    """initial assignment (0 or 1)"""

    x: tuple[float, ...]
    """pre-experiment covariates"""

    m: int | None
    """number of treated games played (`None` until derived)"""

    y: float
    """outcome"""

    y_pre: float | None
    """pre-experiment outcome, if available"""

    def __init__(
            self,
            id: str,        # noqa: A002
            z: int,
            x: Sequence[float] | float,
            y: float,
            *,
            m: int | None = None,
            y_pre: float | None = None,
            ) -> None:
        """
        Args:
            id: Unique player identifier.
            z: Initial assignment, 0 or 1.
            x: Covariate vector (or a single covariate).
            y: Non-negative outcome.
            m: Exposure count, if already derived.
            y_pre: Non-negative pre-period outcome, if available.

        Raises:
            InvalidDataError: if any field violates its constraints.
        """
        if z not in (0, 1):
            raise InvalidDataError(f'Player {id}: assignment must be 0 or 1, got {z}')
        if not y >= 0:
            raise InvalidDataError(f'Player {id}: outcome must be non-negative, got {y}')
        if y_pre is not None and not y_pre >= 0:
            raise InvalidDataError(f'Player {id}: pre-period outcome must be non-negative, got {y_pre}')
        if m is not None and m < 0:
            raise InvalidDataError(f'Player {id}: exposure must be non-negative, got {m}')
        if isinstance(x, Iterable):
            xx = tuple(float(vv) for vv in x)
        else:
            xx = (float(x),)
        if not all(math.isfinite(vv) for vv in xx):
            raise InvalidDataError(f'Player {id}: non-finite covariate in {xx}')

        self.id = str(id)
        self.z = int(z)
        self.x = xx
        self.m = None if m is None else int(m)
        self.y = float(y)
        self.y_pre = None if y_pre is None else float(y_pre)

    def with_exposure(self, m: int) -> 'PlayerRecord':
        """
        Return a copy of this record with the exposure count set.

        Args:
            m: Exposure count.

        Returns:
            New `PlayerRecord`.
        """
        return PlayerRecord(self.id, self.z, self.x, self.y, m=m, y_pre=self.y_pre)

    def get_m(self) -> int:
        if self.m is None:
            raise InvalidDataError(f'Player {self.id}: exposure has not been counted')
        return self.m

    def __eq__(self, other: Any) -> bool:
        return isinstance(other, PlayerRecord) and all(
            getattr(self, ss) == getattr(other, ss) for ss in self.__slots__)

    def __repr__(self) -> str:
        return f'PlayerRecord({self.id}, z={self.z}, x={self.x}, m={self.m}, y={self.y}, y_pre={self.y_pre})'


class GameSession:
    """
    One ephemeral team roster.
    """
    __slots__ = ('session_id', 'roster', 'treated')

    session_id: str
    roster: tuple[str, ...]
    """player ids, in slot order"""

    treated: bool | None
    """`True` if any roster member was assigned treatment (`None` until derived)"""

    def __init__(
            self,
            session_id: str,
            roster: Sequence[str],
            treated: bool | None = None,
            ) -> None:
        """
        Args:
            session_id: Session identifier.
            roster: Player ids of the team members.
            treated: Derived treated flag, if known.

        Raises:
            InvalidDataError: if the roster contains a duplicate id.
        """
        roster = tuple(str(pp) for pp in roster)
        if len(set(roster)) != len(roster):
            dupes = sorted({pp for pp in roster if roster.count(pp) > 1})
            raise InvalidDataError(f'Session {session_id}: duplicate player ids {dupes} in roster')
        self.session_id = str(session_id)
        self.roster = roster
        self.treated = treated

    def __eq__(self, other: Any) -> bool:
        return (isinstance(other, GameSession)
                and self.session_id == other.session_id
                and self.roster == other.roster
                and self.treated == other.treated)

    def __repr__(self) -> str:
        return f'GameSession({self.session_id}, {list(self.roster)}, treated={self.treated})'


class ExposureCategory:
    """
    Truncated exposure level. Levels `0..threshold-1` stand for themselves,
     `threshold` stands for the top bucket "threshold+".
    """
    __slots__ = ('level', 'threshold')

    level: int
    threshold: int

    def __init__(self, level: int, threshold: int) -> None:
        if threshold < 1:
            raise ConfigError(f'Truncation threshold must be >= 1, got {threshold}')
        if not 0 <= level <= threshold:
            raise InvalidDataError(f'Exposure level {level} outside 0..{threshold}')
        self.level = int(level)
        self.threshold = int(threshold)

    @property
    def is_top(self) -> bool:
        return self.level == self.threshold

    @property
    def label(self) -> str:
        return f'{self.level}+' if self.is_top else str(self.level)

    def __lt__(self, other: 'ExposureCategory') -> bool:
        return self.level < other.level

    def __le__(self, other: 'ExposureCategory') -> bool:
        return self.level <= other.level

    def __eq__(self, other: Any) -> bool:
        return (isinstance(other, ExposureCategory)
                and self.level == other.level
                and self.threshold == other.threshold)

    def __hash__(self) -> int:
        return hash((self.level, self.threshold))

    def __repr__(self) -> str:
        return f'ExposureCategory({self.label})'


def level_label(level: int, threshold: int) -> str:
    return f'{level}+' if level == threshold else str(level)


def truncate_exposure(m: int, threshold: int) -> ExposureCategory:
    """
    Map an exposure count onto its truncated category.

    Args:
        m: Exposure count (>= 0).
        threshold: Truncation threshold K (>= 1); counts >= K share the top bucket.

    Returns:
        The `ExposureCategory`.

    Raises:
        ConfigError: if `threshold < 1`.
        InvalidDataError: if `m < 0`.
    """
    if threshold < 1:
        raise ConfigError(f'Truncation threshold must be >= 1, got {threshold}')
    if m < 0:
        raise InvalidDataError(f'Exposure must be non-negative, got {m}')
    return ExposureCategory(min(int(m), threshold), threshold)


def truncate_levels(m: NDArray[numpy.int64], threshold: int) -> NDArray[numpy.int64]:
    """
    Vectorized form of `truncate_exposure()`, returning integer levels.
    """
    if threshold < 1:
        raise ConfigError(f'Truncation threshold must be >= 1, got {threshold}')
    return numpy.minimum(numpy.asarray(m, dtype=numpy.int64), threshold)


class ExposureTable:
    """
    Result of `count_exposures()`.
    """
    exposures: dict[str, int]
    """player id -> number of treated sessions played"""

    sessions: list[GameSession]
    """input sessions with `treated` filled in"""

    def __init__(self, exposures: dict[str, int], sessions: list[GameSession]) -> None:
        self.exposures = exposures
        self.sessions = sessions

    @property
    def n_treated_sessions(self) -> int:
        return sum(bool(ss.treated) for ss in self.sessions)


def count_exposures(
        sessions: Sequence[GameSession],
        players: Sequence[PlayerRecord],
        ) -> ExposureTable:
    """
    Apply the contamination rule: a session is treated iff at least one of its
     members was assigned treatment, and every member of a treated session
     receives one unit of exposure.

    Args:
        sessions: Game sessions.
        players: Players (only `id` and `z` are used).

    Returns:
        `ExposureTable` holding each player's exposure (0 for players who
            never played) and the sessions with their treated flag set.

    Raises:
        InvalidDataError: if a roster references an unknown player, or
            contains a duplicate.
    """
    assignment: dict[str, int] = {}
    for pp in players:
        if pp.id in assignment:
            raise InvalidDataError(f'Duplicate player id {pp.id}')
        assignment[pp.id] = pp.z

    exposures = dict.fromkeys(assignment, 0)
    marked = []
    for session in sessions:
        if len(set(session.roster)) != len(session.roster):
            raise InvalidDataError(f'Session {session.session_id}: duplicate player id in roster')
        try:
            treated = any(assignment[pid] for pid in session.roster)
        except KeyError as err:
            raise InvalidDataError(f'Session {session.session_id}: unknown player id {err.args[0]}') from err
        if treated:
            for pid in session.roster:
                exposures[pid] += 1
        marked.append(GameSession(session.session_id, session.roster, treated))

    table = ExposureTable(exposures, marked)
    logger.debug(f'{table.n_treated_sessions} of {len(marked)} sessions treated')
    return table


class GroupAssignment:
    """
    Result of `classify_groups()`.
    """
    labels: dict[str, GroupLabel]
    sizes: dict[GroupLabel, int]

    def __init__(self, labels: dict[str, GroupLabel]) -> None:
        self.labels = labels
        self.sizes = dict.fromkeys(GroupLabel, 0)
        for label in labels.values():
            self.sizes[label] += 1

    def shares(self) -> dict[GroupLabel, float]:
        total = sum(self.sizes.values())
        return {gg: (nn / total if total else math.nan) for gg, nn in self.sizes.items()}


def classify_player(z: int, m: int) -> GroupLabel:
    if z == 1:
        return GroupLabel.Treatment
    if m > 0:
        return GroupLabel.ControlMixed
    return GroupLabel.ControlControl


def classify_groups(players: Iterable[PlayerRecord]) -> GroupAssignment:
    """
    Label each player as treatment, control-mixed or control-control.

    Args:
        players: Players with their exposure counted.

    Returns:
        `GroupAssignment` with labels and group sizes.

    Raises:
        InvalidDataError: if some player has no exposure count.
    """
    return GroupAssignment({pp.id: classify_player(pp.z, pp.get_m()) for pp in players})


class ExperimentDataset:
    """
    Players, the sessions they played (if known), and the derived group labels.

    Array views (`z`, `x`, `m`, `y`, `y_pre`, `groups`) follow the order of
     `players` and are built once at construction.
    """
    players: list[PlayerRecord]
    sessions: list[GameSession] | None
    feature_names: tuple[str, ...]
    team_size: int
    groups: GroupAssignment

    ids: NDArray[numpy.str_]
    z: NDArray[numpy.int64]
    x: NDArray[numpy.float64]
    """covariate matrix, shape (n_players, n_features)"""
    m: NDArray[numpy.int64]
    y: NDArray[numpy.float64]
    y_pre: NDArray[numpy.float64] | None
    labels: NDArray[numpy.str_]
    """group label values ('T', 'C1', 'C0')"""

    def __init__(
            self,
            players: Sequence[PlayerRecord],
            sessions: Sequence[GameSession] | None = None,
            *,
            feature_names: Sequence[str] | None = None,
            team_size: int = DEFAULT_TEAM_SIZE,
            ) -> None:
        """
        Use `ExperimentDataset.build()` to derive exposures from sessions.

        Args:
            players: Players with exposure counted.
            sessions: Sessions with their treated flag set, or `None` if unknown.
            feature_names: Covariate names (default `x0, x1, ...`).
            team_size: Roster size.

        Raises:
            InvalidDataError: on empty or inconsistent input.
        """
        if not players:
            raise InvalidDataError('Dataset has no players')
        n_features = len(players[0].x)
        if any(len(pp.x) != n_features for pp in players):
            raise InvalidDataError('Players have differing numbers of covariates')
        if feature_names is None:
            feature_names = tuple(f'x{ii}' for ii in range(n_features))
        if len(feature_names) != n_features:
            raise InvalidDataError(f'{len(feature_names)} feature names for {n_features} covariates')

        self.players = list(players)
        self.sessions = None if sessions is None else list(sessions)
        self.feature_names = tuple(feature_names)
        self.team_size = team_size
        self.groups = classify_groups(self.players)

        self.ids = numpy.array([pp.id for pp in self.players])
        self.z = numpy.array([pp.z for pp in self.players], dtype=numpy.int64)
        self.x = numpy.array([pp.x for pp in self.players], dtype=numpy.float64).reshape(len(self.players), n_features)
        self.m = numpy.array([pp.get_m() for pp in self.players], dtype=numpy.int64)
        self.y = numpy.array([pp.y for pp in self.players], dtype=numpy.float64)
        if all(pp.y_pre is not None for pp in self.players):
            self.y_pre = numpy.array([pp.y_pre for pp in self.players], dtype=numpy.float64)
        else:
            self.y_pre = None
        self.labels = numpy.array([self.groups.labels[pp.id].value for pp in self.players])

    @staticmethod
    def build(
            players: Sequence[PlayerRecord],
            sessions: Sequence[GameSession],
            **kwargs,
            ) -> 'ExperimentDataset':
        """
        Derive exposures from the sessions and construct the dataset.

        Args:
            players: Players (any existing `m` is ignored).
            sessions: Sessions played.
            **kwargs: Passed to `ExperimentDataset.__init__`.

        Returns:
            New `ExperimentDataset`.
        """
        table = count_exposures(sessions, players)
        counted = [pp.with_exposure(table.exposures[pp.id]) for pp in players]
        return ExperimentDataset(counted, table.sessions, **kwargs)

    @property
    def n_players(self) -> int:
        return len(self.players)

    def mask(self, *labels: GroupLabel) -> NDArray[numpy.bool_]:
        """
        Boolean mask selecting players in any of the given groups.
        """
        return numpy.isin(self.labels, [ll.value for ll in labels])

    @property
    def treated(self) -> NDArray[numpy.bool_]:
        return self.z == 1

    @property
    def control(self) -> NDArray[numpy.bool_]:
        return self.z == 0

    def levels(self, threshold: int) -> NDArray[numpy.int64]:
        """
        Truncated exposure level of every player.
        """
        return truncate_levels(self.m, threshold)

    def subset(self, keep: NDArray[numpy.bool_] | Sequence[bool]) -> 'ExperimentDataset':
        """
        Dataset restricted to the selected players. Exposures and labels are
         kept as-is (they were derived with every player present).

        Args:
            keep: Boolean mask over `players`.

        Returns:
            New `ExperimentDataset`.
        """
        keep = numpy.asarray(keep, dtype=bool)
        return ExperimentDataset(
            [pp for pp, kk in zip(self.players, keep, strict=True) if kk],
            self.sessions,
            feature_names=self.feature_names,
            team_size=self.team_size,
            )

    def check_invariants(self) -> None:
        """
        Check partition and exposure-consistency invariants.

        Raises:
            InvalidDataError: if any invariant is violated.
        """
        if sum(self.groups.sizes.values()) != self.n_players:
            raise InvalidDataError('Group labels do not partition the players')
        if self.sessions is None:
            return
        appearances = dict.fromkeys(self.ids.tolist(), 0)
        for session in self.sessions:
            for pid in session.roster:
                if pid in appearances:
                    appearances[pid] += 1
        for pp in self.players:
            if pp.z == 1 and pp.m != appearances[pp.id]:
                raise InvalidDataError(f'Treated player {pp.id}: m={pp.m} but played {appearances[pp.id]} sessions')
            if pp.z == 0 and pp.get_m() > appearances[pp.id]:
                raise InvalidDataError(f'Control player {pp.id}: m={pp.m} exceeds {appearances[pp.id]} sessions')

    def __eq__(self, other: Any) -> bool:
        return (isinstance(other, ExperimentDataset)
                and self.players == other.players
                and self.sessions == other.sessions
                and self.feature_names == other.feature_names)

    def __repr__(self) -> str:
        sizes = ', '.join(f'{gg.value}={nn}' for gg, nn in self.groups.sizes.items())
        n_sessions = 'unknown' if self.sessions is None else len(self.sessions)
        return f'ExperimentDataset({self.n_players} players [{sizes}], {n_sessions} sessions)'


def exposure_mismatches(
        derived: Mapping[str, int],
        reported: Mapping[str, int],
        ) -> dict[str, tuple[int, int]]:
    """
    Compare externally reported exposure counts against derived ones.

    Args:
        derived: player id -> derived exposure.
        reported: player id -> reported exposure.

    Returns:
        player id -> (derived, reported) for every player whose values differ.
    """
    return {pid: (derived[pid], int(mm)) for pid, mm in reported.items()
            if pid in derived and derived[pid] != int(mm)}
