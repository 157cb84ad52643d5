"""
Report emission: a versioned JSON document, a tidy per-level CSV, and a plain-text
 table of the overall estimates.

JSON layout (version 1):
    {
      "report_version": 1,
      "software": {"name": "teamspill", "version": ...},
      "command": "estimate" | "mc-eval" | ...,
      "seed": int,
      "config": {...effective configuration...},
      "results": {...command-specific...}
    }

`results` for "estimate" holds "estimates" (list of estimator dicts, each with
 "levels"); for "mc-eval" it holds "summary" (an `McSummary` dict) and
 "comparison".
"""
from typing import Any
from collections.abc import Iterable
from pathlib import Path
import json
import logging
import math

import numpy
import pandas

from .basic import TeamspillError, ConfigError, InvalidDataError


logger = logging.getLogger(__name__)


REPORT_VERSION: int = 1
FORMATS: tuple[str, ...] = ('json', 'csv', 'both')

ESTIMATOR_TITLES: dict[str, str] = {
    'naive': 'Naive estimator',
    'naive-wo-cm': 'Naive estimator without control-mixed',
    'proposed': 'Proposed estimator',
    'proposed-wo-cm': 'Proposed estimator without control-mixed',
    }

ESTIMATE_COLUMNS: tuple[str, ...] = ('estimator', 'level', 'label', 'estimate', 'n_units', 'ess', 'defined')
MC_COLUMNS: tuple[str, ...] = (
    'estimator', 'level', 'label', 'mean', 'lower', 'upper', 'truth', 'bias', 'rmse', 'n', 'defined_fraction', 'support',
    )


def clean(obj: Any) -> Any:
    """
    Convert to plain JSON types: numpy scalars become Python numbers,
     tuples become lists and non-finite floats become `None`.
    """
    if isinstance(obj, dict):
        return {str(kk): clean(vv) for kk, vv in obj.items()}
    if isinstance(obj, list | tuple):
        return [clean(vv) for vv in obj]
    if isinstance(obj, numpy.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, numpy.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def build_report(command: str, seed: int, config: dict[str, Any], results: dict[str, Any]) -> dict[str, Any]:
    from . import __version__
    return clean({
        'report_version': REPORT_VERSION,
        'software': {'name': 'teamspill', 'version': __version__},
        'command': command,
        'seed': seed,
        'config': config,
        'results': results,
        })


def dumps(report: dict[str, Any]) -> str:
    return json.dumps(report, sort_keys=True, indent=2, allow_nan=False) + '\n'


def load_report(path: str | Path) -> dict[str, Any]:
    """
    Read a JSON report written by `emit_report()`.

    Raises:
        InvalidDataError: if the file is not a report of a supported version.
    """
    try:
        report = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InvalidDataError(f'Report not found: {path}') from None
    except json.JSONDecodeError as err:
        raise InvalidDataError(f'Report {path} is not valid JSON: {err}') from err
    if not isinstance(report, dict) or report.get('report_version') != REPORT_VERSION:
        raise InvalidDataError(f'{path} is not a version {REPORT_VERSION} report')
    return report


def report_rows(report: dict[str, Any]) -> tuple[tuple[str, ...], list[dict[str, Any]]]:
    """
    Tidy rows (one per estimator and level) for the report's results.

    Returns:
        (column names, rows)
    """
    results = report['results']
    rows = []
    if 'summary' in results:
        for est in results['summary']['estimators']:
            for ls in est['levels']:
                rows.append({'estimator': est['kind']} | {cc: ls[cc] for cc in MC_COLUMNS[1:]})
        return MC_COLUMNS, rows
    for est in results.get('estimates', []):
        for le in est['levels']:
            rows.append({'estimator': est['kind']} | {cc: le[cc] for cc in ESTIMATE_COLUMNS[1:]})
    return ESTIMATE_COLUMNS, rows


def _overall_entries(report: dict[str, Any]) -> Iterable[tuple[str, Any, Any, Any]]:
    results = report['results']
    if 'summary' in results:
        for est in results['summary']['estimators']:
            ov = est['overall'] or {}
            yield est['kind'], ov.get('mean'), ov.get('lower'), ov.get('upper')
    else:
        for est in results.get('estimates', []):
            yield est['kind'], est['overall'], None, None


def overall_table(report: dict[str, Any]) -> str:
    """
    Plain-text table with one row per estimator: overall effect (and, for
     Monte Carlo reports, its 95% interval).
    """
    def _fmt(value: Any) -> str:
        return 'n/a' if value is None else f'{value:.3f}'

    entries = list(_overall_entries(report))
    interval = any(lo is not None for _kk, _vv, lo, _hi in entries)
    header = 'Estimator'.ljust(44) + 'Overall effect'.rjust(16) + ('95% interval'.rjust(22) if interval else '')
    lines = [header, '-' * len(header)]
    for kind, value, lo, hi in entries:
        line = ESTIMATOR_TITLES.get(kind, kind).ljust(44) + _fmt(value).rjust(16)
        if interval:
            line += f'[{_fmt(lo)}, {_fmt(hi)}]'.rjust(22)
        lines.append(line)
    return '\n'.join(lines) + '\n'


def emit_report(
        report: dict[str, Any],
        out_dir: str | Path,
        fmt: str = 'both',
        stem: str = 'report',
        ) -> list[Path]:
    """
    Write `{stem}.json` and/or `{stem}.csv`, plus the `{stem}.txt` overall table.

    Args:
        report: Report from `build_report()`.
        out_dir: Output directory (created if needed).
        fmt: 'json', 'csv' or 'both'.
        stem: File name stem.

    Returns:
        Paths written.

    Raises:
        ConfigError: for an unknown format.
        TeamspillError: if the output cannot be written.
    """
    if fmt not in FORMATS:
        raise ConfigError(f'Unknown report format "{fmt}", expected one of {FORMATS}')
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        if fmt in ('json', 'both'):
            path = out / f'{stem}.json'
            path.write_text(dumps(report))
            written.append(path)
        if fmt in ('csv', 'both'):
            columns, rows = report_rows(report)
            path = out / f'{stem}.csv'
            pandas.DataFrame(rows, columns=list(columns)).to_csv(path, index=False, lineterminator='\n')
            written.append(path)
        path = out / f'{stem}.txt'
        path.write_text(overall_table(report))
        written.append(path)
    except OSError as err:
        raise TeamspillError(f'Cannot write report to {out}: {err}') from err
    logger.info(f'Wrote {", ".join(str(pp) for pp in written)}')
    return written
