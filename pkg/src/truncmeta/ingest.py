"""Reading user data: per-study CSV matrices, schema configs and DE lists."""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import Schema, StudyMatrix

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed user input; messages carry file coordinates where possible."""


def read_config(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    entries: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise DataError(f"{path}: line {lineno}: expected 'key = value', got {raw.strip()!r}")
            if key in entries:
                raise DataError(f"{path}: line {lineno}: duplicate key {key!r}")
            entries[key] = value
    return entries


def _parse_alpha(text: str, where: str) -> float:
    try:
        alpha = float(text)
    except ValueError:
        raise DataError(f"{where}: threshold {text!r} is not a number") from None
    if not (0.0 < alpha < 1.0):
        raise DataError(f"{where}: threshold {alpha!r} outside (0, 1)")
    return alpha


def parse_study_mode(value: str, where: str = "schema") -> float | None:
    """``observed`` gives None, ``censored:alpha`` gives alpha."""
    mode, _, arg = value.partition(":")
    mode = mode.strip().lower()
    if mode == "observed" and not arg:
        return None
    if mode == "censored" and arg:
        return _parse_alpha(arg.strip(), where)
    raise DataError(f"{where}: expected 'observed' or 'censored:<alpha>', got {value!r}")


def read_schema_config(path: str | Path) -> dict[str, float | None]:
    return {name: parse_study_mode(v, f"{path}: study {name!r}") for name, v in read_config(path).items()}


def read_threshold_config(path: str | Path) -> dict[str, float | None]:
    """Per-study truncation thresholds: a number, or ``none`` to keep the study whole."""
    out: dict[str, float | None] = {}
    for name, value in read_config(path).items():
        where = f"{path}: study {name!r}"
        if value.lower() in ("none", "observed", ""):
            out[name] = None
        else:
            out[name] = _parse_alpha(value.split(":", 1)[-1] if value.lower().startswith("censored:") else value, where)
    return out


def _read_table(path: str | Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        rows = [(reader.line_num, row) for row in reader if row]
    header = [h.strip() for h in header]
    if len(header) < 2:
        raise DataError(f"{path}: header needs a feature id column and at least one study")
    dup = {h for h in header[1:] if header[1:].count(h) > 1}
    if dup:
        raise DataError(f"{path}: duplicate study columns {sorted(dup)}")
    return header, rows


def _cell_float(text: str, path, line: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{path}: row {line}, column {column!r}: non-numeric value {text!r}") from None


def _check_ids(ids: Sequence[str], lines: Sequence[int], path) -> None:
    seen: dict[str, int] = {}
    for fid, line in zip(ids, lines):
        if not fid:
            raise DataError(f"{path}: row {line}: empty feature id")
        if fid in seen:
            raise DataError(f"{path}: row {line}: feature id {fid!r} repeats row {seen[fid]}")
        seen[fid] = line


def ingest_csv(path: str | Path, schema_config: dict[str, float | None] | str | Path) -> StudyMatrix:
    """Load a features x studies CSV into a validated matrix.

    Study order follows the CSV header. Observed columns hold p-values in
    (0, 1]; censored columns hold 0/1 indicators of ``p < alpha``.
    """
    modes = read_schema_config(schema_config) if isinstance(schema_config, (str, Path)) else dict(schema_config)
    header, rows = _read_table(path)
    studies = header[1:]
    missing = [s for s in modes if s not in studies]
    if missing:
        raise DataError(f"{path}: missing columns for studies {missing} declared in the schema")
    unknown = [s for s in studies if s not in modes]
    if unknown:
        raise DataError(f"{path}: columns {unknown} have no schema entry")
    schema = Schema(tuple(modes[s] for s in studies), names=tuple(studies))
    obs_cols = [j for j, s in enumerate(studies) if modes[s] is None]
    cen_cols = [j for j, s in enumerate(studies) if modes[s] is not None]
    n = len(rows)
    observed = np.empty((n, len(obs_cols)))
    indicators = np.empty((n, len(cen_cols)), dtype=np.uint8)
    ids, lines = [], []
    for i, (line, row) in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"{path}: row {line}: expected {len(header)} fields, got {len(row)}")
        ids.append(row[0].strip())
        lines.append(line)
        cells = row[1:]
        for c, j in enumerate(obs_cols):
            p = _cell_float(cells[j], path, line, studies[j])
            if not (0.0 < p <= 1.0) or math.isnan(p):
                raise DataError(f"{path}: row {line}, column {studies[j]!r}: p-value {cells[j]!r} outside (0, 1]")
            observed[i, c] = p
        for c, j in enumerate(cen_cols):
            text = cells[j].strip()
            if text not in ("0", "1"):
                raise DataError(f"{path}: row {line}, column {studies[j]!r}: indicator {text!r} is not 0 or 1")
            indicators[i, c] = int(text)
    _check_ids(ids, lines, path)
    log.info("ingested %d features from %s (K=%d, K1=%d, K2=%d)", n, path, schema.k, schema.k1, schema.k2)
    return StudyMatrix(schema, tuple(ids), observed, indicators)


def read_full_pvalues(path: str | Path) -> tuple[list[str], list[str], np.ndarray]:
    """CSV of complete p-values, for truncation: (study names, feature ids, n x K array)."""
    header, rows = _read_table(path)
    studies = header[1:]
    p = np.empty((len(rows), len(studies)))
    ids, lines = [], []
    for i, (line, row) in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"{path}: row {line}: expected {len(header)} fields, got {len(row)}")
        ids.append(row[0].strip())
        lines.append(line)
        for j, text in enumerate(row[1:]):
            v = _cell_float(text, path, line, studies[j])
            if not (0.0 < v <= 1.0) or math.isnan(v):
                raise DataError(f"{path}: row {line}, column {studies[j]!r}: p-value {text!r} outside (0, 1]")
            p[i, j] = v
    _check_ids(ids, lines, path)
    return studies, ids, p


def read_id_list(path: str | Path) -> list[str]:
    """One feature id per line; blank lines and ``#`` comments ignored."""
    with open(path, encoding="utf-8") as fh:
        ids = [line.split("#", 1)[0].strip() for line in fh]
    return [i for i in ids if i]


def de_list_indicators(listed: Iterable[str], universe: Sequence[str]) -> np.ndarray:
    """1 for universe features on the significant list, 0 otherwise."""
    listed = set(listed)
    stray = listed.difference(universe)
    if stray:
        sample = ", ".join(sorted(stray)[:5])
        raise DataError(f"{len(stray)} listed ids are not in the universe (e.g. {sample})")
    return np.fromiter((fid in listed for fid in universe), dtype=np.uint8, count=len(universe))


def ingest_de_lists(universe_path: str | Path,
                    de_lists: Sequence[tuple[str, str | Path, float]],
                    base: StudyMatrix | None = None) -> StudyMatrix:
    """Build censored study columns from published significant-feature lists.

    Each entry is ``(study name, list file, alpha)``. With ``base``, the new
    columns are appended to it and the universe must match its feature ids.
    """
    universe = read_id_list(universe_path)
    if len(set(universe)) != len(universe):
        raise DataError(f"{universe_path}: universe contains repeated ids")
    if base is not None and set(base.feature_ids) != set(universe):
        raise DataError(f"{universe_path}: universe does not match the feature ids of the input matrix")
    order = list(base.feature_ids) if base is not None else universe
    cols = []
    for name, list_path, alpha in de_lists:
        if not (0.0 < alpha < 1.0):
            raise DataError(f"study {name!r}: threshold {alpha!r} outside (0, 1)")
        try:
            cols.append(de_list_indicators(read_id_list(list_path), order))
        except DataError as exc:
            raise DataError(f"{list_path}: {exc}") from None
    new = np.column_stack(cols) if cols else np.empty((len(order), 0), dtype=np.uint8)
    if base is None:
        names = tuple(name for name, _, _ in de_lists)
        schema = Schema(tuple(a for _, _, a in de_lists), names=names)
        return StudyMatrix(schema, tuple(order), np.empty((len(order), 0)), new)
    old = base.schema
    names = (old.names or tuple(f"study{i + 1}" for i in range(old.k))) + tuple(n for n, _, _ in de_lists)
    schema = Schema(old.thresholds + tuple(a for _, _, a in de_lists), names=names)
    return StudyMatrix(schema, base.feature_ids, base.observed,
                       np.hstack([base.indicators, new]).astype(np.uint8))
