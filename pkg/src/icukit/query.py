"""Layered data loading.

``load_src`` returns raw rows. ``load_difftime`` rewrites every time column
as minutes relative to the origin of the table's ID system. ``change_id``
moves data between ID systems through the per-source ID window table, and
``change_interval`` re-grids durations. ``load_id``/``load_ts`` compose the
steps.

Re-gridding truncates toward zero: -2745 min becomes -45 h, not -46 h.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from .config import IdSystem
from .errors import MissingOriginTable, NoIdAvailable, UnknownIdSystem
from .store import Predicate, SourceEnv, TableHandle, get_source
from .tables import (
    IdTbl,
    Table,
    TsTbl,
    as_minutes,
    from_minutes,
    is_duration,
    to_minutes,
    validate_or_downcast,
)

logger = logging.getLogger(__name__)

DATE_SHIFT_MIN = 12 * 60


class Diagnostics:
    """Collects non-fatal events (dropped rows, unit mismatches) for reporting."""

    def __init__(self):
        self.events: list[dict] = []

    def record(self, kind: str, count: int = 1, **context):
        self.events.append({"kind": kind, "count": count, **context})
        logger.info("%s (%d): %s", kind, count, context)

    def count(self, kind: str) -> int:
        return sum(e["count"] for e in self.events if e["kind"] == kind)

    def messages(self) -> list[str]:
        out = []
        for e in self.events:
            ctx = ", ".join(f"{k}={v}" for k, v in e.items() if k not in ("kind", "count"))
            out.append(f"{e['kind']}: {e['count']}" + (f" ({ctx})" if ctx else ""))
        return out

    def __len__(self):
        return len(self.events)


def _record(diag: Optional[Diagnostics], kind: str, count: int, **ctx):
    if count and diag is not None:
        diag.record(kind, count, **ctx)
    elif count:
        logger.info("%s: %d %s", kind, count, ctx)


# ---------------------------------------------------------------------------
# raw access


def load_src(table: str, source, predicate: Optional[Predicate] = None, cols=None) -> Table:
    env = get_source(source)
    return Table(env[table].scan(predicate, cols))


# ---------------------------------------------------------------------------
# ID windows


@dataclass
class IdWindows:
    """One row per finest-grain stay with every ID and its [start, end) window.

    Columns: for each system ``<col>``, ``<col>_start``, ``<col>_end`` in
    minutes relative to the coarsest origin of the row, plus ``origin``
    (absolute epoch minutes of that origin; null for sources whose raw times
    are already relative).
    """

    systems: tuple[IdSystem, ...]
    data: pd.DataFrame
    nesting_violations: int = 0

    @property
    def finest(self) -> IdSystem:
        return self.systems[-1]

    def starts(self, col: str) -> pd.DataFrame:
        """Per value of ``col``: its window start and absolute origin."""
        w = self.data[[col, f"{col}_start", "origin"]].drop_duplicates(col)
        out = w.rename(columns={f"{col}_start": "start"})
        out["abs_start"] = out["origin"] + out["start"]
        return out[[col, "start", "abs_start"]]


def _epoch_minutes(s: pd.Series) -> pd.Series:
    secs = s.to_numpy(dtype="datetime64[s]").astype("int64")
    mask = s.isna().to_numpy()
    return pd.Series(pd.arrays.IntegerArray(np.where(mask, 0, secs // 60), mask), index=s.index)


def _time_minutes(s: pd.Series, typ: str) -> pd.Series:
    if typ == "timestamp":
        return _epoch_minutes(s)
    if typ == "date":
        return _epoch_minutes(s) + DATE_SHIFT_MIN
    return pd.Series(s, copy=True).astype("Float64").round().astype("Int64")


def build_id_windows(source) -> IdWindows:
    """Build (once per attached source) the ID window table."""
    env = get_source(source)
    cached = env.cache.get("id_windows")
    if cached is not None:
        return cached
    with env.lock:
        cached = env.cache.get("id_windows")
        if cached is None:
            cached = _build_windows(env)
            env.cache["id_windows"] = cached
    return cached


def _build_windows(env: SourceEnv) -> IdWindows:
    systems = list(env.id_systems)
    for e in systems:
        if e.table is None or e.table not in env:
            raise MissingOriginTable(f"{env.name}: ID system {e.label!r} has no origin table")
    absolute = False
    frames = []
    for i, e in enumerate(systems):
        h = env[e.table]
        cols = [e.column]
        if i > 0 and systems[i - 1].column in h.columns:
            cols.append(systems[i - 1].column)
        cols += [c for c in (e.start, e.end) if c and c not in cols]
        df = h.scan(cols=cols)
        out = pd.DataFrame({e.column: df[e.column]})
        if i > 0:
            link = systems[i - 1].column
            if link not in df:
                raise MissingOriginTable(
                    f"{env.name}: table {e.table!r} lacks link column {link!r}"
                )
            out[link] = df[link]
        for key, col in (("start", e.start), ("end", e.end)):
            if col:
                typ = h.column_type(col)
                absolute |= typ in ("timestamp", "date")
                out[f"{e.column}_{key}"] = _time_minutes(df[col], typ)
            else:
                out[f"{e.column}_{key}"] = pd.array([0 if key == "start" else pd.NA] * len(df), dtype="Int64")
        frames.append(out.drop_duplicates(e.column))

    w = frames[-1]
    for i in range(len(systems) - 2, -1, -1):
        w = w.merge(frames[i], on=systems[i].column, how="left")
    cols = [e.column for e in systems]
    # fill open ends/starts from the finer windows in the same row
    for i in range(len(systems) - 2, -1, -1):
        c = systems[i].column
        finer_end = w[[f"{s.column}_end" for s in systems[i + 1 :]]].max(axis=1)
        finer_start = w[[f"{s.column}_start" for s in systems[i + 1 :]]].min(axis=1)
        w[f"{c}_end"] = w[f"{c}_end"].fillna(finer_end).astype("Int64")
        w[f"{c}_start"] = w[f"{c}_start"].fillna(finer_start).astype("Int64")
    root = systems[0].column
    if absolute:
        origin = w[f"{root}_start"].copy()
        for e in systems:
            for key in ("start", "end"):
                w[f"{e.column}_{key}"] = w[f"{e.column}_{key}"] - origin
        w["origin"] = origin
    else:
        w["origin"] = pd.array([pd.NA] * len(w), dtype="Int64")
    order = []
    for c in cols:
        order += [c, f"{c}_start", f"{c}_end"]
    w = w[order + ["origin"]].sort_values(cols, kind="mergesort").reset_index(drop=True)

    violations = 0
    for e in systems:
        bad = (w[f"{e.column}_start"] > w[f"{e.column}_end"]).fillna(False)
        violations += int(bad.sum())
    for coarse, fine in zip(systems, systems[1:]):
        c, f = coarse.column, fine.column
        bad = (w[f"{f}_start"] < w[f"{c}_start"]) | (w[f"{f}_end"] > w[f"{c}_end"])
        violations += int(bad.fillna(False).sum())
    if violations:
        logger.warning("%s: %d ID window nesting violation(s)", env.name, violations)
    if w[systems[-1].column].duplicated().any():
        logger.warning("%s: duplicate finest-grain IDs in window table", env.name)
    return IdWindows(tuple(systems), w, violations)


# ---------------------------------------------------------------------------
# difftime


def _resolve_system(env: SourceEnv, key: str) -> IdSystem:
    try:
        return env.id_systems.lookup(key)
    except KeyError:
        raise UnknownIdSystem(f"{env.name}: unknown ID system {key!r}") from None


def choose_id(env: SourceEnv, handle: TableHandle, id_hint: Optional[str] = None) -> str:
    """ID column used for a table: the hinted system if present, else the finest present."""
    present = [e for e in env.id_systems if e.column in handle.columns]
    if id_hint is not None:
        hint = _resolve_system(env, id_hint)
        if hint in present:
            return hint.column
    if present:
        return present[-1].column
    if handle.defaults.id_var:
        return handle.defaults.id_var
    raise NoIdAvailable(f"{env.name}.{handle.name}: no ID column available")


def time_columns(handle: TableHandle, df: pd.DataFrame, extra: Iterable[str] = ()) -> list[str]:
    cols = list(handle.defaults.time_vars) + [c for c in extra if c]
    out = []
    for c in cols:
        if c in df.columns and c not in out:
            out.append(c)
    return out


def to_difftime(
    df: pd.DataFrame,
    env: SourceEnv,
    handle: TableHandle,
    id_col: str,
    time_cols: Sequence[str],
    diag: Optional[Diagnostics] = None,
) -> pd.DataFrame:
    """Rewrite ``time_cols`` of a raw frame as durations since the ID origin."""
    df = df.copy()
    types = {c: handle.column_type(c) for c in time_cols}
    absolute = [c for c in time_cols if types[c] in ("timestamp", "date")]
    origin = None
    if absolute:
        if id_col not in env.id_systems.columns:
            raise NoIdAvailable(f"{env.name}.{handle.name}: {id_col!r} has no origin")
        starts = build_id_windows(env).starts(id_col)
        origin = df[[id_col]].merge(starts, on=id_col, how="left")["abs_start"]
        origin.index = df.index
        _record(diag, "unknown_origin", int(origin.isna().sum()), table=handle.name)
    for c in time_cols:
        m = _time_minutes(df[c], types[c])
        if types[c] in ("timestamp", "date"):
            m = m - origin
        df[c] = from_minutes(m)
    return df


def load_difftime(
    table: str,
    source,
    predicate: Optional[Predicate] = None,
    cols: Optional[Sequence[str]] = None,
    id_hint: Optional[str] = None,
) -> IdTbl:
    env = get_source(source)
    h = env[table]
    id_col = choose_id(env, h, id_hint)
    cols = list(h.columns) if cols is None else list(cols)
    cols = [id_col] + [c for c in cols if c != id_col]
    df = h.scan(predicate, cols)
    df = to_difftime(df, env, h, id_col, time_columns(h, df))
    return IdTbl(df, [id_col])


# ---------------------------------------------------------------------------
# ID conversion


def _current_system(t: IdTbl, env: SourceEnv) -> tuple[str, list[str]]:
    sys_cols = [c for c in t.id_vars if c in env.id_systems.columns]
    if not sys_cols:
        raise UnknownIdSystem(f"{env.name}: table has no ID-system column among {t.id_vars}")
    cur = sys_cols[-1]
    return cur, [c for c in t.id_vars if c != cur]


def change_id(
    t: IdTbl,
    source,
    target_id: str,
    diag: Optional[Diagnostics] = None,
) -> IdTbl:
    """Re-key ``t`` to another ID system of ``source``.

    Moving to a coarser system maps IDs many-to-one and shifts every duration
    column by the difference of window starts. Moving to a finer system
    assigns time-stamped rows to the finer window containing their index
    (half-open); rows inside no window are dropped and counted in ``diag`` as
    ``orphan_rows``. Tables without an index are repeated over every finer
    window of their ID.
    """
    env = get_source(source)
    target = _resolve_system(env, target_id).column
    cur, others = _current_system(t, env)
    if cur == target:
        return t
    spec = env.id_systems
    w = build_id_windows(env).data
    dur_cols = [c for c in t.columns if is_duration(t[c])]
    df = t.to_frame()
    df["__row"] = np.arange(len(df))
    upgrade = spec.rank(target) < spec.rank(cur)
    if upgrade:
        m = w[[cur, f"{cur}_start", target, f"{target}_start"]].drop_duplicates(cur)
        m = m.assign(__shift=m[f"{cur}_start"] - m[f"{target}_start"])[[cur, target, "__shift"]]
        out = df.drop(columns=[target], errors="ignore").merge(m, on=cur, how="inner")
    else:
        m = w[[cur, f"{cur}_start", target, f"{target}_start", f"{target}_end"]]
        m = m.assign(
            __lo=m[f"{target}_start"] - m[f"{cur}_start"],
            __hi=m[f"{target}_end"] - m[f"{cur}_start"],
        )
        m = m[[cur, target, "__lo", "__hi"]].drop_duplicates([cur, target])
        out = df.drop(columns=[target], errors="ignore").merge(m, on=cur, how="inner")
        if isinstance(t, TsTbl):
            at = to_minutes(out[t.index_var])
            inside = ((at >= out["__lo"]) & (at < out["__hi"])).fillna(False).to_numpy(bool)
            out = out[inside].sort_values(["__row", "__lo"], kind="mergesort")
            out = out.drop_duplicates("__row")
        out = out.assign(__shift=-out["__lo"]).drop(columns=["__lo", "__hi"])
    dropped = len(df) - out["__row"].nunique()
    _record(diag, "orphan_rows" if not upgrade else "unmapped_ids", dropped, target=target)
    for c in dur_cols:
        out[c] = from_minutes(to_minutes(out[c]) + out["__shift"])
    out = out.sort_values("__row", kind="mergesort").drop(columns=["__row", "__shift", cur])
    id_vars = others + [target]
    meta = t.meta()
    meta["id_vars"] = id_vars
    res = validate_or_downcast(out, units=t.units, **meta)
    return res.sort() if isinstance(res, IdTbl) else res


def change_interval(t: Table, new_interval) -> Table:
    """Re-grid every duration column, truncating toward zero.

    Rows that collide after coarsening are kept; aggregation is the
    caller's business.
    """
    step = as_minutes(new_interval)
    if step <= 0:
        raise ValueError("interval must be positive")
    df = t.to_frame()
    for c in df.columns:
        if is_duration(df[c]):
            m = to_minutes(df[c])
            q = (m.abs() // step) * np.sign(m)
            df[c] = from_minutes(q * step)
    meta = t.meta()
    if "index_var" in meta:
        meta["interval"] = step
    return validate_or_downcast(df, units=t.units, **meta)


# ---------------------------------------------------------------------------
# composed loaders


def load_id(
    table: str,
    source,
    predicate: Optional[Predicate] = None,
    cols: Optional[Sequence[str]] = None,
    id_var: Optional[str] = None,
    interval=60,
    diag: Optional[Diagnostics] = None,
) -> IdTbl:
    env = get_source(source)
    t = load_difftime(table, env, predicate, cols, id_hint=id_var)
    if id_var is not None:
        t = change_id(t, env, id_var, diag)
    return change_interval(t, interval)


def load_ts(
    table: str,
    source,
    predicate: Optional[Predicate] = None,
    cols: Optional[Sequence[str]] = None,
    id_var: Optional[str] = None,
    index_var: Optional[str] = None,
    interval=60,
    diag: Optional[Diagnostics] = None,
) -> TsTbl:
    env = get_source(source)
    h = env[table]
    index_var = index_var or h.defaults.index_var
    if index_var is None:
        raise NoIdAvailable(f"{env.name}.{table}: no index_var available")
    if cols is not None and index_var not in cols:
        cols = list(cols) + [index_var]
    t = load_difftime(table, env, predicate, cols, id_hint=id_var)
    return as_ts(t, env, index_var, id_var, interval, diag)


def as_ts(t: IdTbl, env, index_var: str, id_var, interval, diag=None) -> TsTbl:
    """Promote a difftime id_tbl to a ts_tbl keyed by ``id_var`` at ``interval``."""
    missing = int(t[index_var].isna().sum())
    if missing:
        _record(diag, "null_index_rows", missing, column=index_var)
        t = t.filter(t[index_var].notna().to_numpy())
    t = TsTbl(t.data, t.id_vars, index_var, 1, t.units)
    if id_var is not None:
        t = change_id(t, env, id_var, diag)
    return change_interval(t, interval)
