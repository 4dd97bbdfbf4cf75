"""Typed tables with grouping and time-series metadata.

Three levels, each a refinement of the previous one:

* :class:`Table`  -- a plain data frame wrapper;
* :class:`IdTbl`  -- adds ``id_vars``, the columns identifying a group;
* :class:`TsTbl`  -- adds an ``index_var`` holding durations and a step size
  ``interval`` (minutes); every index value is a multiple of the interval.

Tables are values: utilities return new tables and never modify their
input. Anything that may break an invariant goes through
:func:`validate_or_downcast`, which returns the most specific class whose
invariants still hold.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .config import AGGREGATES
from .errors import (
    BadAggregate,
    IncompatibleIds,
    IntervalMismatch,
    LengthMismatch,
    TableError,
    UnknownColumn,
)

MINUTE = pd.Timedelta(minutes=1)


def mins(x) -> pd.Series | pd.Timedelta:
    if np.isscalar(x):
        return pd.Timedelta(minutes=x)
    return pd.to_timedelta(pd.Series(x), unit="m")


def hours(x):
    if np.isscalar(x):
        return pd.Timedelta(hours=x)
    return pd.to_timedelta(pd.Series(x), unit="h")


def as_minutes(interval) -> int:
    """Normalize an interval given as minutes or a timedelta to int minutes."""
    if isinstance(interval, (pd.Timedelta, np.timedelta64)) or hasattr(interval, "total_seconds"):
        secs = pd.Timedelta(interval).total_seconds()
        if secs % 60:
            raise ValueError(f"interval must be whole minutes, got {interval}")
        return int(secs // 60)
    return int(interval)


def to_minutes(s: pd.Series) -> pd.Series:
    """Duration series to nullable integer minutes (truncating seconds)."""
    ns = s.to_numpy(dtype="timedelta64[ns]").astype("int64")
    mask = s.isna().to_numpy()
    out = np.where(mask, 0, np.trunc(ns / 6e10)).astype("int64")
    return pd.Series(pd.arrays.IntegerArray(out, mask), index=s.index)


def from_minutes(m) -> pd.Series:
    m = pd.Series(m)
    vals = m.astype("Float64").to_numpy(dtype="float64", na_value=np.nan)
    return pd.Series(pd.to_timedelta(vals, unit="m"), index=m.index)


def is_duration(s: pd.Series) -> bool:
    return pd.api.types.is_timedelta64_dtype(s)


class Table:
    """A data frame plus optional per-column units."""

    kind = "table"

    def __init__(self, data: pd.DataFrame, units: Optional[Mapping[str, str]] = None):
        if not isinstance(data, pd.DataFrame):
            data = pd.DataFrame(data)
        if data.columns.duplicated().any():
            raise TableError("column names must be unique")
        self._data = data.reset_index(drop=True)
        self.units = {k: v for k, v in (units or {}).items() if k in self._data.columns}

    # -- frame access -------------------------------------------------------

    @property
    def data(self) -> pd.DataFrame:
        """The underlying frame. Treat as read-only; use :meth:`to_frame` to edit."""
        return self._data

    def to_frame(self) -> pd.DataFrame:
        return self._data.copy()

    @property
    def columns(self) -> list[str]:
        return list(self._data.columns)

    def __len__(self) -> int:
        return len(self._data)

    def __getitem__(self, col: str) -> pd.Series:
        return self._data[col]

    def __contains__(self, col: str) -> bool:
        return col in self._data.columns

    def meta(self) -> dict:
        return {}

    @property
    def key_vars(self) -> list[str]:
        return []

    @property
    def value_vars(self) -> list[str]:
        return [c for c in self.columns if c not in self.key_vars]

    def __eq__(self, other) -> bool:
        if type(self) is not type(other) or self.meta() != other.meta():
            return False
        return self._data.equals(other._data)

    def __repr__(self) -> str:
        head = f"# {self.kind}: {len(self)} x {len(self.columns)}"
        lines = [head] + [f"# {k}: {v}" for k, v in self.meta().items()]
        return "\n".join(lines) + "\n" + repr(self._data.head(10))

    # -- value-semantics editing -------------------------------------------

    def rebuild(self, data: pd.DataFrame, **meta) -> "Table":
        """A new table over ``data`` carrying this table's metadata (overridable)."""
        m = {**self.meta(), **meta}
        return validate_or_downcast(data, units=self.units, **m)

    def assign(self, **cols) -> "Table":
        return self.rebuild(self._data.assign(**cols))

    def drop(self, cols: Union[str, Iterable[str]]) -> "Table":
        cols = [cols] if isinstance(cols, str) else list(cols)
        data = self._data.drop(columns=cols)
        m = self.meta()
        if "id_vars" in m:
            m["id_vars"] = [c for c in m["id_vars"] if c not in cols]
        if m.get("index_var") in cols:
            m["index_var"] = None
        return validate_or_downcast(data, units=self.units, **m)

    def rename(self, mapping: Mapping[str, str]) -> "Table":
        m = self.meta()
        if "id_vars" in m:
            m["id_vars"] = [mapping.get(c, c) for c in m["id_vars"]]
        if m.get("index_var"):
            m["index_var"] = mapping.get(m["index_var"], m["index_var"])
        units = {mapping.get(k, k): v for k, v in self.units.items()}
        return validate_or_downcast(self._data.rename(columns=dict(mapping)), units=units, **m)

    def filter(self, mask) -> "Table":
        mask = np.asarray(mask, dtype=bool)
        return self.rebuild(self._data[mask])


class IdTbl(Table):
    kind = "id_tbl"

    def __init__(self, data, id_vars: Sequence[str], units=None):
        id_vars = [id_vars] if isinstance(id_vars, str) else list(id_vars)
        if not id_vars:
            raise TableError("id_vars must be nonempty")
        data = data if isinstance(data, pd.DataFrame) else pd.DataFrame(data)
        missing = [c for c in id_vars if c not in data.columns]
        if missing:
            raise TableError(f"id_vars not in table: {missing}")
        self.id_vars = id_vars
        super().__init__(data[self._order(data.columns)], units)

    def _order(self, columns) -> list[str]:
        return self.key_vars + [c for c in columns if c not in self.key_vars]

    @property
    def key_vars(self) -> list[str]:
        return list(self.id_vars)

    def meta(self) -> dict:
        return {"id_vars": list(self.id_vars)}

    def sort(self) -> "IdTbl":
        return type(self)._from_sorted(self)

    @classmethod
    def _from_sorted(cls, t):
        data = t.data.sort_values(t.key_vars, kind="mergesort", na_position="last")
        return t.rebuild(data)


class TsTbl(IdTbl):
    kind = "ts_tbl"

    def __init__(self, data, id_vars, index_var: str, interval=60, units=None):
        self.index_var = index_var
        self.interval = as_minutes(interval)
        data = data if isinstance(data, pd.DataFrame) else pd.DataFrame(data)
        super().__init__(data, id_vars, units)
        problem = _ts_problem(self._data, self.id_vars, index_var, self.interval)
        if problem:
            raise TableError(problem)

    @property
    def key_vars(self) -> list[str]:
        return list(self.id_vars) + [self.index_var]

    def meta(self) -> dict:
        return {"id_vars": list(self.id_vars), "index_var": self.index_var, "interval": self.interval}


def _ts_problem(data: pd.DataFrame, id_vars, index_var, interval) -> Optional[str]:
    if not index_var or index_var not in data.columns:
        return f"index column {index_var!r} missing"
    if index_var in id_vars:
        return "index_var must not be an id_var"
    if interval is None or interval <= 0:
        return "interval must be positive"
    idx = data[index_var]
    if not is_duration(idx):
        return f"index column {index_var!r} is not a duration"
    if idx.isna().any():
        return "index column contains nulls"
    ns = idx.to_numpy(dtype="timedelta64[ns]").astype("int64")
    if (ns % (interval * 60 * 10**9)).any():
        return f"index values are not multiples of {interval} min"
    return None


def validate_or_downcast(
    data: pd.DataFrame,
    id_vars: Optional[Sequence[str]] = None,
    index_var: Optional[str] = None,
    interval=None,
    units: Optional[Mapping[str, str]] = None,
) -> Table:
    """Most specific table class whose invariants hold for ``data``."""
    id_vars = [id_vars] if isinstance(id_vars, str) else [c for c in (id_vars or [])]
    id_ok = bool(id_vars) and all(c in data.columns for c in id_vars)
    if id_ok and index_var is not None and interval is not None:
        if _ts_problem(data, id_vars, index_var, as_minutes(interval)) is None:
            return TsTbl(data, id_vars, index_var, interval, units)
    if id_ok:
        return IdTbl(data, id_vars, units)
    return Table(data, units)


# ---------------------------------------------------------------------------
# grouped utilities


def _sorted(t: Table) -> Table:
    if not t.key_vars:
        return t
    return t.rebuild(t.data.sort_values(t.key_vars, kind="mergesort"))


def default_aggregate(s: pd.Series) -> str:
    if pd.api.types.is_bool_dtype(s):
        return "sum"
    if pd.api.types.is_numeric_dtype(s) or is_duration(s):
        return "median"
    return "first"


def _agg_column(grouped, col: str, fun: str, dtype) -> pd.Series:
    g = grouped[col]
    is_bool = pd.api.types.is_bool_dtype(dtype)
    if fun in ("sum", "any") and is_bool:
        # count of TRUE values turned back into a logical
        counts = g.sum(min_count=1)
        return (counts > 0).astype("boolean").where(counts.notna(), pd.NA)
    if fun == "any":
        counts = g.apply(lambda s: s.dropna().astype(bool).sum() if s.notna().any() else pd.NA)
        return counts.astype("Int64").gt(0).astype("boolean")
    if fun == "sum":
        return g.sum(min_count=1)
    if fun == "count":
        return g.count().astype("Int64")
    if fun == "median":
        return g.median()
    return getattr(g, fun)()


def aggregate(
    t: IdTbl,
    fun: Union[None, str, Mapping[str, str]] = None,
    value_cols: Optional[Sequence[str]] = None,
) -> IdTbl:
    """One row per key (``id_vars`` plus index for time series).

    ``fun`` is an aggregation name, a per-column mapping, or None for the
    type-based default (median for numbers, first for strings, sum-as-any for
    logicals). Groups with only nulls aggregate to null.
    """
    if not isinstance(t, IdTbl):
        raise TableError("aggregate needs an id_tbl or ts_tbl")
    keys = t.key_vars
    value_cols = t.value_vars if value_cols is None else list(value_cols)
    if set(value_cols) & set(keys):
        raise TableError("value columns must not overlap key columns")
    funs = {}
    for c in value_cols:
        f = fun.get(c) if isinstance(fun, Mapping) else fun
        f = f or default_aggregate(t[c])
        if f not in AGGREGATES:
            raise BadAggregate(f"unknown aggregation {f!r}")
        funs[c] = f
    data = t.data
    if data.empty:
        return t.rebuild(data[keys + value_cols])
    grouped = data.groupby(keys, sort=True, dropna=False)
    out = pd.DataFrame({c: _agg_column(grouped, c, funs[c], data[c].dtype) for c in value_cols})
    out = out.reset_index()
    return t.rebuild(out[keys + value_cols])


def fill_gaps(t: TsTbl) -> TsTbl:
    """Expand each group's index to the full grid between its min and max."""
    if not isinstance(t, TsTbl):
        raise TableError("fill_gaps needs a ts_tbl")
    if len(t) == 0:
        return t
    step = t.interval
    idx = t.index_var
    df = t.data.assign(**{idx: to_minutes(t[idx]).astype("int64")})
    rng = df.groupby(t.id_vars, sort=True)[idx].agg(["min", "max"]).reset_index()
    counts = ((rng["max"] - rng["min"]) // step + 1).to_numpy()
    grid = rng.loc[rng.index.repeat(counts), t.id_vars].reset_index(drop=True)
    offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    grid[idx] = np.repeat(rng["min"].to_numpy(), counts) + offsets * step
    out = grid.merge(df, on=t.key_vars, how="left", sort=False)
    out[idx] = from_minutes(out[idx])
    return _sorted(t.rebuild(out))


def replace_na(
    t: Table,
    vars: Union[str, Sequence[str]],
    type: Union[str, Sequence[str]] = "const",
    val=None,
    by: Optional[Sequence[str]] = None,
) -> Table:
    """Replace nulls per column by a constant or last observation carried forward.

    ``type`` and ``val`` are either scalars (applied to every column) or
    sequences aligned with ``vars``. locf works within ``by`` groups (the
    ``id_vars`` by default) ordered by index; leading nulls stay null.
    """
    vars = [vars] if isinstance(vars, str) else list(vars)
    types = [type] * len(vars) if isinstance(type, str) else list(type)
    vals = list(val) if isinstance(val, (list, tuple)) else [val] * len(vars)
    if len(types) != len(vars) or len(vals) != len(vars):
        raise LengthMismatch("vars, type and val must have equal lengths")
    by = list(by) if by is not None else list(getattr(t, "id_vars", []))
    if any(ty == "locf" for ty in types):
        t = _sorted(t)
    df = t.to_frame()
    for col, ty, v in zip(vars, types, vals):
        if col not in df:
            raise UnknownColumn(col)
        if ty == "const":
            df[col] = df[col].fillna(v)
        elif ty == "locf":
            df[col] = df.groupby(by, sort=False)[col].ffill() if by else df[col].ffill()
        else:
            raise ValueError(f"unknown replacement type {ty!r}")
    return t.rebuild(df)


def slice_until_event(t: TsTbl, flag_col: str) -> TsTbl:
    """Per group, keep rows up to and including the first true ``flag_col``."""
    if flag_col not in t:
        raise UnknownColumn(flag_col)
    t = _sorted(t)
    flag = t[flag_col].fillna(False).astype(bool)
    seen = flag.groupby([t[c] for c in t.id_vars], sort=False).cumsum() - flag
    return t.filter((seen == 0).to_numpy())


def _harmonize_interval(a: TsTbl, b: TsTbl) -> int:
    if a.interval == b.interval:
        return a.interval
    if a.interval % b.interval == 0:
        return b.interval
    if b.interval % a.interval == 0:
        return a.interval
    raise IntervalMismatch(
        f"cannot merge intervals {a.interval} and {b.interval} min without re-gridding"
    )


def merge_tables(a: IdTbl, b: IdTbl) -> IdTbl:
    """Join two tables on their keys.

    Two time series are outer-joined on (id_vars, index); an id_tbl joined
    with a ts_tbl has its columns repeated over every time point of the
    matching group; two id_tbls are outer-joined on id_vars.
    """
    if not (isinstance(a, IdTbl) and isinstance(b, IdTbl)):
        raise IncompatibleIds("both tables need id_vars")
    if list(a.id_vars) != list(b.id_vars):
        raise IncompatibleIds(f"id_vars differ: {a.id_vars} vs {b.id_vars}")
    units = {**a.units, **b.units}
    a_ts, b_ts = isinstance(a, TsTbl), isinstance(b, TsTbl)
    if a_ts and b_ts:
        interval = _harmonize_interval(a, b)
        if b.index_var != a.index_var:
            b = b.rename({b.index_var: a.index_var})
        keys = a.key_vars
        meta = {"id_vars": a.id_vars, "index_var": a.index_var, "interval": interval}
        how = "outer"
    elif a_ts or b_ts:
        ts = a if a_ts else b
        keys = list(a.id_vars)
        meta = ts.meta()
        how = "left" if a_ts else "right"
    else:
        keys = list(a.id_vars)
        meta = a.meta()
        how = "outer"
    clash = (set(a.columns) & set(b.columns)) - set(keys)
    if clash:
        raise TableError(f"value columns present in both tables: {sorted(clash)}")
    out = a.data.merge(b.data, on=keys, how=how, sort=False)
    order = keys + [c for c in a.columns + b.columns if c not in keys]
    res = validate_or_downcast(out[order], units=units, **meta)
    return _sorted(res)


def rbind(tables: Sequence[IdTbl]) -> Table:
    """Stack tables sharing the same metadata."""
    tables = list(tables)
    if not tables:
        raise TableError("nothing to stack")
    first = tables[0]
    data = pd.concat([t.data for t in tables], ignore_index=True)
    units = {}
    for t in tables:
        units.update(t.units)
    return validate_or_downcast(data, units=units, **first.meta())


# ---------------------------------------------------------------------------
# serialization


def write_table(t: Table, path) -> Path:
    """CSV plus a ``<path>.meta.json`` sidecar; durations written as minutes."""
    path = Path(path)
    df = t.to_frame()
    durations = [c for c in df.columns if is_duration(df[c])]
    for c in durations:
        df[c] = to_minutes(df[c])
    df = df.rename(columns={c: f"{c}_min" for c in durations})
    df.to_csv(path, index=False, lineterminator="\n")
    meta = {
        "class": t.kind,
        "id_vars": list(getattr(t, "id_vars", [])),
        "index_var": getattr(t, "index_var", None),
        "interval_mins": getattr(t, "interval", None),
        "units": dict(t.units),
        "durations": durations,
    }
    sidecar = path.with_name(path.name + ".meta.json")
    sidecar.write_text(json.dumps(meta, indent=2) + "\n")
    return sidecar


def read_table(path) -> Table:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".meta.json").read_text())
    df = pd.read_csv(path).convert_dtypes()
    for c in meta["durations"]:
        df[c] = from_minutes(df.pop(f"{c}_min"))
    return validate_or_downcast(
        df,
        id_vars=meta["id_vars"],
        index_var=meta["index_var"],
        interval=meta["interval_mins"],
        units=meta["units"],
    )
