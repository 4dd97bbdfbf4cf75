"""Concept resolution: dictionary lookup, item loading and preprocessing.

A concept result has one value column named after the concept. Time series
are keyed by ``<label>_id`` (the label of the source's finest ID system,
``stay_id`` for the shipped sources) and ``time``; static concepts only by
the ID. When several sources are requested a leading ``source`` column is
added and the per-source tables are stacked.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping
from functools import reduce
from typing import Iterable, Optional, Sequence, Union

import pandas as pd

from .callbacks import ItemMeta, Registry, compile_callback
from .config import ConceptDef, Dictionary, ItemDef, load_dictionary_files
from .errors import ConceptUnavailable, UnknownConceptName, UnknownSubVar, UnknownTable
from .natives import ITEM_LOADERS, REC_CALLBACKS
from .query import Diagnostics, _record, as_ts, change_id, change_interval, choose_id, to_difftime
from .store import And, IsIn, Matches, NotNull, SourceEnv, get_source
from .tables import IdTbl, Table, TsTbl, aggregate, as_minutes, merge_tables, rbind, validate_or_downcast

logger = logging.getLogger(__name__)

INDEX = "time"
VALUE = "value"
UNIT = "unit"
CLASS_DTYPES = {"num": "Float64", "fct": "string", "lgl": "boolean"}


# ---------------------------------------------------------------------------
# dictionary


def _source_name(s) -> str:
    return s if isinstance(s, str) else s.name


def load_dictionary(
    sources: Optional[Iterable] = None,
    names: Optional[Iterable[str]] = None,
    paths=None,
) -> Dictionary:
    """Concepts from every configuration directory, overlaid in order.

    With ``sources`` the result keeps concepts usable for at least one of
    them; with ``names`` it keeps exactly those concepts.
    """
    d = load_dictionary_files(paths)
    if names is not None:
        names = list(names)
        missing = [n for n in names if n not in d]
        if missing:
            raise UnknownConceptName(f"unknown concept(s): {', '.join(missing)}")
        d = d.subset(names)
    if sources is not None:
        srcs = [_source_name(s) for s in sources]
        avail = concept_availability(d, srcs)
        keep = [n for n in d if avail.loc[n].any()] if len(avail) else []
        d = d.subset(keep)
    return d


def explain_dictionary(d: Dictionary) -> pd.DataFrame:
    rows = [(c.name, c.category, c.description) for c in d.values()]
    return pd.DataFrame(rows, columns=["name", "category", "description"])


def _available(d: Mapping, name: str, source: str, seen: frozenset = frozenset()) -> bool:
    c = d.get(name)
    if c is None or name in seen:
        return False
    if c.cls == "rec":
        return bool(c.sub_concepts) and all(
            _available(d, s, source, seen | {name}) for s in c.sub_concepts
        )
    return bool(c.sources.get(source))


def concept_availability(d: Dictionary, sources: Iterable) -> pd.DataFrame:
    """Boolean concept x source matrix."""
    sources = [_source_name(s) for s in sources]
    data = {s: [_available(d, n, s) for n in d] for s in sources}
    return pd.DataFrame(data, index=pd.Index(list(d), name="concept"), columns=sources)


# ---------------------------------------------------------------------------
# items


def id_column(env) -> str:
    return f"{env.id_systems.finest.label}_id"


def _empty_item(id_col: str, ts: bool) -> pd.DataFrame:
    cols = {id_col: pd.array([], dtype="Int64")}
    if ts:
        cols[INDEX] = pd.Series([], dtype="timedelta64[ns]")
    cols[VALUE] = pd.array([], dtype="Float64")
    return pd.DataFrame(cols)


def _item_predicate(item: ItemDef, sub_var, val_var):
    if item.variant == "sel":
        return IsIn(sub_var, tuple(item.ids))
    if item.variant == "rgx":
        return Matches(sub_var, item.regex)
    return NotNull(val_var)


def load_item(
    item: ItemDef,
    source,
    interval=60,
    target: str = "ts_tbl",
    patient_ids: Optional[Iterable] = None,
    diag: Optional[Diagnostics] = None,
    registry: Optional[Registry] = None,
    concept: str = "",
    **kwargs,
) -> IdTbl:
    """Rows of one item keyed by the finest ID system of ``source``.

    The result has columns ``<finest id column>``, ``time`` (time series
    only), ``value`` and, when the table has a unit column, ``unit``.
    """
    env = get_source(source)
    fine = env.id_systems.finest.column
    ts = target == "ts_tbl"
    if item.variant == "fun":
        try:
            loader = ITEM_LOADERS[item.function]
        except KeyError:
            raise ConceptUnavailable(f"{env.name}: unknown item function {item.function!r}") from None
        t = loader(env, item, interval=interval, target=target, diag=diag, **kwargs)
        return _restrict(t, fine, patient_ids)
    if item.table not in env:
        raise UnknownTable(f"{env.name}: concept {concept!r} refers to unknown table {item.table!r}")
    h = env[item.table]
    d = h.defaults
    val_var = item.val_var or d.val_var
    unit_var = item.unit_var or d.unit_var
    index_var = (item.index_var or d.index_var) if ts else None
    sub_var = item.sub_var
    if item.variant in ("sel", "rgx"):
        if not sub_var or sub_var not in h.columns:
            raise UnknownSubVar(f"{env.name}.{h.name}: sub_var {sub_var!r} not available")
    if not val_var:
        raise UnknownSubVar(f"{env.name}.{h.name}: no val_var for concept {concept!r}")
    if unit_var and unit_var not in h.columns:
        unit_var = None
    id_col = choose_id(env, h)
    pred = _item_predicate(item, sub_var, val_var)
    if patient_ids is not None and id_col == fine:
        pred = And((pred, IsIn(id_col, tuple(patient_ids))))
    cols = list(dict.fromkeys(c for c in (id_col, index_var, val_var, unit_var) if c))
    raw = h.scan(pred, cols)
    df = pd.DataFrame({id_col: raw[id_col]})
    if index_var:
        df[index_var] = raw[index_var]
    df[VALUE] = raw[val_var]
    if unit_var:
        df[UNIT] = raw[unit_var].astype("string")
    if item.callback:
        cb = compile_callback(item.callback, registry)
        df = cb(df, ItemMeta(VALUE, UNIT if unit_var else None, index_var, (id_col,)))
    dropped = int(df[VALUE].isna().sum())
    df = df[df[VALUE].notna().to_numpy(bool)]
    if index_var:
        df = to_difftime(df, env, h, id_col, [index_var], diag)
        if index_var != INDEX:
            df = df.rename(columns={index_var: INDEX})
    _record(diag, "null_values", dropped, concept=concept, table=h.name)
    t = IdTbl(df, [id_col])
    if ts:
        if not index_var:
            raise ConceptUnavailable(f"{env.name}.{h.name}: no index column for concept {concept!r}")
        t = as_ts(t, env, INDEX, fine, interval, diag)
    else:
        t = change_id(t, env, fine, diag)
    return _restrict(t, fine, patient_ids)


def _restrict(t: IdTbl, col: str, ids) -> IdTbl:
    if ids is None:
        return t
    return t.filter(t[col].isin(list(ids)).to_numpy(bool))


# ---------------------------------------------------------------------------
# class preprocessing


def _preprocess(c: ConceptDef, df: pd.DataFrame, diag, source: str) -> pd.DataFrame:
    if c.cls == "num":
        if UNIT in df and c.units:
            u = df[UNIT]
            bad = u.notna() & ~u.isin(list(c.units))
            if bad.any():
                seen = sorted(set(u[bad].astype(str)))
                _record(diag, "unit_mismatch", int(bad.sum()), concept=c.name, source=source,
                        units=seen, expected=list(c.units))
        v = pd.to_numeric(df[VALUE], errors="coerce").astype("Float64")
        keep = v.notna()
        if c.min is not None:
            keep &= v >= c.min
        if c.max is not None:
            keep &= v <= c.max
        keep = keep.fillna(False).to_numpy(bool)
        _record(diag, "out_of_range", int((~keep & v.notna().to_numpy(bool)).sum()),
                concept=c.name, source=source)
        df = df.assign(**{VALUE: v})[keep]
    elif c.cls == "fct":
        v = df[VALUE].astype("string")
        keep = v.notna()
        if c.levels:
            keep &= v.isin([str(x) for x in c.levels])
        keep = keep.fillna(False).to_numpy(bool)
        _record(diag, "unknown_level", int((~keep).sum()), concept=c.name, source=source)
        df = df.assign(**{VALUE: v})[keep]
    elif c.cls == "lgl":
        df = df.assign(**{VALUE: df[VALUE].astype("boolean")})
    return df.drop(columns=[UNIT], errors="ignore")


# ---------------------------------------------------------------------------
# loading


class _Loader:
    """State for one ``load_concepts`` call: memoizes (concept, source) results."""

    def __init__(self, d, interval, aggregate, patient_ids, diag, registry, extra):
        self.d = d
        self.interval = as_minutes(interval)
        self.aggregate = aggregate
        self.patient_ids = patient_ids
        self.diag = diag
        self.registry = registry
        self.extra = extra
        self.memo: dict = {}

    def ids_for(self, source: str):
        ids = self.patient_ids
        if isinstance(ids, Mapping):
            return ids.get(source)
        return ids

    def concept(self, name: str, env) -> IdTbl:
        key = (name, env.name)
        if key not in self.memo:
            self.memo[key] = self._load(name, env)
        return self.memo[key]

    def _load(self, name: str, env) -> IdTbl:
        if name not in self.d:
            raise UnknownConceptName(f"unknown concept {name!r}")
        c = self.d[name]
        if not _available(self.d, name, env.name):
            raise ConceptUnavailable(f"concept {name!r} is not available for source {env.name!r}")
        if c.cls == "rec":
            return self._rec(c, env)
        fine = env.id_systems.finest.column
        ts = c.target == "ts_tbl"
        frames = []
        for item in c.sources[env.name]:
            t = load_item(item, env, self.interval, c.target, self.ids_for(env.name), self.diag,
                          self.registry, c.name, **self.extra)
            frames.append(t.data)
        df = pd.concat(frames, ignore_index=True) if frames else _empty_item(fine, ts)
        df = _preprocess(c, df, self.diag, env.name)
        if not ts:
            df = df.drop(columns=[INDEX], errors="ignore")
        t = validate_or_downcast(df, [fine], INDEX if ts else None, self.interval if ts else None)
        fun = self.aggregate.get(c.name) if isinstance(self.aggregate, Mapping) else self.aggregate
        t = aggregate(t, fun or c.aggregate)
        out = t.rename({VALUE: c.name, fine: id_column(env)})
        if c.units:
            out.units = {c.name: c.units[0]}
        return out

    def _rec(self, c: ConceptDef, env) -> IdTbl:
        try:
            cb = REC_CALLBACKS[c.callback]
        except KeyError:
            raise ConceptUnavailable(f"concept {c.name!r}: unknown callback {c.callback!r}") from None
        subs = {s: self.concept(s, env) for s in c.sub_concepts}
        out = cb(subs, name=c.name, diag=self.diag, interval=self.interval, **self.extra)
        if c.units:
            out.units = {**out.units, c.name: c.units[0]}
        return out


def _merge_concepts(tables: list) -> IdTbl:
    """Outer-join the time series, then broadcast static tables over every time point."""
    ts = [t for t in tables if isinstance(t, TsTbl)]
    static = [t for t in tables if not isinstance(t, TsTbl)]
    merged = reduce(merge_tables, ts + static)
    order = merged.key_vars + [c for t in tables for c in t.value_vars]
    return merged.rebuild(merged.data[order])


def _as_list(x) -> list:
    if x is None:
        return []
    if isinstance(x, str):
        return [p.strip() for p in x.split(",") if p.strip()]
    return list(x)


def load_concepts(
    names: Union[str, Sequence[str]],
    sources,
    interval=60,
    aggregate: Union[None, str, Mapping[str, str]] = None,
    patient_ids=None,
    keep_components: bool = False,
    dictionary: Optional[Dictionary] = None,
    diag: Optional[Diagnostics] = None,
    registry: Optional[Registry] = None,
    **extra,
) -> Table:
    """Load and merge concepts from one or more attached sources.

    Extra keyword arguments are forwarded unchanged to every recursive
    concept callback and function item, as is ``keep_components``.
    ``patient_ids`` restricts the finest-grain IDs, either for all sources
    or per source name via a mapping.
    """
    names = _as_list(names)
    single = isinstance(sources, SourceEnv) or (isinstance(sources, str) and "," not in sources)
    envs = [get_source(s) for s in ([sources] if single else _as_list(sources))]
    if not names or not envs:
        raise ValueError("need at least one concept and one source")
    d = dictionary if dictionary is not None else load_dictionary_files()
    missing = [n for n in names if n not in d]
    if missing:
        raise UnknownConceptName(f"unknown concept(s): {', '.join(missing)}")
    loader = _Loader(d, interval, aggregate, patient_ids, diag, registry,
                     {"keep_components": keep_components, **extra})
    per_source = []
    for env in envs:
        tables = [loader.concept(n, env) for n in names]
        per_source.append((env, _merge_concepts(tables)))
    if len(per_source) == 1:
        return per_source[0][1]
    stacked = []
    for env, t in per_source:
        df = t.to_frame()
        df.insert(0, "source", pd.array([env.name] * len(df), dtype="string"))
        stacked.append(t.rebuild(df, id_vars=["source", *t.id_vars]))
    return rbind(stacked)
