"""Native functions referenced by name from concept dictionaries.

Two registries live here: item loaders for ``fun`` items, and callbacks for
recursive (``rec``) concepts. A rec callback receives the already loaded
sub-concept tables keyed by concept name, plus every extra argument that
was passed to ``load_concepts``.
"""

from __future__ import annotations

from functools import reduce
from typing import Callable, Optional

import numpy as np
import pandas as pd

from .query import Diagnostics, build_id_windows
from .tables import IdTbl, TsTbl, as_minutes, merge_tables, to_minutes, validate_or_downcast

ITEM_LOADERS: dict[str, Callable] = {}
REC_CALLBACKS: dict[str, Callable] = {}

MINUTES_PER_YEAR = 525960  # 365.25 days


def item_loader(name: str):
    def deco(fn):
        ITEM_LOADERS[name] = fn
        return fn

    return deco


def rec_callback(name: str):
    def deco(fn):
        REC_CALLBACKS[name] = fn
        return fn

    return deco


def age_years(minutes) -> list:
    """Age in years rounded to one decimal, from minutes since birth."""
    return [None if pd.isna(m) else round(int(m) / MINUTES_PER_YEAR, 1) for m in minutes]


@item_loader("stay_age")
def stay_age(env, item, **kwargs) -> IdTbl:
    """Age at the start of each finest-grain stay.

    Relies on the coarsest ID system's window starting at birth, so the
    finest window start (relative to that origin) is the age in minutes.
    """
    w = build_id_windows(env)
    col = w.finest.column
    data = pd.DataFrame(
        {col: w.data[col], "value": pd.array(age_years(w.data[f"{col}_start"]), dtype="Float64")}
    )
    return IdTbl(data, [col])


# ---------------------------------------------------------------------------
# SIRS


def _criterion(hit: pd.Series, present: pd.Series) -> pd.Series:
    hit = hit.fillna(False).astype(bool)
    out = pd.Series(pd.array(np.where(hit, 1, 0), dtype="Int64"), index=hit.index)
    return out.where(present.to_numpy(bool), pd.NA)


def sirs_callback(merged: TsTbl, keep_components: bool = False) -> TsTbl:
    """SIRS score per row of a merged table of temp, hr, resp, pco2 and wbc.

    Criteria (one point each): temperature < 36 or > 38 C; heart rate > 90;
    respiratory rate > 20 or PaCO2 < 32 mmHg; white cell count < 4 or > 12.
    A component is null when all of its inputs are missing; the score
    counts nulls as 0.
    """
    df = merged.to_frame()
    n = len(df)

    def col(name):
        if name in df:
            return df[name].astype("Float64")
        return pd.Series(pd.array([pd.NA] * n, dtype="Float64"), index=df.index)

    temp, hr, resp, pco2, wbc = (col(c) for c in ("temp", "hr", "resp", "pco2", "wbc"))
    comps = {
        "temp_comp": _criterion((temp < 36) | (temp > 38), temp.notna()),
        "hr_comp": _criterion(hr > 90, hr.notna()),
        "resp_comp": _criterion(
            (resp > 20).fillna(False) | (pco2 < 32).fillna(False), resp.notna() | pco2.notna()
        ),
        "wbc_comp": _criterion((wbc < 4) | (wbc > 12), wbc.notna()),
    }
    score = sum(c.fillna(0) for c in comps.values()).astype("Float64")
    out = df[merged.key_vars].copy()
    out["sirs"] = score
    if keep_components:
        for name, c in comps.items():
            out[name] = c
    return validate_or_downcast(out, **merged.meta())


@rec_callback("sirs_score")
def sirs_score(tables: dict, name: str = "sirs", keep_components: bool = False, **kwargs):
    merged = reduce(merge_tables, tables.values())
    res = sirs_callback(merged, keep_components=keep_components)
    return res.rename({"sirs": name}) if name != "sirs" else res


# ---------------------------------------------------------------------------
# PaO2/FiO2


def _locf_within(df: pd.DataFrame, by: list, idx: str, col: str, window: int) -> pd.Series:
    t = to_minutes(df[idx])
    seen_at = t.where(df[col].notna())
    last_val = df.groupby(by, sort=False)[col].ffill()
    last_at = seen_at.groupby([df[b] for b in by], sort=False).ffill()
    fresh = ((t - last_at) <= window).fillna(False).to_numpy(bool)
    return last_val.where(fresh)


def pafi_callback(
    pao2: TsTbl,
    fio2: TsTbl,
    match_win=120,
    diag: Optional[Diagnostics] = None,
    name: str = "pafi",
) -> TsTbl:
    """PaO2/FiO2 ratio with FiO2 in percent: ``100 * pao2 / fio2``.

    Both inputs are carried forward for at most ``match_win`` minutes within
    each group; time points where either side is still missing produce no
    row. Rows with FiO2 equal to zero are dropped and counted.
    """
    window = as_minutes(match_win)
    merged = merge_tables(pao2, fio2)
    df = merged.to_frame()
    by, idx = list(merged.id_vars), merged.index_var
    p = _locf_within(df, by, idx, "pao2", window).astype("Float64")
    f = _locf_within(df, by, idx, "fio2", window).astype("Float64")
    both = (p.notna() & f.notna()).to_numpy(bool)
    zero = both & (f == 0).fillna(False).to_numpy(bool)
    if zero.any() and diag is not None:
        diag.record("division_by_zero", int(zero.sum()), concept=name)
    keep = both & ~zero
    out = df.loc[keep, merged.key_vars].copy()
    out[name] = (100 * p[keep] / f[keep]).astype("Float64")
    return validate_or_downcast(out, **merged.meta())


@rec_callback("pafi_ratio")
def pafi_ratio(tables: dict, name: str = "pafi", match_win=120, diag=None, **kwargs):
    return pafi_callback(tables["pao2"], tables["fio2"], match_win=match_win, diag=diag, name=name)
