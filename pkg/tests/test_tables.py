import random

import numpy as np
import pandas as pd
import pytest

from icukit.errors import IncompatibleIds, LengthMismatch, TableError
from icukit.tables import (
    IdTbl,
    Table,
    TsTbl,
    aggregate,
    fill_gaps,
    hours,
    merge_tables,
    mins,
    rbind,
    read_table,
    replace_na,
    slice_until_event,
    validate_or_downcast,
    write_table,
)


def ts(ids, times, values, interval=60, name="x"):
    return TsTbl(
        pd.DataFrame({"id": pd.array(ids, dtype="Int64"), "time": mins(times), name: pd.array(values, dtype="Float64")}),
        ["id"], "time", interval,
    )


class TestClasses:
    def test_ts_requires_grid(self):
        with pytest.raises(TableError):
            ts([1], [30], [1.0])

    def test_shift_off_grid_downcasts(self):
        t = ts([1, 1], [0, 60], [1.0, 2.0])
        shifted = t.assign(time=t["time"] + mins(30))
        assert type(shifted) is IdTbl and shifted.id_vars == ["id"]

    def test_drop_id_downcasts_to_table(self):
        t = ts([1], [0], [1.0])
        assert type(t.drop("id")) is Table

    def test_drop_index_gives_id_tbl(self):
        assert type(ts([1], [0], [1.0]).drop("time")) is IdTbl

    def test_rename_follows_metadata(self):
        t = ts([1], [0], [1.0]).rename({"id": "stay", "time": "t"})
        assert isinstance(t, TsTbl) and t.id_vars == ["stay"] and t.index_var == "t"

    def test_key_columns_first(self):
        t = IdTbl(pd.DataFrame({"v": [1], "id": [2]}), "id")
        assert t.columns == ["id", "v"]

    def test_meta_round_trip(self):
        t = ts([1, 2], [0, 120], [1.0, 2.0])
        assert validate_or_downcast(t.data, **t.meta()) == t

    def test_hours_and_mins(self):
        assert hours(2) == mins(120)


class TestAggregate:
    def test_median_first_any(self):
        df = pd.DataFrame({
            "id": [1, 1, 1, 2],
            "num": pd.array([1.0, 3.0, 10.0, None], dtype="Float64"),
            "txt": pd.array(["a", "b", "c", "d"], dtype="string"),
            "flag": pd.array([False, True, None, False], dtype="boolean"),
        })
        out = aggregate(IdTbl(df, "id")).data
        assert out["num"].tolist()[0] == 3.0 and pd.isna(out["num"][1])
        assert out["txt"].tolist() == ["a", "d"]
        assert out["flag"].tolist() == [True, False]

    def test_explicit_function(self):
        t = ts([1, 1], [0, 0], [2.0, 5.0])
        assert aggregate(t, "max").data["x"].tolist() == [5.0]
        assert aggregate(t, {"x": "min"}).data["x"].tolist() == [2.0]

    def test_keys_unique_after(self):
        rng = random.Random(1)
        ids = [rng.randint(1, 5) for _ in range(200)]
        times = [60 * rng.randint(0, 10) for _ in range(200)]
        out = aggregate(ts(ids, times, [rng.random() for _ in range(200)]))
        assert not out.data.duplicated(out.key_vars).any()

    def test_min_median_max_order(self):
        rng = random.Random(2)
        t = ts([1] * 50, [0] * 50, [rng.gauss(0, 1) for _ in range(50)])
        lo, mid, hi = (aggregate(t, f).data["x"][0] for f in ("min", "median", "max"))
        assert lo <= mid <= hi

    def test_empty(self):
        assert len(aggregate(ts([], [], []))) == 0


class TestFillGaps:
    def test_grid(self):
        out = fill_gaps(ts([1, 1, 2], [0, 180, 60], [1.0, 2.0, 3.0]))
        assert out["time"].tolist() == list(mins([0, 60, 120, 180, 60]))
        assert out["x"].isna().tolist() == [False, True, True, False, False]

    def test_needs_ts(self):
        with pytest.raises(TableError):
            fill_gaps(IdTbl(pd.DataFrame({"id": [1]}), "id"))


class TestReplaceNa:
    def test_locf_within_groups(self):
        t = ts([1, 1, 1, 2, 2], [0, 60, 120, 0, 60], [None, 1.0, None, None, 2.0])
        out = replace_na(t, "x", "locf")
        assert out["x"].tolist()[1:3] == [1.0, 1.0]
        assert pd.isna(out["x"][0]) and pd.isna(out["x"][3])

    def test_const(self):
        out = replace_na(ts([1, 1], [0, 60], [None, 2.0]), "x", "const", 0.0)
        assert out["x"].tolist() == [0.0, 2.0]

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            replace_na(ts([1], [0], [None]), ["x"], ["locf", "const"])


class TestMerge:
    def test_static_broadcast(self):
        a = ts([1, 1, 2], [0, 60, 0], [1.0, 2.0, 3.0])
        b = IdTbl(pd.DataFrame({"id": pd.array([1, 2], dtype="Int64"), "age": [40.0, 50.0]}), "id")
        for out in (merge_tables(a, b), merge_tables(b, a)):
            assert isinstance(out, TsTbl)
            assert out["age"].tolist() == [40.0, 40.0, 50.0]

    def test_ts_outer_join(self):
        out = merge_tables(ts([1], [0], [1.0]), ts([1], [60], [2.0], name="y"))
        assert len(out) == 2 and out.columns == ["id", "time", "x", "y"]

    def test_finer_interval_wins(self):
        out = merge_tables(ts([1], [0], [1.0], 60), ts([1], [30], [2.0], 30, "y"))
        assert out.interval == 30

    def test_id_mismatch(self):
        b = IdTbl(pd.DataFrame({"other": [1]}), "other")
        with pytest.raises(IncompatibleIds):
            merge_tables(ts([1], [0], [1.0]), b)

    def test_rbind(self):
        out = rbind([ts([1], [0], [1.0]), ts([2], [0], [2.0])])
        assert isinstance(out, TsTbl) and len(out) == 2


def test_slice_until_event():
    t = ts([1, 1, 1, 2], [0, 60, 120, 0], [0, 1, 0, 0], name="flag")
    t = t.assign(flag=t["flag"].astype("boolean"))
    out = slice_until_event(t, "flag")
    assert out["time"].tolist() == list(mins([0, 60, 0]))


def test_write_read_round_trip(tmp_path):
    t = ts([1, 2], [0, 60], [1.5, None])
    t.units = {"x": "mg"}
    write_table(t, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "id,time_min,x"
    back = read_table(tmp_path / "t.csv")
    assert isinstance(back, TsTbl) and back.units == {"x": "mg"}
    assert back["time"].tolist() == t["time"].tolist()
    assert back["x"].isna().tolist() == [False, True]
