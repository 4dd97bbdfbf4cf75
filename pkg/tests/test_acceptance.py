"""Acceptance criteria, one test per criterion.

Every test prints a ``[PASS]``/``[FAIL]`` line (collected into the terminal
summary) and fails if its assertion or its runtime bound fails.
"""

import random
import statistics
import time
from contextlib import contextmanager

import numpy as np
import pandas as pd
import pytest

from _support import build_demo
from icukit.concepts import load_concepts, load_dictionary, load_item
from icukit.config import load_source_configs
from icukit.natives import sirs_callback
from icukit.query import Diagnostics, change_id, change_interval, load_id, load_ts
from icukit.store import And, Col, IsIn, ScanStats, import_table, store_checksum
from icukit.tables import IdTbl, TsTbl, aggregate, fill_gaps, from_minutes, mins, replace_na, to_minutes


@contextmanager
def criterion(report, n, title, limit):
    start = time.perf_counter()
    try:
        yield
    except BaseException:
        report(f"[FAIL] criterion {n}: {title} ({time.perf_counter() - start:.2f} s)")
        raise
    took = time.perf_counter() - start
    ok = took < limit
    report(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} ({took:.2f} s, limit {limit} s)")
    assert ok, f"criterion {n} took {took:.2f} s, limit {limit} s"


def _sorted_frame(t):
    df = t.to_frame()
    return df.sort_values(list(t.key_vars), kind="mergesort").reset_index(drop=True)


def test_c01_truncation(adm_env, report):
    with criterion(report, 1, "truncation to whole hours", 1.0):
        pred = Col("subject_id") > 44000
        cols = ["hadm_id", "admittime", "dischtime"]
        raw = load_id("admissions", adm_env, pred, cols, interval=1).sort()
        assert to_minutes(raw["dischtime"]).tolist() == [13846, 10455, 4193, 51857, 796, 1805, 14465]
        hourly = load_id("admissions", adm_env, pred, cols, interval=60).sort()
        assert (to_minutes(hourly["dischtime"]) // 60).tolist() == [230, 174, 69, 864, 13, 30, 241]
        neg = IdTbl(pd.DataFrame({"id": [1], "t": mins([-2745])}), "id")
        assert to_minutes(change_interval(neg, 60)["t"]).tolist() == [-45 * 60]


def test_c02_downcast(report):
    with criterion(report, 2, "off-grid shift downcasts to id_tbl", 1.0):
        t = TsTbl(pd.DataFrame({"stay_id": [1, 1, 2], "time": mins([0, 60, 120]), "hr": [80.0, 90.0, 70.0]}),
                  ["stay_id"], "time", 60)
        shifted = t.assign(time=t["time"] + mins(30))
        assert type(shifted) is IdTbl
        assert shifted.id_vars == ["stay_id"]


def test_c03_sirs(report):
    with criterion(report, 3, "SIRS scores from component patterns", 1.0):
        # inputs chosen so each criterion evaluates to the requested component
        rows = [
            ({"temp": 37.0, "hr": 95.0, "resp": 22.0, "wbc": 13.0}, (0, 1, 1, 1), 3),
            ({"resp": 22.0, "wbc": 3.0}, (None, None, 1, 1), 2),
            ({"temp": 37.0, "hr": 60.0, "pco2": 30.0, "wbc": 13.0}, (0, 0, 1, 1), 2),
            ({"temp": 37.0, "hr": 60.0, "resp": 14.0, "wbc": 13.0}, (0, 0, 0, 1), 1),
        ]
        n = len(rows)
        df = pd.DataFrame({"stay_id": pd.array(range(n), dtype="Int64"), "time": mins([0] * n)})
        for c in ("temp", "hr", "resp", "pco2", "wbc"):
            df[c] = pd.array([r.get(c) for r, _, _ in rows], dtype="Float64")
        out = sirs_callback(TsTbl(df, ["stay_id"], "time", 60), keep_components=True).data
        comps = out[["temp_comp", "hr_comp", "resp_comp", "wbc_comp"]]
        for i, (_, pattern, score) in enumerate(rows):
            assert tuple(None if pd.isna(v) else int(v) for v in comps.iloc[i]) == pattern
            assert out["sirs"][i] == score


def test_c04_cross_source_equivalence(tmp_path, report):
    with criterion(report, 4, "demo_long and demo_wide give identical concepts", 30.0):
        d = build_demo(tmp_path, seed=42, n_patients=50)
        names = list(load_dictionary())
        assert len(names) == 16
        stays = {int(k) for k in d.manifest["stays"]}
        for name in names:
            a = _sorted_frame(load_concepts(name, d.long, interval=60))
            b = _sorted_frame(load_concepts(name, d.wide, interval=60))
            pd.testing.assert_frame_equal(a, b, check_exact=True, obj=name)
            if name in ("age", "sex", "hr"):
                assert set(a["stay_id"]) == stays


def test_c05_plausibility(demo, report):
    with criterion(report, 5, "out-of-range heart rates dropped, boundary values kept", 5.0):
        inj = demo.manifest["injected"]
        assert inj["hr_out_of_range"] and inj["hr_in_range"]
        for env in (demo.long, demo.wide):
            t = load_concepts("hr", env, interval=1).data
            got = dict(zip(zip(t["stay_id"], to_minutes(t["time"])), t["hr"]))
            assert not t["hr"].isin([v for _, _, v in inj["hr_out_of_range"]]).any()
            for stay, off, _ in inj["hr_out_of_range"]:
                assert (stay, off) not in got
            for stay, off, value in inj["hr_in_range"]:
                assert got[(stay, off)] == value


def test_c06_unit_conversion(demo, report):
    with criterion(report, 6, "Fahrenheit rows converted to Celsius", 5.0):
        rows = demo.manifest["injected"]["fahrenheit"]
        assert rows
        fahr_item = next(i for i in load_dictionary()["temp"].sources["demo_long"] if 223761 in i.ids)
        raw = load_item(fahr_item, demo.long, interval=1).data
        got = dict(zip(zip(raw["icustay_id"], to_minutes(raw["time"])), zip(raw["value"], raw["unit"])))
        for stay, off, f in ((s, o, f) for s, o, f, _ in rows):
            value, unit = got[(stay, off)]
            assert abs(value - (f - 32) * 5 / 9) <= 1e-9
            assert unit == "C"
        t = load_concepts("temp", demo.long, interval=1)
        assert t.units["temp"] == "C"
        final = dict(zip(zip(t["stay_id"], to_minutes(t["time"])), t["temp"]))
        for stay, off, f, _ in rows:
            assert abs(final[(stay, off)] - (f - 32) * 5 / 9) <= 1e-9


def _agg_oracle(groups):
    out = []
    for key, rows in groups:
        nums = [r[0] for r in rows if r[0] is not None]
        txts = [r[1] for r in rows if r[1] is not None]
        flags = [r[2] for r in rows if r[2] is not None]
        out.append((
            key,
            statistics.median(nums) if nums else None,
            txts[0] if txts else None,
            any(flags) if flags else None,
        ))
    return out


def test_c07_aggregation_defaults(report):
    with criterion(report, 7, "default aggregation matches brute force", 5.0):
        rng = random.Random(7)
        groups = []
        for g in range(1000):
            rows = []
            for _ in range(rng.randint(2, 6)):
                rows.append((
                    None if rng.random() < 0.15 else rng.choice([rng.uniform(-5, 5), float(rng.randint(0, 3))]),
                    None if rng.random() < 0.3 else rng.choice("abcxyz"),
                    None if rng.random() < 0.3 else rng.random() < 0.3,
                ))
            groups.append(((g % 97, g), rows))
        flat = [(k[0], k[1], *r) for k, rows in groups for r in rows]
        order = list(range(len(flat)))
        rng.shuffle(order)
        flat = [flat[i] for i in order]
        df = pd.DataFrame({
            "a": pd.array([r[0] for r in flat], dtype="Int64"),
            "b": pd.array([r[1] for r in flat], dtype="Int64"),
            "num": pd.array([r[2] for r in flat], dtype="Float64"),
            "txt": pd.array([r[3] for r in flat], dtype="string"),
            "flag": pd.array([r[4] for r in flat], dtype="boolean"),
        })
        # the oracle sees rows in the same (shuffled) order as the table
        by_key = {}
        for r in flat:
            by_key.setdefault((r[0], r[1]), []).append(r[2:])
        want = _agg_oracle(sorted(by_key.items()))
        out = aggregate(IdTbl(df, ["a", "b"])).data
        assert len(out) == 1000
        for (key, num, txt, flag), row in zip(want, out.itertuples(index=False)):
            assert (row.a, row.b) == key
            assert (pd.isna(row.num) and num is None) or row.num == num
            assert (pd.isna(row.txt) and txt is None) or row.txt == txt
            assert (pd.isna(row.flag) and flag is None) or bool(row.flag) == flag


def test_c08_chunked_import(tmp_path, report):
    with criterion(report, 8, "chunk size leaves the store unchanged", 60.0):
        raw = tmp_path / "raw"
        from icukit.demo import generate

        generate(11, 2, raw)
        descs = load_source_configs([raw / "config"])
        sums = {}
        for src in ("demo_long", "demo_wide"):
            for name, tdesc in descs[src].tables.items():
                n_rows = sum(1 for _ in open(raw / src / tdesc.files[0])) - 1
                for chunk in (1, 7, 64, max(n_rows, 1)):
                    peak = []
                    out = tmp_path / f"{src}-{chunk}"
                    import_table(tdesc, raw / src, out, chunk_rows=chunk, buffer_probe=peak.append)
                    assert max(peak) <= chunk
                    sums.setdefault((src, name), set()).add(store_checksum(out / name))
        assert all(len(s) == 1 for s in sums.values()), {k: len(v) for k, v in sums.items()}


def _bucket_predicates(rng, handle, n):
    m = handle.manifest
    col = m.partition_column
    brk = int(m.breaks[0])
    (lo0, hi0), (lo1, hi1) = ((int(p.min), int(p.max)) for p in m.partitions)
    values = np.unique(handle.scan(cols=[col])[col].to_numpy(dtype="int64"))
    preds = []
    for i in range(n):
        left = i % 2 == 0
        lo, hi = (lo0, hi0) if left else (lo1, hi1)
        pool = values[(values >= lo) & (values <= hi)]
        kind = rng.choice(["eq", "cmp", "isin", "range"])
        if kind == "eq":
            p = Col(col) == int(rng.choice(pool))
        elif kind == "cmp":
            p = (Col(col) <= rng.randint(lo, brk - 1)) if left else (Col(col) >= rng.randint(brk, hi))
        elif kind == "isin":
            p = IsIn(col, tuple(int(v) for v in rng.sample(list(pool), k=min(3, len(pool)))))
        else:
            a, b = sorted(rng.randint(lo, hi) for _ in range(2))
            p = And((Col(col) >= a, Col(col) <= b))
        preds.append(p)
    return preds


def test_c09_partition_pruning(demo, report):
    with criterion(report, 9, "single-bucket predicates read one partition", 10.0):
        rng = random.Random(9)
        for env, table in ((demo.long, "chartevents"), (demo.wide, "vitalperiodic")):
            h = env[table]
            assert len(h.manifest.partitions) == 2
            full = h.scan()
            for p in _bucket_predicates(rng, h, 50):
                stats = ScanStats()
                got = h.scan(p, stats=stats)
                assert stats.partitions_total == 2 and stats.partitions_read == 1, p
                want = full[p.mask(full)].reset_index(drop=True)
                pd.testing.assert_frame_equal(got.reset_index(drop=True), want)


def test_c10_id_round_trip(demo, report):
    with criterion(report, 10, "stay -> admission -> stay round trip and orphan counts", 10.0):
        stays = demo.manifest["stays"]
        t = load_ts("chartevents", demo.long, Col("itemid").isin([211, 220045]),
                    ["icustay_id", "valuenum"], id_var="icustay_id", interval=1)
        at = to_minutes(t[t.index_var])
        length = t["icustay_id"].map(lambda s: stays[str(s)]["length"])
        interior = t.filter(((at > 0) & (at < length)).to_numpy(bool))
        assert len(interior) > 0
        diag = Diagnostics()
        back = change_id(change_id(interior, demo.long, "hadm_id", diag), demo.long, "icustay_id", diag)
        pd.testing.assert_frame_equal(_sorted_frame(back), _sorted_frame(interior))
        assert diag.count("orphan_rows") == 0

        diag = Diagnostics()
        glu = load_ts("labevents", demo.long, Col("itemid") == 50931, ["hadm_id", "valuenum"],
                      id_var="icustay_id", interval=1, diag=diag)
        assert diag.count("orphan_rows") == demo.manifest["orphans"]["count"]
        want = sorted((int(k), off) for k, st in stays.items() for off, _ in st["series"]["glu"])
        assert sorted(zip(glu["icustay_id"], to_minutes(glu[glu.index_var]))) == want


def _locf_oracle(values):
    out, last = [], None
    for v in values:
        last = v if v is not None else last
        out.append(last)
    return out


def test_c11_fill_gaps_locf(report):
    with criterion(report, 11, "fill_gaps grids and locf match linear scans", 5.0):
        rng = random.Random(11)
        step = 30
        rows, expect_grid, expect_vals = [], {}, {}
        for g in range(500):
            k = rng.randint(1, 12)
            slots = sorted(rng.sample(range(-20, 60), k))
            vals = {s: (None if rng.random() < 0.3 else rng.uniform(0, 100)) for s in slots}
            rows += [(g, s * step, vals[s]) for s in slots]
            grid = list(range(slots[0], slots[-1] + 1))
            expect_grid[g] = [s * step for s in grid]
            expect_vals[g] = _locf_oracle([vals.get(s) for s in grid])
        rng.shuffle(rows)
        t = TsTbl(pd.DataFrame({
            "id": pd.array([r[0] for r in rows], dtype="Int64"),
            "time": from_minutes(pd.Series([r[1] for r in rows])),
            "x": pd.array([r[2] for r in rows], dtype="Float64"),
        }), ["id"], "time", step)
        filled = replace_na(fill_gaps(t), "x", "locf")
        df = filled.data
        for g, part in df.groupby("id", sort=True):
            assert to_minutes(part["time"]).tolist() == expect_grid[g]
            got = [None if pd.isna(v) else float(v) for v in part["x"]]
            assert got == expect_vals[g]


def test_c12_broadcast_merge(demo, report):
    with criterion(report, 12, "static age repeated over every glucose time point", 5.0):
        t = load_concepts(["age", "glu"], demo.long)
        glu = load_concepts("glu", demo.long)
        assert isinstance(t, TsTbl)
        assert len(t) == len(glu)
        per_stay = t.data.groupby("stay_id")["age"].agg(["nunique", "count", "size"])
        assert (per_stay["nunique"] == 1).all() and (per_stay["count"] == per_stay["size"]).all()
        ages = {int(k): v["age"] for k, v in demo.manifest["stays"].items()}
        assert all(a == ages[s] for s, a in zip(t["stay_id"], t["age"]))
