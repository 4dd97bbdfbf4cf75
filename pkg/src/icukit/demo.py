"""Deterministic synthetic twin sources.

``generate`` draws one ground truth (patients, admissions, ICU stays and the
measurements taken during them) and writes it twice: as ``demo_long``, an
EAV layout with three ID systems and absolute timestamps, and as
``demo_wide``, a single-ID layout with wide vitals and minute offsets. A
``manifest.json`` records the ground truth, including the values injected
to exercise plausibility filtering, unit conversion and orphaned events.

All times are whole minutes. Values are chosen so that both encodings
decode to the same floats (Fahrenheit and fraction encodings are used only
where the round trip is exact).
"""

from __future__ import annotations

import csv
import json
import random
import shutil
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Optional

from .config import DICTIONARY_FILE, SOURCES_FILE, builtin_config_dir
from .natives import age_years

EPOCH = datetime(2150, 1, 1)
TS_FMT = "%Y-%m-%d %H:%M:%S"
DATE_FMT = "%Y-%m-%d"
DAY = 1440
FIRST_SUBJECT = 10001
FIRST_HADM = 100001
FIRST_STAY = 200001

HR_IDS = (211, 220045)
RESP_IDS = (618, 220210)
TEMP_C_IDS = (676, 223762)
TEMP_F_IDS = (678, 223761)
FIO2_ID = 223835
WEIGHT_ID = 762
LABS = {
    # name: (itemid, wide label, long unit, wide unit, low, high)
    "glu": (50931, "glucose", "mg/dL", "mg/dL", 60.0, 300.0),
    "wbc": (51301, "WBC x 1000", "K/uL", "K/mcL", 2.0, 20.0),
    "alb": (50862, "albumin", "g/dL", "g/dL", 1.5, 5.0),
    "pao2": (50821, "paO2", "mm Hg", "mm Hg", 50.0, 300.0),
    "pco2": (50818, "paCO2", "mm Hg", "mm Hg", 20.0, 70.0),
}
ANTIBIOTICS = ("Vancomycin", "Piperacillin", "Ceftriaxone", "Meropenem", "Ciprofloxacin")
OTHER_DRUGS = ("Heparin", "Furosemide", "Insulin", "Pantoprazole")
HR_OUT_OF_RANGE = (350.0, -10.0)


@dataclass
class Stay:
    stay_id: int
    hadm_id: int
    subject_id: int
    intime: int  # absolute minutes since EPOCH
    length: int
    vitals: list = field(default_factory=list)  # (offset, temp, hr, resp)
    temp_fahrenheit: dict = field(default_factory=dict)  # offset -> F value
    labs: list = field(default_factory=list)  # (name, offset, value)
    fio2: list = field(default_factory=list)  # (offset, percent, as_fraction)
    drugs: list = field(default_factory=list)  # (date offset days, name, noon offset)
    weight: float = 0.0
    age: float = 0.0
    death: Optional[int] = None

    @property
    def outtime(self) -> int:
        return self.intime + self.length


@dataclass
class Admission:
    hadm_id: int
    subject_id: int
    admittime: int
    dischtime: int
    stays: list
    orphans: list = field(default_factory=list)  # absolute minutes of glucose rows
    deathtime: Optional[int] = None


@dataclass
class Patient:
    subject_id: int
    sex: str
    dob: int
    admissions: list
    dod: Optional[int] = None


def _ts(minutes: Optional[int]) -> str:
    return "" if minutes is None else (EPOCH + timedelta(minutes=minutes)).strftime(TS_FMT)


def _date(minutes: int) -> str:
    return (EPOCH + timedelta(minutes=minutes)).strftime(DATE_FMT)


def _num(x) -> str:
    return "" if x is None else repr(x)


def _celsius(rng: random.Random) -> tuple[float, Optional[float]]:
    """A 1-decimal Celsius value and, if it converts back exactly, its Fahrenheit form."""
    c = round(rng.uniform(35.0, 39.5), 1)
    f = c * 9 / 5 + 32
    return c, (f if (f - 32) * 5 / 9 == c else None)


def _draw_stay(rng, stay_id, hadm_id, subject_id, intime, dob) -> Stay:
    length = rng.randrange(DAY + 60, 3 * DAY)
    s = Stay(stay_id, hadm_id, subject_id, intime, length)
    s.age = age_years([intime - dob])[0]
    s.weight = round(rng.uniform(45.0, 130.0), 1)
    grid = range(0, length, 5)
    for off in sorted(rng.sample(list(grid), k=min(len(grid), rng.randint(20, 60)))):
        temp = hr = resp = None
        if rng.random() < 0.5:
            temp, f = _celsius(rng)
            if f is not None and rng.random() < 0.5:
                s.temp_fahrenheit[off] = f
        if rng.random() < 0.8:
            hr = float(rng.randint(50, 130))
        if rng.random() < 0.6:
            resp = float(rng.randint(8, 35))
        if temp is None and hr is None and resp is None:
            hr = float(rng.randint(50, 130))
        s.vitals.append((off, temp, hr, resp))
    for name, (_, _, _, _, lo, hi) in LABS.items():
        for _ in range(rng.randint(1, 4)):
            s.labs.append((name, rng.randrange(length), round(rng.uniform(lo, hi), 1)))
    for _ in range(rng.randint(1, 4)):
        pct = float(rng.randint(21, 100))
        s.fio2.append((rng.randrange(length), pct, (pct / 100) * 100 == pct and rng.random() < 0.7))
    # drugs start at noon of a calendar day that lies inside the stay
    first_noon = (intime - 720 + DAY - 1) // DAY * DAY + 720
    noons = list(range(first_noon, s.outtime, DAY))
    for _ in range(rng.randint(0, 3)):
        noon = rng.choice(noons)
        name = rng.choice(ANTIBIOTICS if rng.random() < 0.6 else OTHER_DRUGS)
        s.drugs.append((noon - 720, name, noon - intime))
    return s


def _inject_hr(rng, stays) -> tuple[list, list]:
    """Put out-of-range and boundary heart rates into random vitals rows."""
    out, inside = [], []
    targets = rng.sample(stays, k=min(len(stays), 4))
    for i, s in enumerate(targets):
        j = rng.randrange(len(s.vitals))
        off, temp, _, resp = s.vitals[j]
        value = HR_OUT_OF_RANGE[i % 2] if i < 2 else (0.0 if i == 2 else 300.0)
        s.vitals[j] = (off, temp, value, resp)
        (out if i < 2 else inside).append([s.stay_id, off, value])
    return out, inside


def build_ground_truth(seed: int, n_patients: int) -> tuple[list[Patient], dict]:
    """Patients plus the injected heart-rate values (stay, offset, value)."""
    if n_patients < 1:
        raise ValueError("n_patients must be at least 1")
    rng = random.Random(seed)
    patients = []
    hadm_id, stay_id = FIRST_HADM, FIRST_STAY
    for k in range(n_patients):
        subject_id = FIRST_SUBJECT + k
        t = rng.randrange(0, 365 * DAY)
        dob = t - rng.randrange(20 * 525960, 90 * 525960)
        admissions = []
        for _ in range(rng.randint(1, 2)):
            admit = t
            cursor = admit + rng.randrange(60, 720)
            stays = []
            orphans = [admit + rng.randrange(0, cursor - admit)]
            for n in range(rng.randint(1, 2)):
                if n:
                    gap = rng.randrange(240, 2 * DAY)
                    orphans.append(cursor + rng.randrange(gap))
                    cursor += gap
                s = _draw_stay(rng, stay_id, hadm_id, subject_id, cursor, dob)
                stays.append(s)
                stay_id += 1
                cursor = s.outtime
            disch = cursor + rng.randrange(60, 3 * DAY)
            admissions.append(Admission(hadm_id, subject_id, admit, disch, stays, orphans))
            hadm_id += 1
            t = disch + rng.randrange(30 * DAY, 200 * DAY)
        p = Patient(subject_id, rng.choice("FM"), dob, admissions)
        if rng.random() < 0.3:
            last_adm = admissions[-1]
            last = last_adm.stays[-1]
            last.death = last.length - 1
            last_adm.deathtime = last.outtime - 1
            last_adm.dischtime = last.outtime
            p.dod = last.outtime
        patients.append(p)
    all_stays = [s for p in patients for a in p.admissions for s in a.stays]
    hr_out, hr_in = _inject_hr(rng, all_stays)
    return patients, {"hr_out_of_range": hr_out, "hr_in_range": hr_in}


class _Writer:
    def __init__(self, root: Path):
        self.root = root
        root.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, header: list, rows) -> None:
        with open(self.root / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)


def _stays(patients):
    for p in patients:
        for a in p.admissions:
            for s in a.stays:
                yield p, a, s


def write_long(patients, root: Path, seed: int = 0) -> None:
    w = _Writer(root)
    w.write("patients", ["row_id", "subject_id", "gender", "dob", "dod"],
            [[i + 1, p.subject_id, p.sex, _ts(p.dob), _ts(p.dod)] for i, p in enumerate(patients)])
    adms = [a for p in patients for a in p.admissions]
    w.write("admissions",
            ["row_id", "subject_id", "hadm_id", "admittime", "dischtime", "deathtime", "admission_type"],
            [[i + 1, a.subject_id, a.hadm_id, _ts(a.admittime), _ts(a.dischtime), _ts(a.deathtime),
              "EMERGENCY"] for i, a in enumerate(adms)])
    stays = [s for _, _, s in _stays(patients)]
    w.write("icustays", ["row_id", "subject_id", "hadm_id", "icustay_id", "intime", "outtime"],
            [[i + 1, s.subject_id, s.hadm_id, s.stay_id, _ts(s.intime), _ts(s.outtime)]
             for i, s in enumerate(stays)])

    rng = random.Random(f"{seed}:long")
    chart = []
    for s in stays:
        at = lambda off: _ts(s.intime + off)  # noqa: E731
        chart.append([s.stay_id, WEIGHT_ID, at(0), _num(s.weight), "kg"])
        for off, temp, hr, resp in s.vitals:
            if temp is not None:
                if off in s.temp_fahrenheit:
                    chart.append([s.stay_id, rng.choice(TEMP_F_IDS), at(off),
                                  _num(s.temp_fahrenheit[off]), "?F"])
                else:
                    chart.append([s.stay_id, rng.choice(TEMP_C_IDS), at(off), _num(temp), "Deg. C"])
            if hr is not None:
                chart.append([s.stay_id, rng.choice(HR_IDS), at(off), _num(hr), "bpm"])
            if resp is not None:
                chart.append([s.stay_id, rng.choice(RESP_IDS), at(off), _num(resp), "insp/min"])
        for off, pct, frac in s.fio2:
            chart.append([s.stay_id, FIO2_ID, at(off), _num(pct / 100 if frac else pct), "%"])
    ids = {s.stay_id: s for s in stays}
    w.write("chartevents",
            ["ROW_ID", "SUBJECT_ID", "HADM_ID", "ICUSTAY_ID", "ITEMID", "CHARTTIME", "VALUENUM", "VALUEUOM"],
            [[i + 1, ids[r[0]].subject_id, ids[r[0]].hadm_id, *r] for i, r in enumerate(chart)])

    labs = []
    for p in patients:
        for a in p.admissions:
            for t in a.orphans:
                labs.append([p.subject_id, a.hadm_id, LABS["glu"][0], _ts(t), "100.0", "mg/dL"])
            for s in a.stays:
                for name, off, value in s.labs:
                    item, _, unit, _, _, _ = LABS[name]
                    labs.append([p.subject_id, a.hadm_id, item, _ts(s.intime + off), _num(value), unit])
    w.write("labevents", ["row_id", "subject_id", "hadm_id", "itemid", "charttime", "valuenum", "valueuom"],
            [[i + 1, *r] for i, r in enumerate(labs)])

    rx = []
    for _, a, s in _stays(patients):
        for day, name, _ in s.drugs:
            rx.append([s.subject_id, a.hadm_id, _date(day), _date(day + DAY), name])
    w.write("prescriptions", ["row_id", "subject_id", "hadm_id", "startdate", "enddate", "drug"],
            [[i + 1, *r] for i, r in enumerate(rx)])

    items = [(211, "Heart Rate"), (618, "Respiratory Rate"), (676, "Temperature C"),
             (678, "Temperature F"), (762, "Admit Wt"), (220045, "Heart Rate"),
             (220210, "Respiratory Rate"), (223761, "Temperature Fahrenheit"),
             (223762, "Temperature Celsius"), (223835, "Inspired O2 Fraction")]
    w.write("d_items", ["itemid", "label", "linksto"], [[i, lbl, "chartevents"] for i, lbl in items])


def write_wide(patients, root: Path) -> None:
    w = _Writer(root)
    prow, vrow, lrow, mrow = [], [], [], []
    for p, _, s in _stays(patients):
        status = "Expired" if s.death is not None else "Alive"
        prow.append([s.stay_id, f"{p.subject_id:03d}-{p.subject_id}", "Female" if p.sex == "F" else "Male",
                     _num(s.age), _num(s.weight), s.length, status, "" if s.death is None else s.death])
        for off, temp, hr, resp in s.vitals:
            vrow.append([s.stay_id, off, _num(temp), _num(hr), _num(resp)])
        for name, off, value in s.labs:
            _, label, _, unit, _, _ = LABS[name]
            lrow.append([s.stay_id, off, label, _num(value), unit])
        for off, pct, _ in s.fio2:
            lrow.append([s.stay_id, off, "FiO2", _num(pct), "%"])
        for _, name, off in s.drugs:
            mrow.append([s.stay_id, off, name])
    w.write("patient", ["patientunitstayid", "uniquepid", "gender", "age", "admissionweight",
                        "unitdischargeoffset", "unitdischargestatus", "expireoffset"], prow)
    w.write("vitalperiodic", ["vitalperiodicid", "patientunitstayid", "observationoffset", "temperature",
                              "heartrate", "respiration"], [[i + 1, *r] for i, r in enumerate(vrow)])
    w.write("lab", ["labid", "patientunitstayid", "labresultoffset", "labname", "labresult",
                    "labmeasurenamesystem"], [[i + 1, *r] for i, r in enumerate(lrow)])
    w.write("medication", ["medicationid", "patientunitstayid", "drugstartoffset", "drugname"],
            [[i + 1, *r] for i, r in enumerate(mrow)])


def manifest(patients, seed: int, injected: dict) -> dict:
    stays = {}
    fahrenheit = []
    for p, a, s in _stays(patients):
        series = {"temp": [], "hr": [], "resp": []}
        for off, temp, hr, resp in s.vitals:
            for k, v in (("temp", temp), ("hr", hr), ("resp", resp)):
                if v is not None:
                    series[k].append([off, v])
        for name, off, value in s.labs:
            series.setdefault(name, []).append([off, value])
        series["fio2"] = [[off, pct] for off, pct, _ in s.fio2]
        for off, f in sorted(s.temp_fahrenheit.items()):
            c = next(t for o, t, _, _ in s.vitals if o == off)
            fahrenheit.append([s.stay_id, off, f, c])
        stays[str(s.stay_id)] = {
            "subject_id": p.subject_id,
            "hadm_id": a.hadm_id,
            "intime": _ts(s.intime),
            "length": s.length,
            "age": s.age,
            "sex": "Female" if p.sex == "F" else "Male",
            "weight": s.weight,
            "death": s.death,
            "abx": sorted(off for _, name, off in s.drugs if name in ANTIBIOTICS),
            "series": series,
        }
    orphans = [[a.hadm_id, _ts(t)] for p in patients for a in p.admissions for t in a.orphans]
    return {
        "seed": seed,
        "n_patients": len(patients),
        "stays": stays,
        "injected": {**injected, "fahrenheit": fahrenheit},
        "orphans": {"glu": orphans, "count": len(orphans)},
    }


def generate(seed: int, n_patients: int, out_dir) -> dict:
    """Write both demo sources, their configuration and ``manifest.json`` under ``out_dir``.

    Returns the manifest. The same seed always produces byte-identical files.
    """
    out = Path(out_dir)
    patients, injected = build_ground_truth(seed, n_patients)
    write_long(patients, out / "demo_long", seed)
    write_wide(patients, out / "demo_wide")
    cfg = out / "config"
    cfg.mkdir(parents=True, exist_ok=True)
    for name in (SOURCES_FILE, DICTIONARY_FILE):
        shutil.copyfile(builtin_config_dir() / name, cfg / name)
    m = manifest(patients, seed, injected)
    (out / "manifest.json").write_text(json.dumps(m, indent=1, sort_keys=True) + "\n")
    return m
