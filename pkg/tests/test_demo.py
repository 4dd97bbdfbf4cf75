import hashlib

import pandas as pd
import pytest

from _support import build_demo
from icukit.concepts import concept_availability, load_concepts, load_dictionary
from icukit.demo import HR_OUT_OF_RANGE, build_ground_truth, generate
from icukit.tables import to_minutes


def _digest(root):
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


class TestGenerator:
    def test_deterministic(self, tmp_path):
        generate(7, 3, tmp_path / "a")
        generate(7, 3, tmp_path / "b")
        generate(8, 3, tmp_path / "c")
        assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
        assert _digest(tmp_path / "a") != _digest(tmp_path / "c")

    def test_needs_a_patient(self):
        with pytest.raises(ValueError):
            build_ground_truth(1, 0)

    def test_injections_recorded(self, demo):
        inj = demo.manifest["injected"]
        assert sorted(v for _, _, v in inj["hr_out_of_range"]) == sorted(HR_OUT_OF_RANGE)
        assert sorted(v for _, _, v in inj["hr_in_range"]) == [0.0, 300.0]
        assert len(inj["fahrenheit"]) > 0

    def test_twins_share_stays(self, demo):
        long_ids = set(demo.long["icustays"].scan(cols=["icustay_id"])["icustay_id"])
        wide_ids = set(demo.wide["patient"].scan(cols=["patientunitstayid"])["patientunitstayid"])
        assert long_ids == wide_ids == {int(k) for k in demo.manifest["stays"]}


class TestPipeline:
    def test_single_patient(self, tmp_path):
        d = build_demo(tmp_path, seed=3, n_patients=1)
        for env in (d.long, d.wide):
            t = load_concepts(["hr", "age"], env)
            assert set(t["stay_id"]) == {int(k) for k in d.manifest["stays"]}

    def test_everything_available(self, demo):
        a = concept_availability(load_dictionary(), [demo.long, demo.wide])
        assert a.all().all()

    @pytest.mark.parametrize("concept", ["hr", "resp", "glu", "alb"])
    def test_series_recovered_at_one_minute(self, demo, concept):
        bad = {(s, o) for s, o, _ in demo.manifest["injected"]["hr_out_of_range"]} if concept == "hr" else set()
        want = sorted(
            (int(k), off, float(v))
            for k, st in demo.manifest["stays"].items()
            for off, v in st["series"].get(concept, [])
            if (int(k), off) not in bad
        )
        for env in (demo.long, demo.wide):
            t = load_concepts(concept, env, interval=1)
            got = sorted(zip(t["stay_id"].astype(int), to_minutes(t["time"]).astype(int), t[concept].astype(float)))
            assert got == want

    def test_temperature_in_celsius(self, demo):
        want = {(s, o): c for s, o, _, c in demo.manifest["injected"]["fahrenheit"]}
        t = load_concepts("temp", demo.long, interval=1).data
        t = t.assign(key=list(zip(t["stay_id"], to_minutes(t["time"]))))
        got = dict(zip(t["key"], t["temp"]))
        assert all(abs(got[k] - c) <= 1e-9 for k, c in want.items())
