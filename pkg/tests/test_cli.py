import json

import pytest

from icukit.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, UsageError, main, parse_interval
from icukit.concepts import load_concepts
from icukit.config import load_source_configs
from icukit.store import attach_source
from icukit.tables import write_table


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    mp = pytest.MonkeyPatch()
    mp.setenv("ICU_DATA_PATH", str(root))
    mp.delenv("ICU_SRC_LOAD", raising=False)
    mp.delenv("ICU_CONFIG_PATH", raising=False)
    assert main(["gen-demo", "--seed", "5", "--patients", "3"]) == EXIT_OK
    assert main(["import", "--src", "demo_long,demo_wide", "--chunk-rows", "50"]) == EXIT_OK
    yield root
    mp.undo()


class TestInterval:
    @pytest.mark.parametrize("text, m", [("60m", 60), ("1h", 60), ("2H", 120), ("15", 15)])
    def test_parse(self, text, m):
        assert parse_interval(text) == m

    @pytest.mark.parametrize("text", ["0m", "1d", "x", "-5"])
    def test_reject(self, text):
        with pytest.raises(UsageError):
            parse_interval(text)


class TestCommands:
    def test_import_creates_store(self, data_root):
        assert (data_root / "demo_long" / "chartevents" / "manifest.json").is_file()

    def test_validate(self, data_root, capsys):
        assert main(["validate", "--src", "demo_long"]) == EXIT_OK
        assert "demo_long: 7 tables ok" in capsys.readouterr().out

    def test_concepts_list_json(self, data_root, capsys):
        assert main(["concepts", "list", "--format", "json"]) == EXIT_OK
        rows = json.loads(capsys.readouterr().out)
        assert len(rows) == 16 and rows[0]["name"] == "abx"

    def test_explain_text(self, data_root, capsys):
        assert main(["concepts", "explain"]) == EXIT_OK
        assert capsys.readouterr().out.split()[:3] == ["name", "category", "description"]

    def test_availability_uses_env_default(self, data_root, capsys, monkeypatch):
        monkeypatch.setenv("ICU_SRC_LOAD", "demo_wide")
        assert main(["availability", "--format", "json"]) == EXIT_OK
        rows = json.loads(capsys.readouterr().out)
        assert all(r["demo_wide"] for r in rows) and "demo_long" not in rows[0]

    def test_load_matches_library(self, data_root, tmp_path, capsys):
        out = tmp_path / "cli.csv"
        argv = ["load", "--concepts", "hr,age", "--src", "demo_long,demo_wide",
                "--interval", "1h", "--out", str(out)]
        assert main(argv) == EXIT_OK
        descs = load_source_configs()
        envs = [attach_source(descs[n], data_root / n) for n in ("demo_long", "demo_wide")]
        lib = tmp_path / "lib.csv"
        write_table(load_concepts(["hr", "age"], envs, interval=60), lib)
        assert out.read_bytes() == lib.read_bytes()
        assert out.read_text().splitlines()[0] == "source,stay_id,time_min,hr,age"
        meta = json.loads((tmp_path / "cli.csv.meta.json").read_text())
        assert meta["interval_mins"] == 60 and meta["units"]["hr"] == "bpm"

    def test_load_with_ids(self, data_root, tmp_path):
        ids = tmp_path / "ids.txt"
        ids.write_text("stay_id\n200001\n")
        out = tmp_path / "o.csv"
        assert main(["load", "--concepts", "hr", "--src", "demo_long", "--ids", str(ids),
                     "--out", str(out)]) == EXIT_OK
        assert {line.split(",")[0] for line in out.read_text().splitlines()[1:]} == {"200001"}


class TestExitCodes:
    def test_unknown_source(self, data_root):
        assert main(["import", "--src", "missing"]) == EXIT_DATA

    def test_bad_interval(self, data_root, tmp_path):
        argv = ["load", "--concepts", "hr", "--src", "demo_long", "--interval", "soon",
                "--out", str(tmp_path / "x.csv")]
        assert main(argv) == EXIT_USAGE

    def test_unknown_concept(self, data_root, tmp_path):
        argv = ["load", "--concepts", "nope", "--src", "demo_long", "--out", str(tmp_path / "x.csv")]
        assert main(argv) == EXIT_DATA

    def test_no_sources(self, monkeypatch):
        monkeypatch.delenv("ICU_SRC_LOAD", raising=False)
        assert main(["availability"]) == EXIT_USAGE

    def test_bogus_command(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == EXIT_USAGE

    def test_module_entry(self, data_root):
        import subprocess
        import sys

        r = subprocess.run([sys.executable, "-m", "icukit", "concepts", "list"],
                           capture_output=True, text=True)
        assert r.returncode == 0 and "pafi" in r.stdout
