"""Command-line entry point (``icukit`` / ``python -m icukit``).

Exit status: 0 on success, 1 for usage errors, 2 for data errors. Raw CSVs
for a source live in ``$ICU_DATA_PATH/<source>/`` and are imported next to
themselves, one directory per table.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

from . import concepts as cc
from .config import load_source_configs, validate_source
from .demo import generate
from .errors import IcuError, UnknownSource
from .query import Diagnostics
from .store import attach_source, data_dir, import_source, source_store_dir
from .tables import write_table

logger = logging.getLogger("icukit")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_interval(text: str) -> int:
    """``90``, ``90m``, ``1h`` or ``2H`` to minutes."""
    m = re.fullmatch(r"\s*(\d+)\s*([mMhH]?)\s*", str(text))
    if not m or int(m.group(1)) <= 0:
        raise UsageError(f"bad interval {text!r}; use e.g. 60m or 1h")
    n = int(m.group(1))
    return n * 60 if m.group(2).lower() == "h" else n


def _split(text: Optional[str]) -> list[str]:
    return [p.strip() for p in (text or "").split(",") if p.strip()]


def _sources_arg(args) -> list[str]:
    names = _split(args.src) or _split(os.environ.get("ICU_SRC_LOAD"))
    if not names:
        raise UsageError("no sources given (use --src or ICU_SRC_LOAD)")
    return names


def _descriptor(name: str):
    srcs = load_source_configs()
    if name not in srcs:
        raise UnknownSource(name)
    return srcs[name]


def _attach(name: str):
    return attach_source(_descriptor(name), source_store_dir(name))


def _emit(rows: list[dict], fmt: str, columns: Sequence[str]) -> None:
    if fmt == "json":
        print(json.dumps(rows, indent=2))
        return
    widths = {c: max([len(c)] + [len(str(r[c])) for r in rows]) for c in columns}
    print("  ".join(c.ljust(widths[c]) for c in columns).rstrip())
    for r in rows:
        print("  ".join(str(r[c]).ljust(widths[c]) for c in columns).rstrip())


# ---------------------------------------------------------------------------
# commands


def cmd_gen_demo(args) -> int:
    out = Path(args.out) if args.out else data_dir()
    m = generate(args.seed, args.patients, out)
    print(f"wrote demo_long and demo_wide ({len(m['stays'])} stays) to {out}")
    return EXIT_OK


def cmd_import(args) -> int:
    for name in _sources_arg(args):
        desc = _descriptor(name)
        root = source_store_dir(name)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            manifests = import_source(desc, root, root, chunk_rows=args.chunk_rows)
        for w in caught:
            print(f"warning: {name}: {w.message}", file=sys.stderr)
        for t, m in manifests.items():
            print(f"{name}.{t}: {m.total_rows} rows in {len(m.partitions)} partition(s)")
    return EXIT_OK


def cmd_validate(args) -> int:
    status = EXIT_OK
    for name in _sources_arg(args):
        desc = _descriptor(name)
        for w in validate_source(desc):
            print(f"warning: {name}: {w}", file=sys.stderr)
        env = attach_source(desc, source_store_dir(name), refresh=True)
        for t, h in env.tables.items():
            exp = h.desc.expected_rows
            got = h.manifest.total_rows
            if exp is not None and exp != got:
                print(f"{name}.{t}: expected {exp} rows, found {got}", file=sys.stderr)
                status = EXIT_DATA
        print(f"{name}: {len(env.tables)} tables ok" if status == EXIT_OK else f"{name}: problems found")
    return status


def cmd_concepts(args) -> int:
    srcs = _split(args.src) or None
    d = cc.load_dictionary(srcs)
    if args.action == "list":
        rows = [
            {"name": c.name, "class": c.cls, "target": c.target, "unit": c.units[0] if c.units else ""}
            for c in d.values()
        ]
        _emit(rows, args.format, ["name", "class", "target", "unit"])
    else:
        table = cc.explain_dictionary(d).fillna("")
        _emit(table.to_dict("records"), args.format, list(table.columns))
    return EXIT_OK


def cmd_availability(args) -> int:
    srcs = _sources_arg(args)
    avail = cc.concept_availability(cc.load_dictionary(), srcs)
    rows = [{"concept": n, **{s: bool(avail.loc[n, s]) for s in srcs}} for n in avail.index]
    _emit(rows, args.format, ["concept", *srcs])
    return EXIT_OK


def _read_ids(path: str) -> list[int]:
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip().split(",")[0]
        if line and not line.startswith("#"):
            try:
                out.append(int(line))
            except ValueError:
                if out:
                    raise UsageError(f"{path}: bad id {line!r}") from None
                # a leading header line
    return out


def cmd_load(args) -> int:
    names = _split(args.concepts)
    if not names:
        raise UsageError("--concepts is empty")
    srcs = _sources_arg(args)
    envs = [_attach(s) for s in srcs]
    diag = Diagnostics()
    ids = _read_ids(args.ids) if args.ids else None
    res = cc.load_concepts(
        names,
        envs,
        interval=parse_interval(args.interval),
        patient_ids=ids,
        keep_components=args.keep_components,
        diag=diag,
    )
    write_table(res, args.out)
    for msg in diag.messages():
        print(f"diagnostic: {msg}", file=sys.stderr)
    print(f"wrote {len(res)} rows to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="icukit", description="Harmonized ICU data extraction.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-demo", help="write the synthetic demo sources")
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--patients", type=int, default=20)
    g.add_argument("--out", help="output directory (default: ICU_DATA_PATH)")
    g.set_defaults(fn=cmd_gen_demo)

    i = sub.add_parser("import", help="convert raw CSVs into the columnar store")
    i.add_argument("--src")
    i.add_argument("--chunk-rows", type=int, default=100_000)
    i.set_defaults(fn=cmd_import)

    v = sub.add_parser("validate", help="check configuration and imported tables")
    v.add_argument("--src")
    v.set_defaults(fn=cmd_validate)

    c = sub.add_parser("concepts", help="list or explain dictionary concepts")
    c.add_argument("action", choices=["list", "explain"])
    c.add_argument("--src")
    c.add_argument("--format", choices=["text", "json"], default="text")
    c.set_defaults(fn=cmd_concepts)

    a = sub.add_parser("availability", help="concept x source availability")
    a.add_argument("--src")
    a.add_argument("--format", choices=["text", "json"], default="text")
    a.set_defaults(fn=cmd_availability)

    ld = sub.add_parser("load", help="load concepts and write CSV plus metadata")
    ld.add_argument("--concepts", required=True)
    ld.add_argument("--src")
    ld.add_argument("--interval", default="60m")
    ld.add_argument("--ids", help="file with one finest-grain ID per line")
    ld.add_argument("--keep-components", action="store_true")
    ld.add_argument("--out", required=True)
    ld.set_defaults(fn=cmd_load)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"icukit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IcuError as exc:
        print(f"icukit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"icukit: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
