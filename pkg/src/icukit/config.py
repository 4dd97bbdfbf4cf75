"""Source configurations and concept dictionaries.

Both dialects are JSON. Source configurations describe how a dataset is laid
out on disk (ID systems, per-table column defaults, raw column types and
partitioning); concept dictionaries describe how clinical concepts are
retrieved from each source. Parsed objects are frozen dataclasses and can be
shared freely between threads.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Optional

from .errors import (
    BadPartition,
    ConfigError,
    DanglingColumnRef,
    MalformedJson,
    MissingField,
    RecWithoutCallback,
    UnknownConceptClass,
)

logger = logging.getLogger(__name__)

VALUE_TYPES = ("int", "float", "string", "bool", "timestamp", "date")
NUMERIC_TYPES = ("int", "float", "timestamp", "date")
AGGREGATES = ("first", "last", "min", "max", "sum", "median", "any", "count")
CONCEPT_CLASSES = ("num", "fct", "lgl", "rec")
ITEM_VARIANTS = ("sel", "col", "rgx", "fun")
TARGETS = ("id_tbl", "ts_tbl")

SOURCES_FILE = "data-sources.json"
DICTIONARY_FILE = "concept-dict.json"

# readr-style spellings accepted alongside the short names
_TYPE_ALIASES = {
    "col_integer": "int",
    "integer": "int",
    "col_double": "float",
    "double": "float",
    "numeric": "float",
    "col_character": "string",
    "character": "string",
    "str": "string",
    "col_logical": "bool",
    "logical": "bool",
    "col_datetime": "timestamp",
    "datetime": "timestamp",
    "col_date": "date",
}

_DEFAULT_KEYS = ("id_var", "index_var", "time_vars", "unit_var", "val_var")


def _loads(text: str) -> Any:
    try:
        return json.loads(text)
    except (TypeError, ValueError) as exc:
        raise MalformedJson(str(exc)) from None


def _require(obj: Mapping, key: str, where: str) -> Any:
    if key not in obj:
        raise MissingField(key, where)
    return obj[key]


def _as_list(value) -> list:
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        return list(value)
    return [value]


# ---------------------------------------------------------------------------
# source configuration


@dataclass(frozen=True)
class IdSystem:
    label: str
    column: str
    position: int
    table: Optional[str] = None
    start: Optional[str] = None
    end: Optional[str] = None


@dataclass(frozen=True)
class IdSystemSpec:
    """Ordered ID systems, coarsest first (moving right is one-to-many)."""

    entries: tuple[IdSystem, ...]

    def __post_init__(self):
        if not self.entries:
            raise ConfigError("at least one ID system is required")
        positions = [e.position for e in self.entries]
        if any(b <= a for a, b in zip(positions, positions[1:])):
            raise ConfigError(f"ID system positions must strictly increase: {positions}")
        cols = [e.column for e in self.entries]
        if len(set(cols)) != len(cols):
            raise ConfigError(f"ID columns must be distinct: {cols}")

    def __iter__(self) -> Iterator[IdSystem]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> list[str]:
        return [e.label for e in self.entries]

    @property
    def columns(self) -> list[str]:
        return [e.column for e in self.entries]

    @property
    def finest(self) -> IdSystem:
        return self.entries[-1]

    @property
    def coarsest(self) -> IdSystem:
        return self.entries[0]

    def lookup(self, key: str) -> IdSystem:
        """Find a system by label or by column name."""
        for e in self.entries:
            if key in (e.label, e.column):
                return e
        raise KeyError(key)

    def rank(self, key: str) -> int:
        return self.entries.index(self.lookup(key))

    def __str__(self) -> str:
        return " < ".join(f"{e.column} ({e.label})" for e in self.entries)


@dataclass(frozen=True)
class ColumnDefaults:
    id_var: Optional[str] = None
    index_var: Optional[str] = None
    time_vars: tuple[str, ...] = ()
    unit_var: Optional[str] = None
    val_var: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def referenced(self) -> list[str]:
        cols = [self.id_var, self.index_var, self.unit_var, self.val_var, *self.time_vars]
        cols += [v for v in self.extra.values() if isinstance(v, str)]
        return [c for c in cols if c]


@dataclass(frozen=True)
class ColumnSpec:
    raw: str
    name: str
    type: str


@dataclass(frozen=True)
class Partitioning:
    column: str
    breaks: tuple[float, ...]

    def bucket(self, value) -> int:
        """Half-open bucketing: breaks[i-1] <= v < breaks[i]."""
        i = 0
        for b in self.breaks:
            if value < b:
                break
            i += 1
        return i

    @property
    def n_partitions(self) -> int:
        return len(self.breaks) + 1


@dataclass(frozen=True)
class TableDescriptor:
    name: str
    files: tuple[str, ...]
    columns: tuple[ColumnSpec, ...]
    expected_rows: Optional[int] = None
    partition: Optional[Partitioning] = None
    defaults: ColumnDefaults = field(default_factory=ColumnDefaults)

    def __post_init__(self):
        if not self.columns:
            raise ConfigError(f"table {self.name!r} declares no columns")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ConfigError(f"table {self.name!r} has duplicate column names")
        if self.expected_rows is not None and self.expected_rows < 0:
            raise ConfigError(f"table {self.name!r}: num_rows must be >= 0")
        if self.partition is not None:
            if self.partition.column not in names:
                raise DanglingColumnRef(
                    f"table {self.name!r}: partition column {self.partition.column!r} not declared"
                )
            if self.column_type(self.partition.column) not in NUMERIC_TYPES:
                raise BadPartition(
                    f"table {self.name!r}: partition column must be numeric"
                )

    @property
    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    def column_type(self, name: str) -> str:
        for c in self.columns:
            if c.name == name:
                return c.type
        raise KeyError(name)

    @property
    def n_partitions(self) -> int:
        return self.partition.n_partitions if self.partition else 1


@dataclass(frozen=True)
class SourceDescriptor:
    name: str
    prefixes: tuple[str, ...]
    id_systems: IdSystemSpec
    tables: dict[str, TableDescriptor]
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.name:
            raise ConfigError("source name must be nonempty")
        for key, tbl in self.tables.items():
            if key != tbl.name:
                raise ConfigError(f"table key {key!r} does not match descriptor {tbl.name!r}")

    def table(self, name: str) -> TableDescriptor:
        return self.tables[name]


def _parse_id_cfg(raw: Mapping, where: str) -> IdSystemSpec:
    if not isinstance(raw, Mapping) or not raw:
        raise MissingField("id_cfg", where)
    entries = []
    for label, spec in raw.items():
        w = f"{where}.id_cfg.{label}"
        entries.append(
            IdSystem(
                label=label,
                column=_require(spec, "id", w),
                position=int(_require(spec, "position", w)),
                table=spec.get("table"),
                start=spec.get("start"),
                end=spec.get("end"),
            )
        )
    entries.sort(key=lambda e: e.position)
    return IdSystemSpec(tuple(entries))


def _parse_defaults(raw: Mapping) -> ColumnDefaults:
    raw = dict(raw or {})
    time_vars = [str(v) for v in _as_list(raw.pop("time_vars", None))]
    index_var = raw.pop("index_var", None)
    if index_var and index_var not in time_vars:
        time_vars.insert(0, index_var)
    return ColumnDefaults(
        id_var=raw.pop("id_var", None),
        index_var=index_var,
        time_vars=tuple(time_vars),
        unit_var=raw.pop("unit_var", None),
        val_var=raw.pop("val_var", None),
        extra=raw,
    )


def _parse_table(name: str, raw: Mapping, defaults: ColumnDefaults, where: str) -> TableDescriptor:
    w = f"{where}.tbl_cfg.{name}"
    files = tuple(str(f) for f in _as_list(raw.get("files", f"{name}.csv")))
    cols = []
    for raw_name, spec in _require(raw, "cols", w).items():
        if isinstance(spec, str):
            spec = {"name": raw_name, "spec": spec}
        typ = str(_require(spec, "spec", f"{w}.cols.{raw_name}"))
        typ = _TYPE_ALIASES.get(typ, typ)
        if typ not in VALUE_TYPES:
            raise ConfigError(f"{w}: unknown column type {typ!r}")
        cols.append(ColumnSpec(raw=raw_name, name=spec.get("name", raw_name), type=typ))
    partition = None
    if raw.get("partitioning"):
        p = raw["partitioning"]
        breaks = tuple(float(b) for b in _as_list(_require(p, "breaks", f"{w}.partitioning")))
        if any(b <= a for a, b in zip(breaks, breaks[1:])):
            raise BadPartition(f"{w}: breakpoints must be strictly ascending, got {list(breaks)}")
        partition = Partitioning(str(_require(p, "col", f"{w}.partitioning")), breaks)
    num_rows = raw.get("num_rows")
    tbl = TableDescriptor(
        name=name,
        files=files,
        columns=tuple(cols),
        expected_rows=int(num_rows) if num_rows is not None else None,
        partition=partition,
        defaults=defaults,
    )
    names = set(tbl.column_names)
    for ref in defaults.referenced():
        if ref not in names:
            raise DanglingColumnRef(f"{w}: default column {ref!r} is not declared")
    return tbl


def source_from_dict(obj: Mapping) -> SourceDescriptor:
    if not isinstance(obj, Mapping):
        raise ConfigError("source configuration must be a JSON object")
    obj = dict(obj)
    name = _require(obj, "name", "source")
    where = f"source {name!r}"
    prefixes = tuple(_as_list(obj.pop("prefix", [name])))
    id_systems = _parse_id_cfg(_require(obj, "id_cfg", where), where)
    col_cfg = obj.pop("col_cfg", {}) or {}
    tbl_cfg = _require(obj, "tbl_cfg", where)
    for tname in col_cfg:
        if tname not in tbl_cfg:
            raise DanglingColumnRef(f"{where}: col_cfg names unknown table {tname!r}")
    tables = {
        tname: _parse_table(tname, traw, _parse_defaults(col_cfg.get(tname)), where)
        for tname, traw in tbl_cfg.items()
    }
    for key in ("name", "id_cfg", "tbl_cfg"):
        obj.pop(key, None)
    return SourceDescriptor(name, prefixes, id_systems, tables, extra=obj)


def parse_source_config(json_text: str) -> SourceDescriptor:
    """Parse a single source configuration object."""
    return source_from_dict(_loads(json_text))


def parse_source_configs(json_text: str) -> list[SourceDescriptor]:
    """Parse a file holding either one source object or a list of them."""
    obj = _loads(json_text)
    return [source_from_dict(o) for o in (obj if isinstance(obj, list) else [obj])]


def source_to_dict(desc: SourceDescriptor) -> dict:
    id_cfg = {}
    for e in desc.id_systems:
        d = {"id": e.column, "position": e.position}
        for k in ("table", "start", "end"):
            if getattr(e, k) is not None:
                d[k] = getattr(e, k)
        id_cfg[e.label] = d
    col_cfg, tbl_cfg = {}, {}
    for name, t in desc.tables.items():
        dflt = t.defaults
        c = {k: getattr(dflt, k) for k in _DEFAULT_KEYS if getattr(dflt, k)}
        if "time_vars" in c:
            c["time_vars"] = list(c["time_vars"])
        c.update(dflt.extra)
        if c:
            col_cfg[name] = c
        tc: dict[str, Any] = {
            "files": list(t.files),
            "cols": {c.raw: {"name": c.name, "spec": c.type} for c in t.columns},
        }
        if t.expected_rows is not None:
            tc["num_rows"] = t.expected_rows
        if t.partition is not None:
            tc["partitioning"] = {"col": t.partition.column, "breaks": list(t.partition.breaks)}
        tbl_cfg[name] = tc
    return {
        "name": desc.name,
        "prefix": list(desc.prefixes),
        **desc.extra,
        "id_cfg": id_cfg,
        "col_cfg": col_cfg,
        "tbl_cfg": tbl_cfg,
    }


def dump_source_config(desc: SourceDescriptor) -> str:
    return json.dumps(source_to_dict(desc), indent=2)


def validate_source(desc: SourceDescriptor) -> list[str]:
    """Walk every column reference; return warnings, raise on hard errors.

    Parsing already rejects dangling defaults, so what remains are ID-system
    checks: origin tables must exist and carry the ID/start/end columns.
    Default ``id_var`` columns outside the ID systems are allowed but
    reported.
    """
    warnings = []
    id_cols = set(desc.id_systems.columns)
    for e in desc.id_systems:
        if e.table is None:
            continue
        if e.table not in desc.tables:
            raise DanglingColumnRef(f"ID system {e.label!r} names unknown table {e.table!r}")
        names = desc.tables[e.table].column_names
        for col in (e.column, e.start, e.end):
            if col and col not in names:
                raise DanglingColumnRef(
                    f"ID system {e.label!r}: column {col!r} absent from table {e.table!r}"
                )
    for t in desc.tables.values():
        if t.defaults.id_var and t.defaults.id_var not in id_cols:
            warnings.append(
                f"table {t.name!r}: id_var {t.defaults.id_var!r} is not an ID-system column"
            )
    return warnings


# ---------------------------------------------------------------------------
# concept dictionary

_ITEM_KEYS = {
    "class", "table", "sub_var", "ids", "regex", "val_var", "unit_var",
    "index_var", "callback", "function", "args",
}
_CONCEPT_KEYS = {
    "class", "target", "aggregate", "description", "category", "unit", "min",
    "max", "levels", "concepts", "callback", "sources",
}


@dataclass(frozen=True)
class ItemDef:
    variant: str
    table: Optional[str] = None
    sub_var: Optional[str] = None
    ids: tuple = ()
    regex: Optional[str] = None
    val_var: Optional[str] = None
    unit_var: Optional[str] = None
    index_var: Optional[str] = None
    callback: Optional[str] = None
    function: Optional[str] = None
    args: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ConceptDef:
    name: str
    cls: str = "num"
    target: str = "ts_tbl"
    aggregate: Optional[str] = None
    description: Optional[str] = None
    category: Optional[str] = None
    units: tuple[str, ...] = ()
    min: Optional[float] = None
    max: Optional[float] = None
    levels: tuple = ()
    sub_concepts: tuple[str, ...] = ()
    callback: Optional[str] = None
    sources: dict[str, tuple[ItemDef, ...]] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _variant(raw: Mapping, where: str) -> str:
    cls = raw.get("class")
    if cls is None:
        if "ids" in raw:
            return "sel"
        if "regex" in raw:
            return "rgx"
        if "function" in raw:
            return "fun"
        return "col"
    cls = str(cls)
    for suffix in ("_itm",):
        if cls.endswith(suffix):
            cls = cls[: -len(suffix)]
    if cls == "sub":
        cls = "sel"
    if cls not in ITEM_VARIANTS:
        raise ConfigError(f"{where}: unknown item class {raw.get('class')!r}")
    return cls


def item_from_dict(raw: Mapping, where: str = "item") -> ItemDef:
    variant = _variant(raw, where)
    item = ItemDef(
        variant=variant,
        table=raw.get("table"),
        sub_var=raw.get("sub_var"),
        ids=tuple(_as_list(raw.get("ids"))),
        regex=raw.get("regex"),
        val_var=raw.get("val_var"),
        unit_var=raw.get("unit_var"),
        index_var=raw.get("index_var"),
        callback=raw.get("callback"),
        function=raw.get("function"),
        args=dict(raw.get("args") or {}),
        extra={k: v for k, v in raw.items() if k not in _ITEM_KEYS},
    )
    if variant != "fun" and not item.table:
        raise MissingField("table", where)
    if variant == "sel" and (not item.ids or not item.sub_var):
        raise MissingField("ids/sub_var", where)
    if variant == "rgx" and (not item.regex or not item.sub_var):
        raise MissingField("regex/sub_var", where)
    if variant == "fun" and not item.function:
        raise MissingField("function", where)
    return item


def item_to_dict(item: ItemDef) -> dict:
    out: dict[str, Any] = {"class": item.variant}
    for key in ("table", "sub_var", "regex", "val_var", "unit_var", "index_var", "callback", "function"):
        value = getattr(item, key)
        if value is not None:
            out[key] = value
    if item.ids:
        out["ids"] = list(item.ids)
    if item.args:
        out["args"] = dict(item.args)
    out.update(item.extra)
    return out


def _concept_class(raw: Mapping, name: str) -> str:
    cls = str(raw.get("class", "num"))
    if cls.endswith("_cncpt"):
        cls = cls[: -len("_cncpt")]
    if cls not in CONCEPT_CLASSES:
        raise UnknownConceptClass(f"concept {name!r}: unknown class {raw.get('class')!r}")
    return cls


def _parse_sources(raw: Mapping, name: str) -> dict[str, tuple[ItemDef, ...]]:
    out = {}
    for src, items in (raw or {}).items():
        out[src] = tuple(
            item_from_dict(it, f"concept {name!r} source {src!r}") for it in _as_list(items)
        )
    return out


def concept_from_dict(name: str, raw: Mapping) -> ConceptDef:
    cls = _concept_class(raw, name)
    target = raw.get("target", "ts_tbl")
    if target not in TARGETS:
        raise ConfigError(f"concept {name!r}: unknown target {target!r}")
    aggregate = raw.get("aggregate")
    if aggregate is not None and aggregate not in AGGREGATES:
        raise ConfigError(f"concept {name!r}: unknown aggregate {aggregate!r}")
    lo, hi = raw.get("min"), raw.get("max")
    if lo is not None and hi is not None and lo > hi:
        raise ConfigError(f"concept {name!r}: min > max")
    subs = tuple(_as_list(raw.get("concepts")))
    if cls == "rec" and (not subs or not raw.get("callback")):
        raise RecWithoutCallback(f"concept {name!r}: rec concepts need concepts and callback")
    return ConceptDef(
        name=name,
        cls=cls,
        target=target,
        aggregate=aggregate,
        description=raw.get("description"),
        category=raw.get("category"),
        units=tuple(_as_list(raw.get("unit"))),
        min=lo,
        max=hi,
        levels=tuple(_as_list(raw.get("levels"))),
        sub_concepts=subs,
        callback=raw.get("callback") if cls == "rec" else None,
        sources=_parse_sources(raw.get("sources"), name),
        extra={k: v for k, v in raw.items() if k not in _CONCEPT_KEYS},
    )


def concept_to_dict(c: ConceptDef) -> dict:
    out: dict[str, Any] = {"class": c.cls}
    if c.target != "ts_tbl":
        out["target"] = c.target
    for key in ("aggregate", "description", "category", "min", "max", "callback"):
        value = getattr(c, key)
        if value is not None:
            out[key] = value
    if c.units:
        out["unit"] = list(c.units)
    if c.levels:
        out["levels"] = list(c.levels)
    if c.sub_concepts:
        out["concepts"] = list(c.sub_concepts)
    out.update(c.extra)
    out["sources"] = {s: [item_to_dict(i) for i in items] for s, items in c.sources.items()}
    return out


class Dictionary(Mapping):
    """Name-sorted, read-only collection of concepts.

    ``provenance`` records which configuration location last supplied each
    concept (or its sources); it does not take part in equality.
    """

    def __init__(self, concepts: Iterable[ConceptDef] = (), provenance: Optional[dict] = None):
        self._concepts = {c.name: c for c in sorted(concepts, key=lambda c: c.name)}
        self.provenance = dict(provenance or {})

    def __getitem__(self, name: str) -> ConceptDef:
        return self._concepts[name]

    def __iter__(self):
        return iter(self._concepts)

    def __len__(self) -> int:
        return len(self._concepts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dictionary):
            return NotImplemented
        return self._concepts == other._concepts

    def __repr__(self) -> str:
        return f"<Dictionary[{len(self)}]: {', '.join(self._concepts)}>"

    def subset(self, names: Iterable[str]) -> "Dictionary":
        names = list(names)
        return Dictionary(
            [self._concepts[n] for n in names],
            {n: self.provenance[n] for n in names if n in self.provenance},
        )


def parse_dictionary(json_text: str, base: Optional[Dictionary] = None, origin: str = "") -> Dictionary:
    """Parse a concept dictionary, optionally overlaying it onto ``base``.

    Concepts already present in ``base`` keep their metadata; only their
    ``sources`` entries are added or replaced (per source name).
    """
    raw = _loads(json_text)
    if not isinstance(raw, Mapping):
        raise ConfigError("concept dictionary must be a JSON object")
    concepts = dict(base._concepts) if base is not None else {}
    provenance = dict(base.provenance) if base is not None else {}
    for name, body in raw.items():
        if not isinstance(body, Mapping):
            raise ConfigError(f"concept {name!r} must be an object")
        if name in concepts:
            old = concepts[name]
            sources = dict(old.sources)
            sources.update(_parse_sources(body.get("sources"), name))
            concepts[name] = ConceptDef(**{**old.__dict__, "sources": sources})
        else:
            concepts[name] = concept_from_dict(name, body)
        if origin:
            provenance[name] = origin
    return Dictionary(concepts.values(), provenance)


def dump_dictionary(d: Dictionary) -> str:
    return json.dumps({name: concept_to_dict(c) for name, c in d.items()}, indent=2)


# ---------------------------------------------------------------------------
# config discovery

def builtin_config_dir() -> Path:
    return Path(str(resources.files("icukit") / "data"))


def discover_config_paths(env: Optional[Mapping[str, str]] = None) -> list[Path]:
    """Built-in directory followed by the ``ICU_CONFIG_PATH`` entries.

    Entries are comma separated, trimmed and deduplicated keeping the first
    occurrence. Existence is not checked here; loaders skip missing
    directories.
    """
    env = os.environ if env is None else env
    paths = [builtin_config_dir()]
    seen = {str(paths[0])}
    for entry in env.get("ICU_CONFIG_PATH", "").split(","):
        entry = entry.strip()
        if entry and entry not in seen:
            seen.add(entry)
            paths.append(Path(entry))
    return paths


def _existing(paths: Iterable[Path], filename: str) -> Iterator[Path]:
    for p in paths:
        f = Path(p) / filename
        if not Path(p).is_dir():
            logger.warning("config directory %s does not exist, skipping", p)
        elif f.is_file():
            yield f


def load_source_configs(paths: Optional[Iterable[Path]] = None) -> dict[str, SourceDescriptor]:
    """Collect source descriptors; later directories replace earlier ones by name."""
    paths = discover_config_paths() if paths is None else paths
    out: dict[str, SourceDescriptor] = {}
    for f in _existing(paths, SOURCES_FILE):
        for desc in parse_source_configs(f.read_text()):
            out[desc.name] = desc
    return out


def load_dictionary_files(paths: Optional[Iterable[Path]] = None) -> Dictionary:
    paths = discover_config_paths() if paths is None else paths
    d = Dictionary()
    for f in _existing(paths, DICTIONARY_FILE):
        d = parse_dictionary(f.read_text(), d, origin=str(f.parent))
    return d
