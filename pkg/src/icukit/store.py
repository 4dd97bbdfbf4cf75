"""Partitioned columnar store.

Raw CSV tables are imported once into a binary layout::

    <store>/<source>/<table>/manifest.json
    <store>/<source>/<table>/part-0000.bin ...

Each partition file holds little-endian column blocks: a validity bitmap
followed by fixed-width values, or for strings int64 offsets plus a UTF-8
heap. Rows are routed to partitions by half-open breakpoint buckets on one
numeric column; rows with a null partition value go to the first partition.

Import streams the CSV in chunks of at most ``chunk_rows`` rows and spools
each chunk to per-column scratch files, so the resulting store does not
depend on the chunk size.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import struct
import tempfile
import threading
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional

import numpy as np
import pandas as pd

from .config import SourceDescriptor, TableDescriptor
from .errors import CoercionError, MissingFile, NotImported, UnknownColumn, UnknownSource

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"ICUP"
MANIFEST = "manifest.json"

_TYPE_CODES = {"int": 1, "float": 2, "string": 3, "bool": 4, "timestamp": 5, "date": 6}
_FIXED_DTYPE = {
    "int": np.dtype("<i8"),
    "float": np.dtype("<f8"),
    "bool": np.dtype("u1"),
    "timestamp": np.dtype("<i8"),
    "date": np.dtype("<i8"),
}
_TRUE = {"true", "t", "1", "yes", "y"}
_FALSE = {"false", "f", "0", "no", "n"}
_COPY_BLOCK = 1 << 16


class RowCountMismatch(UserWarning):
    """Imported row count differs from the configured ``num_rows``."""


# ---------------------------------------------------------------------------
# predicates


def _stored(value, typ: str):
    """Convert a predicate literal into the on-disk representation."""
    if typ in ("timestamp", "date") and not isinstance(value, (int, float, np.integer, np.floating)):
        return pd.Timestamp(value).value // 10**9
    return value


class Predicate:
    def columns(self) -> set[str]:
        raise NotImplementedError

    def mask(self, df: pd.DataFrame) -> np.ndarray:
        raise NotImplementedError

    def may_match(self, column: str, lo, hi, typ: str) -> bool:
        """False only if no row with ``column`` in [lo, hi] can satisfy the predicate."""
        return True

    def __and__(self, other: "Predicate") -> "And":
        return And((self, other))


@dataclass(frozen=True)
class Compare(Predicate):
    column: str
    op: str
    value: Any

    _OPS = {
        "==": lambda s, v: s == v,
        "!=": lambda s, v: s != v,
        "<": lambda s, v: s < v,
        "<=": lambda s, v: s <= v,
        ">": lambda s, v: s > v,
        ">=": lambda s, v: s >= v,
    }

    def columns(self):
        return {self.column}

    def mask(self, df):
        s = df[self.column]
        value = self.value
        if pd.api.types.is_datetime64_any_dtype(s):
            value = pd.Timestamp(value)
        out = self._OPS[self.op](s, value)
        return pd.Series(out).fillna(False).to_numpy(dtype=bool)

    def may_match(self, column, lo, hi, typ):
        if column != self.column or lo is None:
            return True
        v = _stored(self.value, typ)
        return {
            "==": lo <= v <= hi,
            "!=": not (lo == hi == v),
            "<": lo < v,
            "<=": lo <= v,
            ">": hi > v,
            ">=": hi >= v,
        }[self.op]


@dataclass(frozen=True)
class IsIn(Predicate):
    column: str
    values: tuple

    def columns(self):
        return {self.column}

    def mask(self, df):
        s = df[self.column]
        values = list(self.values)
        if pd.api.types.is_datetime64_any_dtype(s):
            values = [pd.Timestamp(v) for v in values]
        return s.isin(values).fillna(False).to_numpy(dtype=bool)

    def may_match(self, column, lo, hi, typ):
        if column != self.column or lo is None:
            return True
        return any(lo <= _stored(v, typ) <= hi for v in self.values)


@dataclass(frozen=True)
class Matches(Predicate):
    """Unanchored regular-expression search on a string column."""

    column: str
    pattern: str

    def columns(self):
        return {self.column}

    def mask(self, df):
        s = df[self.column].astype("string")
        return s.str.contains(self.pattern, regex=True).fillna(False).to_numpy(dtype=bool)


@dataclass(frozen=True)
class NotNull(Predicate):
    column: str

    def columns(self):
        return {self.column}

    def mask(self, df):
        return df[self.column].notna().to_numpy(dtype=bool)


@dataclass(frozen=True)
class And(Predicate):
    parts: tuple

    def columns(self):
        return set().union(*(p.columns() for p in self.parts))

    def mask(self, df):
        out = np.ones(len(df), dtype=bool)
        for p in self.parts:
            out &= p.mask(df)
        return out

    def may_match(self, column, lo, hi, typ):
        return all(p.may_match(column, lo, hi, typ) for p in self.parts)

    def __and__(self, other):
        return And((*self.parts, other))


class Col:
    """Predicate builder: ``Col("subject_id") > 44000``."""

    __hash__ = object.__hash__

    def __init__(self, name: str):
        self.name = name

    def __eq__(self, v):
        return Compare(self.name, "==", v)

    def __ne__(self, v):
        return Compare(self.name, "!=", v)

    def __lt__(self, v):
        return Compare(self.name, "<", v)

    def __le__(self, v):
        return Compare(self.name, "<=", v)

    def __gt__(self, v):
        return Compare(self.name, ">", v)

    def __ge__(self, v):
        return Compare(self.name, ">=", v)

    def isin(self, values: Iterable) -> IsIn:
        return IsIn(self.name, tuple(values))

    def matches(self, pattern: str) -> Matches:
        return Matches(self.name, pattern)

    def notnull(self) -> NotNull:
        return NotNull(self.name)


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class PartitionInfo:
    file: str
    rows: int
    min: Optional[float] = None
    max: Optional[float] = None


@dataclass(frozen=True)
class PartitionManifest:
    table: str
    columns: tuple[tuple[str, str], ...]
    partitions: tuple[PartitionInfo, ...]
    partition_column: Optional[str] = None
    breaks: tuple[float, ...] = ()
    format_version: int = FORMAT_VERSION

    @property
    def total_rows(self) -> int:
        return sum(p.rows for p in self.partitions)

    @property
    def column_names(self) -> list[str]:
        return [c for c, _ in self.columns]

    def column_type(self, name: str) -> str:
        return dict(self.columns)[name]

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": self.format_version,
                "table": self.table,
                "columns": [{"name": n, "type": t} for n, t in self.columns],
                "partition_column": self.partition_column,
                "breaks": list(self.breaks),
                "partitions": [p.__dict__ for p in self.partitions],
                "total_rows": self.total_rows,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "PartitionManifest":
        obj = json.loads(text)
        return cls(
            table=obj["table"],
            columns=tuple((c["name"], c["type"]) for c in obj["columns"]),
            partitions=tuple(PartitionInfo(**p) for p in obj["partitions"]),
            partition_column=obj.get("partition_column"),
            breaks=tuple(obj.get("breaks", ())),
            format_version=obj["format_version"],
        )

    @classmethod
    def read(cls, table_dir: Path) -> "PartitionManifest":
        return cls.from_json((Path(table_dir) / MANIFEST).read_text())


# ---------------------------------------------------------------------------
# import


def _coerce(raw: pd.Series, typ: str, column: str, first_line: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (valid mask, values) in storage representation."""
    valid = raw.notna().to_numpy()
    if typ == "string":
        return valid, raw.to_numpy(dtype=object)
    if typ in ("int", "float"):
        parsed = pd.to_numeric(raw, errors="coerce")
        bad = valid & parsed.isna().to_numpy()
        if typ == "int" and not bad.any():
            vals = parsed.to_numpy(dtype="float64", na_value=0.0)
            bad = valid & (vals != np.floor(vals))
    elif typ == "bool":
        low = raw.str.strip().str.lower()
        parsed = pd.Series(np.where(low.isin(_TRUE), 1, 0), index=raw.index)
        bad = valid & ~(low.isin(_TRUE) | low.isin(_FALSE)).to_numpy()
    else:
        fmt = "%Y-%m-%d %H:%M:%S" if typ == "timestamp" else "%Y-%m-%d"
        parsed = pd.to_datetime(raw, format=fmt, errors="coerce")
        bad = valid & parsed.isna().to_numpy()
    if bad.any():
        i = int(np.argmax(bad))
        raise CoercionError(column, first_line + i, raw.iloc[i])
    if typ == "int":
        values = pd.to_numeric(raw.where(valid, "0"), errors="raise").to_numpy(dtype="<i8")
    elif typ == "float":
        # astype parses with round-trip precision; to_numeric does not
        values = raw.where(valid, "0").astype("<f8").to_numpy()
    elif typ == "bool":
        values = parsed.to_numpy(dtype="u1")
    else:
        secs = parsed.to_numpy(dtype="datetime64[s]").astype("<i8")
        values = np.where(valid, secs, 0).astype("<i8")
    return valid, values


class _Spool:
    """Per-partition, per-column scratch files appended chunk by chunk."""

    def __init__(self, root: Path, part: int, columns):
        self.dir = root / f"p{part}"
        self.dir.mkdir()
        self.columns = columns
        self.rows = 0
        self.lo = None
        self.hi = None
        self.files = {}
        for name, typ in columns:
            kinds = ("valid", "len", "heap") if typ == "string" else ("valid", "data")
            self.files[name] = {k: open(self.dir / f"{name}.{k}", "wb") for k in kinds}

    def append(self, valid: dict, values: dict, sel: np.ndarray):
        n = int(sel.sum())
        if n == 0:
            return
        self.rows += n
        for name, typ in self.columns:
            fh = self.files[name]
            v = valid[name][sel]
            fh["valid"].write(v.astype("u1").tobytes())
            if typ == "string":
                encoded = [s.encode("utf-8") if ok else b"" for s, ok in zip(values[name][sel], v)]
                fh["len"].write(np.array([len(e) for e in encoded], dtype="<i8").tobytes())
                fh["heap"].write(b"".join(encoded))
            else:
                fh["data"].write(values[name][sel].astype(_FIXED_DTYPE[typ]).tobytes())

    def track(self, vals: np.ndarray):
        if len(vals):
            lo, hi = vals.min().item(), vals.max().item()
            self.lo = lo if self.lo is None else min(self.lo, lo)
            self.hi = hi if self.hi is None else max(self.hi, hi)

    def close(self):
        for fh in self.files.values():
            for f in fh.values():
                f.close()

    def write_partition(self, path: Path):
        with open(path, "wb") as out:
            out.write(MAGIC)
            out.write(struct.pack("<HQI", FORMAT_VERSION, self.rows, len(self.columns)))
            for name, typ in self.columns:
                enc = name.encode("utf-8")
                out.write(struct.pack("<H", len(enc)))
                out.write(enc)
                base = self.dir / name
                nbitmap = (self.rows + 7) // 8
                if typ == "string":
                    block = nbitmap + 8 * (self.rows + 1) + os.path.getsize(f"{base}.heap")
                else:
                    block = nbitmap + os.path.getsize(f"{base}.data")
                out.write(struct.pack("<BQ", _TYPE_CODES[typ], block))
                self._copy_bitmap(f"{base}.valid", out)
                if typ == "string":
                    self._copy_offsets(f"{base}.len", out)
                    self._copy(f"{base}.heap", out)
                else:
                    self._copy(f"{base}.data", out)

    @staticmethod
    def _copy(src, out):
        with open(src, "rb") as f:
            shutil.copyfileobj(f, out, _COPY_BLOCK)

    @staticmethod
    def _copy_bitmap(src, out):
        with open(src, "rb") as f:
            while True:
                buf = f.read(8 * _COPY_BLOCK)
                if not buf:
                    break
                out.write(np.packbits(np.frombuffer(buf, dtype="u1"), bitorder="little").tobytes())

    @staticmethod
    def _copy_offsets(src, out):
        carry = 0
        out.write(struct.pack("<q", 0))
        with open(src, "rb") as f:
            while True:
                buf = f.read(8 * _COPY_BLOCK)
                if not buf:
                    break
                offs = np.cumsum(np.frombuffer(buf, dtype="<i8")) + carry
                carry = int(offs[-1])
                out.write(offs.astype("<i8").tobytes())


def import_table(
    desc: TableDescriptor,
    input_dir,
    store_dir,
    chunk_rows: int = 100_000,
    buffer_probe: Optional[Callable[[int], None]] = None,
) -> PartitionManifest:
    """Import the CSV files of one table into ``store_dir/<table>``.

    ``buffer_probe`` is called with the size of every in-flight chunk; it
    exists so callers can verify the memory bound.
    """
    if chunk_rows < 1:
        raise ValueError("chunk_rows must be >= 1")
    input_dir = Path(input_dir)
    files = [input_dir / f for f in desc.files]
    missing = [str(f) for f in files if not f.is_file()]
    if missing:
        raise MissingFile(f"table {desc.name!r}: missing input file(s) {', '.join(missing)}")

    columns = [(c.name, c.type) for c in desc.columns]
    part = desc.partition
    n_parts = desc.n_partitions
    breaks = np.asarray(part.breaks if part else (), dtype="float64")
    table_dir = Path(store_dir) / desc.name
    table_dir.mkdir(parents=True, exist_ok=True)

    with tempfile.TemporaryDirectory(dir=table_dir, prefix=".import-") as tmp:
        spools = [_Spool(Path(tmp), i, columns) for i in range(n_parts)]
        try:
            for path in files:
                reader = pd.read_csv(
                    path,
                    dtype=str,
                    keep_default_na=False,
                    na_values=[""],
                    chunksize=chunk_rows,
                )
                line = 2
                for chunk in reader:
                    if buffer_probe is not None:
                        buffer_probe(len(chunk))
                    absent = [c.raw for c in desc.columns if c.raw not in chunk.columns]
                    if absent:
                        raise MissingFile(f"{path}: missing column(s) {', '.join(absent)}")
                    valid, values = {}, {}
                    for c in desc.columns:
                        valid[c.name], values[c.name] = _coerce(chunk[c.raw], c.type, c.name, line)
                    if part:
                        pv = values[part.column].astype("float64")
                        bucket = np.searchsorted(breaks, pv, side="right")
                        bucket[~valid[part.column]] = 0
                    else:
                        bucket = np.zeros(len(chunk), dtype=int)
                    for i, spool in enumerate(spools):
                        sel = bucket == i
                        spool.append(valid, values, sel)
                        if part:
                            spool.track(values[part.column][sel & valid[part.column]])
                    line += len(chunk)
        finally:
            for s in spools:
                s.close()

        partitions = []
        for i, spool in enumerate(spools):
            fname = f"part-{i:04d}.bin"
            spool.write_partition(table_dir / fname)
            partitions.append(PartitionInfo(fname, spool.rows, spool.lo, spool.hi))

    manifest = PartitionManifest(
        table=desc.name,
        columns=tuple(columns),
        partitions=tuple(partitions),
        partition_column=part.column if part else None,
        breaks=tuple(part.breaks) if part else (),
    )
    (table_dir / MANIFEST).write_text(manifest.to_json())
    if desc.expected_rows is not None and desc.expected_rows != manifest.total_rows:
        msg = f"table {desc.name!r}: expected {desc.expected_rows} rows, imported {manifest.total_rows}"
        logger.warning(msg)
        warnings.warn(msg, RowCountMismatch, stacklevel=2)
    logger.info("imported %s: %d rows in %d partition(s)", desc.name, manifest.total_rows, n_parts)
    return manifest


def import_source(
    desc: SourceDescriptor,
    input_dir,
    store_dir,
    chunk_rows: int = 100_000,
    tables: Optional[Iterable[str]] = None,
) -> dict[str, PartitionManifest]:
    names = list(desc.tables) if tables is None else list(tables)
    return {
        name: import_table(desc.tables[name], input_dir, store_dir, chunk_rows) for name in names
    }


def store_checksum(table_dir) -> str:
    """SHA-256 over the manifest and all partition files of a table."""
    table_dir = Path(table_dir)
    h = hashlib.sha256()
    for f in sorted(p for p in table_dir.iterdir() if p.is_file()):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# reading


def _read_partition(path: Path, wanted: set[str]) -> dict[str, pd.Series]:
    out = {}
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a partition file")
        version, nrows, ncols = struct.unpack("<HQI", f.read(14))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        codes = {v: k for k, v in _TYPE_CODES.items()}
        for _ in range(ncols):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            code, block = struct.unpack("<BQ", f.read(9))
            if name not in wanted:
                f.seek(block, os.SEEK_CUR)
                continue
            out[name] = _decode(f.read(block), codes[code], nrows)
    return out


def _decode(buf: bytes, typ: str, n: int) -> pd.Series:
    nbitmap = (n + 7) // 8
    valid = np.unpackbits(np.frombuffer(buf, dtype="u1", count=nbitmap), bitorder="little", count=n).astype(bool)
    body = memoryview(buf)[nbitmap:]
    if typ == "string":
        offs = np.frombuffer(body, dtype="<i8", count=n + 1)
        heap = bytes(body[8 * (n + 1):])
        vals = [heap[offs[i]:offs[i + 1]].decode("utf-8") if valid[i] else None for i in range(n)]
        return pd.Series(pd.array(vals, dtype="string"))
    vals = np.frombuffer(body, dtype=_FIXED_DTYPE[typ], count=n)
    mask = ~valid
    if typ == "int":
        return pd.Series(pd.arrays.IntegerArray(vals.astype("int64"), mask))
    if typ == "float":
        return pd.Series(pd.arrays.FloatingArray(vals.astype("float64"), mask))
    if typ == "bool":
        return pd.Series(pd.arrays.BooleanArray(vals.astype(bool), mask))
    ts = vals.astype("datetime64[s]").astype("datetime64[ns]")
    ts[mask] = np.datetime64("NaT")
    return pd.Series(ts)


@dataclass
class ScanStats:
    partitions_total: int = 0
    partitions_read: int = 0
    rows_read: int = 0
    rows_returned: int = 0


class TableHandle:
    """Lazy handle to an imported table (manifest + column defaults)."""

    def __init__(self, source: str, desc: TableDescriptor, manifest: PartitionManifest, path: Path):
        self.source = source
        self.desc = desc
        self.manifest = manifest
        self.path = Path(path)
        self.defaults = desc.defaults
        self.n_scans = 0
        self.n_partitions_read = 0
        self._lock = threading.Lock()
        for ref in self.defaults.referenced():
            if ref not in manifest.column_names:
                raise UnknownColumn(f"{source}.{desc.name}: default column {ref!r} not in store")

    @property
    def name(self) -> str:
        return self.desc.name

    @property
    def columns(self) -> list[str]:
        return self.manifest.column_names

    def column_type(self, name: str) -> str:
        return self.manifest.column_type(name)

    def __repr__(self) -> str:
        return f"<TableHandle {self.source}.{self.name}: {self.manifest.total_rows} x {len(self.columns)}>"

    def scan(
        self,
        predicate: Optional[Predicate] = None,
        cols: Optional[Iterable[str]] = None,
        stats: Optional[ScanStats] = None,
    ) -> pd.DataFrame:
        """Rows satisfying ``predicate`` projected onto ``cols``.

        Partitions whose partition-column range cannot satisfy the predicate
        are skipped without being opened.
        """
        all_cols = self.columns
        cols = list(all_cols) if cols is None else list(cols)
        needed = set(cols) | (predicate.columns() if predicate is not None else set())
        unknown = sorted(needed - set(all_cols))
        if unknown:
            raise UnknownColumn(f"{self.source}.{self.name}: unknown column(s) {', '.join(unknown)}")
        stats = stats if stats is not None else ScanStats()
        m = self.manifest
        pcol = m.partition_column
        ptype = m.column_type(pcol) if pcol else None
        frames = []
        stats.partitions_total += len(m.partitions)
        for p in m.partitions:
            if p.rows == 0:
                continue
            if predicate is not None and pcol and p.min is not None:
                if not predicate.may_match(pcol, p.min, p.max, ptype):
                    continue
            data = _read_partition(self.path / p.file, needed)
            df = pd.DataFrame({c: data[c] for c in all_cols if c in needed})
            stats.partitions_read += 1
            stats.rows_read += len(df)
            if predicate is not None:
                df = df[predicate.mask(df)]
            frames.append(df[cols])
        with self._lock:
            self.n_scans += 1
            self.n_partitions_read += stats.partitions_read
        if frames:
            out = pd.concat(frames, ignore_index=True)
        else:
            out = pd.DataFrame({c: _decode(b"", m.column_type(c), 0) for c in cols})[cols]
        stats.rows_returned += len(out)
        return out


# ---------------------------------------------------------------------------
# attaching


class SourceEnv:
    """An attached source: table handles plus per-source caches."""

    def __init__(self, desc: SourceDescriptor, store_dir: Path, handles: dict[str, TableHandle]):
        self.desc = desc
        self.name = desc.name
        self.store_dir = Path(store_dir)
        self.tables = handles
        self.cache: dict[str, Any] = {}
        self.lock = threading.Lock()

    def __getitem__(self, table: str) -> TableHandle:
        return self.tables[table]

    def __contains__(self, table: str) -> bool:
        return table in self.tables

    @property
    def id_systems(self):
        return self.desc.id_systems

    @property
    def scan_count(self) -> int:
        return sum(h.n_scans for h in self.tables.values())

    def __repr__(self) -> str:
        return f"<SourceEnv {self.name}: {len(self.tables)} tables>"


_ATTACHED: dict[str, SourceEnv] = {}
_ATTACH_LOCK = threading.Lock()


def data_dir(env=None) -> Path:
    env = os.environ if env is None else env
    return Path(env.get("ICU_DATA_PATH") or Path.home() / ".local" / "share" / "icukit")


def source_store_dir(name: str, root=None) -> Path:
    return Path(root if root is not None else data_dir()) / name


def attach_source(desc: SourceDescriptor, store_dir, refresh: bool = False) -> SourceEnv:
    """Attach an imported source and register it by name.

    Attaching the same descriptor and directory again returns the registered
    environment without touching the disk; ``refresh=True`` re-reads the
    manifests and drops cached state such as ID windows.
    """
    store_dir = Path(store_dir)
    with _ATTACH_LOCK:
        env = _ATTACHED.get(desc.name)
        if env is not None and not refresh and env.desc == desc and env.store_dir == store_dir:
            return env
        missing = [t for t in desc.tables if not (store_dir / t / MANIFEST).is_file()]
        if missing:
            raise NotImported(missing, desc.name)
        handles = {
            t: TableHandle(desc.name, tdesc, PartitionManifest.read(store_dir / t), store_dir / t)
            for t, tdesc in desc.tables.items()
        }
        env = SourceEnv(desc, store_dir, handles)
        _ATTACHED[desc.name] = env
        return env


def detach_source(name: str) -> None:
    with _ATTACH_LOCK:
        _ATTACHED.pop(name, None)


def attached_sources() -> list[str]:
    return sorted(_ATTACHED)


def get_source(source) -> SourceEnv:
    if isinstance(source, SourceEnv):
        return source
    try:
        return _ATTACHED[source]
    except KeyError:
        raise UnknownSource(source) from None
