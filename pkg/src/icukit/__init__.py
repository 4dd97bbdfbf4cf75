"""Dataset-agnostic loading of ICU time series through a concept dictionary."""

from .concepts import concept_availability, explain_dictionary, load_concepts, load_dictionary, load_item
from .config import Dictionary, load_source_configs, parse_source_config
from .demo import generate
from .query import Diagnostics, change_id, change_interval, load_difftime, load_id, load_src, load_ts
from .store import Col, attach_source, detach_source, get_source, import_source, import_table
from .tables import (
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
    write_table,
)

__version__ = "0.1.0"

__all__ = [
    "Col", "Diagnostics", "Dictionary", "IdTbl", "Table", "TsTbl", "aggregate", "attach_source",
    "change_id", "change_interval", "concept_availability", "detach_source", "explain_dictionary",
    "fill_gaps", "generate", "get_source", "hours", "import_source", "import_table", "load_concepts",
    "load_dictionary", "load_difftime", "load_id", "load_item", "load_source_configs", "load_src",
    "load_ts", "merge_tables", "mins", "parse_source_config", "rbind", "read_table", "replace_na",
    "write_table",
]
