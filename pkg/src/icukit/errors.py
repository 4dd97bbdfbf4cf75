"""Exception hierarchy shared by all icukit modules."""


class IcuError(Exception):
    """Base class for every error raised by icukit."""


class ConfigError(IcuError):
    pass


class MalformedJson(ConfigError):
    pass


class MissingField(ConfigError):
    def __init__(self, name, where=""):
        self.name = name
        super().__init__(f"missing field {name!r}" + (f" in {where}" if where else ""))


class BadPartition(ConfigError):
    pass


class DanglingColumnRef(ConfigError):
    pass


class UnknownConceptClass(ConfigError):
    pass


class RecWithoutCallback(ConfigError):
    pass


class BadAggregate(IcuError):
    pass


class CallbackError(IcuError):
    pass


class CallbackSyntaxError(CallbackError):
    def __init__(self, message, position):
        self.position = position
        super().__init__(f"{message} at {position}")


class NestedCallUnsupported(CallbackSyntaxError):
    pass


class UnknownFactory(CallbackError):
    pass


class UnknownTransform(CallbackError):
    pass


class ArityMismatch(CallbackError):
    pass


class StoreError(IcuError):
    pass


class MissingFile(StoreError):
    pass


class CoercionError(StoreError):
    def __init__(self, column, line, value=None):
        self.column = column
        self.line = line
        super().__init__(f"cannot coerce value {value!r} in column {column!r} (line {line})")


class UnknownColumn(StoreError):
    pass


class NotImported(StoreError):
    def __init__(self, tables, source=None):
        self.tables = list(tables)
        self.source = source
        where = f" for source {source!r}" if source else ""
        super().__init__(f"tables not imported{where}: {', '.join(self.tables)}")


class UnknownSource(NotImported):
    def __init__(self, source):
        StoreError.__init__(self, f"unknown source {source!r}: no configuration found")
        self.tables = []
        self.source = source


class QueryError(IcuError):
    pass


class NoIdAvailable(QueryError):
    pass


class UnknownIdSystem(QueryError):
    pass


class MissingOriginTable(QueryError):
    pass


class TableError(IcuError):
    pass


class IncompatibleIds(TableError):
    pass


class IntervalMismatch(TableError):
    pass


class LengthMismatch(TableError):
    pass


class ConceptError(IcuError):
    pass


class UnknownConceptName(ConceptError):
    pass


class ConceptUnavailable(ConceptError):
    pass


class UnknownTable(ConceptError):
    pass


class UnknownSubVar(ConceptError):
    pass
