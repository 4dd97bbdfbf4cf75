"""Item callback expressions.

Item definitions may carry a ``callback`` string such as
``convert_unit(fahr_to_cels, 'C', 'f')``. The grammar is deliberately flat::

    call := ident "(" [arg {"," arg}] ")"
    arg  := ident | string | number

The head names a *factory*; identifier arguments name *transforms*. Both are
looked up in a :class:`Registry`. Evaluating an expression yields an
:class:`ItemCallback`, a function ``(frame, meta) -> frame``.

Unit patterns given to ``convert_unit`` are unanchored, case-insensitive
regular expressions, so ``'f'`` matches ``F``, ``degF`` and ``Deg. F``.
"""

from __future__ import annotations

import inspect
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .errors import (
    ArityMismatch,
    CallbackSyntaxError,
    NestedCallUnsupported,
    UnknownFactory,
    UnknownTransform,
)

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_NUMBER = re.compile(r"[+-]?(\d+\.?\d*([eE][+-]?\d+)?|\.\d+([eE][+-]?\d+)?)")


@dataclass(frozen=True)
class Ident:
    name: str


Arg = Union[Ident, str, int, float]


@dataclass(frozen=True)
class CallbackExpr:
    head: str
    args: tuple[Arg, ...] = ()

    def __str__(self) -> str:
        def fmt(a):
            if isinstance(a, Ident):
                return a.name
            if isinstance(a, str):
                return repr(a)
            return str(a)

        return f"{self.head}({', '.join(fmt(a) for a in self.args)})"


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.pos = 0

    def skip(self):
        while self.pos < len(self.src) and self.src[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip()
        return self.src[self.pos] if self.pos < len(self.src) else ""

    def expect(self, ch: str):
        if self.peek() != ch:
            found = repr(self.src[self.pos]) if self.pos < len(self.src) else "end of input"
            raise CallbackSyntaxError(f"expected {ch!r}, found {found}", self.pos)
        self.pos += 1

    def ident(self) -> str:
        self.skip()
        m = _IDENT.match(self.src, self.pos)
        if not m:
            raise CallbackSyntaxError("expected identifier", self.pos)
        self.pos = m.end()
        return m.group()

    def string(self) -> str:
        quote = self.src[self.pos]
        start = self.pos
        end = self.src.find(quote, self.pos + 1)
        if end < 0:
            raise CallbackSyntaxError("unterminated string", start)
        self.pos = end + 1
        return self.src[start + 1 : end]

    def arg(self) -> Arg:
        ch = self.peek()
        if ch in ("'", '"'):
            return self.string()
        m = _NUMBER.match(self.src, self.pos)
        if m and ch not in ("",):
            self.pos = m.end()
            text = m.group()
            return float(text) if any(c in text for c in ".eE") else int(text)
        start = self.pos
        name = self.ident()
        if self.peek() == "(":
            raise NestedCallUnsupported("nested calls are not supported", start)
        return Ident(name)

    def call(self) -> CallbackExpr:
        head = self.ident()
        self.expect("(")
        args = []
        if self.peek() != ")":
            args.append(self.arg())
            while self.peek() == ",":
                self.pos += 1
                args.append(self.arg())
        self.expect(")")
        if self.peek():
            raise CallbackSyntaxError("unexpected trailing input", self.pos)
        return CallbackExpr(head, tuple(args))


def parse_callback(src: str) -> CallbackExpr:
    if not src or not src.strip():
        raise CallbackSyntaxError("empty callback expression", 0)
    return _Parser(src).call()


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class ItemMeta:
    """Column roles of an item table as seen by callbacks."""

    val_var: Optional[str] = None
    unit_var: Optional[str] = None
    index_var: Optional[str] = None
    id_vars: tuple[str, ...] = ()


ItemCallback = Callable[[pd.DataFrame, ItemMeta], pd.DataFrame]


def _apply(fn: Callable, values: pd.Series) -> pd.Series:
    out = fn(values)
    if np.isscalar(out) or out is None:
        return pd.Series([out] * len(values), index=values.index)
    return pd.Series(out, index=values.index)


def convert_unit(fn: Callable, new_unit: str, unit_regex: str) -> ItemCallback:
    pattern = re.compile(unit_regex, re.IGNORECASE)

    def callback(df: pd.DataFrame, meta: ItemMeta) -> pd.DataFrame:
        if not meta.unit_var or meta.unit_var not in df or df.empty:
            return df
        units = df[meta.unit_var]
        # missing units never match
        hit = units.map(lambda u: isinstance(u, str) and pattern.search(u) is not None)
        hit = hit.astype(bool).to_numpy()
        if not hit.any():
            return df
        df = df.copy()
        vals = df[meta.val_var]
        converted = _apply(fn, vals[hit])
        if vals.dtype.kind in "iu" or str(vals.dtype) == "Int64":
            vals = vals.astype("Float64")
            df[meta.val_var] = vals
        df.loc[hit, meta.val_var] = converted.to_numpy()
        df[meta.unit_var] = df[meta.unit_var].astype(object)
        df.loc[hit, meta.unit_var] = new_unit
        df[meta.unit_var] = df[meta.unit_var].astype("string")
        return df

    return callback


def transform_fun(fn: Callable) -> ItemCallback:
    def callback(df: pd.DataFrame, meta: ItemMeta) -> pd.DataFrame:
        if df.empty:
            return df
        df = df.copy()
        out = _apply(fn, df[meta.val_var])
        df[meta.val_var] = out.convert_dtypes() if out.dtype == object else out
        return df

    return callback


def fahr_to_cels(x):
    return (x - 32) * 5 / 9


def set_true(x):
    return True


def identity(x):
    return x


def fraction_to_percent(x):
    """Values at or below 1 are read as fractions and scaled to percent."""
    return x.where(~(x <= 1), x * 100) if isinstance(x, pd.Series) else (x * 100 if x <= 1 else x)


def sex_from_code(x):
    """Map single-letter sex codes (F/M) to Female/Male; other values pass through."""
    codes = {"F": "Female", "M": "Male"}
    if isinstance(x, pd.Series):
        return x.map(lambda v: codes.get(v.upper(), v) if isinstance(v, str) else v).astype("string")
    return codes.get(x.upper(), x) if isinstance(x, str) else x


@dataclass
class Registry:
    """Named factories and transforms available to callback expressions."""

    factories: dict[str, Callable[..., ItemCallback]] = field(default_factory=dict)
    transforms: dict[str, Callable] = field(default_factory=dict)

    def register_factory(self, name: str, fn: Optional[Callable] = None):
        if fn is None:
            return lambda f: self.register_factory(name, f)
        self.factories[name] = fn
        return fn

    def register_transform(self, name: str, fn: Optional[Callable] = None):
        if fn is None:
            return lambda f: self.register_transform(name, f)
        self.transforms[name] = fn
        return fn

    def copy(self) -> "Registry":
        return Registry(dict(self.factories), dict(self.transforms))


def default_registry() -> Registry:
    reg = Registry()
    reg.register_factory("convert_unit", convert_unit)
    reg.register_factory("transform_fun", transform_fun)
    for fn in (fahr_to_cels, set_true, identity, fraction_to_percent, sex_from_code):
        reg.register_transform(fn.__name__, fn)
    return reg


REGISTRY = default_registry()


def evaluate(expr: CallbackExpr, registry: Optional[Registry] = None) -> ItemCallback:
    registry = REGISTRY if registry is None else registry
    try:
        factory = registry.factories[expr.head]
    except KeyError:
        raise UnknownFactory(f"unknown callback factory {expr.head!r}") from None
    args: list[Any] = []
    for a in expr.args:
        if isinstance(a, Ident):
            try:
                args.append(registry.transforms[a.name])
            except KeyError:
                raise UnknownTransform(f"unknown transform {a.name!r}") from None
        else:
            args.append(a)
    try:
        inspect.signature(factory).bind(*args)
    except TypeError as exc:
        raise ArityMismatch(f"{expr.head}: {exc}") from None
    return factory(*args)


def compile_callback(src: str, registry: Optional[Registry] = None) -> ItemCallback:
    return evaluate(parse_callback(src), registry)
