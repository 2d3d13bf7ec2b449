"""Typed columnar microdata: schema, validation, CSV I/O and hold-out splits.

Every column is held as a read-only ``float64`` array with ``NaN`` marking a
missing cell. Binary columns hold 0/1, ordinal columns hold their integer level
code, nominal columns hold the 0-based index into their declared level list.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

__all__ = [
    "Kind",
    "Variable",
    "Schema",
    "Dataset",
    "SchemaError",
    "DataValidationError",
    "load_schema",
    "dump_schema",
    "load_csv",
    "write_csv",
    "split_holdout",
    "exclude_variables",
]


class SchemaError(ValueError):
    pass


class DataValidationError(ValueError):
    """A cell does not conform to its declared variable kind."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class Kind(str, enum.Enum):
    QUANTITATIVE = "quantitative"
    ORDINAL = "ordinal"
    BINARY = "binary"
    NOMINAL = "nominal"

    @property
    def is_categorical(self) -> bool:
        return self is not Kind.QUANTITATIVE


@dataclass(frozen=True)
class Variable:
    name: str
    kind: Kind
    levels: tuple = ()
    missing_allowed: bool = False

    def __post_init__(self):
        kind = Kind(self.kind)
        object.__setattr__(self, "kind", kind)
        levels = tuple(self.levels)
        if kind in (Kind.ORDINAL, Kind.NOMINAL):
            if not levels:
                raise SchemaError(f"{self.name}: {kind.value} variable needs a non-empty level list")
            if len(set(map(str, levels))) != len(levels):
                raise SchemaError(f"{self.name}: duplicate levels")
            if kind is Kind.ORDINAL:
                if not all(isinstance(v, (int, np.integer)) and not isinstance(v, bool) for v in levels):
                    raise SchemaError(f"{self.name}: ordinal levels must be integers")
                levels = tuple(int(v) for v in levels)
        elif kind is Kind.BINARY:
            if levels and tuple(levels) != (0, 1):
                raise SchemaError(f"{self.name}: binary levels are fixed to (0, 1)")
            levels = (0, 1)
        elif levels:
            raise SchemaError(f"{self.name}: quantitative variables take no levels")
        object.__setattr__(self, "levels", levels)

    @property
    def n_categories(self) -> int:
        return len(self.levels)

    def rank(self, values: np.ndarray) -> np.ndarray:
        """Numeric encoding used by distances and variance splits.

        Ordinal codes become 1-based ranks in declared level order; other kinds
        are returned unchanged.
        """
        if self.kind is not Kind.ORDINAL:
            return values
        lookup = {code: i + 1 for i, code in enumerate(self.levels)}
        out = np.full(values.shape, np.nan)
        ok = ~np.isnan(values)
        out[ok] = [lookup[int(v)] for v in values[ok]]
        return out

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind.value, "missing_allowed": self.missing_allowed}
        if self.kind in (Kind.ORDINAL, Kind.NOMINAL):
            d["levels"] = list(self.levels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Variable":
        unknown = set(d) - {"name", "kind", "levels", "missing_allowed"}
        if unknown:
            raise SchemaError(f"unknown schema keys {sorted(unknown)}")
        try:
            return cls(
                name=d["name"],
                kind=Kind(d["kind"]),
                levels=tuple(d.get("levels", ())),
                missing_allowed=bool(d.get("missing_allowed", False)),
            )
        except KeyError as exc:
            raise SchemaError(f"schema entry missing field {exc}") from None
        except ValueError as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(str(exc)) from None


@dataclass(frozen=True)
class Schema:
    variables: tuple

    def __post_init__(self):
        variables = tuple(self.variables)
        names = [v.name for v in variables]
        if len(set(names)) != len(names):
            raise SchemaError("variable names must be unique")
        for name in names:
            if not isinstance(name, str) or not name:
                raise SchemaError(f"invalid variable name {name!r}")
        object.__setattr__(self, "variables", variables)

    @property
    def names(self) -> list:
        return [v.name for v in self.variables]

    def __getitem__(self, name: str) -> Variable:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    def __contains__(self, name) -> bool:
        return any(v.name == name for v in self.variables)

    def __len__(self):
        return len(self.variables)

    def __iter__(self):
        return iter(self.variables)

    def select(self, names: Iterable[str]) -> "Schema":
        return Schema(tuple(self[n] for n in names))

    def check_names(self, names: Iterable[str], what="variable"):
        unknown = [n for n in names if n not in self]
        if unknown:
            raise SchemaError(f"unknown {what}(s): {', '.join(map(str, unknown))}")

    def to_list(self) -> list:
        return [v.to_dict() for v in self.variables]

    @classmethod
    def from_list(cls, items: Sequence[Mapping]) -> "Schema":
        return cls(tuple(Variable.from_dict(d) for d in items))


def load_schema(path) -> Schema:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if isinstance(raw, dict):
        raw = raw.get("variables", raw)
    if not isinstance(raw, list):
        raise SchemaError("schema file must hold a list of variables")
    return Schema.from_list(raw)


def dump_schema(schema: Schema, path) -> None:
    _atomic_write_text(path, json.dumps({"variables": schema.to_list()}, indent=2) + "\n")


def _check_column(var: Variable, values: np.ndarray) -> None:
    """Raise on the first non-conforming cell (row index is 0-based)."""
    missing = np.isnan(values)
    if missing.any() and not var.missing_allowed:
        row = int(np.flatnonzero(missing)[0])
        raise DataValidationError(f"row {row}, column {var.name}: missing value not allowed", row, var.name)
    obs = values[~missing]
    if var.kind is Kind.QUANTITATIVE:
        bad = ~np.isfinite(obs)
    elif var.kind is Kind.BINARY:
        bad = (obs != 0) & (obs != 1)
    elif var.kind is Kind.ORDINAL:
        bad = ~np.isin(obs, np.asarray(var.levels, dtype=float))
    else:
        bad = (obs < 0) | (obs >= var.n_categories) | (obs != np.floor(obs))
    if bad.any():
        row = int(np.flatnonzero(~missing)[np.flatnonzero(bad)[0]])
        raise DataValidationError(
            f"row {row}, column {var.name}: value {values[row]!r} outside {var.kind.value} domain",
            row,
            var.name,
        )


class Dataset:
    """Immutable table of typed columns.

    >>> schema = Schema((Variable("x", Kind.BINARY),))
    >>> Dataset(schema, {"x": [0, 1, 0]}).n_rows
    3
    """

    __slots__ = ("_schema", "_columns", "_n_rows")

    def __init__(self, schema: Schema, columns: Mapping[str, Sequence], validate: bool = True):
        if set(columns) != set(schema.names):
            missing = sorted(set(schema.names) - set(columns))
            extra = sorted(set(columns) - set(schema.names))
            raise SchemaError(f"columns do not match schema (missing={missing}, extra={extra})")
        cols = {}
        lengths = set()
        for var in schema:
            arr = np.array(columns[var.name], dtype=float)
            if arr.ndim != 1:
                raise DataValidationError(f"column {var.name} must be one-dimensional", column=var.name)
            if validate:
                _check_column(var, arr)
            arr.setflags(write=False)
            cols[var.name] = arr
            lengths.add(arr.shape[0])
        if len(lengths) > 1:
            raise DataValidationError("columns have different lengths")
        self._schema = schema
        self._columns = cols
        self._n_rows = lengths.pop() if lengths else 0

    @property
    def schema(self) -> Schema:
        return self._schema

    @property
    def names(self) -> list:
        return self._schema.names

    @property
    def n_rows(self) -> int:
        return self._n_rows

    def __len__(self):
        return self._n_rows

    def __getitem__(self, name: str) -> np.ndarray:
        return self._columns[name]

    def column(self, name: str) -> np.ndarray:
        return self._columns[name]

    def matrix(self, names: Sequence[str] | None = None, ranked: bool = False) -> np.ndarray:
        names = self.names if names is None else list(names)
        if not names:
            return np.empty((self._n_rows, 0))
        cols = [self._schema[n].rank(self._columns[n]) if ranked else self._columns[n] for n in names]
        return np.column_stack(cols)

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        return Dataset(self._schema, {n: c[idx] for n, c in self._columns.items()}, validate=False)

    def select(self, names: Sequence[str]) -> "Dataset":
        self._schema.check_names(names)
        return Dataset(self._schema.select(names), {n: self._columns[n] for n in names}, validate=False)

    def with_column(self, name: str, values) -> "Dataset":
        """Copy with one column replaced (validated)."""
        cols = dict(self._columns)
        cols[name] = np.asarray(values, dtype=float)
        _check_column(self._schema[name], cols[name])
        return Dataset(self._schema, cols, validate=False)

    def concat(self, other: "Dataset") -> "Dataset":
        if other.schema != self._schema:
            raise SchemaError("cannot concatenate datasets with different schemas")
        return Dataset(
            self._schema,
            {n: np.concatenate([self._columns[n], other[n]]) for n in self.names},
            validate=False,
        )

    def to_frame(self, labels: bool = False) -> pd.DataFrame:
        """Columns as a DataFrame; ``labels=True`` maps nominal indices to labels."""
        data = {}
        for var in self._schema:
            col = self._columns[var.name]
            if labels and var.kind is Kind.NOMINAL:
                data[var.name] = [None if math.isnan(v) else var.levels[int(v)] for v in col]
            else:
                data[var.name] = col
        return pd.DataFrame(data, columns=self.names)

    @classmethod
    def from_frame(cls, schema: Schema, frame: pd.DataFrame) -> "Dataset":
        return cls(schema, {n: frame[n].to_numpy(dtype=float, na_value=np.nan) for n in schema.names})

    def equals(self, other: "Dataset") -> bool:
        if not isinstance(other, Dataset) or other.schema != self._schema:
            return False
        return all(
            np.array_equal(self._columns[n], other[n], equal_nan=True) for n in self.names
        )

    __eq__ = equals
    __hash__ = None

    def __repr__(self):
        return f"Dataset(n_rows={self._n_rows}, variables={self.names})"


# --- CSV ---------------------------------------------------------------------


def _format_cell(var: Variable, value: float) -> str:
    if math.isnan(value):
        return ""
    if var.kind is Kind.QUANTITATIVE:
        return repr(float(value))
    if var.kind is Kind.NOMINAL:
        return str(var.levels[int(value)])
    return str(int(value))


def _parse_cell(var: Variable, text: str, row: int) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    if var.kind is Kind.NOMINAL:
        labels = [str(lv) for lv in var.levels]
        try:
            return float(labels.index(text))
        except ValueError:
            raise DataValidationError(
                f"row {row}, column {var.name}: {text!r} is not a declared level", row, var.name
            ) from None
    try:
        value = float(text)
    except ValueError:
        raise DataValidationError(f"row {row}, column {var.name}: cannot parse {text!r}", row, var.name) from None
    if var.kind is not Kind.QUANTITATIVE and value != math.floor(value):
        raise DataValidationError(f"row {row}, column {var.name}: {text!r} is not an integer code", row, var.name)
    return value


def load_csv(path, schema: Schema) -> Dataset:
    """Read a UTF-8 CSV whose header lists the schema names in order.

    Row numbers in error messages are 1-based data rows (the header is row 0).
    """
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError(f"{path}: empty file") from None
        if [h.strip() for h in header] != schema.names:
            raise SchemaError(f"{path}: header {header} does not match schema {schema.names}")
        cols = {n: [] for n in schema.names}
        for i, record in enumerate(reader, start=1):
            if not record:
                continue
            if len(record) != len(schema):
                raise DataValidationError(f"row {i}: expected {len(schema)} fields, got {len(record)}", i)
            for var, text in zip(schema, record):
                cols[var.name].append(_parse_cell(var, text, i))
    for var in schema:
        arr = np.asarray(cols[var.name], dtype=float)
        try:
            _check_column(var, arr)
        except DataValidationError as exc:
            row = exc.row + 1
            raise DataValidationError(
                f"row {row}, column {var.name}: " + str(exc).split(": ", 1)[1], row, var.name
            ) from None
    return Dataset(schema, cols, validate=False)


def dataset_to_csv_text(data: Dataset) -> str:
    lines = [",".join(_csv_quote(n) for n in data.names)]
    cols = [(var, data[var.name]) for var in data.schema]
    for i in range(data.n_rows):
        lines.append(",".join(_csv_quote(_format_cell(var, col[i])) for var, col in cols))
    return "\n".join(lines) + "\n"


def _csv_quote(text: str) -> str:
    if any(c in text for c in ',"\n\r'):
        return '"' + text.replace('"', '""') + '"'
    return text


def write_csv(data: Dataset, path) -> None:
    _atomic_write_text(path, dataset_to_csv_text(data))


def _atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


# --- row-level operations ------------------------------------------------------


def split_holdout(data: Dataset, k: int, seed: int):
    """Draw ``k`` control rows without replacement; return ``(train, control)``.

    Both parts keep the original row order.
    """
    if not 0 < k < data.n_rows:
        raise ValueError(f"k must satisfy 0 < k < n_rows={data.n_rows}, got {k}")
    rng = np.random.default_rng(seed)
    control = np.sort(rng.choice(data.n_rows, size=k, replace=False))
    mask = np.ones(data.n_rows, dtype=bool)
    mask[control] = False
    return data.take(np.flatnonzero(mask)), data.take(control)


def exclude_variables(data: Dataset, names: Sequence[str]) -> Dataset:
    data.schema.check_names(names)
    drop = set(names)
    return data.select([n for n in data.names if n not in drop])
