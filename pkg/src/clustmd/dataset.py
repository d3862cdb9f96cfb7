"""Mixed-type data ingestion, validation and ordinal threshold estimation.

A dataset is stored in canonical block order: continuous columns first,
then ordinal (including binary) columns, then nominal columns. Categorical
cells are integer codes ``1..K``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtri

CONTINUOUS = "continuous"
ORDINAL = "ordinal"
NOMINAL = "nominal"
_KIND_ORDER = {CONTINUOUS: 0, ORDINAL: 1, NOMINAL: 2}


class DatasetError(ValueError):
    """Base class for ingestion failures."""


class SchemaError(DatasetError):
    pass


class UnknownColumnError(DatasetError):
    pass


class CellError(DatasetError):
    """A bad cell; carries the 1-based data row and the column name."""

    def __init__(self, message: str, row: int, column: str):
        super().__init__(f"row {row}, column {column!r}: {message}")
        self.row = row
        self.column = column


class MissingCellError(CellError):
    pass


class NonNumericCellError(CellError):
    pass


class CategoryRangeError(CellError):
    pass


class ThresholdError(DatasetError):
    pass


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    levels: int | None = None

    def __post_init__(self):
        if self.kind not in _KIND_ORDER:
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CONTINUOUS:
            if self.levels is not None:
                raise SchemaError(f"column {self.name!r}: continuous columns take no levels")
            return
        if self.levels is None or int(self.levels) != self.levels:
            raise SchemaError(f"column {self.name!r}: categorical columns need an integer level count")
        if self.kind == ORDINAL and self.levels < 2:
            raise SchemaError(f"column {self.name!r}: ordinal columns need at least 2 levels")
        if self.kind == NOMINAL and self.levels < 2:
            raise SchemaError(f"column {self.name!r}: nominal columns need at least 2 levels")
        if self.kind == NOMINAL and self.levels == 2:
            # binary nominal and binary ordinal coincide; use the exact path
            object.__setattr__(self, "kind", ORDINAL)

    @property
    def is_categorical(self) -> bool:
        return self.kind != CONTINUOUS

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.levels is not None:
            d["levels"] = int(self.levels)
        return d


def canonical_order(schema: Sequence[ColumnSpec]) -> list[int]:
    """Stable permutation putting columns in continuous/ordinal/nominal order."""
    return sorted(range(len(schema)), key=lambda j: _KIND_ORDER[schema[j].kind])


@dataclass(frozen=True)
class MixedDataset:
    """Validated N x J mixed table in canonical block order.

    ``continuous`` is N x C floats, ``categorical`` is N x (O + nominal)
    integer codes. ``permutation[j]`` is the position, in the source file,
    of canonical column ``j``.
    """

    schema: tuple[ColumnSpec, ...]
    continuous: np.ndarray
    categorical: np.ndarray
    permutation: tuple[int, ...] = field(default=())

    def __post_init__(self):
        schema = tuple(self.schema)
        object.__setattr__(self, "schema", schema)
        kinds = [_KIND_ORDER[c.kind] for c in schema]
        if kinds != sorted(kinds):
            raise SchemaError("schema is not in canonical block order")
        names = [c.name for c in schema]
        if len(set(names)) != len(names):
            raise SchemaError("column names must be unique")
        cont = np.asarray(self.continuous, dtype=float)
        cat = np.asarray(self.categorical, dtype=np.int64)
        n = max(cont.shape[0] if cont.ndim == 2 else 0, cat.shape[0] if cat.ndim == 2 else 0)
        cont = cont.reshape(n, self.C)
        cat = cat.reshape(n, self.O + self.n_nominal)
        if not np.all(np.isfinite(cont)):
            raise DatasetError("continuous block contains non-finite values")
        for k, spec in enumerate(schema[self.C:]):
            col = cat[:, k]
            if col.size and (col.min() < 1 or col.max() > spec.levels):
                bad = int(np.flatnonzero((col < 1) | (col > spec.levels))[0])
                raise CategoryRangeError(
                    f"code {int(col[bad])} outside 1..{spec.levels}", bad + 1, spec.name)
        cont.setflags(write=False)
        cat.setflags(write=False)
        object.__setattr__(self, "continuous", cont)
        object.__setattr__(self, "categorical", cat)
        if not self.permutation:
            object.__setattr__(self, "permutation", tuple(range(len(schema))))

    @property
    def N(self) -> int:
        return self.continuous.shape[0]

    @property
    def J(self) -> int:
        return len(self.schema)

    @property
    def C(self) -> int:
        return sum(c.kind == CONTINUOUS for c in self.schema)

    @property
    def O(self) -> int:  # noqa: E743
        return sum(c.kind == ORDINAL for c in self.schema)

    @property
    def n_nominal(self) -> int:
        return sum(c.kind == NOMINAL for c in self.schema)

    @property
    def ordinal(self) -> np.ndarray:
        return self.categorical[:, : self.O]

    @property
    def nominal(self) -> np.ndarray:
        return self.categorical[:, self.O:]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.schema]

    def levels(self) -> list[int]:
        return [c.levels for c in self.schema[self.C:]]

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "J": self.J,
            "C": self.C,
            "O": self.O,
            "nominal": self.n_nominal,
            "schema": [c.to_dict() for c in self.schema],
            "permutation": list(self.permutation),
        }


def _parse_schema(doc: dict) -> list[ColumnSpec]:
    try:
        cols = doc["columns"]
    except (KeyError, TypeError):
        raise SchemaError('schema must be an object with a "columns" list') from None
    out = []
    for c in cols:
        try:
            out.append(ColumnSpec(str(c["name"]), str(c["kind"]).lower(), c.get("levels")))
        except KeyError as e:
            raise SchemaError(f"schema column missing field {e}") from None
    names = [c.name for c in out]
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        raise SchemaError(f"duplicate column names in schema: {sorted(dupes)}")
    return out


def load_schema(path: str | Path) -> list[ColumnSpec]:
    with open(path, encoding="utf-8") as fh:
        return _parse_schema(json.load(fh))


def from_records(rows: Iterable[Sequence], schema: Sequence[ColumnSpec],
                 header: Sequence[str] | None = None) -> MixedDataset:
    """Build a dataset from raw string/number rows ordered like ``header``.

    ``header`` defaults to the schema order. Rows are validated cell by cell.
    """
    schema = list(schema)
    by_name = {c.name: c for c in schema}
    header = [c.name for c in schema] if header is None else [h.strip() for h in header]
    for h in header:
        if h not in by_name:
            raise UnknownColumnError(f"column {h!r} is not declared in the schema")
    missing = [n for n in by_name if n not in header]
    if missing:
        raise SchemaError(f"schema columns absent from data: {missing}")
    file_specs = [by_name[h] for h in header]
    perm = canonical_order(file_specs)

    values: list[list[float]] = []
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise CellError(f"expected {len(header)} fields, found {len(row)}", r,
                            header[min(len(row), len(header) - 1)])
        parsed = []
        for spec, cell in zip(file_specs, row):
            text = cell.strip() if isinstance(cell, str) else cell
            if text is None or text == "" or (isinstance(text, str) and text.upper() in {"NA", "NAN"}):
                raise MissingCellError("missing value", r, spec.name)
            try:
                x = float(text)
            except (TypeError, ValueError):
                raise NonNumericCellError(f"cannot parse {text!r} as a number", r, spec.name) from None
            if not math.isfinite(x):
                raise MissingCellError("non-finite value", r, spec.name)
            if spec.is_categorical:
                if x != int(x):
                    raise CategoryRangeError(f"code {text!r} is not an integer", r, spec.name)
                if not 1 <= x <= spec.levels:
                    raise CategoryRangeError(f"code {int(x)} outside 1..{spec.levels}", r, spec.name)
            parsed.append(x)
        values.append(parsed)

    arr = np.asarray(values, dtype=float).reshape(len(values), len(header))[:, perm]
    ordered = [file_specs[j] for j in perm]
    C = sum(c.kind == CONTINUOUS for c in ordered)
    return MixedDataset(tuple(ordered), arr[:, :C], arr[:, C:].astype(np.int64), tuple(perm))


def load_dataset(csv_path: str | Path, schema_path: str | Path) -> MixedDataset:
    """Read a CSV with a header row plus a JSON schema sidecar."""
    schema = load_schema(schema_path)
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{csv_path}: empty file") from None
        rows = [row for row in reader if row]
    return from_records(rows, schema, header)


def write_dataset(data: MixedDataset, csv_path: str | Path, schema_path: str | Path | None = None) -> None:
    """Write ``data`` in canonical column order; floats use ``repr`` so reloads are exact."""
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(data.names)
        for i in range(data.N):
            w.writerow([repr(float(x)) for x in data.continuous[i]] + [int(k) for k in data.categorical[i]])
    if schema_path is not None:
        with open(schema_path, "w", encoding="utf-8") as fh:
            json.dump({"columns": [c.to_dict() for c in data.schema]}, fh, indent=2)


@dataclass(frozen=True)
class ThresholdSet:
    """Per ordinal column, thresholds ``gamma_0=-inf <= ... <= gamma_K=+inf``."""

    gammas: tuple[np.ndarray, ...]
    names: tuple[str, ...] = ()

    def __len__(self):
        return len(self.gammas)

    def __getitem__(self, j) -> np.ndarray:
        return self.gammas[j]

    def to_dict(self) -> dict:
        def enc(x):
            return "-inf" if x == -np.inf else "inf" if x == np.inf else float(x)
        return {"thresholds": [{"name": n, "gamma": [enc(x) for x in g]}
                               for n, g in zip(self.names, self.gammas)]}


def thresholds_from_proportions(cum_props: Sequence[float]) -> np.ndarray:
    """Map cumulative proportions (delta_1..delta_{K-1}) to a full threshold vector."""
    d = np.asarray(cum_props, dtype=float)
    g = np.concatenate([[-np.inf], ndtri(d), [np.inf]])
    g.setflags(write=False)
    return g


def compute_thresholds(data: MixedDataset) -> ThresholdSet:
    """Fix ordinal thresholds at standard-normal quantiles of pooled cumulative proportions."""
    gammas, names = [], []
    for k, spec in enumerate(data.schema[data.C: data.C + data.O]):
        counts = np.bincount(data.ordinal[:, k], minlength=spec.levels + 1)[1:]
        delta = np.cumsum(counts)[:-1] / data.N
        bad = np.flatnonzero((delta <= 0) | (delta >= 1))
        if bad.size:
            lvl = int(bad[0]) + 1
            raise ThresholdError(
                f"ordinal column {spec.name!r}: cumulative proportion at level {lvl} is "
                f"{delta[bad[0]]:g}, giving an infinite threshold; merge unobserved or "
                f"exhausted levels with their neighbours")
        gammas.append(thresholds_from_proportions(delta))
        names.append(spec.name)
    return ThresholdSet(tuple(gammas), tuple(names))
