"""Canonical in-memory tables: typed cells, column-kind inference, numeric canonicalization.

Tables are immutable after construction and safe to share across threads. All
numeric content is stored as exact `Decimal` values canonicalized to at most
five fractional digits (half-to-even rounding).
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Context, Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Iterator, Sequence

#: Maximum number of fractional digits kept by canonicalization.
PRECISION_DIGITS = 5

_QUANTUM = Decimal(1).scaleb(-PRECISION_DIGITS)
# Wide precision so quantizing very large magnitudes never overflows digits.
_DECIMAL_CTX = Context(prec=425)

DEFAULT_NUMERIC_THRESHOLD = 0.99

#: Raw spellings that map to a missing cell on ingestion (case-insensitive,
#: compared after stripping surrounding whitespace).
MISSING_TOKENS = frozenset({"", "na", "n/a", "null"})

NUMERIC = "numeric"
TEXTUAL = "textual"
COLUMN_KINDS = (NUMERIC, TEXTUAL)


class TableError(ValueError):
    """Structural problem with a raw grid or table definition."""


class NumericError(ValueError):
    """Value cannot be canonicalized as a finite decimal."""


_LINE_BREAKS = re.compile(r"[\r\n]+")


def normalize_cell_text(value: str) -> str:
    """Fold line breaks to single spaces; cell text must stay single-line."""
    return _LINE_BREAKS.sub(" ", value)


def is_missing_token(raw: str) -> bool:
    return raw.strip().lower() in MISSING_TOKENS


def parse_decimal(raw: str) -> Decimal | None:
    """Parse ``raw`` as a finite decimal, or return None."""
    try:
        value = Decimal(raw)
    except (InvalidOperation, ValueError):
        return None
    return value if value.is_finite() else None


def canonicalize_numeric(value: Decimal | int | float | str) -> str:
    """Render a finite decimal at 5-digit precision, half-to-even.

    Trailing zeros and a trailing decimal point are stripped; negative zero
    collapses to "0". Canonicalizing the parse of the output is a fixpoint.
    """
    if isinstance(value, Decimal):
        dec = value
    elif isinstance(value, bool):
        raise NumericError(f"not a numeric value: {value!r}")
    elif isinstance(value, int):
        dec = Decimal(value)
    elif isinstance(value, float):
        if not math.isfinite(value):
            raise NumericError(f"non-finite value: {value!r}")
        dec = Decimal(repr(value))
    elif isinstance(value, str):
        parsed = parse_decimal(value)
        if parsed is None:
            raise NumericError(f"not a finite decimal: {value!r}")
        dec = parsed
    else:
        raise NumericError(f"not a numeric value: {value!r}")
    if not dec.is_finite():
        raise NumericError(f"non-finite value: {value!r}")

    quantized = dec.quantize(_QUANTUM, rounding=ROUND_HALF_EVEN, context=_DECIMAL_CTX)
    text = format(quantized, "f")
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    if text in ("-0", ""):
        text = "0"
    return text


@dataclass(frozen=True)
class Cell:
    """One table cell: a canonical Decimal, single-line text, or missing (None)."""

    value: Decimal | str | None

    @staticmethod
    def numeric(value: Decimal | int | float | str) -> "Cell":
        return Cell(Decimal(canonicalize_numeric(value)))

    @staticmethod
    def text(value: str) -> "Cell":
        normalized = normalize_cell_text(value)
        if normalized == "":
            raise TableError("text cells must be non-empty; use Cell.missing()")
        return Cell(normalized)

    @staticmethod
    def missing() -> "Cell":
        return _MISSING

    @property
    def is_missing(self) -> bool:
        return self.value is None

    @property
    def is_numeric(self) -> bool:
        return isinstance(self.value, Decimal)

    def render(self) -> str:
        """Canonical surface text; missing renders as the empty string."""
        if self.value is None:
            return ""
        if isinstance(self.value, Decimal):
            return format(self.value, "f")
        return self.value


_MISSING = Cell(None)


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str

    def __post_init__(self) -> None:
        normalized = normalize_cell_text(self.name).strip()
        if not normalized:
            raise TableError("column names must be non-empty after trimming")
        object.__setattr__(self, "name", normalized)
        if self.kind not in COLUMN_KINDS:
            raise TableError(f"unknown column kind: {self.kind!r}")


def dedupe_column_names(names: Sequence[str]) -> list[str]:
    """Make names unique left to right by suffixing _2, _3, ..."""
    used: set[str] = set()
    result = []
    for name in names:
        candidate = name
        suffix = 2
        while candidate in used:
            candidate = f"{name}_{suffix}"
            suffix += 1
        used.add(candidate)
        result.append(candidate)
    return result


@dataclass(frozen=True)
class Table:
    """Named, domain-tagged grid of typed columns with per-cell missingness."""

    name: str
    columns: tuple[ColumnSpec, ...]
    rows: tuple[tuple[Cell, ...], ...]
    domain_tag: str | None = None

    def __post_init__(self) -> None:
        if not self.columns:
            raise TableError("table has no columns")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise TableError(f"duplicate column names in table {self.name!r}")
        width = len(self.columns)
        for i, row in enumerate(self.rows):
            if len(row) != width:
                raise TableError(f"row {i} has {len(row)} cells, expected {width}")
            for cell, spec in zip(row, self.columns):
                if cell.is_numeric and spec.kind != NUMERIC:
                    raise TableError(f"numeric cell in textual column {spec.name!r}")
                if not cell.is_missing and not cell.is_numeric and spec.kind != TEXTUAL:
                    raise TableError(f"text cell in numeric column {spec.name!r}")

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def n_columns(self) -> int:
        return len(self.columns)

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    def column_index(self, name: str) -> int:
        for i, spec in enumerate(self.columns):
            if spec.name == name:
                return i
        raise KeyError(f"no column named {name!r} in table {self.name!r}")

    def to_raw(self) -> list[list[str]]:
        """Header + body as raw strings; inverse input for load_table."""
        grid = [list(self.column_names)]
        for row in self.rows:
            grid.append([cell.render() for cell in row])
        return grid

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "domain_tag": self.domain_tag,
            "columns": [{"name": c.name, "kind": c.kind} for c in self.columns],
            "rows": [
                [None if cell.is_missing else cell.render() for cell in row]
                for row in self.rows
            ],
        }

    @staticmethod
    def from_json_dict(data: dict) -> "Table":
        columns = tuple(ColumnSpec(c["name"], c["kind"]) for c in data["columns"])
        rows = []
        for raw_row in data["rows"]:
            cells = []
            for raw, spec in zip(raw_row, columns):
                if raw is None:
                    cells.append(Cell.missing())
                elif spec.kind == NUMERIC:
                    cells.append(Cell.numeric(raw))
                else:
                    cells.append(Cell.text(raw))
            rows.append(tuple(cells))
        return Table(
            name=data["name"],
            domain_tag=data.get("domain_tag"),
            columns=columns,
            rows=tuple(rows),
        )


def infer_column_kinds(
    raw_columns: Sequence[tuple[str, Sequence[str]]],
    numeric_threshold: float = DEFAULT_NUMERIC_THRESHOLD,
    *,
    missing_tokens: frozenset[str] | set[str] = MISSING_TOKENS,
) -> list[ColumnSpec]:
    """Classify each (name, raw values) column as numeric or textual.

    A column is numeric iff the fraction of non-missing entries parsing as
    finite decimals is >= numeric_threshold. Columns with no non-missing
    entries carry no numeric evidence and fall back to textual.
    """
    if not 0.5 < numeric_threshold <= 1.0:
        raise ValueError(f"numeric_threshold must be in (0.5, 1.0], got {numeric_threshold}")
    if not raw_columns:
        raise TableError("table has no columns")
    specs = []
    for name, values in raw_columns:
        present = [v for v in values if v.strip().lower() not in missing_tokens]
        if present:
            numeric_count = sum(1 for v in present if parse_decimal(v) is not None)
            kind = NUMERIC if numeric_count / len(present) >= numeric_threshold else TEXTUAL
        else:
            kind = TEXTUAL
        specs.append(ColumnSpec(name=name, kind=kind))
    return specs


def load_table(
    grid: Sequence[Sequence[str]],
    name: str,
    domain_tag: str | None = None,
    numeric_threshold: float = DEFAULT_NUMERIC_THRESHOLD,
) -> Table:
    """Build a canonical Table from a raw string grid whose first row is the header.

    Short body rows are padded with missing cells; rows wider than the header
    are rejected. In a numeric column, the rare non-parsing entry (tolerated by
    the inference threshold) loads as missing since no typed value exists for it.
    """
    if not grid:
        raise TableError("empty grid")
    if len(grid) < 2:
        raise TableError("grid has a header but no body rows")
    header = [normalize_cell_text(h).strip() for h in grid[0]]
    if not header:
        raise TableError("table has no columns")
    if any(not h for h in header):
        raise TableError("column names must be non-empty after trimming")
    header = dedupe_column_names(header)
    width = len(header)

    body: list[list[str]] = []
    for i, raw_row in enumerate(grid[1:]):
        row = list(raw_row)
        if len(row) > width:
            raise TableError(f"row {i + 1} wider than header ({len(row)} > {width})")
        row.extend([""] * (width - len(row)))
        body.append(row)

    raw_columns = [(header[j], [row[j] for row in body]) for j in range(width)]
    specs = infer_column_kinds(raw_columns, numeric_threshold)

    rows = []
    for row in body:
        cells = []
        for raw, spec in zip(row, specs):
            if is_missing_token(raw):
                cells.append(Cell.missing())
            elif spec.kind == NUMERIC:
                parsed = parse_decimal(raw)
                cells.append(Cell.missing() if parsed is None else Cell.numeric(parsed))
            else:
                cells.append(Cell.text(raw))
        rows.append(tuple(cells))
    return Table(name=name, domain_tag=domain_tag, columns=tuple(specs), rows=tuple(rows))


def read_csv(
    path: str | Path,
    name: str | None = None,
    domain_tag: str | None = None,
    numeric_threshold: float = DEFAULT_NUMERIC_THRESHOLD,
) -> Table:
    """Load an RFC-4180 CSV file (UTF-8, first row header) into a Table."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as handle:
        grid = list(csv.reader(handle))
    table_name = name if name is not None else path.stem
    return load_table(grid, name=table_name, domain_tag=domain_tag, numeric_threshold=numeric_threshold)


def write_tables_jsonl(path: str | Path, tables: Iterable[Table]) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for table in tables:
            handle.write(json.dumps(table.to_json_dict(), sort_keys=True, ensure_ascii=False))
            handle.write("\n")


def read_tables_jsonl(path: str | Path) -> Iterator[Table]:
    with Path(path).open("r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                yield Table.from_json_dict(json.loads(line))
