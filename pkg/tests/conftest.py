"""Shared fixtures and random-table generators for the test suite."""

from __future__ import annotations

import random
import string
from decimal import Decimal

import pytest

from tabforge.table_model import Cell, ColumnSpec, Table, NUMERIC, TEXTUAL

# Word pool for textual cells: never parses as a decimal, never a missing
# spelling, exercises unicode and pipes.
TEXT_WORDS = [
    "alice",
    "bob",
    "smørrebrød",
    "naïve",
    "東京",
    "red|blue",
    "a|b|c",
    "x y z",
    "it's",
    "quote\"d",
    "comma, inc",
    "trailing\\",
    "under_score",
    "UPPER",
]


def random_text(rng: random.Random) -> str:
    word = rng.choice(TEXT_WORDS)
    if rng.random() < 0.3:
        word = f"{word} {rng.choice(TEXT_WORDS)}"
    return word


def random_numeric(rng: random.Random) -> Decimal:
    whole = rng.randint(-99999, 99999)
    frac_digits = rng.randint(0, 5)
    if frac_digits == 0:
        return Decimal(whole)
    frac = rng.randint(0, 10**frac_digits - 1)
    return Decimal(f"{whole}.{str(frac).zfill(frac_digits)}")


def random_canonical_table(rng: random.Random, *, max_cols: int = 5, max_rows: int = 6) -> Table:
    """A Table that survives both the raw-grid and the Markdown round trips.

    Numeric columns keep at least one value so kind inference is stable, and
    textual cells never look like decimals or missing spellings.
    """
    n_cols = rng.randint(1, max_cols)
    n_rows = rng.randint(1, max_rows)
    columns = []
    used = set()
    for j in range(n_cols):
        while True:
            name = "".join(rng.choices(string.ascii_lowercase, k=rng.randint(1, 6)))
            if rng.random() < 0.2:
                name = f"{name} {rng.randint(0, 9)}"
            if rng.random() < 0.1:
                name = f"{name}|{rng.randint(0, 9)}"
            if name not in used:
                used.add(name)
                break
        kind = NUMERIC if rng.random() < 0.5 else TEXTUAL
        columns.append(ColumnSpec(name=name, kind=kind))

    rows = []
    anchored = set()  # columns guaranteed one non-missing value
    for i in range(n_rows):
        cells = []
        for j, spec in enumerate(columns):
            force_value = j not in anchored and i == n_rows - 1
            if not force_value and rng.random() < 0.15:
                cells.append(Cell.missing())
                continue
            anchored.add(j)
            if spec.kind == NUMERIC:
                cells.append(Cell.numeric(random_numeric(rng)))
            else:
                cells.append(Cell.text(random_text(rng)))
        rows.append(tuple(cells))
    return Table(
        name=f"t{rng.randint(0, 999)}",
        domain_tag=rng.choice([None, "finance", "health", "misc"]),
        columns=tuple(columns),
        rows=tuple(rows),
    )


@pytest.fixture
def rng() -> random.Random:
    return random.Random(12345)


@pytest.fixture
def people_table() -> Table:
    return Table(
        name="people",
        domain_tag="demo",
        columns=(ColumnSpec("name", TEXTUAL), ColumnSpec("age", NUMERIC)),
        rows=(
            (Cell.text("alice"), Cell.numeric(30)),
            (Cell.text("bob"), Cell.missing()),
        ),
    )
