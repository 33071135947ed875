"""Markdown table serialization, the unified prompt template, and sentence rendering.

Every training and inference record flows through one fixed three-marker
template so models see a single input grammar across tasks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from .table_model import (
    Cell,
    Table,
    dedupe_column_names,
    infer_column_kinds,
    parse_decimal,
)

MARKER_INSTRUCTION = "### Instruction:"
MARKER_TABLE = "### Table:"
MARKER_ANSWER = "### Answer:"
PROMPT_MARKERS = (MARKER_INSTRUCTION, MARKER_TABLE, MARKER_ANSWER)

TASK_KINDS = ("mtp", "classification", "regression", "imputation")

#: Surface text used for missing cells in the sentence form fed to embedders.
MISSING_SENTENCE_WORD = "unknown"


class MarkdownError(ValueError):
    """Markdown text does not follow the table grammar."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class PromptFormatError(ValueError):
    """Prompt segment would make the template ambiguous."""


@dataclass(frozen=True)
class PromptExample:
    """Instruction + serialized table + answer; the universal record."""

    instruction: str
    table_markdown: str
    answer: str
    task_kind: str
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind: {self.task_kind!r}")

    def to_json_dict(self) -> dict:
        return {
            "task": self.task_kind,
            "instruction": self.instruction,
            "table_markdown": self.table_markdown,
            "answer": self.answer,
            "meta": dict(self.meta),
        }

    @staticmethod
    def from_json_dict(data: dict) -> "PromptExample":
        return PromptExample(
            instruction=data["instruction"],
            table_markdown=data["table_markdown"],
            answer=data["answer"],
            task_kind=data["task"],
            meta=data.get("meta", {}),
        )


def escape_cell(text: str) -> str:
    """Minimal Markdown escaping: pipes escaped, line breaks folded to spaces."""
    return text.replace("\r\n", " ").replace("\n", " ").replace("\r", " ").replace("|", "\\|")


def unescape_cell(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        if text[i] == "\\" and i + 1 < len(text) and text[i + 1] == "|":
            out.append("|")
            i += 2
        else:
            out.append(text[i])
            i += 1
    return "".join(out)


def _render_row(parts: Sequence[str]) -> str:
    return "| " + " | ".join(parts) + " |"


def to_markdown(
    table: Table,
    *,
    header_overrides: Mapping[int, str] | None = None,
    cell_overrides: Mapping[tuple[int, int], str] | None = None,
) -> str:
    """Serialize a Table as a Markdown grid: header, separator, one line per row.

    Overrides substitute raw text (e.g. sentinel tokens) at header or body
    positions before escaping; masking builds on this hook.
    """
    header_overrides = header_overrides or {}
    cell_overrides = cell_overrides or {}
    header = [
        escape_cell(header_overrides.get(j, spec.name))
        for j, spec in enumerate(table.columns)
    ]
    lines = [_render_row(header), _render_row(["---"] * table.n_columns)]
    for i, row in enumerate(table.rows):
        parts = []
        for j, cell in enumerate(row):
            if (i, j) in cell_overrides:
                parts.append(escape_cell(cell_overrides[(i, j)]))
            else:
                parts.append(escape_cell(cell.render()))
        lines.append(_render_row(parts))
    return "\n".join(lines)


def _split_row(line: str, line_no: int) -> list[str]:
    if not line.startswith("| ") or not line.endswith(" |") or len(line) < 4:
        raise MarkdownError("row must start with '| ' and end with ' |'", line_no)
    return line[2:-2].split(" | ")


def from_markdown(
    text: str,
    *,
    name: str = "table",
    domain_tag: str | None = None,
    numeric_threshold: float = 0.99,
) -> Table:
    """Parse to_markdown output back into a Table (column kinds re-inferred).

    Only the empty field maps to a missing cell; textual spellings such as
    "NA" survive the round trip untouched.
    """
    lines = text.split("\n")
    if len(lines) < 2:
        raise MarkdownError("expected at least a header and a separator row", 1)
    header = [unescape_cell(part) for part in _split_row(lines[0], 1)]
    width = len(header)
    separator = _render_row(["---"] * width)
    if lines[1] != separator:
        raise MarkdownError(f"malformed separator row (expected {separator!r})", 2)

    body: list[list[str]] = []
    for offset, line in enumerate(lines[2:], start=3):
        parts = _split_row(line, offset)
        if len(parts) != width:
            raise MarkdownError(f"expected {width} cells, found {len(parts)}", offset)
        body.append([unescape_cell(p) for p in parts])

    header = dedupe_column_names([h.strip() for h in header])
    raw_columns = [(header[j], [row[j] for row in body]) for j in range(width)]
    specs = infer_column_kinds(raw_columns, numeric_threshold, missing_tokens={""})

    rows = []
    for row in body:
        cells = []
        for raw, spec in zip(row, specs):
            if raw == "":
                cells.append(Cell.missing())
            elif spec.kind == "numeric":
                parsed = parse_decimal(raw)
                cells.append(Cell.missing() if parsed is None else Cell.numeric(parsed))
            else:
                cells.append(Cell.text(raw))
        rows.append(tuple(cells))
    return Table(name=name, domain_tag=domain_tag, columns=tuple(specs), rows=tuple(rows))


def _check_no_marker_lines(segment: str, where: str) -> None:
    for line in segment.split("\n"):
        if line.strip() in PROMPT_MARKERS:
            raise PromptFormatError(f"{where} contains template marker line {line.strip()!r}")


def render_prompt(instruction: str, table_markdown: str, answer: str = "") -> str:
    """Wrap instruction, table, and answer in the fixed three-marker template."""
    _check_no_marker_lines(instruction, "instruction")
    _check_no_marker_lines(table_markdown, "table_markdown")
    _check_no_marker_lines(answer, "answer")
    return (
        f"{MARKER_INSTRUCTION}\n{instruction}\n"
        f"{MARKER_TABLE}\n{table_markdown}\n"
        f"{MARKER_ANSWER}\n{answer}"
    )


def render_example(example: PromptExample, *, with_answer: bool = True) -> str:
    answer = example.answer if with_answer else ""
    return render_prompt(example.instruction, example.table_markdown, answer)


def parse_prompt(text: str) -> tuple[str, str, str]:
    """Invert render_prompt; requires exactly one of each marker, in order."""
    lines = text.split("\n")
    positions: dict[str, list[int]] = {m: [] for m in PROMPT_MARKERS}
    for i, line in enumerate(lines):
        if line in positions:
            positions[line].append(i)
    for marker, where in positions.items():
        if len(where) != 1:
            raise PromptFormatError(f"expected exactly one {marker!r} line, found {len(where)}")
    i, t, a = (positions[m][0] for m in PROMPT_MARKERS)
    if not i < t < a:
        raise PromptFormatError("template markers out of order")
    instruction = "\n".join(lines[i + 1 : t])
    table_markdown = "\n".join(lines[t + 1 : a])
    answer = "\n".join(lines[a + 1 :])
    return instruction, table_markdown, answer


def to_sentence(table: Table, row_index: int) -> str:
    """Render one row as '<column> is <value>' clauses joined by commas."""
    if not 0 <= row_index < table.n_rows:
        raise IndexError(f"row {row_index} out of range for table with {table.n_rows} rows")
    clauses = []
    for spec, cell in zip(table.columns, table.rows[row_index]):
        value = MISSING_SENTENCE_WORD if cell.is_missing else cell.render()
        clauses.append(f"{spec.name} is {value}")
    return ", ".join(clauses)


def write_examples_jsonl(path: str | Path, examples: Iterable[PromptExample]) -> int:
    count = 0
    with Path(path).open("w", encoding="utf-8") as handle:
        for example in examples:
            handle.write(json.dumps(example.to_json_dict(), sort_keys=True, ensure_ascii=False))
            handle.write("\n")
            count += 1
    return count


def read_examples_jsonl(path: str | Path) -> Iterator[PromptExample]:
    with Path(path).open("r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                yield PromptExample.from_json_dict(json.loads(line))
