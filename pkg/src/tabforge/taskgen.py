"""Supervised instruction datasets: classification/regression examples, few-shot
subsets, chain-of-thought augmentation, and predict-as-impute records."""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .masker import MaskedExample, load_instruction, sentinel_token
from .table_model import Table
from .textgen import PromptExample, to_markdown

CLASSIFICATION = "classification"
REGRESSION = "regression"

#: Shot counts swept by the few-shot evaluation harness.
SHOTS_GRID = (4, 8, 16, 32, 64)

COT_SUFFIX = (
    "Let's think step by step. You need to first give the predicted value in "
    "the placeholder of <missing_value_0>, and then explain your reasons or thoughts."
)


class TaskSpecError(ValueError):
    """Malformed task specification or manifest."""


class MissingTargetError(ValueError):
    """Row has no usable gold value for the target column."""


@dataclass(frozen=True)
class TaskSpec:
    dataset_id: str
    kind: str
    target_column: str
    instruction_template: str
    options: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in (CLASSIFICATION, REGRESSION):
            raise TaskSpecError(f"unknown task kind: {self.kind!r}")
        if self.kind == CLASSIFICATION:
            if self.options is None or len(set(self.options)) < 2:
                raise TaskSpecError("classification requires >= 2 distinct options")
            object.__setattr__(self, "options", tuple(self.options))
        elif self.options is not None:
            raise TaskSpecError("regression tasks take no options")

    def instruction(self) -> str:
        if self.kind == CLASSIFICATION:
            return self.instruction_template.replace("{options}", ", ".join(self.options))
        return self.instruction_template

    def to_manifest_dict(self) -> dict:
        data = {
            "dataset_id": self.dataset_id,
            "kind": self.kind,
            "target_column": self.target_column,
            "instruction_template": self.instruction_template,
        }
        if self.options is not None:
            data["options"] = list(self.options)
        return data

    @staticmethod
    def from_manifest_dict(data: dict) -> "TaskSpec":
        known = {"dataset_id", "kind", "target_column", "instruction_template", "options"}
        unknown = set(data) - known
        if unknown:
            raise TaskSpecError(f"unknown manifest keys: {sorted(unknown)}")
        return TaskSpec(
            dataset_id=data["dataset_id"],
            kind=data["kind"],
            target_column=data["target_column"],
            instruction_template=data["instruction_template"],
            options=tuple(data["options"]) if "options" in data else None,
        )


def default_task_spec(dataset_id: str, kind: str, target_column: str, options=None) -> TaskSpec:
    template = load_instruction(CLASSIFICATION if kind == CLASSIFICATION else REGRESSION)
    return TaskSpec(
        dataset_id=dataset_id,
        kind=kind,
        target_column=target_column,
        instruction_template=template,
        options=tuple(options) if options is not None else None,
    )


def read_manifest(path: str | Path) -> list[TaskSpec]:
    data = json.loads(Path(path).read_text("utf-8"))
    if isinstance(data, dict):
        data = [data]
    return [TaskSpec.from_manifest_dict(entry) for entry in data]


def write_manifest(path: str | Path, specs: Sequence[TaskSpec]) -> None:
    payload = [spec.to_manifest_dict() for spec in specs]
    Path(path).write_text(json.dumps(payload, sort_keys=True, ensure_ascii=False, indent=2), "utf-8")


@dataclass(frozen=True)
class SplitPlan:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    seed: int
    shots: int | None = None

    def __post_init__(self) -> None:
        pools = [set(self.train), set(self.val), set(self.test)]
        total = sum(len(p) for p in pools)
        if len(set().union(*pools)) != total:
            raise TaskSpecError("split index lists must be disjoint")
        if self.shots is not None and self.shots > len(self.train):
            raise TaskSpecError(f"shots ({self.shots}) exceeds train size ({len(self.train)})")


def split_rows(
    n_rows: int,
    *,
    seed: int,
    test_fraction: float = 0.2,
    val_fraction: float = 0.1,
    shots: int | None = None,
) -> SplitPlan:
    """Shuffle rows into test / val / train; val is a fraction of the train pool."""
    if n_rows < 3:
        raise TaskSpecError(f"need at least 3 rows to split, got {n_rows}")
    indices = list(range(n_rows))
    random.Random(seed).shuffle(indices)
    n_test = max(1, int(round(n_rows * test_fraction)))
    test = indices[:n_test]
    remainder = indices[n_test:]
    n_val = int(round(len(remainder) * val_fraction))
    val = remainder[:n_val]
    train = remainder[n_val:]
    return SplitPlan(train=tuple(sorted(train)), val=tuple(sorted(val)), test=tuple(sorted(test)), seed=seed, shots=shots)


def _row_subtable(table: Table, row_index: int, drop_column: int | None) -> Table:
    columns = tuple(c for j, c in enumerate(table.columns) if j != drop_column)
    cells = tuple(c for j, c in enumerate(table.rows[row_index]) if j != drop_column)
    return Table(name=table.name, domain_tag=table.domain_tag, columns=columns, rows=(cells,))


def drop_column(table: Table, column_name: str) -> Table:
    """The same table without one column (used for feature-only views)."""
    index = table.column_index(column_name)
    columns = tuple(c for j, c in enumerate(table.columns) if j != index)
    rows = tuple(tuple(c for j, c in enumerate(row) if j != index) for row in table.rows)
    return Table(name=table.name, domain_tag=table.domain_tag, columns=columns, rows=rows)


def gold_answer(table: Table, row_index: int, spec: TaskSpec) -> str:
    """Canonical gold text for a supervised row; raises MissingTargetError."""
    col = table.column_index(spec.target_column)
    cell = table.rows[row_index][col]
    if cell.is_missing:
        raise MissingTargetError(f"row {row_index} of {table.name!r} has no target value")
    answer = cell.render()
    if spec.kind == CLASSIFICATION and answer not in spec.options:
        raise MissingTargetError(
            f"row {row_index} gold {answer!r} not among options {list(spec.options)}"
        )
    return answer


def build_supervised_example(table: Table, row_index: int, spec: TaskSpec) -> PromptExample:
    """One row -> instruction + single-row table (target column dropped) + gold answer."""
    if spec.target_column not in table.column_names:
        raise TaskSpecError(f"target column {spec.target_column!r} not in {table.name!r}")
    answer = gold_answer(table, row_index, spec)
    col = table.column_index(spec.target_column)
    sub = _row_subtable(table, row_index, drop_column=col)
    meta: dict = {
        "dataset_id": spec.dataset_id,
        "row_index": row_index,
        "target_column": spec.target_column,
    }
    if spec.options is not None:
        meta["options"] = list(spec.options)
    return PromptExample(
        instruction=spec.instruction(),
        table_markdown=to_markdown(sub),
        answer=answer,
        task_kind=spec.kind,
        meta=meta,
    )


def build_task_dataset(
    table: Table,
    spec: TaskSpec,
    row_indices: Sequence[int],
) -> tuple[list[PromptExample], dict[str, int]]:
    """Build examples for the given rows; unusable rows are skipped and counted."""
    examples: list[PromptExample] = []
    skip_report: Counter = Counter()
    for row_index in row_indices:
        try:
            examples.append(build_supervised_example(table, row_index, spec))
        except MissingTargetError:
            skip_report["missing_or_invalid_target"] += 1
    return examples, dict(skip_report)


def sample_few_shot(
    labels: Sequence[str],
    k: int,
    seed: int,
    *,
    kind: str = CLASSIFICATION,
) -> list[int]:
    """Pick k training rows; classification balances per-class counts within 1.

    The classes receiving the remainder (+1) slots are chosen by a seeded
    shuffle, and rows within each class are drawn uniformly without
    replacement. Regression falls back to a plain uniform draw.
    """
    n = len(labels)
    if k > n:
        raise TaskSpecError(f"k ({k}) exceeds available rows ({n})")
    rng = random.Random(seed)
    if kind == REGRESSION:
        return sorted(rng.sample(range(n), k))

    by_class: dict[str, list[int]] = {}
    for i, label in enumerate(labels):
        by_class.setdefault(str(label), []).append(i)
    classes = sorted(by_class)
    if k < len(classes):
        raise TaskSpecError(f"k ({k}) below class count ({len(classes)}) in balanced mode")
    base, remainder = divmod(k, len(classes))
    extras = list(classes)
    rng.shuffle(extras)
    quota = {c: base for c in classes}
    for c in extras[:remainder]:
        quota[c] += 1
    chosen: list[int] = []
    for c in classes:
        pool = by_class[c]
        if quota[c] > len(pool):
            raise TaskSpecError(f"class {c!r} has {len(pool)} rows, needs {quota[c]}")
        chosen.extend(rng.sample(pool, quota[c]))
    return sorted(chosen)


def augment_cot(instruction: str) -> str:
    """Append the chain-of-thought suffix; refuses to apply twice."""
    if COT_SUFFIX in instruction:
        raise ValueError("chain-of-thought suffix already present")
    if not instruction:
        return COT_SUFFIX
    return f"{instruction} {COT_SUFFIX}"


def build_predict_as_impute(table: Table, row_index: int, spec: TaskSpec) -> MaskedExample:
    """Recast classification as imputation: keep the target column, sentinel its cell."""
    if spec.kind != CLASSIFICATION:
        raise TaskSpecError("predict-as-impute applies to classification tasks only")
    answer = gold_answer(table, row_index, spec)
    col = table.column_index(spec.target_column)
    sub = _row_subtable(table, row_index, drop_column=None)
    markdown = to_markdown(sub, cell_overrides={(0, col): sentinel_token(0)})
    prompt = PromptExample(
        instruction=load_instruction("imputation"),
        table_markdown=markdown,
        answer=f"{sentinel_token(0)} {answer}",
        task_kind="imputation",
        meta={
            "dataset_id": spec.dataset_id,
            "row_index": row_index,
            "target_column": spec.target_column,
            "protocol": "predict_as_impute",
            "k": 1,
            "sentinel_targets": {"0": answer},
        },
    )
    return MaskedExample(prompt=prompt, targets={0: answer})
