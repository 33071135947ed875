"""Cell-granular masking: pretraining corruptions and imputation-eval corruptions.

Whole cells (and optionally column names) are replaced by sentinel tokens
`<missing_value_i>`; the answer interleaves each sentinel with its gold text.
"""

from __future__ import annotations

import hashlib
import random
import re
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from importlib import resources

from .table_model import Table
from .textgen import PromptExample, to_markdown

#: Cap on the sentinel vocabulary; tokenizers reserve exactly this many ids.
MAX_SENTINELS = 32

#: Upper bound on simulated missing values in the imputation protocol.
MAX_IMPUTATION_MISSING = 4

SENTINEL_RE = re.compile(r"<missing_value_(\d+)>")


def sentinel_token(index: int) -> str:
    return f"<missing_value_{index}>"


class MaskingError(ValueError):
    """Table cannot be masked as requested."""


def load_instruction(name: str) -> str:
    text = resources.files("tabforge").joinpath(f"assets/instructions/{name}.txt").read_text("utf-8")
    return text.strip()


@dataclass(frozen=True)
class MaskConfig:
    ratio: float = 0.15
    dynamic: bool = False
    max_sentinels: int = MAX_SENTINELS
    include_headers: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.ratio < 1:
            raise ValueError(f"ratio must be in (0, 1), got {self.ratio}")
        if self.max_sentinels < 1:
            raise ValueError(f"max_sentinels must be >= 1, got {self.max_sentinels}")
        if self.max_sentinels > MAX_SENTINELS:
            raise ValueError(f"max_sentinels exceeds sentinel vocabulary ({MAX_SENTINELS})")


@dataclass(frozen=True)
class MaskedExample:
    """A prompt whose table carries sentinels, plus the sentinel -> gold map."""

    prompt: PromptExample
    targets: dict[int, str]


# A maskable unit is ("header", col) or ("cell", row, col), listed in reading
# order: all headers first, then body cells row-major.
Unit = tuple


def _maskable_units(table: Table, include_headers: bool) -> list[Unit]:
    units: list[Unit] = []
    if include_headers:
        units.extend(("header", j) for j in range(table.n_columns))
    for i, row in enumerate(table.rows):
        for j, cell in enumerate(row):
            if not cell.is_missing:
                units.append(("cell", i, j))
    return units


def _gold_text(table: Table, unit: Unit) -> str:
    if unit[0] == "header":
        return table.columns[unit[1]].name
    _, i, j = unit
    return table.rows[i][j].render()


def static_mask_count(ratio: float, n_units: int, max_sentinels: int) -> int:
    """clamp(round_half_even(ratio * n_units), 1, max_sentinels).

    The product is computed in decimal arithmetic so exact halves (e.g.
    0.15 * 10 = 1.5) round half-to-even instead of drifting on binary floats.
    """
    product = Decimal(repr(ratio)) * n_units
    rounded = int(product.quantize(Decimal(1), rounding=ROUND_HALF_EVEN))
    return max(1, min(rounded, max_sentinels))


def _build_masked_example(
    table: Table,
    units: list[Unit],
    chosen: list[int],
    instruction: str,
    task_kind: str,
) -> MaskedExample:
    header_overrides: dict[int, str] = {}
    cell_overrides: dict[tuple[int, int], str] = {}
    targets: dict[int, str] = {}
    for sentinel_index, unit_index in enumerate(chosen):
        unit = units[unit_index]
        token = sentinel_token(sentinel_index)
        targets[sentinel_index] = _gold_text(table, unit)
        if unit[0] == "header":
            header_overrides[unit[1]] = token
        else:
            cell_overrides[(unit[1], unit[2])] = token
    markdown = to_markdown(table, header_overrides=header_overrides, cell_overrides=cell_overrides)
    answer = " ".join(f"{sentinel_token(i)} {targets[i]}" for i in sorted(targets))
    prompt = PromptExample(
        instruction=instruction,
        table_markdown=markdown,
        answer=answer,
        task_kind=task_kind,
        meta={"k": len(chosen), "sentinel_targets": {str(i): targets[i] for i in sorted(targets)}},
    )
    return MaskedExample(prompt=prompt, targets=targets)


def mask_table(table: Table, cfg: MaskConfig) -> MaskedExample:
    """Mask k cells/headers of the table, k derived from cfg.ratio.

    Static mode: k = clamp(round_half_even(ratio * C), 1, max_sentinels) where
    C counts non-missing body cells plus headers. Dynamic mode draws k
    uniformly from [1, k_static]. Selection is uniform without replacement and
    fully determined by (table, cfg).
    """
    units = _maskable_units(table, cfg.include_headers)
    if not units:
        raise MaskingError(f"table {table.name!r} has no maskable units")
    rng = random.Random(cfg.seed)
    k_static = static_mask_count(cfg.ratio, len(units), cfg.max_sentinels)
    k = rng.randint(1, k_static) if cfg.dynamic else k_static
    chosen = sorted(rng.sample(range(len(units)), k))
    return _build_masked_example(table, units, chosen, load_instruction("mtp"), "mtp")


def corrupt_for_imputation(
    table: Table,
    m: int,
    seed: int,
    instruction: str | None = None,
) -> MaskedExample:
    """Mask exactly m body cells (headers excluded) for the imputation protocol."""
    units = [u for u in _maskable_units(table, include_headers=False)]
    limit = min(MAX_IMPUTATION_MISSING, len(units))
    if not 1 <= m <= limit:
        raise MaskingError(f"m must be in [1, {limit}] for table {table.name!r}, got {m}")
    rng = random.Random(seed)
    chosen = sorted(rng.sample(range(len(units)), m))
    if instruction is None:
        instruction = load_instruction("imputation")
    return _build_masked_example(table, units, chosen, instruction, "imputation")


def parse_sentinel_answer(answer_text: str, k: int) -> dict[int, str]:
    """Split model output on sentinel tokens; absent sentinels yield "".

    Lenient by design: stray text before the first sentinel is ignored, and
    each prediction runs until the next sentinel token (any index) or the end.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    matches = list(SENTINEL_RE.finditer(answer_text))
    result = {i: "" for i in range(k)}
    seen: set[int] = set()
    for pos, match in enumerate(matches):
        index = int(match.group(1))
        if index >= k or index in seen:
            continue
        seen.add(index)
        end = matches[pos + 1].start() if pos + 1 < len(matches) else len(answer_text)
        result[index] = answer_text[match.end() : end].strip()
    return result


def derive_seed(*parts: int) -> int:
    """Mix integers into one 63-bit seed (stable across runs and platforms)."""
    data = ",".join(str(p) for p in parts).encode("ascii")
    digest = hashlib.blake2b(data, digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1
