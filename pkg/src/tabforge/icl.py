"""In-context learning assembly: sentence embeddings, balanced nearest-neighbor
retrieval, and budgeted concatenation of demonstration prompts."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .textgen import PromptExample, render_example

#: Context sizes swept by the long-context evaluation (0 = zero-shot point).
ICL_K_GRID = (0, 1, 2, 4, 8, 16, 32, 48)

NEAREST_LAST = "nearest_last"


class ContextSelectionError(ValueError):
    """Retrieval constraints cannot be satisfied."""


class Embedder(Protocol):
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


@dataclass(frozen=True)
class ContextPlan:
    k: int
    token_budget: int
    balance: bool = True
    order: str = NEAREST_LAST

    def __post_init__(self) -> None:
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")
        if self.token_budget < 1:
            raise ValueError(f"token_budget must be >= 1, got {self.token_budget}")
        if self.order != NEAREST_LAST:
            raise ValueError(f"unsupported context order: {self.order!r}")


def _bucket(token: str, dimension: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dimension


class HashEmbedder:
    """Deterministic bag-of-tokens embedding: hash buckets, L2-normalized.

    A desk-scale stand-in for learned sentence encoders; empty text maps to
    the zero vector, which retrieval treats as "not embeddable".
    """

    def __init__(self, dimension: int = 256):
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        self.dimension = dimension

    def embed(self, text: str) -> np.ndarray:
        vector = np.zeros(self.dimension, dtype=np.float64)
        for token in text.split():
            vector[_bucket(token, self.dimension)] += 1.0
        norm = float(np.linalg.norm(vector))
        if norm > 0.0:
            vector /= norm
        return vector


def select_context(
    query: np.ndarray,
    candidates: Sequence[np.ndarray] | np.ndarray,
    labels: Sequence[str] | None,
    plan: ContextPlan,
    *,
    classes: Sequence[str] | None = None,
) -> list[int]:
    """Choose plan.k candidate indices by cosine distance, ordered farthest first.

    With balance on, per-class counts differ by at most one and each class
    contributes exactly its nearest members; the leftover slots after the even
    split go to the globally closest next-nearest candidates. Ties break on
    candidate index. Zero-norm candidate vectors are excluded from retrieval.
    `classes` fixes the expected class universe; classes with no usable
    candidate make balanced selection fail with their names.
    """
    matrix = np.asarray(candidates, dtype=np.float64)
    if matrix.ndim != 2:
        raise ContextSelectionError("candidates must be a 2-D array of embeddings")
    if plan.k == 0:
        return []
    usable = [i for i in range(matrix.shape[0]) if float(np.linalg.norm(matrix[i])) > 0.0]
    if plan.k > len(usable):
        raise ContextSelectionError(f"k ({plan.k}) exceeds usable candidates ({len(usable)})")
    distances = 1.0 - matrix @ np.asarray(query, dtype=np.float64)
    ranked = sorted(usable, key=lambda i: (distances[i], i))

    if not plan.balance or labels is None:
        chosen = ranked[: plan.k]
    else:
        if len(labels) != matrix.shape[0]:
            raise ContextSelectionError("labels must align with candidates")
        by_class: dict[str, list[int]] = {}
        for i in ranked:
            by_class.setdefault(str(labels[i]), []).append(i)
        universe = sorted({str(c) for c in classes}) if classes is not None else sorted(
            {str(l) for l in labels}
        )
        empty = [c for c in universe if not by_class.get(c)]
        if empty:
            raise ContextSelectionError(f"classes with no usable candidates: {empty}")
        base, remainder = divmod(plan.k, len(universe))
        for c in universe:
            if len(by_class[c]) < base:
                raise ContextSelectionError(
                    f"class {c!r} has {len(by_class[c])} candidates, needs {base}"
                )
        chosen = []
        for c in universe:
            chosen.extend(by_class[c][:base])
        if remainder:
            # next-nearest per class compete for the leftover slots
            contenders = [
                by_class[c][base] for c in universe if len(by_class[c]) > base
            ]
            if len(contenders) < remainder:
                raise ContextSelectionError("not enough candidates to balance the remainder")
            contenders.sort(key=lambda i: (distances[i], i))
            chosen.extend(contenders[:remainder])

    # farthest first, so the nearest example ends up adjacent to the query
    chosen.sort(key=lambda i: (distances[i], i))
    chosen.reverse()
    return chosen


def _token_length_fn(tokenizer) -> Callable[[str], int]:
    if callable(tokenizer):
        return tokenizer
    return lambda text: len(tokenizer.encode(text))


def assemble_long_input(
    context: Sequence[PromptExample],
    query: PromptExample,
    token_budget: int,
    tokenizer,
) -> str:
    """Concatenate answered demonstrations and the unanswered query under a budget.

    `context` arrives ordered farthest -> nearest (select_context's output
    order); over-budget assemblies drop whole examples farthest-first and
    never truncate mid-example. With no context the output is the bare query.
    """
    token_length = _token_length_fn(tokenizer)
    query_text = render_example(query, with_answer=False)
    if token_length(query_text) > token_budget:
        raise ContextSelectionError("query prompt alone exceeds the token budget")
    parts = [render_example(ex, with_answer=True) for ex in context]
    while True:
        text = "\n\n".join(parts + [query_text]) if parts else query_text
        if token_length(text) <= token_budget:
            return text
        parts.pop(0)
