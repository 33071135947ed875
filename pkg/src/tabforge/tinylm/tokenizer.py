"""Byte-level BPE tokenizer with reserved template markers and sentinel tokens.

Vocabulary layout: special tokens first, then the 256 byte tokens, then learned
merges. Every special token (including each `<missing_value_i>`) encodes to
exactly one id, and decode(encode(x)) == x for UTF-8 text that does not spell
a special token.
"""

from __future__ import annotations

import json
import re
from collections import Counter, defaultdict
from pathlib import Path
from typing import Iterable, Sequence

from ..masker import MAX_SENTINELS, sentinel_token
from ..textgen import PROMPT_MARKERS

SPECIAL_PAD = "<pad>"
SPECIAL_BOS = "<s>"
SPECIAL_EOS = "</s>"

# Fixed ids implied by the special-token table layout.
PAD_ID = 0
BOS_ID = 1
EOS_ID = 2

_FORMAT = "tabforge-bpe-v1"

# Units are runs of non-space or runs of whitespace; merges never cross them.
_PRETOKEN_RE = re.compile(r"\S+|\s+")


class TokenizerError(ValueError):
    """Tokenizer file or configuration problem."""


def special_tokens() -> list[str]:
    return [
        SPECIAL_PAD,
        SPECIAL_BOS,
        SPECIAL_EOS,
        *PROMPT_MARKERS,
        *(sentinel_token(i) for i in range(MAX_SENTINELS)),
    ]


class BpeTokenizer:
    def __init__(self, merges: Iterable[tuple[int, int]] = ()):
        self.specials = special_tokens()
        self.special_to_id = {s: i for i, s in enumerate(self.specials)}
        self.byte_offset = len(self.specials)
        self.token_bytes: list[bytes | None] = [None] * len(self.specials)
        self.token_bytes.extend(bytes([b]) for b in range(256))
        self.merges: list[tuple[int, int]] = []
        self.merge_ranks: dict[tuple[int, int], int] = {}
        for pair in merges:
            self._add_merge((int(pair[0]), int(pair[1])))
        escaped = sorted((re.escape(s) for s in self.specials), key=len, reverse=True)
        self._special_re = re.compile("(" + "|".join(escaped) + ")")
        self._unit_cache: dict[str, tuple[int, ...]] = {}

    def _add_merge(self, pair: tuple[int, int]) -> int:
        a, b = pair
        if not (self.byte_offset <= a < len(self.token_bytes)) or not (
            self.byte_offset <= b < len(self.token_bytes)
        ):
            raise TokenizerError(f"merge pair {pair} references unknown or special ids")
        new_id = len(self.token_bytes)
        self.token_bytes.append(self.token_bytes[a] + self.token_bytes[b])
        self.merge_ranks[(a, b)] = len(self.merges)
        self.merges.append((a, b))
        return new_id

    @property
    def vocab_size(self) -> int:
        return len(self.token_bytes)

    @property
    def pad_id(self) -> int:
        return self.special_to_id[SPECIAL_PAD]

    @property
    def bos_id(self) -> int:
        return self.special_to_id[SPECIAL_BOS]

    @property
    def eos_id(self) -> int:
        return self.special_to_id[SPECIAL_EOS]

    def sentinel_id(self, index: int) -> int:
        return self.special_to_id[sentinel_token(index)]

    def _merge_pass(self, ids: list[int]) -> list[int]:
        while len(ids) >= 2:
            best_rank = None
            best_pair = None
            for pos in range(len(ids) - 1):
                rank = self.merge_ranks.get((ids[pos], ids[pos + 1]))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank, best_pair = rank, (ids[pos], ids[pos + 1])
            if best_pair is None:
                break
            merged_id = self.byte_offset + 256 + best_rank
            out = []
            i = 0
            while i < len(ids):
                if i + 1 < len(ids) and (ids[i], ids[i + 1]) == best_pair:
                    out.append(merged_id)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
        return ids

    def _encode_unit(self, unit: str) -> tuple[int, ...]:
        cached = self._unit_cache.get(unit)
        if cached is not None:
            return cached
        ids = self._merge_pass([self.byte_offset + b for b in unit.encode("utf-8")])
        result = tuple(ids)
        if len(unit) < 64:
            self._unit_cache[unit] = result
        return result

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for segment in self._special_re.split(text):
            if not segment:
                continue
            special = self.special_to_id.get(segment)
            if special is not None:
                ids.append(special)
                continue
            for unit in _PRETOKEN_RE.findall(segment):
                ids.extend(self._encode_unit(unit))
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        parts: list[str] = []
        buffer = bytearray()

        def flush() -> None:
            if buffer:
                parts.append(bytes(buffer).decode("utf-8", errors="replace"))
                buffer.clear()

        for token_id in ids:
            if not 0 <= token_id < len(self.token_bytes):
                raise TokenizerError(f"token id {token_id} out of range")
            raw = self.token_bytes[token_id]
            if raw is None:
                flush()
                parts.append(self.specials[token_id])
            else:
                buffer.extend(raw)
        flush()
        return "".join(parts)

    @classmethod
    def train(cls, texts: Iterable[str], vocab_size: int) -> "BpeTokenizer":
        """Learn merges greedily by pair frequency until vocab_size is reached.

        Ties break toward the lexicographically smallest id pair so training
        is order-independent and reproducible.
        """
        tok = cls()
        if vocab_size < tok.vocab_size:
            raise TokenizerError(
                f"vocab_size {vocab_size} below base vocabulary {tok.vocab_size}"
            )
        word_freq: Counter = Counter()
        for text in texts:
            for segment in tok._special_re.split(text):
                if not segment or segment in tok.special_to_id:
                    continue
                word_freq.update(_PRETOKEN_RE.findall(segment))

        words: list[list[int]] = []
        freqs: list[int] = []
        for word, freq in sorted(word_freq.items()):
            words.append([tok.byte_offset + b for b in word.encode("utf-8")])
            freqs.append(freq)

        pair_counts: Counter = Counter()
        pair_words: defaultdict[tuple[int, int], set[int]] = defaultdict(set)
        for w, word in enumerate(words):
            for pair in zip(word, word[1:]):
                pair_counts[pair] += freqs[w]
                pair_words[pair].add(w)

        while tok.vocab_size < vocab_size and pair_counts:
            best = min(pair_counts, key=lambda p: (-pair_counts[p], p))
            if pair_counts[best] < 2:
                break
            new_id = tok._add_merge(best)
            for w in sorted(pair_words.pop(best, ())):
                word = words[w]
                if len(word) < 2:
                    continue
                for pair in zip(word, word[1:]):
                    pair_counts[pair] -= freqs[w]
                    if pair_counts[pair] <= 0:
                        del pair_counts[pair]
                merged = []
                i = 0
                while i < len(word):
                    if i + 1 < len(word) and (word[i], word[i + 1]) == best:
                        merged.append(new_id)
                        i += 2
                    else:
                        merged.append(word[i])
                        i += 1
                words[w] = merged
                for pair in zip(merged, merged[1:]):
                    pair_counts[pair] += freqs[w]
                    pair_words[pair].add(w)
        return tok

    def save(self, path: str | Path) -> None:
        payload = {
            "format": _FORMAT,
            "specials": self.specials,
            "merges": [list(pair) for pair in self.merges],
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True), "utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BpeTokenizer":
        payload = json.loads(Path(path).read_text("utf-8"))
        if payload.get("format") != _FORMAT:
            raise TokenizerError(f"unsupported tokenizer file format: {payload.get('format')!r}")
        if payload["specials"] != special_tokens():
            raise TokenizerError("tokenizer file carries an unexpected special-token table")
        return cls(tuple(pair) for pair in payload["merges"])
