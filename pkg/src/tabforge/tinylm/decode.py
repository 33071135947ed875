"""Constrained option scoring and greedy generation."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .model import SequenceLengthError, TinyLM
from .tokenizer import BpeTokenizer


class DecodeError(ValueError):
    """Decoding preconditions violated."""


@torch.no_grad()
def constrained_decode(
    model: TinyLM,
    tok: BpeTokenizer,
    prompt_text: str,
    options: Sequence[str],
) -> list[float]:
    """Score each option appended after the prompt's open answer slot.

    An option's score is the sum of its token log-probabilities; the returned
    list is the softmax over option scores (sums to 1), aligned with `options`.
    """
    if len(options) < 2:
        raise DecodeError("constrained decoding needs >= 2 options")
    model.eval()
    prompt_ids = [tok.bos_id, *tok.encode(prompt_text)]
    scores = []
    for option in options:
        option_ids = tok.encode(option)
        if not option_ids:
            raise DecodeError(f"option {option!r} encodes to no tokens")
        seq = prompt_ids + option_ids
        if len(seq) - 1 > model.cfg.context_len:
            raise SequenceLengthError(
                f"prompt plus option {option!r} exceeds context_len {model.cfg.context_len}"
            )
        ids = torch.tensor([seq[:-1]], dtype=torch.long)
        logits = model(ids).to(torch.float64)
        log_probs = F.log_softmax(logits[0], dim=-1)
        start = len(prompt_ids) - 1
        total = 0.0
        for offset, token_id in enumerate(option_ids):
            total += float(log_probs[start + offset, token_id].item())
        scores.append(total)
    values = np.asarray(scores, dtype=np.float64)
    values -= values.max()
    probs = np.exp(values)
    probs /= probs.sum()
    return [float(p) for p in probs]


@torch.no_grad()
def generate_greedy(
    model: TinyLM,
    tok: BpeTokenizer,
    prompt_text: str,
    max_new_tokens: int = 64,
) -> str:
    """Greedy argmax decoding until the end token, the limit, or the context edge."""
    model.eval()
    ids = [tok.bos_id, *tok.encode(prompt_text)]
    if len(ids) >= model.cfg.context_len:
        raise SequenceLengthError(
            f"prompt length {len(ids)} leaves no room in context_len {model.cfg.context_len}"
        )
    generated: list[int] = []
    budget = min(max_new_tokens, model.cfg.context_len - len(ids))
    for _ in range(budget):
        logits = model(torch.tensor([ids], dtype=torch.long))
        next_id = int(torch.argmax(logits[0, -1]).item())
        if next_id == tok.eos_id:
            break
        generated.append(next_id)
        ids.append(next_id)
    return tok.decode(generated)
