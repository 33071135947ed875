"""Deterministic training loop: seeded shuffling, gradient accumulation, warmup Adam.

The data order is a pure function of (seed, step), so a run can resume from a
checkpointed step and bitwise-reproduce the single-run loss curve.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from ..masker import derive_seed
from ..textgen import PromptExample, render_example
from .model import TinyLM, lm_loss
from .optim import Adam, TrainConfig, lr_at
from .tokenizer import PAD_ID, BpeTokenizer


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, record_indices: Sequence[int]):
        super().__init__(f"non-finite loss at step {step} (records {list(record_indices)})")
        self.step = step
        self.record_indices = list(record_indices)


@dataclass(frozen=True)
class TokenizedRecord:
    ids: tuple[int, ...]
    answer_start: int  # index into ids where answer (and eos) tokens begin
    source_index: int = 0


def tokenize_example(tok: BpeTokenizer, example: PromptExample, source_index: int = 0) -> TokenizedRecord:
    """bos + prompt + answer + eos, remembering where the answer span begins."""
    prefix_text = render_example(example, with_answer=False)
    full_text = render_example(example, with_answer=True)
    prefix_ids = tok.encode(prefix_text)
    full_ids = tok.encode(full_text)
    if full_ids[: len(prefix_ids)] != prefix_ids:
        # answers starting with whitespace would merge into the prompt's last unit
        raise ValueError(f"answer tokens merge into the prompt for record {source_index}")
    ids = (tok.bos_id, *full_ids, tok.eos_id)
    return TokenizedRecord(ids=ids, answer_start=1 + len(prefix_ids), source_index=source_index)


def prepare_records(
    tok: BpeTokenizer,
    examples: Sequence[PromptExample],
    context_len: int,
) -> tuple[list[TokenizedRecord], dict[str, int]]:
    """Tokenize examples, dropping those whose shifted input exceeds the context."""
    records: list[TokenizedRecord] = []
    dropped = 0
    for i, example in enumerate(examples):
        record = tokenize_example(tok, example, source_index=i)
        if len(record.ids) - 1 > context_len:
            dropped += 1
            continue
        records.append(record)
    return records, {"kept": len(records), "dropped_over_length": dropped}


def collate(
    records: Sequence[TokenizedRecord],
    pad_id: int,
    loss_span: str,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pad a micro-batch and build (inputs, targets, loss_mask) for next-token loss."""
    width = max(len(r.ids) for r in records) - 1
    inputs = torch.full((len(records), width), pad_id, dtype=torch.long)
    targets = torch.full((len(records), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(records), width), dtype=torch.bool)
    for b, record in enumerate(records):
        ids = torch.tensor(record.ids, dtype=torch.long)
        length = len(record.ids) - 1
        inputs[b, :length] = ids[:-1]
        targets[b, :length] = ids[1:]
        if loss_span == "answer_only":
            mask[b, max(0, record.answer_start - 1) : length] = True
        else:
            mask[b, :length] = True
    return inputs, targets, mask


@dataclass
class TrainResult:
    loss_curve: list[float] = field(default_factory=list)
    optimizer: Adam | None = None


def _epoch_order(seed: int, epoch: int, n: int) -> list[int]:
    order = list(range(n))
    random.Random(derive_seed(seed, epoch)).shuffle(order)
    return order


def micro_batch_indices(cfg: TrainConfig, n_records: int, micro_index: int) -> list[int]:
    """Record indices of the micro_index-th micro-batch (0-based, global)."""
    per_epoch = math.ceil(n_records / cfg.batch_size)
    epoch, position = divmod(micro_index, per_epoch)
    order = _epoch_order(cfg.seed, epoch, n_records)
    return order[position * cfg.batch_size : (position + 1) * cfg.batch_size]


def train(
    model: TinyLM,
    records: Sequence[TokenizedRecord],
    cfg: TrainConfig,
    *,
    optimizer: Adam | None = None,
    start_step: int = 0,
    loss_curve: list[float] | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Run optimizer steps start_step+1 .. max_steps; resumable via (optimizer, start_step).

    Each step averages gradients over grad_accum_steps micro-batches. Loss is a
    mean over masked positions per micro-batch, then averaged across the
    accumulation window for the curve.
    """
    if not records:
        raise ValueError("no training records")
    torch.set_num_threads(cfg.num_threads)
    if optimizer is None:
        optimizer = Adam(model.parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    curve = loss_curve if loss_curve is not None else []

    model.train()
    for step in range(start_step + 1, cfg.max_steps + 1):
        optimizer.zero_grad()
        step_loss = 0.0
        for accum in range(cfg.grad_accum_steps):
            micro_index = (step - 1) * cfg.grad_accum_steps + accum
            batch = micro_batch_indices(cfg, len(records), micro_index)
            micro = [records[i] for i in batch]
            inputs, targets, mask = collate(micro, pad_id=PAD_ID, loss_span=cfg.loss_span)
            logits = model(inputs)
            loss = lm_loss(logits, targets, mask)
            if not torch.isfinite(loss):
                raise TrainingDiverged(step, [records[i].source_index for i in batch])
            (loss / cfg.grad_accum_steps).backward()
            step_loss += float(loss.item())
        optimizer.step(lr_at(step, cfg))
        mean_loss = step_loss / cfg.grad_accum_steps
        curve.append(mean_loss)
        if on_step is not None:
            on_step(step, mean_loss)
    model.eval()
    return TrainResult(loss_curve=curve, optimizer=optimizer)
