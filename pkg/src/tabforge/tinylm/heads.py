"""Classification and regression heads over the final hidden state.

The head reads the hidden vector at the last non-pad token of the unanswered
prompt. Regression trains on z-scored targets (statistics from the training
split only) and de-standardizes predictions on the way out.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from ..masker import derive_seed
from ..textgen import PromptExample, render_example
from .model import TinyLM
from .optim import Adam, TrainConfig, lr_at
from .tokenizer import PAD_ID, BpeTokenizer


class HeadError(ValueError):
    """Head attachment or training preconditions violated."""


class ClassificationHead(nn.Module):
    def __init__(self, d_model: int, n_classes: int):
        super().__init__()
        if n_classes < 2:
            raise HeadError("classification head needs >= 2 classes")
        self.n_classes = n_classes
        self.proj = nn.Linear(d_model, n_classes)
        with torch.no_grad():
            self.proj.weight.zero_()
            self.proj.bias.zero_()

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.proj(hidden)


class RegressionHead(nn.Module):
    def __init__(self, d_model: int, target_mean: float = 0.0, target_std: float = 1.0):
        super().__init__()
        self.proj = nn.Linear(d_model, 1)
        with torch.no_grad():
            self.proj.weight.zero_()
            self.proj.bias.zero_()
        self.register_buffer("target_mean", torch.tensor(float(target_mean), dtype=torch.float64))
        self.register_buffer("target_std", torch.tensor(float(target_std), dtype=torch.float64))

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.proj(hidden).squeeze(-1)


@dataclass(frozen=True)
class _PromptRecord:
    ids: tuple[int, ...]


def _encode_prompt(tok: BpeTokenizer, example: PromptExample) -> _PromptRecord:
    text = render_example(example, with_answer=False)
    return _PromptRecord(ids=(tok.bos_id, *tok.encode(text)))


def _collate_prompts(records: Sequence[_PromptRecord]) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(r.ids) for r in records)
    ids = torch.full((len(records), width), PAD_ID, dtype=torch.long)
    last = torch.zeros(len(records), dtype=torch.long)
    for b, record in enumerate(records):
        ids[b, : len(record.ids)] = torch.tensor(record.ids, dtype=torch.long)
        last[b] = len(record.ids) - 1
    return ids, last


class HeadModel(nn.Module):
    """A TinyLM base plus one task head; predictions run on prompt-only inputs."""

    def __init__(self, base: TinyLM, head: nn.Module, kind: str, options: tuple[str, ...] | None = None):
        super().__init__()
        if kind not in ("classification", "regression"):
            raise HeadError(f"unknown head kind: {kind!r}")
        self.base = base
        self.head = head
        self.kind = kind
        self.options = options

    def pooled_hidden(self, ids: torch.Tensor, last: torch.Tensor) -> torch.Tensor:
        hidden = self.base.hidden_states(ids)
        return hidden[torch.arange(ids.shape[0]), last]

    @torch.no_grad()
    def predict_class_probs(
        self, tok: BpeTokenizer, examples: Sequence[PromptExample], batch_size: int = 16
    ) -> np.ndarray:
        if self.kind != "classification":
            raise HeadError("not a classification head")
        self.eval()
        rows = []
        for start in range(0, len(examples), batch_size):
            chunk = [_encode_prompt(tok, e) for e in examples[start : start + batch_size]]
            ids, last = _collate_prompts(chunk)
            logits = self.head(self.pooled_hidden(ids, last)).to(torch.float64)
            rows.append(torch.softmax(logits, dim=-1).numpy())
        return np.concatenate(rows, axis=0)

    @torch.no_grad()
    def predict_values(
        self, tok: BpeTokenizer, examples: Sequence[PromptExample], batch_size: int = 16
    ) -> np.ndarray:
        if self.kind != "regression":
            raise HeadError("not a regression head")
        self.eval()
        out = []
        mean = float(self.head.target_mean.item())
        std = float(self.head.target_std.item())
        for start in range(0, len(examples), batch_size):
            chunk = [_encode_prompt(tok, e) for e in examples[start : start + batch_size]]
            ids, last = _collate_prompts(chunk)
            z = self.head(self.pooled_hidden(ids, last)).to(torch.float64).numpy()
            out.append(z * std + mean)
        return np.concatenate(out, axis=0)


def attach_head_and_finetune(
    model: TinyLM,
    head: ClassificationHead | RegressionHead,
    tok: BpeTokenizer,
    examples: Sequence[PromptExample],
    cfg: TrainConfig,
) -> tuple[HeadModel, list[float]]:
    """Fine-tune base + head with Adam and the warmup schedule; returns loss curve.

    Classification minimizes cross-entropy over option indices; regression
    minimizes MSE on z-scored targets. Gold values come from each example's
    answer text.
    """
    if not examples:
        raise HeadError("no labeled examples")
    torch.set_num_threads(cfg.num_threads)

    if isinstance(head, ClassificationHead):
        kind = "classification"
        options = sorted({e.answer for e in examples})
        distinct = set(options)
        if len(distinct) < 2:
            raise HeadError(f"training data has a single class: {sorted(distinct)}")
        declared = [e.meta.get("options") for e in examples if e.meta.get("options")]
        if declared:
            options = list(declared[0])
        if len(options) != head.n_classes:
            raise HeadError(
                f"head expects {head.n_classes} classes, data provides {len(options)}"
            )
        option_index = {o: i for i, o in enumerate(options)}
        labels = torch.tensor([option_index[e.answer] for e in examples], dtype=torch.long)
        head_model = HeadModel(model, head, kind, options=tuple(options))
    else:
        kind = "regression"
        values = np.asarray([float(e.answer) for e in examples], dtype=np.float64)
        std = float(values.std())
        if std == 0.0:
            raise HeadError("regression targets are constant")
        mean = float(values.mean())
        with torch.no_grad():
            head.target_mean.fill_(mean)
            head.target_std.fill_(std)
        labels = torch.tensor((values - mean) / std, dtype=torch.float64)
        head_model = HeadModel(model, head, kind)

    records = [_encode_prompt(tok, e) for e in examples]
    for record in records:
        if len(record.ids) > model.cfg.context_len:
            raise HeadError("prompt exceeds context length; filter records first")

    optimizer = Adam(head_model.parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    curve: list[float] = []
    n = len(records)
    per_epoch = math.ceil(n / cfg.batch_size)
    head_model.train()
    for step in range(1, cfg.max_steps + 1):
        optimizer.zero_grad()
        step_loss = 0.0
        for accum in range(cfg.grad_accum_steps):
            micro_index = (step - 1) * cfg.grad_accum_steps + accum
            epoch, position = divmod(micro_index, per_epoch)
            order = list(range(n))
            random.Random(derive_seed(cfg.seed, epoch)).shuffle(order)
            batch = order[position * cfg.batch_size : (position + 1) * cfg.batch_size]
            ids, last = _collate_prompts([records[i] for i in batch])
            pooled = head_model.pooled_hidden(ids, last)
            output = head_model.head(pooled)
            if kind == "classification":
                log_probs = torch.log_softmax(output.to(torch.float64), dim=-1)
                loss = -log_probs[torch.arange(len(batch)), labels[batch]].mean()
            else:
                loss = ((output.to(torch.float64) - labels[batch]) ** 2).mean()
            if not torch.isfinite(loss):
                raise HeadError(f"non-finite fine-tuning loss at step {step}")
            (loss / cfg.grad_accum_steps).backward()
            step_loss += float(loss.item())
        optimizer.step(lr_at(step, cfg))
        curve.append(step_loss / cfg.grad_accum_steps)
    head_model.eval()
    return head_model, curve
