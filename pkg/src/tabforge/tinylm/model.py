"""Decoder-only transformer: pre-RMS-norm blocks, rotary attention, gated-SiLU MLP.

The rotary base is configurable per run so long-context behavior can be
compared across bases (e.g. 10000 vs 100000) without touching the code.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class SequenceLengthError(ValueError):
    """Input longer than the configured context window."""


class LossMaskError(ValueError):
    """Loss requested over an empty mask."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_head: int = 32
    context_len: int = 512
    rope_base: float = 10000.0

    def __post_init__(self) -> None:
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(
                f"d_model ({self.d_model}) must equal n_heads * d_head "
                f"({self.n_heads} * {self.d_head})"
            )
        if self.d_head % 2 != 0:
            raise ValueError(f"d_head must be even for rotary pairs, got {self.d_head}")
        if self.context_len < 8:
            raise ValueError(f"context_len must be >= 8, got {self.context_len}")
        if self.rope_base <= 0:
            raise ValueError(f"rope_base must be positive, got {self.rope_base}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "ModelConfig":
        return ModelConfig(**data)


def rope_frequencies(d_head: int, rope_base: float) -> np.ndarray:
    """theta_i = rope_base ** (-2i / d_head) for pair index i."""
    i = np.arange(d_head // 2, dtype=np.float64)
    return np.power(float(rope_base), -2.0 * i / d_head)


def rope_rotate(vector: np.ndarray, position: int, cfg: ModelConfig) -> np.ndarray:
    """Rotate one per-head vector by its position: 2-D rotations on (2i, 2i+1) pairs."""
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != cfg.d_head:
        raise ValueError(f"expected a vector of length d_head={cfg.d_head}, got shape {v.shape}")
    angles = position * rope_frequencies(cfg.d_head, cfg.rope_base)
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = v[0::2], v[1::2]
    out = np.empty_like(v)
    out[0::2] = even * cos - odd * sin
    out[1::2] = even * sin + odd * cos
    return out


def _apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: (B, T, H, d_head); cos/sin: (T, d_head/2)
    even, odd = x[..., 0::2], x[..., 1::2]
    cos = cos[None, :, None, :]
    sin = sin[None, :, None, :]
    rotated_even = even * cos - odd * sin
    rotated_odd = even * sin + odd * cos
    return torch.stack((rotated_even, rotated_odd), dim=-1).flatten(-2)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        scale = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + self.eps)
        return x * scale * self.weight


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.q_proj = nn.Linear(d, d, bias=False)
        self.k_proj = nn.Linear(d, d, bias=False)
        self.v_proj = nn.Linear(d, d, bias=False)
        self.o_proj = nn.Linear(d, d, bias=False)

    def forward(self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
        B, T, _ = x.shape
        H, dh = self.cfg.n_heads, self.cfg.d_head
        q = _apply_rope(self.q_proj(x).view(B, T, H, dh), cos, sin)
        k = _apply_rope(self.k_proj(x).view(B, T, H, dh), cos, sin)
        v = self.v_proj(x).view(B, T, H, dh)
        scores = torch.einsum("bqhd,bkhd->bhqk", q, k) / (dh**0.5)
        causal = torch.triu(torch.ones(T, T, dtype=torch.bool, device=x.device), diagonal=1)
        scores = scores.masked_fill(causal, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = torch.einsum("bhqk,bkhd->bqhd", weights, v).reshape(B, T, H * dh)
        return self.o_proj(out)


class GatedMlp(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        hidden = 4 * cfg.d_model
        self.gate_proj = nn.Linear(cfg.d_model, hidden, bias=False)
        self.up_proj = nn.Linear(cfg.d_model, hidden, bias=False)
        self.down_proj = nn.Linear(hidden, cfg.d_model, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down_proj(F.silu(self.gate_proj(x)) * self.up_proj(x))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn_norm = RMSNorm(cfg.d_model)
        self.attn = Attention(cfg)
        self.mlp_norm = RMSNorm(cfg.d_model)
        self.mlp = GatedMlp(cfg)

    def forward(self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.attn_norm(x), cos, sin)
        x = x + self.mlp(self.mlp_norm(x))
        return x


class TinyLM(nn.Module):
    """Causal LM over token ids; logits at position t depend only on ids[..t]."""

    def __init__(self, cfg: ModelConfig, *, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.final_norm = RMSNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)

        angles = np.arange(cfg.context_len)[:, None] * rope_frequencies(cfg.d_head, cfg.rope_base)[None, :]
        self.register_buffer("rope_cos", torch.from_numpy(np.cos(angles)), persistent=False)
        self.register_buffer("rope_sin", torch.from_numpy(np.sin(angles)), persistent=False)

        self._init_parameters(seed)
        self.to(dtype)

    def _init_parameters(self, seed: int) -> None:
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, param in self.named_parameters():
                if name == "lm_head.weight":
                    # zero head: logits start uniform, so constrained decoding
                    # over equal-length options is symmetric before training
                    param.zero_()
                elif name.endswith("norm.weight"):
                    param.fill_(1.0)
                else:
                    sample = torch.randn(param.shape, generator=generator, dtype=torch.float64)
                    param.copy_((0.02 * sample).to(param.dtype))

    @property
    def dtype(self) -> torch.dtype:
        return self.embed.weight.dtype

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _check_length(self, ids: torch.Tensor) -> None:
        if ids.dim() != 2:
            raise ValueError(f"expected (batch, time) ids, got shape {tuple(ids.shape)}")
        if ids.shape[1] > self.cfg.context_len:
            raise SequenceLengthError(
                f"sequence length {ids.shape[1]} exceeds context_len {self.cfg.context_len}"
            )

    def hidden_states(self, ids: torch.Tensor) -> torch.Tensor:
        self._check_length(ids)
        T = ids.shape[1]
        cos = self.rope_cos[:T].to(self.dtype)
        sin = self.rope_sin[:T].to(self.dtype)
        x = self.embed(ids)
        for block in self.blocks:
            x = block(x, cos, sin)
        return self.final_norm(x)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.lm_head(self.hidden_states(ids))


def lm_loss(logits: torch.Tensor, targets: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over masked positions, accumulated in float64.

    Positions outside the mask contribute a factor of exactly zero, so their
    logits receive exactly zero gradient.
    """
    if logits.shape[:-1] != targets.shape or targets.shape != loss_mask.shape:
        raise ValueError("logits, targets and loss_mask shapes disagree")
    mask = loss_mask.to(torch.float64)
    total = mask.sum()
    if total.item() == 0:
        raise LossMaskError("loss mask selects no positions")
    log_probs = F.log_softmax(logits.to(torch.float64), dim=-1)
    nll = -log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return (nll * mask).sum() / total
