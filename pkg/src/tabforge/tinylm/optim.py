"""Adam with bias correction, float64 state, and a linear-warmup schedule."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

LOSS_SPANS = ("answer_only", "full_sequence")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-5
    warmup_ratio: float = 0.05
    grad_accum_steps: int = 4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    max_steps: int = 100
    batch_size: int = 8
    seed: int = 0
    loss_span: str = "answer_only"
    num_threads: int = 1

    def __post_init__(self) -> None:
        if not 0 < self.warmup_ratio < 1:
            raise ValueError(f"warmup_ratio must be in (0, 1), got {self.warmup_ratio}")
        for name in ("adam_beta1", "adam_beta2"):
            value = getattr(self, name)
            if not 0 < value < 1:
                raise ValueError(f"{name} must be in (0, 1), got {value}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.grad_accum_steps < 1 or self.batch_size < 1 or self.max_steps < 1:
            raise ValueError("grad_accum_steps, batch_size and max_steps must be >= 1")
        if self.loss_span not in LOSS_SPANS:
            raise ValueError(f"loss_span must be one of {LOSS_SPANS}, got {self.loss_span!r}")
        if self.num_threads < 1:
            raise ValueError("num_threads must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "TrainConfig":
        return TrainConfig(**data)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to learning_rate over warmup_ratio * max_steps, then constant.

    Steps are 1-based; at step == warmup_steps the rate equals learning_rate.
    """
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    warmup_steps = max(1, round(cfg.warmup_ratio * cfg.max_steps))
    if step <= warmup_steps:
        return cfg.learning_rate * step / warmup_steps
    return cfg.learning_rate


class Adam:
    """Bias-corrected Adam; moments are held in float64 regardless of weight dtype."""

    def __init__(
        self,
        params,
        beta1: float = 0.9,
        beta2: float = 0.95,
        eps: float = 1e-8,
    ):
        self.params = [p for p in params if p.requires_grad]
        if not self.params:
            raise ValueError("no trainable parameters")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [torch.zeros_like(p, dtype=torch.float64) for p in self.params]
        self.v = [torch.zeros_like(p, dtype=torch.float64) for p in self.params]

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            grad = p.grad.to(torch.float64)
            m.mul_(self.beta1).add_(grad, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(grad, grad, value=1.0 - self.beta2)
            m_hat = m / bias1
            v_hat = v / bias2
            update = lr * m_hat / (v_hat.sqrt() + self.eps)
            p.sub_(update.to(p.dtype))

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": [m.clone() for m in self.m],
            "v": [v.clone() for v in self.v],
        }

    def load_state_dict(self, state: dict) -> None:
        if len(state["m"]) != len(self.m) or len(state["v"]) != len(self.v):
            raise ValueError("optimizer state does not match parameter list")
        self.t = int(state["t"])
        for target, source in zip(self.m, state["m"]):
            target.copy_(source)
        for target, source in zip(self.v, state["v"]):
            target.copy_(source)
