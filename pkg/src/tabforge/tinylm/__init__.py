"""Small decoder-only transformer: tokenizer, model, training, heads, decoding."""

from .tokenizer import BpeTokenizer, special_tokens
from .model import ModelConfig, TinyLM, lm_loss, rope_rotate
from .optim import Adam, TrainConfig, lr_at
from .train import TokenizedRecord, TrainResult, prepare_records, tokenize_example, train
from .heads import ClassificationHead, HeadModel, RegressionHead, attach_head_and_finetune
from .decode import constrained_decode, generate_greedy
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Adam",
    "BpeTokenizer",
    "ClassificationHead",
    "HeadModel",
    "ModelConfig",
    "RegressionHead",
    "TinyLM",
    "TokenizedRecord",
    "TrainConfig",
    "TrainResult",
    "attach_head_and_finetune",
    "constrained_decode",
    "generate_greedy",
    "lm_loss",
    "load_checkpoint",
    "lr_at",
    "prepare_records",
    "rope_rotate",
    "save_checkpoint",
    "special_tokens",
    "tokenize_example",
    "train",
]
