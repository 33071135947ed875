"""Run configuration: one strict JSON document covering every pipeline stage.

Unknown keys are rejected so config typos fail loudly. The config hash stamps
every artifact (datasets, checkpoints, reports) for lineage checks.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .icl import ICL_K_GRID
from .taskgen import SHOTS_GRID
from .tinylm.model import ModelConfig
from .tinylm.optim import TrainConfig

#: Environment variable overriding the configured output directory.
OUT_DIR_ENV = "TABFORGE_OUT"


class ConfigError(ValueError):
    """Malformed run configuration."""


def _pop_section(data: dict, name: str) -> dict:
    section = data.pop(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"section {name!r} must be an object")
    return section


def _build(cls, section: dict, name: str):
    try:
        return cls(**section)
    except TypeError as err:
        raise ConfigError(f"section {name!r}: {err}") from None
    except ValueError as err:
        raise ConfigError(f"section {name!r}: {err}") from None


@dataclass(frozen=True)
class MaskSection:
    ratio: float = 0.15
    dynamic: bool = False
    max_sentinels: int = 32
    include_headers: bool = True
    epochs: int = 1

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass(frozen=True)
class TrainSection:
    learning_rate: float = 2e-5
    warmup_ratio: float = 0.05
    grad_accum_steps: int = 4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    batch_size: int = 8
    loss_span: str = "answer_only"
    num_threads: int = 1
    mtp_steps: int = 200
    multitask_steps: int = 200

    def stage_config(self, max_steps: int, seed: int) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            warmup_ratio=self.warmup_ratio,
            grad_accum_steps=self.grad_accum_steps,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            max_steps=max_steps,
            batch_size=self.batch_size,
            seed=seed,
            loss_span=self.loss_span,
            num_threads=self.num_threads,
        )


@dataclass(frozen=True)
class FinetuneSection:
    learning_rate: float = 1e-3
    warmup_ratio: float = 0.05
    grad_accum_steps: int = 1
    batch_size: int = 8
    steps: int = 150
    shots: int | None = None
    num_threads: int = 1

    def stage_config(self, seed: int, steps: int | None = None) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            warmup_ratio=self.warmup_ratio,
            grad_accum_steps=self.grad_accum_steps,
            max_steps=steps if steps is not None else self.steps,
            batch_size=self.batch_size,
            seed=seed,
            num_threads=self.num_threads,
        )


@dataclass(frozen=True)
class ContextSection:
    k: int = 8
    token_budget: int | None = None  # None: model context_len minus headroom
    balance: bool = True
    k_grid: tuple[int, ...] = ICL_K_GRID
    embed_dim: int = 256

    def __post_init__(self) -> None:
        object.__setattr__(self, "k_grid", tuple(self.k_grid))
        if self.k < 0 or self.embed_dim < 1:
            raise ValueError("k must be >= 0 and embed_dim >= 1")


@dataclass(frozen=True)
class EvalSection:
    max_new_tokens: int = 32
    imputation_samples_per_m: int = 1
    shots_grid: tuple[int, ...] = SHOTS_GRID
    fewshot_steps: int = 80

    def __post_init__(self) -> None:
        object.__setattr__(self, "shots_grid", tuple(self.shots_grid))
        if self.imputation_samples_per_m < 1:
            raise ValueError("imputation_samples_per_m must be >= 1")


@dataclass(frozen=True)
class SplitSection:
    test_fraction: float = 0.2
    val_fraction: float = 0.1

    def __post_init__(self) -> None:
        if not 0 < self.test_fraction < 1 or not 0 <= self.val_fraction < 1:
            raise ValueError("fractions must lie in (0, 1)")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: Path = Path("out")
    corpus_dir: Path | None = None  # default: out_dir / "corpus"
    tasks_manifest: Path | None = None
    mask: MaskSection = field(default_factory=MaskSection)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(vocab_size=1024))
    train: TrainSection = field(default_factory=TrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    context: ContextSection = field(default_factory=ContextSection)
    eval: EvalSection = field(default_factory=EvalSection)
    split: SplitSection = field(default_factory=SplitSection)

    @property
    def resolved_corpus_dir(self) -> Path:
        return self.corpus_dir if self.corpus_dir is not None else self.out_dir / "corpus"

    @property
    def token_budget(self) -> int:
        if self.context.token_budget is not None:
            return self.context.token_budget
        return max(32, self.model.context_len - 16)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["out_dir"] = str(self.out_dir)
        data["corpus_dir"] = None if self.corpus_dir is None else str(self.corpus_dir)
        data["tasks_manifest"] = None if self.tasks_manifest is None else str(self.tasks_manifest)
        return data

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        data = dict(data)
        mask = _build(MaskSection, _pop_section(data, "mask"), "mask")
        model_section = _pop_section(data, "model")
        if "vocab_size" not in model_section:
            model_section["vocab_size"] = 1024
        model = _build(ModelConfig, model_section, "model")
        train = _build(TrainSection, _pop_section(data, "train"), "train")
        finetune = _build(FinetuneSection, _pop_section(data, "finetune"), "finetune")
        context = _build(ContextSection, _pop_section(data, "context"), "context")
        eval_section = _build(EvalSection, _pop_section(data, "eval"), "eval")
        split = _build(SplitSection, _pop_section(data, "split"), "split")

        seed = data.pop("seed", 0)
        out_dir = Path(os.environ.get(OUT_DIR_ENV) or data.pop("out_dir", "out"))
        data.pop("out_dir", None)
        corpus_dir = data.pop("corpus_dir", None)
        tasks_manifest = data.pop("tasks_manifest", None)
        if data:
            raise ConfigError(f"unknown top-level config keys: {sorted(data)}")
        config = RunConfig(
            seed=int(seed),
            out_dir=out_dir,
            corpus_dir=None if corpus_dir is None else Path(corpus_dir),
            tasks_manifest=None if tasks_manifest is None else Path(tasks_manifest),
            mask=mask,
            model=model,
            train=train,
            finetune=finetune,
            context=context,
            eval=eval_section,
            split=split,
        )
        if config.tasks_manifest is not None and not config.tasks_manifest.exists():
            raise ConfigError(f"tasks_manifest does not exist: {config.tasks_manifest}")
        return config

    @staticmethod
    def load(path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text("utf-8"))
        except json.JSONDecodeError as err:
            raise ConfigError(f"config is not valid JSON: {err}") from None
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        return RunConfig.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), "utf-8")
