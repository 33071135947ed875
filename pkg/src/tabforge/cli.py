"""Pipeline orchestration: ingest, stats, build, train, finetune, eval.

Every subcommand is deterministic given (inputs, config, seed); artifacts carry
the config hash so evaluation refuses silently mismatched lineages.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics as metrics_mod
from .icl import ContextPlan, HashEmbedder, assemble_long_input, select_context
from .masker import (
    MaskConfig,
    MaskingError,
    corrupt_for_imputation,
    derive_seed,
    load_instruction,
    mask_table,
    parse_sentinel_answer,
    sentinel_token,
)
from .metrics import MetricRecord, MetricReport
from .runconfig import ConfigError, RunConfig
from .table_model import Table, TableError, read_csv, read_tables_jsonl, write_tables_jsonl
from .taskgen import (
    CLASSIFICATION,
    REGRESSION,
    TaskSpec,
    augment_cot,
    build_predict_as_impute,
    build_task_dataset,
    drop_column,
    read_manifest,
    sample_few_shot,
    split_rows,
)
from .textgen import (
    PromptExample,
    read_examples_jsonl,
    render_example,
    to_sentence,
    write_examples_jsonl,
)
from .tinylm.checkpoint import load_checkpoint, save_checkpoint
from .tinylm.decode import constrained_decode, generate_greedy
from .tinylm.heads import ClassificationHead, HeadModel, RegressionHead, attach_head_and_finetune
from .tinylm.model import TinyLM
from .tinylm.tokenizer import BpeTokenizer
from .tinylm.train import prepare_records, train

BUILD_TARGETS = ("mtp", "tasks", "fewshot", "icl")
EVAL_PROTOCOLS = (
    "cls",
    "reg",
    "impute",
    "zeroshot",
    "fewshot",
    "icl",
    "predict-as-impute",
    "cot",
)

#: Column-type mix of the large-scale reference corpus, printed next to local stats.
REFERENCE_TYPE_MIX = "reference large-scale corpus: ~60% numeric / ~40% textual"


class PipelineError(RuntimeError):
    """A subcommand cannot proceed (missing artifact, lineage mismatch, ...)."""


# --------------------------------------------------------------------------
# shared plumbing


def _stable_int(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def _dataset_seed(config: RunConfig, dataset_id: str) -> int:
    return derive_seed(config.seed, _stable_int(dataset_id))


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, ensure_ascii=False, indent=2) + "\n", "utf-8")


def _read_json(path: Path):
    return json.loads(path.read_text("utf-8"))


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing {hint}: {path} (run `{_HINTS.get(hint, 'the producing step')}` first)")
    return path


_HINTS = {
    "corpus": "tabforge ingest",
    "mtp dataset": "tabforge build mtp",
    "task dataset": "tabforge build tasks",
    "few-shot dataset": "tabforge build fewshot",
    "tokenizer": "tabforge train",
    "checkpoint": "tabforge train",
    "head checkpoint": "tabforge finetune",
}


def _corpus_tables_path(config: RunConfig) -> Path:
    return config.resolved_corpus_dir / "tables.jsonl"


def load_corpus(config: RunConfig) -> list[Table]:
    path = _require(_corpus_tables_path(config), "corpus")
    return sorted(read_tables_jsonl(path), key=lambda t: t.name)


def _data_dir(config: RunConfig) -> Path:
    return config.out_dir / "data"


def _tokenizer_path(config: RunConfig) -> Path:
    return config.out_dir / "tokenizer.json"


def _checkpoint_path(config: RunConfig) -> Path:
    return config.out_dir / "checkpoints" / "model.ckpt"


def _head_checkpoint_path(config: RunConfig, dataset_id: str, shots: int | None = None) -> Path:
    suffix = f".shot{shots}" if shots is not None else ""
    return config.out_dir / "checkpoints" / f"head.{dataset_id}{suffix}.ckpt"


def _specs(config: RunConfig) -> list[TaskSpec]:
    if config.tasks_manifest is None:
        raise PipelineError("config has no tasks_manifest; task protocols need one")
    return sorted(read_manifest(config.tasks_manifest), key=lambda s: s.dataset_id)


def _table_by_name(tables: Sequence[Table], name: str) -> Table:
    for table in tables:
        if table.name == name:
            return table
    raise PipelineError(f"dataset {name!r} not found in corpus ({len(tables)} tables)")


def _check_lineage(config: RunConfig, artifact_hash: str | None, what: str, allow: bool) -> None:
    expected = config.config_hash()
    if artifact_hash != expected:
        message = (
            f"{what} was produced under config hash {artifact_hash!r}, current is {expected!r}; "
            "rebuild it or pass --allow-hash-mismatch"
        )
        if not allow:
            raise PipelineError(message)
        print(f"warning: {message}", file=sys.stderr)


# --------------------------------------------------------------------------
# ingest


def cmd_ingest(
    inputs: Sequence[str | Path],
    out_dir: str | Path,
    domain_map: dict[str, str] | None = None,
    numeric_threshold: float = 0.99,
) -> dict:
    """Canonicalize CSV files into the corpus; unreadable files become error entries."""
    corpus_dir = Path(out_dir)
    corpus_dir.mkdir(parents=True, exist_ok=True)
    domain_map = domain_map or {}

    paths: list[Path] = []
    for item in inputs:
        path = Path(item)
        if path.is_dir():
            paths.extend(sorted(path.glob("*.csv")))
        else:
            paths.append(path)
    paths = sorted(set(paths))

    tables: list[Table] = []
    errors: list[dict] = []
    for path in paths:
        try:
            table = read_csv(
                path,
                domain_tag=domain_map.get(path.stem),
                numeric_threshold=numeric_threshold,
            )
            tables.append(table)
        except (OSError, TableError, UnicodeDecodeError, ValueError) as err:
            errors.append({"file": str(path), "error": str(err)})

    tables.sort(key=lambda t: t.name)
    write_tables_jsonl(corpus_dir / "tables.jsonl", tables)
    manifest = {
        "tables": [
            {
                "table": t.name,
                "rows": t.n_rows,
                "columns": t.n_columns,
                "domain_tag": t.domain_tag,
            }
            for t in tables
        ],
        "errors": errors,
    }
    _write_json(corpus_dir / "manifest.json", manifest)
    return manifest


# --------------------------------------------------------------------------
# stats


def cmd_stats(config: RunConfig) -> dict:
    """Type-mix and domain distribution of the ingested corpus."""
    tables = load_corpus(config)
    if not tables:
        raise PipelineError("corpus is empty")
    numeric = sum(1 for t in tables for c in t.columns if c.kind == "numeric")
    textual = sum(1 for t in tables for c in t.columns if c.kind == "textual")
    total_columns = numeric + textual
    domain_counts: dict[str, int] = {}
    for table in tables:
        domain_counts[table.domain_tag or "(untagged)"] = (
            domain_counts.get(table.domain_tag or "(untagged)", 0) + 1
        )
    domains = sorted(domain_counts.items(), key=lambda kv: (-kv[1], kv[0]))
    report = {
        "tables": len(tables),
        "rows": sum(t.n_rows for t in tables),
        "columns": total_columns,
        "numeric_fraction": numeric / total_columns,
        "textual_fraction": textual / total_columns,
        "domains": [{"domain": d, "tables": n} for d, n in domains],
        "reference": REFERENCE_TYPE_MIX,
    }
    lines = [
        f"tables: {report['tables']}  rows: {report['rows']}  columns: {total_columns}",
        f"numeric columns: {report['numeric_fraction']:.1%}   textual columns: {report['textual_fraction']:.1%}",
        f"({REFERENCE_TYPE_MIX})",
        "domains (tables desc):",
    ]
    lines += [f"  {d['domain']}: {d['tables']}" for d in report["domains"]]
    print("\n".join(lines))
    return report


# --------------------------------------------------------------------------
# build


def _build_mtp(config: RunConfig) -> dict:
    tables = load_corpus(config)
    data_dir = _data_dir(config)
    examples: list[PromptExample] = []
    skipped = 0
    for epoch in range(config.mask.epochs):
        for index, table in enumerate(tables):
            cfg = MaskConfig(
                ratio=config.mask.ratio,
                dynamic=config.mask.dynamic,
                max_sentinels=config.mask.max_sentinels,
                include_headers=config.mask.include_headers,
                seed=derive_seed(config.seed, epoch, index),
            )
            try:
                examples.append(mask_table(table, cfg).prompt)
            except MaskingError:
                skipped += 1
    data_dir.mkdir(parents=True, exist_ok=True)
    count = write_examples_jsonl(data_dir / "mtp.jsonl", examples)
    summary = {
        "records": count,
        "skipped_tables": skipped,
        "epochs": config.mask.epochs,
        "config_hash": config.config_hash(),
    }
    _write_json(data_dir / "mtp.summary.json", summary)
    return summary


def _build_tasks(config: RunConfig) -> dict:
    tables = load_corpus(config)
    specs = _specs(config)
    tasks_dir = _data_dir(config) / "tasks"
    tasks_dir.mkdir(parents=True, exist_ok=True)
    summary: dict = {"datasets": [], "config_hash": config.config_hash()}
    for spec in specs:
        table = _table_by_name(tables, spec.dataset_id)
        plan = split_rows(
            table.n_rows,
            seed=_dataset_seed(config, spec.dataset_id),
            test_fraction=config.split.test_fraction,
            val_fraction=config.split.val_fraction,
        )
        counts = {}
        skips = {}
        for split_name, indices in (("train", plan.train), ("val", plan.val), ("test", plan.test)):
            examples, skip_report = build_task_dataset(table, spec, indices)
            counts[split_name] = write_examples_jsonl(
                tasks_dir / f"{spec.dataset_id}.{split_name}.jsonl", examples
            )
            skips[split_name] = skip_report
        _write_json(
            tasks_dir / f"{spec.dataset_id}.split.json",
            {
                "plan": {
                    "train": list(plan.train),
                    "val": list(plan.val),
                    "test": list(plan.test),
                    "seed": plan.seed,
                },
                "counts": counts,
                "skips": skips,
                "kind": spec.kind,
                "config_hash": config.config_hash(),
            },
        )
        summary["datasets"].append({"dataset_id": spec.dataset_id, **counts})
    _write_json(tasks_dir / "tasks.summary.json", summary)
    return summary


def _read_split(config: RunConfig, dataset_id: str) -> dict:
    return _read_json(_require(_data_dir(config) / "tasks" / f"{dataset_id}.split.json", "task dataset"))


def _read_task_examples(config: RunConfig, dataset_id: str, split: str) -> list[PromptExample]:
    path = _require(_data_dir(config) / "tasks" / f"{dataset_id}.{split}.jsonl", "task dataset")
    return list(read_examples_jsonl(path))


def _build_fewshot(config: RunConfig) -> dict:
    specs = _specs(config)
    fewshot_dir = _data_dir(config) / "fewshot"
    fewshot_dir.mkdir(parents=True, exist_ok=True)
    summary: dict = {"subsets": [], "config_hash": config.config_hash()}
    for spec in specs:
        train_examples = _read_task_examples(config, spec.dataset_id, "train")
        labels = [e.answer for e in train_examples]
        for k in config.eval.shots_grid:
            if k > len(labels):
                continue
            try:
                chosen = sample_few_shot(
                    labels,
                    k,
                    seed=derive_seed(_dataset_seed(config, spec.dataset_id), k),
                    kind=spec.kind,
                )
            except Exception as err:
                summary["subsets"].append(
                    {"dataset_id": spec.dataset_id, "shots": k, "error": str(err)}
                )
                continue
            subset = [train_examples[i] for i in chosen]
            write_examples_jsonl(fewshot_dir / f"{spec.dataset_id}.shot{k}.jsonl", subset)
            summary["subsets"].append({"dataset_id": spec.dataset_id, "shots": k, "records": len(subset)})
    _write_json(fewshot_dir / "fewshot.summary.json", summary)
    return summary


def _feature_sentence(table: Table, spec: TaskSpec, row_index: int) -> str:
    return to_sentence(drop_column(table, spec.target_column), row_index)


def _build_icl(config: RunConfig) -> dict:
    tables = load_corpus(config)
    specs = [s for s in _specs(config) if s.kind == CLASSIFICATION]
    icl_dir = _data_dir(config) / "icl"
    icl_dir.mkdir(parents=True, exist_ok=True)
    embedder = HashEmbedder(config.context.embed_dim)
    summary: dict = {"caches": [], "config_hash": config.config_hash()}
    for spec in specs:
        table = _table_by_name(tables, spec.dataset_id)
        vectors = {
            str(i): [float(x) for x in embedder.embed(_feature_sentence(table, spec, i))]
            for i in range(table.n_rows)
        }
        _write_json(
            icl_dir / f"{spec.dataset_id}.embeddings.json",
            {"dimension": embedder.dimension, "vectors": vectors, "config_hash": config.config_hash()},
        )
        summary["caches"].append({"dataset_id": spec.dataset_id, "rows": table.n_rows})
    _write_json(icl_dir / "icl.summary.json", summary)
    return summary


def cmd_build(config: RunConfig, which: str) -> dict:
    if which == "mtp":
        return _build_mtp(config)
    if which == "tasks":
        return _build_tasks(config)
    if which == "fewshot":
        return _build_fewshot(config)
    if which == "icl":
        return _build_icl(config)
    raise PipelineError(f"unknown build target {which!r}; expected one of {BUILD_TARGETS}")


# --------------------------------------------------------------------------
# train


def _training_corpus_texts(config: RunConfig) -> list[str]:
    texts: list[str] = []
    mtp_path = _data_dir(config) / "mtp.jsonl"
    if mtp_path.exists():
        texts.extend(render_example(e) for e in read_examples_jsonl(mtp_path))
    tasks_dir = _data_dir(config) / "tasks"
    if tasks_dir.exists():
        for path in sorted(tasks_dir.glob("*.train.jsonl")):
            texts.extend(render_example(e) for e in read_examples_jsonl(path))
    return texts


def ensure_tokenizer(config: RunConfig) -> BpeTokenizer:
    """Load the run tokenizer, training it on the built datasets if absent."""
    path = _tokenizer_path(config)
    if path.exists():
        return BpeTokenizer.load(path)
    texts = _training_corpus_texts(config)
    if not texts:
        raise PipelineError("no built datasets to train a tokenizer on (run `tabforge build`)")
    tok = BpeTokenizer.train(texts, vocab_size=config.model.vocab_size)
    path.parent.mkdir(parents=True, exist_ok=True)
    tok.save(path)
    return tok


def _model_for(config: RunConfig, tok: BpeTokenizer) -> TinyLM:
    model_cfg = dataclasses.replace(config.model, vocab_size=tok.vocab_size)
    return TinyLM(model_cfg, seed=config.seed)


def cmd_train(
    config: RunConfig,
    *,
    no_mtp: bool = False,
    no_multitask: bool = False,
    resume: str | Path | None = None,
) -> Path:
    """Two-stage training (masked-cell recovery, then supervised multi-task).

    Either stage can be ablated; with both ablated the checkpoint holds the
    initialized weights so downstream comparisons share one code path.
    """
    tok = ensure_tokenizer(config)

    stages: list[tuple[str, list[PromptExample], int]] = []
    if not no_mtp:
        path = _require(_data_dir(config) / "mtp.jsonl", "mtp dataset")
        stages.append(("mtp", list(read_examples_jsonl(path)), config.train.mtp_steps))
    if not no_multitask:
        tasks_dir = _require(_data_dir(config) / "tasks", "task dataset")
        examples: list[PromptExample] = []
        for path in sorted(tasks_dir.glob("*.train.jsonl")):
            examples.extend(read_examples_jsonl(path))
        stages.append(("multitask", examples, config.train.multitask_steps))

    if resume is not None:
        model, extras = load_checkpoint(resume, with_optimizer=True)
        if isinstance(model, HeadModel):
            raise PipelineError("cannot resume base training from a head checkpoint")
        start_stage = int(extras["extra"].get("stage_index", 0))
        start_step = int(extras["extra"].get("stage_step", 0))
        optimizer = extras.get("optimizer")
        curves: list[dict] = list(extras["extra"].get("stage_curves", []))
    else:
        model = _model_for(config, tok)
        start_stage, start_step, optimizer = 0, 0, None
        curves = []

    stage_index = start_stage
    for index, (name, examples, steps) in enumerate(stages):
        if index < start_stage:
            continue
        records, report = prepare_records(tok, examples, model.cfg.context_len)
        if not records:
            raise PipelineError(f"stage {name!r} has no records fitting the context window")
        stage_seed = derive_seed(config.seed, _stable_int(name))
        train_cfg = config.train.stage_config(max_steps=steps, seed=stage_seed)
        result = train(
            model,
            records,
            train_cfg,
            optimizer=optimizer if index == start_stage else None,
            start_step=start_step if index == start_stage else 0,
            loss_curve=(
                list(curves[index]["losses"]) if index < len(curves) and index == start_stage else None
            ),
        )
        entry = {"name": name, "steps": steps, "losses": result.loss_curve, "dropped": report}
        if index < len(curves):
            curves[index] = entry
        else:
            curves.append(entry)
        optimizer = result.optimizer
        stage_index = index
        start_step = 0

    logs_dir = config.out_dir / "logs"
    _write_json(
        logs_dir / "train_losses.json",
        {"config_hash": config.config_hash(), "stages": curves, "no_mtp": no_mtp, "no_multitask": no_multitask},
    )

    checkpoint = _checkpoint_path(config)
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    total_steps = sum(len(c["losses"]) for c in curves)
    save_checkpoint(
        checkpoint,
        model,
        optimizer=optimizer,
        step=total_steps,
        loss_curve=[loss for c in curves for loss in c["losses"]],
        config_hash=config.config_hash(),
        extra={
            "stage_index": stage_index,
            "stage_step": len(curves[stage_index]["losses"]) if curves else 0,
            "stage_curves": curves,
            "no_mtp": no_mtp,
            "no_multitask": no_multitask,
        },
    )
    return checkpoint


# --------------------------------------------------------------------------
# finetune


def _load_base(config: RunConfig, checkpoint: str | Path | None, allow_hash_mismatch: bool) -> TinyLM:
    path = Path(checkpoint) if checkpoint is not None else _require(_checkpoint_path(config), "checkpoint")
    model, extras = load_checkpoint(path)
    _check_lineage(config, extras.get("config_hash"), f"checkpoint {path.name}", allow_hash_mismatch)
    if isinstance(model, HeadModel):
        raise PipelineError(f"{path} is a head checkpoint; base weights required")
    return model


def _finetune_one(
    config: RunConfig,
    tok: BpeTokenizer,
    spec: TaskSpec,
    examples: list[PromptExample],
    *,
    seed: int,
    steps: int | None = None,
    checkpoint: str | Path | None = None,
    allow_hash_mismatch: bool = False,
) -> tuple[HeadModel, list[float]]:
    base = _load_base(config, checkpoint, allow_hash_mismatch)
    if spec.kind == CLASSIFICATION:
        head: ClassificationHead | RegressionHead = ClassificationHead(
            base.cfg.d_model, len(spec.options)
        )
    else:
        head = RegressionHead(base.cfg.d_model)
    cfg = config.finetune.stage_config(seed=seed, steps=steps)
    return attach_head_and_finetune(base, head, tok, examples, cfg)


def cmd_finetune(
    config: RunConfig,
    dataset_id: str | None = None,
    shots: int | None = None,
    *,
    allow_hash_mismatch: bool = False,
) -> list[Path]:
    """Attach task heads to the trained base and fine-tune per dataset."""
    tok = BpeTokenizer.load(_require(_tokenizer_path(config), "tokenizer"))
    specs = _specs(config)
    if dataset_id is not None:
        specs = [s for s in specs if s.dataset_id == dataset_id]
        if not specs:
            raise PipelineError(f"dataset {dataset_id!r} not in manifest")
    shots = shots if shots is not None else config.finetune.shots

    saved: list[Path] = []
    for spec in specs:
        if shots is not None:
            path = _data_dir(config) / "fewshot" / f"{spec.dataset_id}.shot{shots}.jsonl"
            examples = list(read_examples_jsonl(_require(path, "few-shot dataset")))
        else:
            examples = _read_task_examples(config, spec.dataset_id, "train")
        head_model, curve = _finetune_one(
            config,
            tok,
            spec,
            examples,
            seed=derive_seed(_dataset_seed(config, spec.dataset_id), shots or 0),
            allow_hash_mismatch=allow_hash_mismatch,
        )
        out = _head_checkpoint_path(config, spec.dataset_id, shots)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out, head_model, config_hash=config.config_hash())
        _write_json(
            config.out_dir / "logs" / f"finetune.{spec.dataset_id}{f'.shot{shots}' if shots else ''}.json",
            {"losses": curve, "config_hash": config.config_hash()},
        )
        saved.append(out)
    return saved


# --------------------------------------------------------------------------
# eval


def build_imputation_eval_examples(
    config: RunConfig,
    tables: Sequence[Table],
    *,
    cot: bool = False,
) -> list[tuple[PromptExample, dict[int, str], int]]:
    """Deterministic imputation corruptions: (prompt, targets, m) per record.

    Shared by evaluation and by overfitting harnesses so both sides see
    byte-identical prompts.
    """
    instruction = load_instruction("imputation")
    if cot:
        instruction = augment_cot(instruction)
    records = []
    for m in range(1, 5):
        for sample in range(config.eval.imputation_samples_per_m):
            for index, table in enumerate(tables):
                seed = derive_seed(config.seed, m, sample, index)
                try:
                    masked = corrupt_for_imputation(table, m, seed=seed, instruction=instruction)
                except MaskingError:
                    continue
                records.append((masked.prompt, masked.targets, m))
    return records


def _eval_impute(
    config: RunConfig, model: TinyLM, tok: BpeTokenizer, *, cot: bool
) -> MetricReport:
    tables = load_corpus(config)
    records = build_imputation_eval_examples(config, tables, cot=cot)
    if not records:
        raise PipelineError("no tables support imputation corruption")
    per_m: dict[int, list[float]] = {1: [], 2: [], 3: [], 4: []}
    skipped_over_length = 0
    for prompt, targets, m in records:
        text = render_example(prompt, with_answer=False)
        if len(tok.encode(text)) + 1 >= model.cfg.context_len:
            skipped_over_length += 1
            continue
        output = generate_greedy(model, tok, text, max_new_tokens=config.eval.max_new_tokens)
        predictions = parse_sentinel_answer(output, len(targets))
        scores = [
            metrics_mod.rouge_l(predictions[i], gold) for i, gold in targets.items()
        ]
        per_m[m].append(sum(scores) / len(scores))
    report = MetricReport()
    report.header["skipped_over_length"] = skipped_over_length
    strata_extra = {"cot": cot} if cot else {}
    all_scores: list[float] = []
    for m in (1, 2, 3, 4):
        scores = per_m[m]
        all_scores.extend(scores)
        report.add(
            MetricRecord(
                task_id="imputation",
                metric_name="rouge_l",
                value=(sum(scores) / len(scores)) if scores else None,
                strata={"m": m, "records": len(scores), **strata_extra},
            )
        )
    if all_scores:
        report.add(
            MetricRecord(
                task_id="imputation",
                metric_name="rouge_l",
                value=sum(all_scores) / len(all_scores),
                strata={"m": "all", "records": len(all_scores), **strata_extra},
            )
        )
    return report


def _binary_scores(probs: np.ndarray, options: Sequence[str], golds: Sequence[str]) -> tuple[list[float], list[int]]:
    positive = options[1]
    scores = [float(p[1]) for p in probs]
    labels = [1 if g == positive else 0 for g in golds]
    return scores, labels


def _eval_cls(config: RunConfig, tok: BpeTokenizer, allow_hash_mismatch: bool) -> MetricReport:
    report = MetricReport()
    for spec in (s for s in _specs(config) if s.kind == CLASSIFICATION):
        path = _require(_head_checkpoint_path(config, spec.dataset_id), "head checkpoint")
        head_model, extras = load_checkpoint(path)
        _check_lineage(config, extras.get("config_hash"), f"head checkpoint {path.name}", allow_hash_mismatch)
        test = _read_task_examples(config, spec.dataset_id, "test")
        if not test:
            continue
        probs = head_model.predict_class_probs(tok, test)
        golds = [e.answer for e in test]
        options = list(head_model.options or spec.options)
        predictions = [options[int(np.argmax(p))] for p in probs]
        strata = {"dataset": spec.dataset_id}
        report.add(
            MetricRecord(spec.dataset_id, "accuracy", metrics_mod.accuracy(predictions, golds), strata)
        )
        if len(options) == 2 and len(set(golds)) == 2:
            scores, labels = _binary_scores(probs, options, golds)
            report.add(
                MetricRecord(spec.dataset_id, "roc_auc", metrics_mod.roc_auc(scores, labels), strata)
            )
        report.add(
            MetricRecord(
                spec.dataset_id,
                "gini",
                metrics_mod.gini_index(golds, classes=options),
                {**strata, "metric_kind": "label_imbalance"},
            )
        )
    return report


def _eval_reg(config: RunConfig, tok: BpeTokenizer, allow_hash_mismatch: bool) -> MetricReport:
    report = MetricReport()
    for spec in (s for s in _specs(config) if s.kind == REGRESSION):
        path = _require(_head_checkpoint_path(config, spec.dataset_id), "head checkpoint")
        head_model, extras = load_checkpoint(path)
        _check_lineage(config, extras.get("config_hash"), f"head checkpoint {path.name}", allow_hash_mismatch)
        test = _read_task_examples(config, spec.dataset_id, "test")
        if len(test) < 2:
            continue
        values = head_model.predict_values(tok, test)
        golds = [float(e.answer) for e in test]
        report.add(
            MetricRecord(
                spec.dataset_id,
                "r_squared",
                metrics_mod.r_squared(golds, values),
                {"dataset": spec.dataset_id},
            )
        )
    return report


def _eval_zeroshot(config: RunConfig, model: TinyLM, tok: BpeTokenizer) -> MetricReport:
    report = MetricReport()
    for spec in (s for s in _specs(config) if s.kind == CLASSIFICATION):
        test = _read_task_examples(config, spec.dataset_id, "test")
        if not test:
            continue
        options = list(spec.options)
        probs = []
        for example in test:
            prompt = render_example(example, with_answer=False)
            probs.append(constrained_decode(model, tok, prompt, options))
        probs = np.asarray(probs)
        golds = [e.answer for e in test]
        predictions = [options[int(np.argmax(p))] for p in probs]
        strata = {"dataset": spec.dataset_id, "protocol": "zeroshot"}
        report.add(
            MetricRecord(spec.dataset_id, "accuracy", metrics_mod.accuracy(predictions, golds), strata)
        )
        if len(options) == 2 and len(set(golds)) == 2:
            scores, labels = _binary_scores(probs, options, golds)
            report.add(
                MetricRecord(spec.dataset_id, "roc_auc", metrics_mod.roc_auc(scores, labels), strata)
            )
    return report


def _eval_fewshot(
    config: RunConfig, tok: BpeTokenizer, allow_hash_mismatch: bool, checkpoint: str | Path | None
) -> MetricReport:
    report = MetricReport()
    for spec in (s for s in _specs(config) if s.kind == CLASSIFICATION):
        test = _read_task_examples(config, spec.dataset_id, "test")
        if not test:
            continue
        golds = [e.answer for e in test]
        options = list(spec.options)
        for k in config.eval.shots_grid:
            path = _data_dir(config) / "fewshot" / f"{spec.dataset_id}.shot{k}.jsonl"
            if not path.exists():
                continue
            subset = list(read_examples_jsonl(path))
            head_model, _ = _finetune_one(
                config,
                tok,
                spec,
                subset,
                seed=derive_seed(_dataset_seed(config, spec.dataset_id), k),
                steps=config.eval.fewshot_steps,
                checkpoint=checkpoint,
                allow_hash_mismatch=allow_hash_mismatch,
            )
            probs = head_model.predict_class_probs(tok, test)
            predictions = [options[int(np.argmax(p))] for p in probs]
            strata = {"dataset": spec.dataset_id, "shots": k}
            report.add(
                MetricRecord(spec.dataset_id, "accuracy", metrics_mod.accuracy(predictions, golds), strata)
            )
            if len(options) == 2 and len(set(golds)) == 2:
                scores, labels = _binary_scores(probs, options, golds)
                report.add(
                    MetricRecord(spec.dataset_id, "roc_auc", metrics_mod.roc_auc(scores, labels), strata)
                )
    return report


def _load_embeddings(config: RunConfig, dataset_id: str) -> tuple[int, dict[int, np.ndarray]]:
    path = _data_dir(config) / "icl" / f"{dataset_id}.embeddings.json"
    if path.exists():
        payload = _read_json(path)
        vectors = {int(k): np.asarray(v, dtype=np.float64) for k, v in payload["vectors"].items()}
        return int(payload["dimension"]), vectors
    return config.context.embed_dim, {}


def _eval_icl(config: RunConfig, model: TinyLM, tok: BpeTokenizer) -> MetricReport:
    report = MetricReport()
    tables = load_corpus(config)
    for spec in (s for s in _specs(config) if s.kind == CLASSIFICATION):
        table = _table_by_name(tables, spec.dataset_id)
        train_examples = _read_task_examples(config, spec.dataset_id, "train")
        test_examples = _read_task_examples(config, spec.dataset_id, "test")
        if not train_examples or not test_examples:
            continue
        dimension, cache = _load_embeddings(config, spec.dataset_id)
        embedder = HashEmbedder(dimension)

        def vector_for(row_index: int) -> np.ndarray:
            if row_index in cache:
                return cache[row_index]
            return embedder.embed(_feature_sentence(table, spec, row_index))

        candidate_vectors = np.stack([vector_for(e.meta["row_index"]) for e in train_examples])
        candidate_labels = [e.answer for e in train_examples]
        options = list(spec.options)
        golds = [e.answer for e in test_examples]
        for k in config.context.k_grid:
            if k > len(train_examples):
                continue
            plan = ContextPlan(
                k=k, token_budget=config.token_budget, balance=config.context.balance
            )
            probs = []
            for example in test_examples:
                if k == 0:
                    text = render_example(example, with_answer=False)
                else:
                    query_vec = vector_for(example.meta["row_index"])
                    chosen = select_context(
                        query_vec, candidate_vectors, candidate_labels, plan, classes=options
                    )
                    context = [train_examples[i] for i in chosen]
                    text = assemble_long_input(context, example, config.token_budget, tok)
                probs.append(constrained_decode(model, tok, text, options))
            probs = np.asarray(probs)
            predictions = [options[int(np.argmax(p))] for p in probs]
            strata = {"dataset": spec.dataset_id, "k": k}
            report.add(
                MetricRecord(spec.dataset_id, "accuracy", metrics_mod.accuracy(predictions, golds), strata)
            )
            if len(options) == 2 and len(set(golds)) == 2:
                scores, labels = _binary_scores(probs, options, golds)
                report.add(
                    MetricRecord(spec.dataset_id, "roc_auc", metrics_mod.roc_auc(scores, labels), strata)
                )
    return report


def _eval_predict_as_impute(
    config: RunConfig, model: TinyLM, tok: BpeTokenizer, *, cot: bool
) -> MetricReport:
    report = MetricReport()
    tables = load_corpus(config)
    for spec in (s for s in _specs(config) if s.kind == CLASSIFICATION):
        table = _table_by_name(tables, spec.dataset_id)
        split = _read_split(config, spec.dataset_id)
        options = list(spec.options)
        option_texts = [f"{sentinel_token(0)} {o}" for o in options]
        golds = []
        probs = []
        for row_index in split["plan"]["test"]:
            try:
                masked = build_predict_as_impute(table, row_index, spec)
            except Exception:
                continue
            prompt = masked.prompt
            if cot:
                prompt = PromptExample(
                    instruction=augment_cot(prompt.instruction),
                    table_markdown=prompt.table_markdown,
                    answer=prompt.answer,
                    task_kind=prompt.task_kind,
                    meta=prompt.meta,
                )
            text = render_example(prompt, with_answer=False)
            probs.append(constrained_decode(model, tok, text, option_texts))
            golds.append(masked.targets[0])
        if not golds:
            continue
        probs = np.asarray(probs)
        predictions = [options[int(np.argmax(p))] for p in probs]
        strata = {"dataset": spec.dataset_id, "protocol": "predict_as_impute", "cot": cot}
        report.add(
            MetricRecord(spec.dataset_id, "accuracy", metrics_mod.accuracy(predictions, golds), strata)
        )
        if len(options) == 2 and len(set(golds)) == 2:
            scores, labels = _binary_scores(probs, options, golds)
            report.add(
                MetricRecord(spec.dataset_id, "roc_auc", metrics_mod.roc_auc(scores, labels), strata)
            )
    return report


def cmd_eval(
    config: RunConfig,
    protocol: str,
    *,
    cot: bool = False,
    checkpoint: str | Path | None = None,
    allow_hash_mismatch: bool = False,
) -> MetricReport:
    """Run one evaluation protocol and write reports (JSON, text, CSV)."""
    if protocol not in EVAL_PROTOCOLS:
        raise PipelineError(f"unknown protocol {protocol!r}; expected one of {EVAL_PROTOCOLS}")
    tok = BpeTokenizer.load(_require(_tokenizer_path(config), "tokenizer"))

    if protocol in ("cls", "reg", "zeroshot", "fewshot", "icl"):
        summary_path = _data_dir(config) / "tasks" / "tasks.summary.json"
        if summary_path.exists():
            _check_lineage(
                config,
                _read_json(summary_path).get("config_hash"),
                "task dataset build",
                allow_hash_mismatch,
            )

    if protocol in ("impute", "zeroshot", "icl", "predict-as-impute", "cot"):
        base = _load_base(config, checkpoint, allow_hash_mismatch)
    if protocol == "impute":
        report = _eval_impute(config, base, tok, cot=cot)
    elif protocol == "cot":
        report = _eval_impute(config, base, tok, cot=True)
    elif protocol == "zeroshot":
        report = _eval_zeroshot(config, base, tok)
    elif protocol == "icl":
        report = _eval_icl(config, base, tok)
    elif protocol == "predict-as-impute":
        report = _eval_predict_as_impute(config, base, tok, cot=cot)
    elif protocol == "cls":
        report = _eval_cls(config, tok, allow_hash_mismatch)
    elif protocol == "reg":
        report = _eval_reg(config, tok, allow_hash_mismatch)
    else:
        report = _eval_fewshot(config, tok, allow_hash_mismatch, checkpoint)

    report.header["protocol"] = protocol
    report.header["config_hash"] = config.config_hash()
    reports_dir = config.out_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{protocol}.cot" if cot and protocol != "cot" else protocol
    (reports_dir / f"{stem}.json").write_text(report.to_json() + "\n", "utf-8")
    (reports_dir / f"{stem}.txt").write_text(report.to_text() + "\n", "utf-8")
    report.to_csv(reports_dir / f"{stem}.csv")
    print(report.to_text())
    return report


# --------------------------------------------------------------------------
# argument parsing


def _add_config_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="path to the run-config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")


def _load_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if getattr(args, "context_k", None) is not None:
        config = dataclasses.replace(
            config, context=dataclasses.replace(config.context, k=args.context_k)
        )
    if getattr(args, "token_budget", None) is not None:
        config = dataclasses.replace(
            config, context=dataclasses.replace(config.context, token_budget=args.token_budget)
        )
    if getattr(args, "rope_base", None) is not None:
        config = dataclasses.replace(
            config, model=dataclasses.replace(config.model, rope_base=args.rope_base)
        )
    return config


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="tabforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="canonicalize CSV files into a corpus")
    p_ingest.add_argument("inputs", nargs="+", help="CSV files or directories")
    p_ingest.add_argument("--out", required=True, help="corpus output directory")
    p_ingest.add_argument("--domains", help="JSON file mapping table name to domain tag")

    p_stats = sub.add_parser("stats", help="corpus type/domain statistics")
    _add_config_arg(p_stats)

    p_build = sub.add_parser("build", help="build training/eval datasets")
    p_build.add_argument("which", choices=BUILD_TARGETS)
    _add_config_arg(p_build)

    p_train = sub.add_parser("train", help="two-stage base training")
    _add_config_arg(p_train)
    p_train.add_argument("--no-mtp", action="store_true", help="ablate the masked-cell stage")
    p_train.add_argument("--no-multitask", action="store_true", help="ablate the supervised stage")
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.add_argument("--rope-base", type=float, default=None)

    p_finetune = sub.add_parser("finetune", help="attach heads and fine-tune per dataset")
    _add_config_arg(p_finetune)
    p_finetune.add_argument("--dataset", default=None)
    p_finetune.add_argument("--shots", type=int, default=None)
    p_finetune.add_argument("--allow-hash-mismatch", action="store_true")

    p_eval = sub.add_parser("eval", help="run an evaluation protocol")
    _add_config_arg(p_eval)
    p_eval.add_argument("protocol", choices=EVAL_PROTOCOLS)
    p_eval.add_argument("--cot", action="store_true", help="append the chain-of-thought suffix")
    p_eval.add_argument("--checkpoint", default=None)
    p_eval.add_argument("--allow-hash-mismatch", action="store_true")
    p_eval.add_argument("--context-k", type=int, default=None)
    p_eval.add_argument("--token-budget", type=int, default=None)
    p_eval.add_argument("--rope-base", type=float, default=None)

    args = parser.parse_args(argv)
    try:
        if args.command == "ingest":
            domain_map = None
            if args.domains:
                domain_map = json.loads(Path(args.domains).read_text("utf-8"))
            manifest = cmd_ingest(args.inputs, args.out, domain_map)
            print(
                f"ingested {len(manifest['tables'])} tables"
                + (f", {len(manifest['errors'])} errors" if manifest["errors"] else "")
            )
        elif args.command == "stats":
            cmd_stats(_load_config(args))
        elif args.command == "build":
            summary = cmd_build(_load_config(args), args.which)
            print(json.dumps(summary, sort_keys=True))
        elif args.command == "train":
            path = cmd_train(
                _load_config(args),
                no_mtp=args.no_mtp,
                no_multitask=args.no_multitask,
                resume=args.resume,
            )
            print(f"checkpoint written: {path}")
        elif args.command == "finetune":
            paths = cmd_finetune(
                _load_config(args),
                dataset_id=args.dataset,
                shots=args.shots,
                allow_hash_mismatch=args.allow_hash_mismatch,
            )
            for path in paths:
                print(f"head checkpoint written: {path}")
        elif args.command == "eval":
            cmd_eval(
                _load_config(args),
                args.protocol,
                cot=args.cot,
                checkpoint=args.checkpoint,
                allow_hash_mismatch=args.allow_hash_mismatch,
            )
    except (PipelineError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
