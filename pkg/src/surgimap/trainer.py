"""Joint multitask optimization.

Every epoch draws mixed-task mini-batches uniformly over the pooled clip
list, applies AdamW with decoupled weight decay under a cosine schedule with
linear warmup, evaluates per-task validation metrics, and checkpoints only
when the worst-performing task strictly improves on the previously saved
value.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .corpus import FoldSplit
from .inference import greedy_decode_batch, score_binary_tag_batch
from .metrics import UndefinedMetricError, binary_auroc, exact_match_accuracy
from .taxonomy import TaxonomyRegistry, default_registry
from .tokenizer import Vocabulary, encode_instruction, encode_tags

__all__ = [
    "TrainConfig",
    "CheckpointLedger",
    "TrainerError",
    "DivergenceError",
    "lr_schedule",
    "AdamW",
    "checkpoint_rule",
    "evaluate_epoch",
    "train",
    "make_sequence_batch",
    "suggested_model_config",
]

logger = logging.getLogger(__name__)


class TrainerError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Non-finite loss; carries the epoch and step where training diverged."""

    def __init__(self, epoch: int, step: int):
        super().__init__(f"training diverged at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 128
    lr_base: float = 1e-4
    warmup_epochs: float = 2.0
    warmup_start_factor: float = 0.1
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    # replication factors for imbalanced tasks, e.g. {3: 4}
    task_oversample: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 <= self.warmup_epochs < self.epochs):
            raise TrainerError("warmup_epochs must lie in [0, epochs)")
        if min(self.lr_base, self.batch_size, self.epochs) <= 0:
            raise TrainerError("rates and sizes must be positive")


@dataclass
class CheckpointLedger:
    """Record of the worst-task checkpointing rule across an entire run."""

    best_worst_metric: float | None = None
    history: list[dict] = field(default_factory=list)
    checkpoint_path: str | None = None


def lr_schedule(epoch_fraction: float, config: TrainConfig) -> float:
    """Linear warmup from 0.1 x base, then cosine decay to zero.

    Continuous at the boundary: both pieces equal lr_base at the end of
    warmup.
    """
    e = float(epoch_fraction)
    w = config.warmup_epochs
    if e <= 0:
        return config.warmup_start_factor * config.lr_base
    if e < w:
        frac = e / w
        return config.lr_base * (
            config.warmup_start_factor + (1.0 - config.warmup_start_factor) * frac
        )
    progress = (e - w) / (config.epochs - w)
    progress = min(progress, 1.0)
    return config.lr_base * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """AdamW with decoupled weight decay.

    With a zero gradient, one step shrinks a parameter by exactly
    lr * weight_decay * value.
    """

    def __init__(self, state: M.ModelState, config: TrainConfig):
        self.config = config
        self.m = {k: np.zeros_like(v) for k, v in state.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in state.params.items()}
        self.t = 0

    def step(self, state: M.ModelState, lr: float) -> None:
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name, p in state.params.items():
            g = state.grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
            p -= lr * update + lr * c.weight_decay * p


def checkpoint_rule(per_task_metrics: dict[int, float],
                    ledger: CheckpointLedger,
                    expected_tasks=None) -> bool:
    """Save iff the minimum over task metrics strictly beats the best so far."""
    if expected_tasks is not None:
        missing = set(expected_tasks) - per_task_metrics.keys()
        if missing:
            raise TrainerError(f"missing metric for task {sorted(missing)[0]}")
    if not per_task_metrics:
        raise TrainerError("no task metrics")
    worst = min(per_task_metrics.values())
    if ledger.best_worst_metric is None or worst > ledger.best_worst_metric:
        ledger.best_worst_metric = worst
        return True
    return False


def make_sequence_batch(
    vocab: Vocabulary,
    records,
    embeddings: np.ndarray,
    registry: TaxonomyRegistry | None = None,
    m_slots: int | None = None,
    dtype=np.float32,
) -> M.SequenceBatch:
    """Pack records + their embeddings into a padded teacher-forcing batch."""
    reg = registry or default_registry
    instr_rows, target_rows = [], []
    for rec in records:
        schema = reg.schema_for_task(rec.task_id)
        instr_rows.append(encode_instruction(vocab, schema.instruction_text, m_slots))
        target_rows.append(encode_tags(vocab, rec.tags, reg))
    s = max(len(t) for t in target_rows)
    b = len(records)
    target_ids = np.full((b, s), vocab.pad_id, dtype=np.int64)
    target_out = np.zeros((b, s), dtype=np.int64)
    mask = np.zeros((b, s), dtype=dtype)
    for i, row in enumerate(target_rows):
        target_ids[i, : len(row)] = row
        target_out[i, : len(row)] = [vocab.annotation_local_index[t] for t in row]
        mask[i, : len(row)] = 1.0
    return M.SequenceBatch(
        clip_embeddings=np.asarray(embeddings, dtype=dtype),
        instruction_ids=np.asarray(instr_rows, dtype=np.int64),
        target_ids=target_ids,
        target_out=target_out,
        mask=mask,
    )


def suggested_model_config(
    vocab: Vocabulary,
    registry: TaxonomyRegistry | None = None,
    n_layers: int = 2,
    n_heads: int = 4,
    embed_dim: int = 64,
    n_instruction_slots: int = 8,
    feature_dim: int | None = None,
) -> M.ModelConfig:
    """Model config sized to the registered schemas (S_max = longest
    serialization + 2 safety tokens)."""
    from .tokenizer import max_sequence_length

    reg = registry or default_registry
    longest = max(max_sequence_length(s) for s in reg.schemas())
    return M.ModelConfig(
        n_layers=n_layers,
        n_heads=n_heads,
        embed_dim=embed_dim,
        n_instruction_slots=n_instruction_slots,
        vocab_size=len(vocab),
        annotation_vocab_size=vocab.n_annotation,
        max_component_len=longest + 2,
        n_tasks=len(reg.task_ids()),
        feature_dim=feature_dim if feature_dim != embed_dim else None,
    )


def _first_binary_tag(schema):
    for tag in schema.tags:
        if len(tag.categories) == 2:
            return tag
    return None


def evaluate_epoch(
    state: M.ModelState,
    validation_records,
    tasks,
    vocab: Vocabulary,
    provider,
    registry: TaxonomyRegistry | None = None,
) -> dict[int, float]:
    """Per-task validation metric: AUROC on the task's binary tag when one
    exists (accuracy fallback for single-class labels), exact-match accuracy
    otherwise."""
    reg = registry or default_registry
    out: dict[int, float] = {}
    for task_id in tasks:
        records = [r for r in validation_records if r.task_id == task_id]
        if not records:
            raise TrainerError(f"validation split empty for task {task_id}")
        ev = np.asarray([provider.embedding(r) for r in records])
        schema = reg.schema_for_task(task_id)
        binary_tag = _first_binary_tag(schema)
        if binary_tag is not None:
            positive = binary_tag.categories[1]
            labels = [int(r.tags.tag_values[binary_tag.name] == positive)
                      for r in records]
            scores = score_binary_tag_batch(
                state, vocab, ev, task_id, binary_tag.name,
                positive_category=positive, registry=reg,
            )
            try:
                out[task_id] = binary_auroc(scores, labels)
                continue
            except UndefinedMetricError:
                logger.warning(
                    "task %d: single-class validation labels for %s, "
                    "falling back to accuracy", task_id, binary_tag.name,
                )
        decoded = greedy_decode_batch(state, vocab, ev, task_id,
                                      constrain=False, registry=reg)
        out[task_id] = exact_match_accuracy(
            [d.annotation for d in decoded], [r.tags for r in records]
        )
    return out


def train(
    state: M.ModelState,
    fold: FoldSplit,
    tasks,
    config: TrainConfig,
    provider,
    vocab: Vocabulary,
    registry: TaxonomyRegistry | None = None,
    checkpoint_path=None,
    log_path=None,
    evaluate: bool = True,
) -> tuple[CheckpointLedger, M.ModelState]:
    """Run the full optimization loop on one fold.

    Deterministic given the config seed.  Raises :class:`DivergenceError`
    on a non-finite loss.
    """
    reg = registry or default_registry
    tasks = tuple(tasks)
    pool = [r for r in fold.train if r.task_id in tasks]
    if not pool:
        raise TrainerError("train split is empty for the requested tasks")
    for task_id, factor in config.task_oversample.items():
        extra = [r for r in pool if r.task_id == task_id]
        pool.extend(extra * (int(factor) - 1))

    features = np.asarray([provider.embedding(r) for r in pool])
    rng = np.random.default_rng(config.seed)
    optimizer = AdamW(state, config)
    ledger = CheckpointLedger()
    steps_per_epoch = math.ceil(len(pool) / config.batch_size)
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None

    try:
        for epoch in range(config.epochs):
            order = rng.permutation(len(pool))
            epoch_loss = 0.0
            epoch_tokens = 0
            for step in range(steps_per_epoch):
                idx = order[step * config.batch_size : (step + 1) * config.batch_size]
                batch = make_sequence_batch(
                    vocab, [pool[i] for i in idx], features[idx],
                    registry=reg, m_slots=state.config.n_instruction_slots,
                    dtype=state.dtype,
                )
                logits, cache = M.forward(state, batch)
                loss_value = M.loss(logits, batch.target_out, batch.mask)
                if not math.isfinite(loss_value):
                    raise DivergenceError(epoch, step)
                state.zero_grads()
                M.backward(state, cache, M.loss_grad(logits, batch.target_out,
                                                     batch.mask))
                lr = lr_schedule(epoch + step / steps_per_epoch, config)
                optimizer.step(state, lr)
                epoch_loss += loss_value
                epoch_tokens += int(batch.mask.sum())

            saved = False
            per_task: dict[int, float] = {}
            if evaluate:
                per_task = evaluate_epoch(
                    state, fold.validation, tasks, vocab, provider, reg
                )
                saved = checkpoint_rule(per_task, ledger, expected_tasks=tasks)
                if saved and checkpoint_path is not None:
                    M.save_checkpoint(state, checkpoint_path)
                    ledger.checkpoint_path = str(checkpoint_path)
            entry = {
                "epoch": epoch,
                "lr": lr_schedule(epoch + 1.0, config),
                "loss_sum": epoch_loss,
                "loss_per_token": epoch_loss / max(epoch_tokens, 1),
                "per_task_metrics": {str(k): v for k, v in per_task.items()},
                "saved": saved,
            }
            ledger.history.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    return ledger, state


def train_config_from_dict(data: dict) -> TrainConfig:
    """Build a TrainConfig from parsed key=value or JSON config data."""
    known = {f for f in TrainConfig.__dataclass_fields__}
    unknown = data.keys() - known
    if unknown:
        raise TrainerError(f"unknown config key {sorted(unknown)[0]!r}")
    return TrainConfig(**data)
