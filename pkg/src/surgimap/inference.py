"""Instruction-controlled generation.

Greedy decoding selects the argmax over the annotation vocabulary at every
step and feeds the chosen token's embedding back in.  With constrained
decoding the argmax is restricted to tokens admissible under the task
schema's serialization grammar, so the output always parses.  Ties break
toward the lowest token id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .model import ModelState, decode_logits, _forward_core
from .taxonomy import (
    ComponentAnnotation,
    TaskSchema,
    TaxonomyRegistry,
    default_registry,
)
from .tokenizer import (
    EOS_TOKEN,
    ParseFailure,
    Vocabulary,
    decode_tags,
    encode_instruction,
)

__all__ = [
    "Decoded",
    "MapResult",
    "InferenceError",
    "GrammarCursor",
    "greedy_decode",
    "greedy_decode_batch",
    "score_binary_tag",
    "score_binary_tag_batch",
    "map_clips",
    "write_mapping_jsonl",
]


class InferenceError(ValueError):
    """Invalid decoding request."""


@dataclass
class Decoded:
    """Result of one greedy rollout.

    ``confidences`` maps tag name to the geometric mean of the chosen
    category's word-token probabilities (length-invariant across categories).
    """

    token_ids: list[int]
    annotation: ComponentAnnotation | None
    failure: ParseFailure | None
    confidences: dict[str, float]
    step_probs: list[np.ndarray] | None = None


@dataclass
class MapResult:
    clip_index: int
    annotation: ComponentAnnotation | None
    confidences: dict[str, float]
    failure: ParseFailure | None = None
    error: str | None = None


class GrammarCursor:
    """Incremental admissible-token tracker for one schema serialization.

    States walk marker -> category words -> next marker -> ... -> <eos>;
    at any point the admissible set is the union of consistent category
    extensions plus, when the words so far complete a category, the next
    tag's marker (or <eos> after the last tag).
    """

    def __init__(self, schema: TaskSchema, vocab: Vocabulary):
        self.schema = schema
        self.vocab = vocab
        self.tag_idx = -1
        self.words: list[str] = []
        self.finished = False

    def admissible_ids(self) -> list[int]:
        if self.finished:
            return [self.vocab.eos_id]
        if self.tag_idx < 0:
            return [self.vocab.id_of(self.schema.tags[0].marker)]
        tag = self.schema.tags[self.tag_idx]
        k = len(self.words)
        out: set[int] = set()
        complete = False
        for cat in tag.categories:
            cw = cat.split()
            if len(cw) >= k and cw[:k] == self.words:
                if len(cw) > k:
                    out.add(self.vocab.id_of(cw[k]))
                elif k > 0:
                    complete = True
        if complete:
            if self.tag_idx + 1 < len(self.schema.tags):
                out.add(self.vocab.id_of(self.schema.tags[self.tag_idx + 1].marker))
            else:
                out.add(self.vocab.eos_id)
        return sorted(out)

    def advance(self, token_id: int) -> None:
        token = self.vocab.tokens[token_id]
        if token == EOS_TOKEN:
            self.finished = True
        elif token.startswith("<"):
            self.tag_idx += 1
            self.words = []
        else:
            self.words.append(token)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def greedy_decode_batch(
    state: ModelState,
    vocab: Vocabulary,
    clip_embeddings: np.ndarray,
    task_id: int,
    constrain: bool = True,
    registry: TaxonomyRegistry | None = None,
    spans=None,
    keep_step_probs: bool = False,
) -> list[Decoded]:
    """Greedy decode a batch of clip embeddings under one task instruction."""
    reg = registry or default_registry
    schema = reg.schema_for_task(task_id)
    cfg = state.config
    ev = np.atleast_2d(np.asarray(clip_embeddings, dtype=float))
    b = ev.shape[0]
    instr = encode_instruction(vocab, schema.instruction_text, cfg.n_instruction_slots)
    instr_ids = np.tile(np.asarray(instr, dtype=np.int64), (b, 1))

    annotation_ids = np.asarray(vocab.annotation_id_list, dtype=np.int64)
    cursors = [GrammarCursor(schema, vocab) for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    generated = np.zeros((b, 0), dtype=np.int64)
    chosen_probs: list[list[float]] = [[] for _ in range(b)]
    all_step_probs: list[list[np.ndarray]] = [[] for _ in range(b)]

    for _ in range(cfg.max_component_len):
        logits = decode_logits(state, ev, instr_ids, generated)
        probs = _softmax_rows(logits)
        if constrain:
            masked = np.full_like(logits, -np.inf)
            for r in range(b):
                if done[r]:
                    masked[r, vocab.annotation_local_index[vocab.eos_id]] = 0.0
                    continue
                for gid in cursors[r].admissible_ids():
                    li = vocab.annotation_local_index[gid]
                    masked[r, li] = logits[r, li]
            pick_local = np.argmax(masked, axis=1)
        else:
            pick_local = np.argmax(logits, axis=1)
        pick_global = annotation_ids[pick_local]
        for r in range(b):
            if done[r]:
                continue
            chosen_probs[r].append(float(probs[r, pick_local[r]]))
            if keep_step_probs:
                all_step_probs[r].append(probs[r].copy())
            cursors[r].advance(int(pick_global[r]))
            if pick_global[r] == vocab.eos_id:
                done[r] = True
        generated = np.concatenate([generated, pick_global[:, None]], axis=1)
        if done.all():
            break

    results = []
    for r in range(b):
        ids = []
        for tid in generated[r]:
            ids.append(int(tid))
            if tid == vocab.eos_id:
                break
        span = spans[r] if spans is not None else (0.0, 1.0)
        parsed = decode_tags(vocab, ids, task_id, reg, span=span)
        if isinstance(parsed, ParseFailure):
            annotation, failure, confidences = None, parsed, {}
        else:
            annotation, failure = parsed, None
            confidences = _per_tag_confidence(vocab, schema, ids, chosen_probs[r])
        results.append(Decoded(
            token_ids=ids,
            annotation=annotation,
            failure=failure,
            confidences=confidences,
            step_probs=all_step_probs[r] if keep_step_probs else None,
        ))
    return results


def _per_tag_confidence(vocab, schema, ids, probs) -> dict[str, float]:
    """Geometric mean of word-token probabilities per tag (markers excluded)."""
    confidences: dict[str, float] = {}
    tag_idx = -1
    word_logps: list[float] = []

    def flush():
        if tag_idx >= 0:
            gm = float(np.exp(np.mean(word_logps))) if word_logps else 0.0
            confidences[schema.tags[tag_idx].name] = gm

    for tid, p in zip(ids, probs):
        token = vocab.tokens[tid]
        if token == EOS_TOKEN or token.startswith("<"):
            flush()
            tag_idx += 1
            word_logps = []
        else:
            word_logps.append(float(np.log(max(p, 1e-300))))
    return confidences


def greedy_decode(state, vocab, clip_embedding, task_id, constrain=True,
                  registry=None, span=None, keep_step_probs=False) -> Decoded:
    """Single-clip convenience wrapper around :func:`greedy_decode_batch`."""
    return greedy_decode_batch(
        state, vocab, np.atleast_2d(clip_embedding), task_id,
        constrain=constrain, registry=registry,
        spans=[span] if span is not None else None,
        keep_step_probs=keep_step_probs,
    )[0]


def score_binary_tag_batch(
    state: ModelState,
    vocab: Vocabulary,
    clip_embeddings: np.ndarray,
    task_id: int,
    tag_name: str,
    positive_category: str | None = None,
    registry: TaxonomyRegistry | None = None,
) -> np.ndarray:
    """Probability of the positive category of a binary tag, per clip.

    Decodes (constrained) up to the tag's marker, then teacher-forces each
    of the two categories; the category probability is the product of its
    word-token probabilities, renormalized over the two options.
    """
    reg = registry or default_registry
    schema = reg.schema_for_task(task_id)
    tag = schema.tag(tag_name)
    if len(tag.categories) != 2:
        raise InferenceError(
            f"tag {tag_name!r} has {len(tag.categories)} categories, need exactly 2"
        )
    positive = positive_category or tag.categories[1]
    if positive not in tag.categories:
        raise InferenceError(f"{positive!r} is not a category of {tag_name!r}")
    negative = tag.categories[1] if positive == tag.categories[0] else tag.categories[0]

    cfg = state.config
    ev = np.atleast_2d(np.asarray(clip_embeddings, dtype=float))
    b = ev.shape[0]
    instr = encode_instruction(vocab, schema.instruction_text, cfg.n_instruction_slots)
    instr_ids = np.tile(np.asarray(instr, dtype=np.int64), (b, 1))
    marker_id = vocab.id_of(tag.marker)
    annotation_ids = np.asarray(vocab.annotation_id_list, dtype=np.int64)

    cursors = [GrammarCursor(schema, vocab) for _ in range(b)]
    reached = np.zeros(b, dtype=bool)
    rows: list[list[int]] = [[] for _ in range(b)]
    generated = np.zeros((b, 0), dtype=np.int64)
    for _ in range(cfg.max_component_len):
        logits = decode_logits(state, ev, instr_ids, generated)
        masked = np.full_like(logits, -np.inf)
        for r in range(b):
            if reached[r]:
                masked[r, vocab.annotation_local_index[vocab.eos_id]] = 0.0
                continue
            for gid in cursors[r].admissible_ids():
                li = vocab.annotation_local_index[gid]
                masked[r, li] = logits[r, li]
        pick_local = np.argmax(masked, axis=1)
        pick_global = annotation_ids[pick_local]
        for r in range(b):
            if reached[r]:
                continue
            rows[r].append(int(pick_global[r]))
            cursors[r].advance(int(pick_global[r]))
            if pick_global[r] == marker_id:
                reached[r] = True
        generated = np.concatenate([generated, pick_global[:, None]], axis=1)
        if reached.all():
            break
    if not reached.all():
        raise InferenceError(f"constrained decode never reached {tag.marker}")

    def branch_prob(category: str) -> np.ndarray:
        words = category.split()
        word_ids = [vocab.id_of(w) for w in words]
        lengths = [len(rows[r]) for r in range(b)]
        width = max(lengths) + len(word_ids)
        comp = np.full((b, width), vocab.pad_id, dtype=np.int64)
        for r in range(b):
            seq = rows[r] + word_ids
            comp[r, : len(seq)] = seq
        h_final, _ = _forward_core(state, ev, instr_ids, comp)
        m = cfg.n_instruction_slots
        logp = np.zeros(b)
        for j, wid in enumerate(word_ids):
            local = vocab.annotation_local_index[wid]
            positions = np.array([m + lengths[r] + j for r in range(b)])
            step_logits = (h_final[np.arange(b), positions, :]
                           @ state.params["out_w"] + state.params["out_b"])
            z = step_logits - step_logits.max(axis=1, keepdims=True)
            lse = np.log(np.exp(z).sum(axis=1))
            logp += z[:, local] - lse
        return np.exp(logp)

    p_pos = branch_prob(positive)
    p_neg = branch_prob(negative)
    return p_pos / (p_pos + p_neg)


def score_binary_tag(state, vocab, clip_embedding, task_id, tag_name,
                     positive_category=None, registry=None) -> float:
    return float(score_binary_tag_batch(
        state, vocab, np.atleast_2d(clip_embedding), task_id, tag_name,
        positive_category=positive_category, registry=registry,
    )[0])


def map_clips(
    state: ModelState,
    vocab: Vocabulary,
    provider,
    clips,
    task_id: int,
    constrain: bool = True,
    registry: TaxonomyRegistry | None = None,
    chunk_size: int = 256,
) -> list[MapResult]:
    """Greedy-decode every clip under the task's instruction, preserving
    input order; provider failures become per-clip error entries."""
    clips = list(clips)
    results: list[MapResult | None] = [None] * len(clips)
    embeddings, spans, indices = [], [], []
    for i, clip in enumerate(clips):
        try:
            embeddings.append(provider.embedding(clip))
        except Exception as exc:  # per-clip failure keeps the batch going
            results[i] = MapResult(clip_index=i, annotation=None,
                                   confidences={}, error=str(exc))
            continue
        spans.append(clip.span)
        indices.append(i)
    for start in range(0, len(indices), chunk_size):
        part = slice(start, start + chunk_size)
        decoded = greedy_decode_batch(
            state, vocab, np.asarray(embeddings[part]), task_id,
            constrain=constrain, registry=registry, spans=spans[part],
        )
        for local, dec in zip(indices[part], decoded):
            results[local] = MapResult(
                clip_index=local,
                annotation=dec.annotation,
                confidences=dec.confidences,
                failure=dec.failure,
            )
    return [r for r in results if r is not None]


def write_mapping_jsonl(results: list[MapResult], clips, path) -> None:
    """Persist batch mapping output, one JSON object per clip."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for res in results:
            clip = clips[res.clip_index]
            obj = {
                "video_id": clip.video_id,
                "start_s": clip.span[0],
                "end_s": clip.span[1],
                "task_id": clip.task_id,
                "tags": dict(res.annotation.tag_values) if res.annotation else None,
                "confidence": res.confidences,
            }
            if res.error:
                obj["error"] = res.error
            fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")
