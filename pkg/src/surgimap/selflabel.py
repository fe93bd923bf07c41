"""Atlas expansion by self-labelling.

Four steps: (1) a readiness gate requiring 80% average accuracy across
tasks, (2) splitting unlabeled video into 1-second segments and annotating
them, (3) per-category confidence calibration, low-confidence filtering and
temporal merging of identical consecutive annotations, (4) growing the
atlas with the retained AI annotations without touching existing manifests.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import ClipRecord, save_manifest
from .taxonomy import (
    ComponentAnnotation,
    TaxonomyRegistry,
    default_registry,
    validate_annotation,
)

__all__ = [
    "ThresholdTable",
    "SelfLabelError",
    "readiness_gate",
    "segment_video",
    "calibrate_thresholds",
    "filter_low_confidence",
    "merge_annotations",
    "expand_atlas",
    "annotate_unlabeled_video",
]

logger = logging.getLogger(__name__)

READINESS_THRESHOLD = 0.80
DEFAULT_CONFIDENCE_THRESHOLD = 0.90
PRECISION_TARGET = 0.80


class SelfLabelError(ValueError):
    pass


@dataclass
class ThresholdTable:
    """Per-category confidence thresholds with their calibration statistics."""

    thresholds: dict[str, float]
    provenance: dict[str, dict] = field(default_factory=dict)
    default: float = DEFAULT_CONFIDENCE_THRESHOLD

    def threshold_for(self, category: str) -> float:
        return self.thresholds.get(category, self.default)

    def to_json_obj(self) -> dict:
        return dict(sorted(self.thresholds.items()))


def readiness_gate(per_task_accuracies: dict, expected_tasks=None) -> bool:
    """Pass iff the arithmetic mean accuracy is at least 0.80 (inclusive)."""
    if expected_tasks is not None:
        missing = set(expected_tasks) - per_task_accuracies.keys()
        if missing:
            raise SelfLabelError(f"missing accuracy for task {sorted(missing)[0]}")
    if not per_task_accuracies:
        raise SelfLabelError("no task accuracies")
    return float(np.mean(list(per_task_accuracies.values()))) >= READINESS_THRESHOLD


def segment_video(duration_s: float) -> list[tuple[float, float]]:
    """Non-overlapping 1-second spans [k, k+1); a trailing fraction under one
    second is dropped."""
    if duration_s <= 0:
        raise SelfLabelError(f"nonpositive duration {duration_s}")
    return [(float(k), float(k + 1)) for k in range(int(duration_s))]


def calibrate_thresholds(
    validation_predictions,
    categories=None,
    target_precision: float = PRECISION_TARGET,
    default: float = DEFAULT_CONFIDENCE_THRESHOLD,
) -> ThresholdTable:
    """Per-category sweep over tau in {0.50, 0.51, ..., 0.99}: pick the
    smallest threshold whose retained predictions reach the target precision,
    0.99 when unattainable, and the default for categories with no data.

    ``validation_predictions`` is an iterable of (category, confidence,
    correct) triples.
    """
    by_category: dict[str, list[tuple[float, bool]]] = {}
    for category, confidence, correct in validation_predictions:
        by_category.setdefault(category, []).append((float(confidence), bool(correct)))

    grid = np.round(np.arange(0.50, 1.00, 0.01), 2)
    thresholds: dict[str, float] = {}
    provenance: dict[str, dict] = {}
    for category, preds in by_category.items():
        confs = np.array([c for c, _ in preds])
        corr = np.array([ok for _, ok in preds])
        chosen = 0.99
        for tau in grid:
            kept = confs >= tau
            if not kept.any():
                continue
            precision = corr[kept].mean()
            if precision >= target_precision:
                chosen = float(tau)
                break
        thresholds[category] = chosen
        provenance[category] = {"n": len(preds), "threshold": chosen}
    if categories is not None:
        for category in categories:
            if category not in thresholds:
                thresholds[category] = default
                provenance[category] = {"n": 0, "threshold": default}
    return ThresholdTable(thresholds=thresholds, provenance=provenance,
                          default=default)


def _gating_tag(annotation: ComponentAnnotation, registry) -> str:
    # filtering keys off the first tag of the task schema (the action tag
    # for micro-activity)
    schema = registry.schema_for_task(annotation.task_id)
    return schema.tags[0].name


def filter_low_confidence(
    annotations,
    table: ThresholdTable,
    registry: TaxonomyRegistry | None = None,
) -> list[ComponentAnnotation]:
    """Keep annotations whose gating-tag confidence meets that category's
    threshold; order is preserved."""
    reg = registry or default_registry
    kept = []
    for ann in annotations:
        tag = _gating_tag(ann, reg)
        if ann.confidence is None or tag not in ann.confidence:
            raise SelfLabelError(f"annotation missing confidence for tag {tag}")
        category = ann.tag_values[tag]
        if ann.confidence[tag] >= table.threshold_for(category):
            kept.append(ann)
    return kept


def merge_annotations(
    annotations,
    gap_tolerance: float = 1.0,
) -> list[ComponentAnnotation]:
    """Merge consecutive annotations with identical full tag tuples when the
    gap between their spans is at most the tolerance.

    Input must be sorted by span start.  Merged confidence is the
    duration-weighted mean over the original pieces; merging is idempotent.
    """
    annotations = list(annotations)
    for a, b in zip(annotations, annotations[1:]):
        if b.span[0] < a.span[0]:
            raise SelfLabelError("annotations must be sorted by span start")

    groups: dict[tuple, list[ComponentAnnotation]] = {}
    for ann in annotations:
        key = (ann.task_id, tuple(sorted(ann.tag_values.items())))
        groups.setdefault(key, []).append(ann)

    merged: list[ComponentAnnotation] = []
    for group in groups.values():
        current = group[0]
        # accumulated (sum of confidence*duration, sum of duration) per tag
        acc = _conf_acc(current)
        for ann in group[1:]:
            gap = ann.span[0] - current.span[1]
            if gap <= gap_tolerance:
                current = ComponentAnnotation(
                    task_id=current.task_id,
                    tag_values=dict(current.tag_values),
                    span=(current.span[0], max(current.span[1], ann.span[1])),
                    source=current.source,
                )
                _conf_add(acc, ann)
            else:
                merged.append(_finish(current, acc))
                current = ann
                acc = _conf_acc(current)
        merged.append(_finish(current, acc))
    merged.sort(key=lambda a: (a.span[0], a.span[1], a.task_id))
    return merged


def _conf_acc(ann):
    d = ann.span[1] - ann.span[0]
    if ann.confidence is None:
        return None
    return {k: [v * d, d] for k, v in ann.confidence.items()}


def _conf_add(acc, ann):
    if acc is None or ann.confidence is None:
        return
    d = ann.span[1] - ann.span[0]
    for k in list(acc):
        if k in ann.confidence:
            acc[k][0] += ann.confidence[k] * d
            acc[k][1] += d
        else:
            del acc[k]


def _finish(ann, acc):
    confidence = None
    if acc:
        confidence = {k: num / den for k, (num, den) in acc.items()}
    return ComponentAnnotation(
        task_id=ann.task_id,
        tag_values=dict(ann.tag_values),
        span=ann.span,
        source=ann.source,
        confidence=confidence,
    )


def expand_atlas(
    base_records: list[ClipRecord],
    new_records: list[ClipRecord],
    out_path,
    registry: TaxonomyRegistry | None = None,
) -> dict:
    """Grow the atlas: validate the new AI records, drop duplicates of base
    (video, span, task) triples, and write base + retained records to a new
    manifest file.  Base manifests are never touched.
    """
    reg = registry or default_registry
    seen = {(r.video_id, r.span, r.task_id) for r in base_records}
    retained: list[ClipRecord] = []
    skipped = 0
    for rec in new_records:
        violations = validate_annotation(rec.tags, reg)
        if violations:
            raise SelfLabelError(f"invalid new annotation: {violations[0]}")
        key = (rec.video_id, rec.span, rec.task_id)
        if key in seen:
            skipped += 1
            continue
        seen.add(key)
        rec.source = "ai"
        rec.tags.source = "ai"
        retained.append(rec)
    if skipped:
        logger.info("expand_atlas: skipped %d duplicate records", skipped)
    grown = list(base_records) + retained
    save_manifest(grown, out_path)

    per_task: dict[int, dict[str, int]] = {}
    for rec in grown:
        per_task.setdefault(rec.task_id, {"before": 0, "after": 0})["after"] += 1
    for rec in base_records:
        per_task[rec.task_id]["before"] += 1
    before, after = len(base_records), len(grown)
    return {
        "before": before,
        "after": after,
        "added": len(retained),
        "skipped_duplicates": skipped,
        "ratio": after / before if before else float("inf"),
        "per_task": {str(k): v for k, v in sorted(per_task.items())},
    }


def annotate_unlabeled_video(
    state,
    vocab,
    per_second_rows: np.ndarray,
    task_id: int,
    table: ThresholdTable,
    registry: TaxonomyRegistry | None = None,
    gap_tolerance: float = 1.0,
    chunk_size: int = 512,
) -> list[ComponentAnnotation]:
    """Steps 2-3 for one video: annotate every 1-second segment with
    constrained decoding, filter by the threshold table, merge."""
    from .inference import greedy_decode_batch

    reg = registry or default_registry
    spans = segment_video(per_second_rows.shape[0])
    annotations: list[ComponentAnnotation] = []
    for start in range(0, len(spans), chunk_size):
        part = spans[start : start + chunk_size]
        rows = per_second_rows[start : start + len(part)]
        decoded = greedy_decode_batch(
            state, vocab, rows, task_id, constrain=True, registry=reg, spans=part,
        )
        for dec in decoded:
            ann = dec.annotation
            ann.source = "ai"
            ann.confidence = dec.confidences
            annotations.append(ann)
    filtered = filter_low_confidence(annotations, table, reg)
    return merge_annotations(filtered, gap_tolerance=gap_tolerance)
