"""Multi-stage mapping of full-length videos.

Stage one maps coarse 30-second windows with the macro-activity instruction;
the requested step filter then selects and coalesces matching windows, and
stage two maps fine 2-5 second windows only inside the selected spans (the
quality gate).  Video features arrive as a per-second feature matrix; window
embeddings are overlap-weighted means of the covered rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .inference import greedy_decode_batch
from .taxonomy import TaxonomyRegistry, default_registry

__all__ = [
    "TimelineSegment",
    "MappingRequest",
    "WorkflowError",
    "coarse_windows",
    "fine_windows",
    "window_embedding",
    "coarse_pass",
    "select_segments",
    "fine_pass",
    "assemble_timeline",
    "summarize",
    "run_mapping",
    "timeline_to_json",
    "validate_timeline",
]

COARSE_WINDOW_S = 30.0
MIN_FINE_WINDOW_S = 2.0
MAX_FINE_WINDOW_S = 5.0
MACRO_TASK_ID = 1
_EPS = 1e-9


class WorkflowError(ValueError):
    pass


@dataclass
class TimelineSegment:
    span: tuple[float, float]
    task_id: int
    tags: dict[str, str]
    confidence: dict[str, float]
    stage: str  # coarse | fine
    selected: bool = False

    def to_json_obj(self) -> dict:
        return {
            "start_s": self.span[0],
            "end_s": self.span[1],
            "stage": self.stage,
            "task_id": self.task_id,
            "tags": dict(self.tags),
            "confidence": {k: round(v, 6) for k, v in self.confidence.items()},
            "selected": self.selected,
        }


@dataclass
class MappingRequest:
    video_id: str
    task_id: int
    step_filter: str | None = None
    fine_window_s: float = 4.0

    def __post_init__(self):
        if not (MIN_FINE_WINDOW_S <= self.fine_window_s <= MAX_FINE_WINDOW_S):
            raise WorkflowError(
                f"fine window {self.fine_window_s} outside "
                f"[{MIN_FINE_WINDOW_S}, {MAX_FINE_WINDOW_S}]"
            )


def coarse_windows(duration_s: float) -> list[tuple[float, float]]:
    """30-second tiling; a trailing remainder of at least 1 s is kept, and a
    video shorter than one window maps as a single full-duration window."""
    if duration_s <= 0:
        raise WorkflowError(f"nonpositive duration {duration_s}")
    if duration_s < COARSE_WINDOW_S:
        return [(0.0, float(duration_s))]
    windows = []
    t = 0.0
    while t + COARSE_WINDOW_S <= duration_s + _EPS:
        windows.append((t, t + COARSE_WINDOW_S))
        t += COARSE_WINDOW_S
    if duration_s - t >= 1.0:
        windows.append((t, float(duration_s)))
    return windows


def fine_windows(span: tuple[float, float], w: float) -> list[tuple[float, float]]:
    """Tile a span with w-second windows from its start; a trailing fragment
    shorter than 2 s is dropped."""
    start, end = span
    windows = []
    t = start
    while t + w <= end + _EPS:
        windows.append((t, t + w))
        t += w
    if end - t >= MIN_FINE_WINDOW_S:
        windows.append((t, end))
    return windows


def window_embedding(rows: np.ndarray, span: tuple[float, float]) -> np.ndarray:
    """Overlap-weighted mean of the per-second rows covering [start, end)."""
    start, end = span
    lo = max(int(np.floor(start)), 0)
    hi = min(int(np.ceil(end)), rows.shape[0])
    if hi <= lo:
        raise WorkflowError(f"span {span} outside the feature matrix")
    weights = np.array([
        max(0.0, min(end, k + 1.0) - max(start, float(k))) for k in range(lo, hi)
    ])
    total = weights.sum()
    if total <= 0:
        raise WorkflowError(f"span {span} covers no feature rows")
    return (weights[:, None] * rows[lo:hi]).sum(axis=0) / total


def coarse_pass(rows: np.ndarray, state, vocab,
                registry: TaxonomyRegistry | None = None) -> list[TimelineSegment]:
    """Map every coarse window with the macro-activity instruction."""
    reg = registry or default_registry
    windows = coarse_windows(rows.shape[0])
    embeddings = np.asarray([window_embedding(rows, w) for w in windows])
    decoded = greedy_decode_batch(
        state, vocab, embeddings, MACRO_TASK_ID, constrain=True,
        registry=reg, spans=windows,
    )
    return [
        TimelineSegment(
            span=w, task_id=MACRO_TASK_ID, tags=dict(d.annotation.tag_values),
            confidence=d.confidences, stage="coarse",
        )
        for w, d in zip(windows, decoded)
    ]


def select_segments(coarse: list[TimelineSegment],
                    step_filter: str | None) -> list[tuple[float, float]]:
    """Spans of coarse windows whose Step matches the filter, with adjacent
    kept windows coalesced into maximal spans.  No filter selects everything.
    Marks the kept segments as selected."""
    selected: list[tuple[float, float]] = []
    wanted = step_filter.lower() if step_filter else None
    for seg in sorted(coarse, key=lambda s: s.span[0]):
        if wanted is not None and seg.tags.get("Step") != wanted:
            seg.selected = False
            continue
        seg.selected = True
        if selected and abs(selected[-1][1] - seg.span[0]) <= _EPS:
            selected[-1] = (selected[-1][0], seg.span[1])
        else:
            selected.append(seg.span)
    return selected


def fine_pass(selected, task_id: int, w: float, rows: np.ndarray, state, vocab,
              registry: TaxonomyRegistry | None = None,
              chunk_size: int = 512) -> list[TimelineSegment]:
    """Map fine windows inside the selected spans with the requested task."""
    reg = registry or default_registry
    windows = [fw for span in selected for fw in fine_windows(span, w)]
    if not windows:
        return []
    segments: list[TimelineSegment] = []
    for start in range(0, len(windows), chunk_size):
        part = windows[start : start + chunk_size]
        embeddings = np.asarray([window_embedding(rows, win) for win in part])
        decoded = greedy_decode_batch(
            state, vocab, embeddings, task_id, constrain=True,
            registry=reg, spans=part,
        )
        segments.extend(
            TimelineSegment(
                span=win, task_id=task_id, tags=dict(d.annotation.tag_values),
                confidence=d.confidences, stage="fine",
            )
            for win, d in zip(part, decoded)
        )
    return segments


def _coalesce(spans) -> list[tuple[float, float]]:
    merged: list[tuple[float, float]] = []
    for span in sorted(spans):
        if merged and span[0] - merged[-1][1] <= _EPS:
            merged[-1] = (merged[-1][0], max(merged[-1][1], span[1]))
        else:
            merged.append(span)
    return merged


def assemble_timeline(coarse: list[TimelineSegment], fine: list[TimelineSegment],
                      selected=None) -> list[TimelineSegment]:
    """Sorted timeline with the containment invariant enforced: every fine
    segment must lie inside a selected span."""
    if selected is None:
        selected = _coalesce(seg.span for seg in coarse if seg.selected)
    for seg in fine:
        if not any(span[0] - _EPS <= seg.span[0] and seg.span[1] <= span[1] + _EPS
                   for span in selected):
            raise WorkflowError(
                f"fine segment {seg.span} lies outside every selected span"
            )
    return sorted(coarse + fine, key=lambda s: (s.span[0], s.stage != "coarse",
                                                s.span[1]))


def summarize(segments: list[TimelineSegment]) -> dict:
    """Per-task category counts and total durations; for a Proficiency tag,
    the fraction of fine segments tagged high."""
    summary: dict = {"tasks": {}}
    for seg in segments:
        task = summary["tasks"].setdefault(str(seg.task_id), {
            "segment_count": 0, "tags": {},
        })
        task["segment_count"] += 1
        duration = seg.span[1] - seg.span[0]
        for tag, category in seg.tags.items():
            entry = task["tags"].setdefault(tag, {})
            cat = entry.setdefault(category, {"count": 0, "duration_s": 0.0})
            cat["count"] += 1
            cat["duration_s"] = round(cat["duration_s"] + duration, 6)
    fine_prof = [s for s in segments
                 if s.stage == "fine" and "Proficiency" in s.tags]
    if fine_prof:
        high = sum(1 for s in fine_prof if s.tags["Proficiency"] == "high")
        summary["high_proficiency_fraction"] = high / len(fine_prof)
        summary["proficiency_segments"] = len(fine_prof)
    return summary


def run_mapping(rows: np.ndarray, request: MappingRequest, state, vocab,
                registry: TaxonomyRegistry | None = None) -> dict:
    """Full multi-stage pipeline for one video; returns the timeline object."""
    reg = registry or default_registry
    coarse = coarse_pass(rows, state, vocab, reg)
    selected = select_segments(coarse, request.step_filter)
    fine = fine_pass(selected, request.task_id, request.fine_window_s,
                     rows, state, vocab, reg)
    timeline = assemble_timeline(coarse, fine, selected)
    return {
        "video_id": request.video_id,
        "task_id": request.task_id,
        "step_filter": request.step_filter,
        "segments": [seg.to_json_obj() for seg in timeline],
        "summary": summarize(timeline),
    }


def timeline_to_json(timeline: dict) -> bytes:
    """Canonical timeline serialization (byte-stable for equal content)."""
    return (json.dumps(timeline, sort_keys=True, separators=(",", ":")) + "\n").encode()


def validate_timeline(timeline: dict) -> list[str]:
    """Read-back check of the containment invariant on a serialized timeline.

    Adjacent selected coarse windows coalesce (fine tiling runs over the
    coalesced spans, so a fine window may straddle a window boundary).
    """
    violations = []
    selected = _coalesce(
        (s["start_s"], s["end_s"])
        for s in timeline.get("segments", [])
        if s["stage"] == "coarse" and s.get("selected")
    )
    for s in timeline.get("segments", []):
        if s["stage"] != "fine":
            continue
        inside = any(a - _EPS <= s["start_s"] and s["end_s"] <= b + _EPS
                     for a, b in selected)
        if not inside:
            violations.append(
                f"fine segment [{s['start_s']}, {s['end_s']}) outside selection"
            )
    return violations
