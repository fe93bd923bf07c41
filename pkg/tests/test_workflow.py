import json

import numpy as np
import pytest

from surgimap.workflow import (
    MappingRequest,
    TimelineSegment,
    WorkflowError,
    assemble_timeline,
    coarse_pass,
    coarse_windows,
    fine_pass,
    fine_windows,
    run_mapping,
    select_segments,
    summarize,
    timeline_to_json,
    validate_timeline,
    window_embedding,
)


# ----------------------------------------------------------------- windows


def test_coarse_windows_hour_video():
    assert len(coarse_windows(3600.0)) == 120


def test_coarse_windows_trailing_remainder():
    assert coarse_windows(45.0) == [(0.0, 30.0), (30.0, 45.0)]


def test_coarse_windows_short_video():
    assert coarse_windows(10.0) == [(0.0, 10.0)]


def test_coarse_windows_sub_second_remainder_dropped():
    assert coarse_windows(60.5) == [(0.0, 30.0), (30.0, 60.0)]


def test_coarse_windows_nonpositive():
    with pytest.raises(WorkflowError):
        coarse_windows(0.0)


def test_fine_windows_exact_tiling():
    assert len(fine_windows((60.0, 120.0), 4.0)) == 15


def test_fine_windows_trailing_kept_when_big_enough():
    windows = fine_windows((0.0, 30.0), 4.0)
    assert len(windows) == 8
    assert windows[-1] == (28.0, 30.0)


def test_fine_windows_trailing_dropped_when_small():
    windows = fine_windows((0.0, 29.0), 4.0)
    assert len(windows) == 7
    assert windows[-1] == (24.0, 28.0)


def test_mapping_request_window_bounds():
    MappingRequest(video_id="v", task_id=3, fine_window_s=2.0)
    MappingRequest(video_id="v", task_id=3, fine_window_s=5.0)
    with pytest.raises(WorkflowError):
        MappingRequest(video_id="v", task_id=3, fine_window_s=1.5)
    with pytest.raises(WorkflowError):
        MappingRequest(video_id="v", task_id=3, fine_window_s=5.5)


def test_window_embedding_weighted_mean():
    rows = np.stack([np.full(4, float(i)) for i in range(10)])
    # [1.5, 3.5): half of row 1, all of row 2, half of row 3
    emb = window_embedding(rows, (1.5, 3.5))
    assert np.allclose(emb, (0.5 * 1 + 1 * 2 + 0.5 * 3) / 2.0)
    assert np.allclose(window_embedding(rows, (2.0, 3.0)), 2.0)


# --------------------------------------------------------------- selection


def _coarse(labels, step=30.0):
    return [
        TimelineSegment(span=(i * step, (i + 1) * step), task_id=1,
                        tags={"Specialty": "urology", "Procedure": "prostatectomy",
                              "Step": label},
                        confidence={}, stage="coarse")
        for i, label in enumerate(labels)
    ]


def test_select_segments_coalesces():
    coarse = _coarse(["suturing", "dissection", "suturing", "suturing"])
    selected = select_segments(coarse, "suturing")
    assert selected == [(0.0, 30.0), (60.0, 120.0)]
    assert [seg.selected for seg in coarse] == [True, False, True, True]


def test_select_segments_no_match():
    coarse = _coarse(["dissection", "dissection"])
    assert select_segments(coarse, "suturing") == []


def test_select_segments_no_filter_selects_all():
    coarse = _coarse(["suturing", "dissection"])
    assert select_segments(coarse, None) == [(0.0, 60.0)]


# ---------------------------------------------------------------- assembly


def _fine(span, task_id=3):
    return TimelineSegment(span=span, task_id=task_id,
                           tags={"Phase": "driving", "Proficiency": "high"},
                           confidence={}, stage="fine")


def test_assemble_timeline_sorted_and_validated():
    coarse = _coarse(["suturing", "dissection"])
    select_segments(coarse, "suturing")
    fine = [_fine((4.0, 8.0)), _fine((0.0, 4.0))]
    timeline = assemble_timeline(coarse, fine)
    spans = [seg.span for seg in timeline]
    assert spans == [(0.0, 30.0), (0.0, 4.0), (4.0, 8.0), (30.0, 60.0)]


def test_assemble_timeline_containment_violation():
    coarse = _coarse(["suturing", "dissection"])
    select_segments(coarse, "suturing")
    stray = _fine((40.0, 44.0))  # inside the unselected dissection window
    with pytest.raises(WorkflowError, match="outside"):
        assemble_timeline(coarse, [stray])


def test_assemble_timeline_empty_fine():
    coarse = _coarse(["suturing"])
    select_segments(coarse, None)
    timeline = assemble_timeline(coarse, [])
    assert [seg.stage for seg in timeline] == ["coarse"]


# ---------------------------------------------------------------- summary


def test_summarize_proficiency_fraction():
    fine = [_fine((float(i), float(i + 1))) for i in range(10)]
    for seg in fine[7:]:
        seg.tags = dict(seg.tags, Proficiency="low")
    summary = summarize(fine)
    assert summary["high_proficiency_fraction"] == pytest.approx(0.7)
    assert summary["proficiency_segments"] == 10


def test_summarize_empty():
    assert summarize([]) == {"tasks": {}}


def test_summarize_durations_match_recomputation():
    rng = np.random.default_rng(0)
    fine = []
    t = 0.0
    for _ in range(20):
        length = float(rng.uniform(2.0, 5.0))
        fine.append(_fine((t, t + length)))
        t += length
    summary = summarize(fine)
    task = summary["tasks"]["3"]
    # independent recomputation of per-category durations
    expected = {}
    for seg in fine:
        for tag, cat in seg.tags.items():
            expected.setdefault((tag, cat), 0.0)
            expected[(tag, cat)] += seg.span[1] - seg.span[0]
    for (tag, cat), duration in expected.items():
        assert task["tags"][tag][cat]["duration_s"] == pytest.approx(duration,
                                                                     abs=1e-4)
        assert task["tags"][tag][cat]["count"] == 20


# ------------------------------------------------------------- end to end


def test_run_mapping_end_to_end(trained, vocab, registry, rng):
    state = trained["state"]
    rows = rng.normal(size=(90, 32))
    request = MappingRequest(video_id="demo", task_id=3, step_filter=None,
                             fine_window_s=4.0)
    timeline = run_mapping(rows, request, state, vocab, registry)
    assert timeline["video_id"] == "demo"
    coarse = [s for s in timeline["segments"] if s["stage"] == "coarse"]
    fine = [s for s in timeline["segments"] if s["stage"] == "fine"]
    assert len(coarse) == 3
    # 90 s fully selected -> [0,30) and [30,60) and [60,90) coalesce to [0,90):
    # 22 four-second windows plus a kept 2 s fragment
    assert len(fine) == 23
    assert validate_timeline(timeline) == []
    for seg in fine:
        assert set(seg["tags"]) == {"Phase", "Proficiency"}
    assert "high_proficiency_fraction" in timeline["summary"]


def test_run_mapping_with_filter_gates_fine_windows(trained, vocab, registry,
                                                    rng):
    state = trained["state"]
    rows = rng.normal(size=(120, 32))
    request = MappingRequest(video_id="demo", task_id=2,
                             step_filter="suturing", fine_window_s=2.0)
    timeline = run_mapping(rows, request, state, vocab, registry)
    selected = [(s["start_s"], s["end_s"]) for s in timeline["segments"]
                if s["stage"] == "coarse" and s["selected"]]
    fine = [s for s in timeline["segments"] if s["stage"] == "fine"]
    for seg in fine:
        assert any(a <= seg["start_s"] and seg["end_s"] <= b
                   for a, b in selected)
    # fine windows tile the selection exactly
    expected = sum(int((b - a) // 2.0) + (1 if (b - a) % 2.0 >= 2.0 else 0)
                   for a, b in selected)
    assert len(fine) == expected
    assert validate_timeline(timeline) == []


def test_timeline_json_byte_stable(trained, vocab, registry, rng):
    state = trained["state"]
    rows = rng.normal(size=(60, 32))
    request = MappingRequest(video_id="demo", task_id=3)
    a = timeline_to_json(run_mapping(rows, request, state, vocab, registry))
    b = timeline_to_json(run_mapping(rows, request, state, vocab, registry))
    assert a == b
    parsed = json.loads(a)
    assert validate_timeline(parsed) == []


def test_validate_timeline_catches_violation():
    timeline = {
        "segments": [
            {"start_s": 0.0, "end_s": 30.0, "stage": "coarse", "selected": False,
             "task_id": 1, "tags": {}, "confidence": {}},
            {"start_s": 4.0, "end_s": 8.0, "stage": "fine", "task_id": 3,
             "tags": {}, "confidence": {}},
        ],
    }
    assert validate_timeline(timeline) != []
