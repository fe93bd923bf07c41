"""Evaluation metrics: exact-match accuracy, binary AUROC, temporal F1 with
an interval-IoU overlap rule, percentile bootstrap intervals, and
random-chance baselines."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "TimedPrediction",
    "Prf",
    "TemporalF1Report",
    "MetricError",
    "UndefinedMetricError",
    "exact_match_accuracy",
    "binary_auroc",
    "interval_iou",
    "temporal_f1",
    "bootstrap_ci",
    "random_chance_baseline",
    "relative_improvement",
]


class MetricError(ValueError):
    """Metric inputs are malformed (length mismatch, empty, ...)."""


class UndefinedMetricError(MetricError):
    """Metric has no defined value on this input (e.g. single-class AUROC)."""


@dataclass(frozen=True)
class TimedPrediction:
    """A category attached to a time span, with optional confidence."""

    category: str
    span: tuple[float, float]
    confidence: float | None = None


class Prf(NamedTuple):
    precision: float
    recall: float
    f1: float


@dataclass
class TemporalF1Report:
    per_category: dict[str, Prf]
    macro: Prf
    tp: int
    fp: int
    fn: int


def exact_match_accuracy(predictions: Sequence, ground_truth: Sequence,
                         tag: str | None = None) -> float:
    """Fraction of aligned clips whose prediction matches the ground truth.

    With ``tag`` given, only that tag's category is compared; otherwise every
    tag must match (all-tags variant).  A ``None`` prediction (failed parse)
    never matches.
    """
    if len(predictions) != len(ground_truth):
        raise MetricError(
            f"length mismatch: {len(predictions)} predictions vs "
            f"{len(ground_truth)} ground truth"
        )
    if not ground_truth:
        raise MetricError("empty inputs")
    hits = 0
    for pred, truth in zip(predictions, ground_truth):
        if pred is None:
            continue
        if tag is None:
            hits += pred.tag_values == truth.tag_values
        else:
            hits += pred.tag_values.get(tag) == truth.tag_values.get(tag)
    return hits / len(ground_truth)


def binary_auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUROC: P(random positive outscores random negative),
    ties counted as one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels must align")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    ranks = rankdata(scores)  # average ranks implement the tie-half rule
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def interval_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Intersection over union of two time intervals."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def _match_category(preds, truths, threshold):
    """One-to-one matching of maximum cardinality among candidate pairs.

    Candidates require IoU >= threshold.  Pairs are seeded greedily in
    descending-IoU order (ties prefer the earlier ground-truth start) and
    then extended to a maximum matching with augmenting paths, so the true
    positive count always equals the optimal assignment while staying
    deterministic.
    """
    pairs = []
    for pi, p in enumerate(preds):
        for gi, g in enumerate(truths):
            iou = interval_iou(p.span, g.span)
            if iou >= threshold:
                pairs.append((-iou, g.span[0], gi, pi))
    pairs.sort()
    adjacency: dict[int, list[int]] = {}
    for _, _, gi, pi in pairs:
        adjacency.setdefault(pi, []).append(gi)

    match_of_gt: dict[int, int] = {}
    match_of_pred: dict[int, int] = {}

    def augment(pi, banned):
        for gi in adjacency.get(pi, ()):
            if gi in banned:
                continue
            banned.add(gi)
            if gi not in match_of_gt or augment(match_of_gt[gi], banned):
                match_of_gt[gi] = pi
                match_of_pred[pi] = gi
                return True
        return False

    for _, _, gi, pi in pairs:  # greedy seed in descending-IoU order
        if pi not in match_of_pred and gi not in match_of_gt:
            match_of_gt[gi] = pi
            match_of_pred[pi] = gi
    for pi in sorted(adjacency):
        if pi not in match_of_pred:
            augment(pi, set())

    tp = len(match_of_pred)
    return tp, len(preds) - tp, len(truths) - tp


def temporal_f1(predictions: Sequence[TimedPrediction],
                ground_truth: Sequence[TimedPrediction],
                threshold: float = 0.10) -> TemporalF1Report:
    """Segment-level F1: a prediction is a true positive when its category
    matches a ground-truth segment and their span IoU is at least the
    threshold; matching is one-to-one.

    F1 is 0 when precision + recall is 0; with no predictions and no ground
    truth at all, the report is (1, 1, 1).
    """
    for item in list(predictions) + list(ground_truth):
        if item.span[1] <= item.span[0]:
            raise MetricError(f"bad span {item.span}")
    categories = sorted({p.category for p in predictions}
                        | {g.category for g in ground_truth})
    if not categories:
        unit = Prf(1.0, 1.0, 1.0)
        return TemporalF1Report(per_category={}, macro=unit, tp=0, fp=0, fn=0)

    per_category: dict[str, Prf] = {}
    tot_tp = tot_fp = tot_fn = 0
    for cat in categories:
        preds = [p for p in predictions if p.category == cat]
        truths = [g for g in ground_truth if g.category == cat]
        tp, fp, fn = _match_category(preds, truths, threshold)
        tot_tp, tot_fp, tot_fn = tot_tp + tp, tot_fp + fp, tot_fn + fn
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_category[cat] = Prf(precision, recall, f1)

    macro = Prf(*(float(np.mean([prf[i] for prf in per_category.values()]))
                  for i in range(3)))
    return TemporalF1Report(per_category=per_category, macro=macro,
                            tp=tot_tp, fp=tot_fp, fn=tot_fn)


def bootstrap_ci(metric: Callable[[list], float], samples: Sequence,
                 n_resamples: int = 1000, level: float = 0.95,
                 seed: int = 0, max_retries: int = 1000) -> tuple[float, float]:
    """Percentile bootstrap over sample-level resamples.

    Resamples on which the metric is undefined are redrawn, up to
    ``max_retries`` extra draws in total.
    """
    samples = list(samples)
    if len(samples) < 2:
        raise MetricError("bootstrap needs at least 2 samples")
    rng = np.random.default_rng(seed)
    stats = []
    retries = 0
    while len(stats) < n_resamples:
        idx = rng.integers(len(samples), size=len(samples))
        try:
            stats.append(metric([samples[i] for i in idx]))
        except UndefinedMetricError:
            retries += 1
            if retries > max_retries:
                raise MetricError(
                    "metric undefined on too many bootstrap resamples"
                ) from None
    alpha = (1.0 - level) / 2.0
    low, high = np.percentile(stats, [100 * alpha, 100 * (1 - alpha)])
    return float(low), float(high)


def random_chance_baseline(n_categories: int) -> float:
    """Expected accuracy of a uniform random guesser over n categories."""
    if n_categories < 1:
        raise MetricError("need at least one category")
    return 1.0 / n_categories


def relative_improvement(actual: float, baseline: float) -> float:
    """How many times the actual metric exceeds the baseline."""
    if baseline <= 0:
        raise MetricError("baseline must be positive")
    return actual / baseline
