"""Atlas data model: clip manifests, feature files, cross-validation splits,
and a synthetic corpus generator for desk-scale runs.

Manifests are JSON-lines, one clip per line.  Features live in HSAF files:
magic ``HSAF``, version u16, count u32, dim u32 (all little-endian) followed
by count x dim float32 values, row-major.  Splits follow a leave-one-video-out
rule per fold: one video to validation, one to test, the rest to train.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .taxonomy import (
    ComponentAnnotation,
    TaxonomyRegistry,
    default_registry,
    validate_annotation,
)

__all__ = [
    "ClipRecord",
    "FoldSplit",
    "SynthSpec",
    "CorpusError",
    "load_manifest",
    "save_manifest",
    "make_folds",
    "check_no_leakage",
    "generate_synthetic",
    "generate_synthetic_video",
    "nearest_mean_oracle_accuracy",
    "write_hsaf",
    "read_hsaf",
    "hsaf_shape",
    "read_hsaf_row",
]

HSAF_MAGIC = b"HSAF"
HSAF_VERSION = 1
_HSAF_HEADER = struct.Struct("<4sHII")


class CorpusError(ValueError):
    """Malformed manifest, feature file, or split request."""


@dataclass
class ClipRecord:
    """One annotated clip: span, task, tags, provenance, feature locator."""

    video_id: str
    span: tuple[float, float]
    task_id: int
    tags: ComponentAnnotation
    source: str
    feature_file: str
    feature_index: int

    def to_json_obj(self) -> dict:
        obj = {
            "video_id": self.video_id,
            "start_s": self.span[0],
            "end_s": self.span[1],
            "task_id": self.task_id,
            "tags": dict(self.tags.tag_values),
            "source": self.source,
            "feature_file": self.feature_file,
            "feature_index": self.feature_index,
        }
        if self.tags.confidence is not None:
            obj["confidence"] = dict(self.tags.confidence)
        return obj


_REQUIRED_KEYS = {
    "video_id", "start_s", "end_s", "task_id", "tags", "source",
    "feature_file", "feature_index",
}


def _record_from_obj(obj: dict, registry: TaxonomyRegistry, lineno: int) -> ClipRecord:
    missing = _REQUIRED_KEYS - obj.keys()
    if missing:
        raise CorpusError(f"line {lineno}: missing field {sorted(missing)[0]}")
    unknown = obj.keys() - _REQUIRED_KEYS - {"confidence"}
    if unknown:
        raise CorpusError(f"line {lineno}: unknown field {sorted(unknown)[0]}")
    annotation = ComponentAnnotation(
        task_id=obj["task_id"],
        tag_values=obj["tags"],
        span=(obj["start_s"], obj["end_s"]),
        source=obj["source"],
        confidence=obj.get("confidence"),
    )
    violations = validate_annotation(annotation, registry)
    if violations:
        raise CorpusError(f"line {lineno}: {violations[0]}")
    if not isinstance(obj["feature_index"], int) or obj["feature_index"] < 0:
        raise CorpusError(f"line {lineno}: bad feature_index")
    return ClipRecord(
        video_id=obj["video_id"],
        span=(float(obj["start_s"]), float(obj["end_s"])),
        task_id=obj["task_id"],
        tags=annotation,
        source=obj["source"],
        feature_file=obj["feature_file"],
        feature_index=obj["feature_index"],
    )


def load_manifest(path, registry: TaxonomyRegistry | None = None) -> list[ClipRecord]:
    """Load and validate a JSON-lines manifest; errors carry line numbers."""
    reg = registry or default_registry
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            records.append(_record_from_obj(obj, reg, lineno))
    return records


def save_manifest(records, path) -> None:
    """Write records as JSON-lines; byte-deterministic given record order."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_obj(), sort_keys=True,
                                separators=(",", ":")) + "\n")


# ---------------------------------------------------------------- HSAF files


def write_hsaf(path, matrix: np.ndarray) -> None:
    """Write a count x dim float32 matrix as an HSAF feature file."""
    matrix = np.asarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise CorpusError("HSAF matrix must be 2-dimensional")
    count, dim = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_HSAF_HEADER.pack(HSAF_MAGIC, HSAF_VERSION, count, dim))
        fh.write(matrix.tobytes(order="C"))


def _read_hsaf_header(fh, path) -> tuple[int, int]:
    raw = fh.read(_HSAF_HEADER.size)
    if len(raw) < _HSAF_HEADER.size:
        raise CorpusError(f"{path}: truncated HSAF header")
    magic, version, count, dim = _HSAF_HEADER.unpack(raw)
    if magic != HSAF_MAGIC:
        raise CorpusError(f"{path}: bad HSAF magic {magic!r}")
    if version != HSAF_VERSION:
        raise CorpusError(f"{path}: unsupported HSAF version {version}")
    return count, dim


def hsaf_shape(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        return _read_hsaf_header(fh, path)


def read_hsaf(path) -> np.ndarray:
    with open(path, "rb") as fh:
        count, dim = _read_hsaf_header(fh, path)
        data = np.frombuffer(fh.read(count * dim * 4), dtype="<f4")
    if data.size != count * dim:
        raise CorpusError(f"{path}: truncated HSAF payload")
    return data.reshape(count, dim).copy()


def read_hsaf_row(path, index: int) -> np.ndarray:
    with open(path, "rb") as fh:
        count, dim = _read_hsaf_header(fh, path)
        if not 0 <= index < count:
            raise CorpusError(f"{path}: row {index} out of range (count={count})")
        fh.seek(_HSAF_HEADER.size + index * dim * 4)
        row = np.frombuffer(fh.read(dim * 4), dtype="<f4")
    if row.size != dim:
        raise CorpusError(f"{path}: truncated HSAF payload")
    return row.copy()


# ------------------------------------------------------- cross-validation


@dataclass
class FoldSplit:
    """One Monte-Carlo fold: disjoint video sets and their clip lists."""

    fold_index: int
    train_videos: frozenset[str]
    validation_videos: frozenset[str]
    test_videos: frozenset[str]
    train: list[ClipRecord] = field(default_factory=list)
    validation: list[ClipRecord] = field(default_factory=list)
    test: list[ClipRecord] = field(default_factory=list)


def make_folds(records, n_folds: int = 5, seed: int = 0) -> list[FoldSplit]:
    """Build leave-one-video-out folds: per fold one validation video, one
    test video, the remainder to train.

    (validation, test) videos are drawn without replacement across folds
    until the video supply is exhausted, then with replacement while keeping
    the two fold videos distinct and avoiding repeated pairs when possible.
    Deterministic given the seed.
    """
    videos = sorted({r.video_id for r in records})
    if len(videos) < n_folds + 1:
        raise CorpusError(
            f"need at least {n_folds + 1} distinct videos, found {len(videos)}"
        )
    rng = np.random.default_rng(seed)
    pool = list(videos)
    rng.shuffle(pool)
    by_video: dict[str, list[ClipRecord]] = {}
    for rec in records:
        by_video.setdefault(rec.video_id, []).append(rec)

    used_pairs: set[tuple[str, str]] = set()
    folds = []
    for k in range(n_folds):
        if len(pool) >= 2:
            val, test = pool.pop(), pool.pop()
        else:
            for _ in range(100):
                val, test = rng.choice(videos, size=2, replace=False)
                if (val, test) not in used_pairs:
                    break
        used_pairs.add((val, test))
        train_videos = frozenset(videos) - {val, test}
        fold = FoldSplit(
            fold_index=k,
            train_videos=train_videos,
            validation_videos=frozenset([val]),
            test_videos=frozenset([test]),
        )
        for v in videos:
            target = (
                fold.validation if v == val
                else fold.test if v == test
                else fold.train
            )
            target.extend(by_video[v])
        folds.append(fold)
    return folds


def check_no_leakage(split: FoldSplit) -> list[str]:
    """Verify pairwise disjointness and clip-to-set consistency.

    Returns violations; empty list means the split is leakage-free.
    """
    violations = []
    sets = {
        "train": split.train_videos,
        "validation": split.validation_videos,
        "test": split.test_videos,
    }
    names = list(sets)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            for vid in sets[a] & sets[b]:
                violations.append(f"video {vid!r} in both {a} and {b}")
    for name, clips in (("train", split.train), ("validation", split.validation),
                        ("test", split.test)):
        for rec in clips:
            if rec.video_id not in sets[name]:
                if any(rec.video_id in s for s in sets.values()):
                    violations.append(
                        f"clip of video {rec.video_id!r} listed under {name}"
                    )
                else:
                    violations.append(f"orphan clip (video {rec.video_id!r})")
    return violations


# ------------------------------------------------------- synthetic corpus


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic feature world.

    Features are sums of per-(tag, category) unit vectors scaled by
    ``class_separation`` plus isotropic Gaussian noise, so the Bayes-optimal
    classifier is the nearest-mean rule and its accuracy is measurable.
    """

    n_videos: int
    clips_per_video: int
    tasks: tuple[int, ...]
    feature_dim: int
    class_separation: float
    noise_sd: float
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim < 4:
            raise CorpusError("feature_dim must be >= 4")
        if self.class_separation < 0:
            raise CorpusError("class_separation must be >= 0")
        if self.noise_sd <= 0:
            raise CorpusError("noise_sd must be > 0")
        object.__setattr__(self, "tasks", tuple(self.tasks))


def _stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def category_direction(tag_name: str, category: str, dim: int, seed: int) -> np.ndarray:
    """Fixed unit vector for a (tag, category) pair, deterministic in the seed."""
    ss = np.random.SeedSequence([seed, _stable_hash(tag_name), _stable_hash(category)])
    v = np.random.default_rng(ss).normal(size=dim)
    return v / np.linalg.norm(v)


def _sample_annotation(schema, rng, span, source="manual") -> ComponentAnnotation:
    values = {
        tag.name: tag.categories[rng.integers(len(tag.categories))]
        for tag in schema.tags
    }
    return ComponentAnnotation(task_id=schema.task_id, tag_values=values,
                               span=span, source=source)


def _feature_for(annotation, schema, spec: SynthSpec, rng) -> np.ndarray:
    x = rng.normal(0.0, spec.noise_sd, size=spec.feature_dim)
    for tag in schema.tags:
        mu = category_direction(tag.name, annotation.tag_values[tag.name],
                                spec.feature_dim, spec.seed)
        x += spec.class_separation * mu
    return x


def generate_synthetic(
    spec: SynthSpec,
    feature_file: str = "synthetic.hsaf",
    registry: TaxonomyRegistry | None = None,
) -> tuple[list[ClipRecord], np.ndarray]:
    """Sample a synthetic corpus: records plus their feature matrix.

    Clip spans tile each video with 1-20 s durations; tasks cycle through
    ``spec.tasks`` so every task gets coverage.  Byte-reproducible for a
    fixed spec.
    """
    reg = registry or default_registry
    rng = np.random.default_rng(spec.seed)
    records: list[ClipRecord] = []
    features = np.zeros((spec.n_videos * spec.clips_per_video, spec.feature_dim))
    idx = 0
    for vi in range(spec.n_videos):
        video_id = f"synth{vi:04d}"
        t = 0.0
        for ci in range(spec.clips_per_video):
            duration = float(rng.uniform(1.0, 20.0))
            span = (t, t + duration)
            t += duration
            task_id = spec.tasks[idx % len(spec.tasks)]
            schema = reg.schema_for_task(task_id)
            annotation = _sample_annotation(schema, rng, span)
            features[idx] = _feature_for(annotation, schema, spec, rng)
            records.append(ClipRecord(
                video_id=video_id,
                span=span,
                task_id=task_id,
                tags=annotation,
                source="manual",
                feature_file=feature_file,
                feature_index=idx,
            ))
            idx += 1
    return records, features


def generate_synthetic_video(
    spec: SynthSpec,
    duration_s: float,
    video_seed: int,
    task_id: int | None = None,
    registry: TaxonomyRegistry | None = None,
) -> tuple[np.ndarray, list[ComponentAnnotation]]:
    """Simulate one unlabeled full-length video: per-second feature rows plus
    the hidden ground-truth segment annotations.

    Row ``k`` covers ``[k, k+1)`` seconds.  Segments have 1-20 s durations
    and carry annotations for ``task_id`` (default: first task of the spec).
    """
    reg = registry or default_registry
    task = task_id if task_id is not None else spec.tasks[0]
    schema = reg.schema_for_task(task)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, video_seed]))
    segments: list[ComponentAnnotation] = []
    t = 0.0
    while t < duration_s:
        duration = min(float(rng.uniform(1.0, 20.0)), duration_s - t)
        segments.append(_sample_annotation(schema, rng, (t, t + duration), source="ai"))
        t += duration
    n_rows = int(duration_s)
    rows = np.zeros((n_rows, spec.feature_dim))
    seg_i = 0
    for k in range(n_rows):
        mid = k + 0.5
        while seg_i + 1 < len(segments) and segments[seg_i].span[1] <= mid:
            seg_i += 1
        rows[k] = _feature_for(segments[seg_i], schema, spec, rng)
    return rows, segments


def nearest_mean_oracle_accuracy(
    spec: SynthSpec,
    task_id: int,
    n_samples: int = 10_000,
    seed: int = 1234,
    registry: TaxonomyRegistry | None = None,
) -> dict:
    """Monte-Carlo accuracy of the nearest-mean (Bayes-optimal) classifier.

    Enumerates every category combination of the task, draws fresh samples
    from the generator's distribution, and classifies by nearest class mean.
    Returns per-tag accuracies and the exact-match (all tags) accuracy.
    """
    reg = registry or default_registry
    schema = reg.schema_for_task(task_id)
    combos = list(itertools.product(*(t.categories for t in schema.tags)))
    means = np.zeros((len(combos), spec.feature_dim))
    for i, combo in enumerate(combos):
        for tag, category in zip(schema.tags, combo):
            means[i] += spec.class_separation * category_direction(
                tag.name, category, spec.feature_dim, spec.seed
            )
    rng = np.random.default_rng(seed)
    true_idx = rng.integers(len(combos), size=n_samples)
    x = means[true_idx] + rng.normal(0.0, spec.noise_sd,
                                     size=(n_samples, spec.feature_dim))
    # argmax of <x, m> - |m|^2/2 equals nearest mean in Euclidean distance
    scores = x @ means.T - 0.5 * np.sum(means**2, axis=1)
    pred_idx = np.argmax(scores, axis=1)

    combo_arr = np.array(combos)
    per_tag = {}
    for j, tag in enumerate(schema.tags):
        per_tag[tag.name] = float(
            np.mean(combo_arr[true_idx, j] == combo_arr[pred_idx, j])
        )
    return {
        "per_tag": per_tag,
        "exact_match": float(np.mean(true_idx == pred_idx)),
        "n_samples": n_samples,
    }
