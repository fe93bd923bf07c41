"""One full self-labelling cycle on synthetic data.

Trains a first model on a manually-annotated corpus, gates on validation
accuracy, annotates an unlabeled full-length video in 1-second windows,
filters by per-category calibrated confidence thresholds, merges adjacent
identical annotations, and grows the atlas without touching the original
manifest.
"""

import numpy as np

from surgimap.corpus import (
    ClipRecord,
    SynthSpec,
    generate_synthetic,
    generate_synthetic_video,
    make_folds,
)
from surgimap.encoder import SyntheticProvider
from surgimap.inference import greedy_decode_batch
from surgimap.metrics import exact_match_accuracy
from surgimap.model import init_state
from surgimap.selflabel import (
    annotate_unlabeled_video,
    calibrate_thresholds,
    expand_atlas,
    readiness_gate,
)
from surgimap.taxonomy import default_registry
from surgimap.tokenizer import build_vocab
from surgimap.trainer import TrainConfig, suggested_model_config, train

registry = default_registry
TASK = 2

spec = SynthSpec(n_videos=10, clips_per_video=100, tasks=(TASK,),
                 feature_dim=32, class_separation=4.0, noise_sd=0.3, seed=1)
records, _ = generate_synthetic(spec)
provider = SyntheticProvider(spec)
fold = make_folds(records, seed=0)[0]
vocab = build_vocab(registry.schemas(), records)

state = init_state(suggested_model_config(vocab, registry, embed_dim=32,
                                          n_heads=4, feature_dim=32), seed=0)
_, state = train(state, fold, (TASK,),
                 TrainConfig(epochs=100, batch_size=64, lr_base=1e-3,
                             warmup_epochs=2, seed=0),
                 provider, vocab, registry, evaluate=False)

# step 1: readiness gate at 80% average accuracy
val = [r for r in fold.validation if r.task_id == TASK]
ev = np.asarray([provider.embedding(r) for r in val])
decoded = greedy_decode_batch(state, vocab, ev, TASK, registry=registry)
accuracy = exact_match_accuracy([d.annotation for d in decoded],
                                [r.tags for r in val])
print(f"validation exact match: {accuracy:.3f} -> gate "
      f"{'passes' if readiness_gate({TASK: accuracy}) else 'fails'}")

# step 3 calibration data: per-prediction (category, confidence, correctness)
gate_tag = registry.schema_for_task(TASK).tags[0].name
triples = [
    (d.annotation.tag_values[gate_tag], d.confidences[gate_tag],
     d.annotation.tag_values[gate_tag] == r.tags.tag_values[gate_tag])
    for d, r in zip(decoded, val)
]
table = calibrate_thresholds(
    triples, categories=registry.schema_for_task(TASK).tags[0].categories)
print(f"calibrated thresholds for {len(table.thresholds)} categories "
      f"(min {min(table.thresholds.values()):.2f}, "
      f"max {max(table.thresholds.values()):.2f})")

# step 2+3: 1-second windows on an unlabeled video, filter, merge
rows, hidden_truth = generate_synthetic_video(spec, duration_s=300.0,
                                              video_seed=77, task_id=TASK)
merged = annotate_unlabeled_video(state, vocab, rows, TASK, table, registry)
print(f"unlabeled 300 s video -> {len(merged)} merged AI annotations "
      f"(hidden truth had {len(hidden_truth)} segments)")

# step 4: grow the atlas; the base manifest is never mutated
new_records = [
    ClipRecord(video_id="unlabeled-0", span=a.span, task_id=TASK, tags=a,
               source="ai", feature_file="unlabeled.hsaf",
               feature_index=int(a.span[0]))
    for a in merged
]
report = expand_atlas(records, new_records, "/tmp/expanded_manifest.jsonl",
                      registry)
print(f"atlas: {report['before']} -> {report['after']} clips "
      f"(x{report['ratio']:.2f})")
