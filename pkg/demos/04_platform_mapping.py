"""Offline multi-stage mapping of a full-length video, as the platform does.

Coarse 30-second windows are labeled with the macro-activity instruction;
windows matching the requested step coalesce into selected spans; fine
windows inside the selection are labeled with the requested task; the
timeline plus summary serializes to the JSON contract the service persists.
"""

import json

import numpy as np

from surgimap.corpus import SynthSpec, generate_synthetic, make_folds
from surgimap.encoder import SyntheticProvider
from surgimap.model import init_state
from surgimap.taxonomy import default_registry
from surgimap.tokenizer import build_vocab
from surgimap.trainer import TrainConfig, suggested_model_config, train
from surgimap.workflow import MappingRequest, run_mapping, validate_timeline

registry = default_registry

spec = SynthSpec(n_videos=8, clips_per_video=60, tasks=(2, 3), feature_dim=32,
                 class_separation=4.0, noise_sd=0.3, seed=2)
records, _ = generate_synthetic(spec)
provider = SyntheticProvider(spec)
vocab = build_vocab(registry.schemas(), records)
state = init_state(suggested_model_config(vocab, registry, embed_dim=32,
                                          n_heads=4, feature_dim=32), seed=0)
_, state = train(state, make_folds(records, seed=0)[0], (2, 3),
                 TrainConfig(epochs=80, batch_size=64, lr_base=1e-3,
                             warmup_epochs=2, seed=0),
                 provider, vocab, registry, evaluate=False)

# a 6-minute "video" as per-second feature rows
rows = np.random.default_rng(9).normal(size=(360, 32))

request = MappingRequest(video_id="demo-procedure", task_id=3,
                         step_filter=None, fine_window_s=4.0)
timeline = run_mapping(rows, request, state, vocab, registry)

coarse = [s for s in timeline["segments"] if s["stage"] == "coarse"]
fine = [s for s in timeline["segments"] if s["stage"] == "fine"]
print(f"coarse windows: {len(coarse)}, fine windows: {len(fine)}")
print("containment violations:", validate_timeline(timeline) or "none")
summary = timeline["summary"]
if "high_proficiency_fraction" in summary:
    print(f"high-proficiency fraction: {summary['high_proficiency_fraction']:.2f} "
          f"over {summary['proficiency_segments']} fine segments")
print("\nfirst three segments:")
for segment in timeline["segments"][:3]:
    print(" ", json.dumps(segment))
