"""Walk through the label space and the token layer.

Shows the four built-in tasks, validates an annotation, serializes it to
component tokens, and registers a custom single-tag taxonomy like the ones
used for external action-recognition datasets.
"""

from surgimap.taxonomy import (
    ComponentAnnotation,
    TaxonomyRegistry,
    schema_for_task,
    validate_annotation,
)
from surgimap.tokenizer import build_vocab, decode_tags, encode_instruction, encode_tags

# the built-in label space: 4 tasks, 11 tags, 104 categories
for task_id in (1, 2, 3, 4):
    schema = schema_for_task(task_id)
    layout = ", ".join(f"{t.name}({len(t.categories)})" for t in schema.tags)
    print(f"task {task_id} {schema.task_name:14s} -> {layout}")

# an annotation is a category per tag plus a time span
annotation = ComponentAnnotation(
    task_id=2,
    tag_values={"Action": "retraction", "Arm": "left",
                "Instrument": "cadiere forceps"},
    span=(3.0, 7.5),
)
print("\nviolations:", validate_annotation(annotation) or "none")

# one unified word-level vocabulary covers instructions and annotations
vocab = build_vocab([schema_for_task(i) for i in (1, 2, 3, 4)])
print(f"vocabulary: {len(vocab)} tokens, {vocab.n_annotation} in the "
      "annotation subset")

ids = encode_tags(vocab, annotation)
print("serialized:", [vocab.tokens[i] for i in ids])
print("instruction:", [vocab.tokens[i]
                       for i in encode_instruction(vocab, "map micro activity", 8)])

back = decode_tags(vocab, ids, task_id=2, span=annotation.span)
print("round trip ok:", back.tag_values == annotation.tag_values)

# custom taxonomies never touch the built-ins and live at ids >= 5
registry = TaxonomyRegistry()
custom_id = registry.register_custom_taxonomy(
    "gesture-recognition",
    [("Gesture", ["grab", "cut", "push", "idle", "clip", "spread", "tug",
                  "hold"])],
)
print(f"\ncustom taxonomy registered as task {custom_id}: "
      f"{registry.schema_for_task(custom_id).tags[0].categories}")
