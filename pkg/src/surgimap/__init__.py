"""surgimap: instruction-conditioned multitask mapping of surgical video
clips to structured sequences of component tags.

Subpackage layout mirrors the pipeline: ``taxonomy`` and ``tokenizer``
define the label and token spaces, ``corpus`` and ``encoder`` supply data
and clip features, ``model``/``trainer``/``inference`` implement the
decoder and its optimization, ``metrics`` the evaluation suite,
``selflabel`` the atlas-expansion lifecycle, and ``workflow``/``service``
the multi-stage mapping platform.
"""

from .taxonomy import (
    ComponentAnnotation,
    TagKind,
    TaskSchema,
    TaxonomyRegistry,
    default_registry,
    register_custom_taxonomy,
    schema_for_task,
    validate_annotation,
)
from .tokenizer import (
    Vocabulary,
    build_vocab,
    decode_tags,
    encode_instruction,
    encode_tags,
)
from .corpus import (
    ClipRecord,
    FoldSplit,
    SynthSpec,
    check_no_leakage,
    generate_synthetic,
    load_manifest,
    make_folds,
    read_hsaf,
    save_manifest,
    write_hsaf,
)
from .model import ModelConfig, ModelState, init_state, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, lr_schedule, train
from .inference import greedy_decode, map_clips, score_binary_tag
from .metrics import (
    TimedPrediction,
    binary_auroc,
    bootstrap_ci,
    exact_match_accuracy,
    random_chance_baseline,
    temporal_f1,
)

__version__ = "0.1.0"
