"""Word-level tokenization over a unified instruction + annotation vocabulary.

The vocabulary merges instruction words and annotation words (tag markers,
category words) into a single id space; shared words appear once and carry
both subset flags.  Instruction encodings are padded to a fixed slot count
with a dedicated ``<pad>`` token; tag sequences serialize each tag in schema
order as marker token followed by the category's word tokens, terminated by
``<eos>``.
"""

from __future__ import annotations

from dataclasses import dataclass

from .taxonomy import (
    ComponentAnnotation,
    TaskSchema,
    TaxonomyRegistry,
    default_registry,
    validate_annotation,
)

__all__ = [
    "Vocabulary",
    "ParseFailure",
    "TokenizerError",
    "OutOfVocabularyError",
    "build_vocab",
    "encode_instruction",
    "encode_tags",
    "decode_tags",
    "save_vocab",
    "load_vocab",
]

PAD_TOKEN = "<pad>"
EOS_TOKEN = "<eos>"

VOCAB_HEADER = "SMVOCAB 1"


class TokenizerError(ValueError):
    """Invalid tokenizer input (bad annotation, overflow, ...)."""


class OutOfVocabularyError(TokenizerError):
    """A word is not present in the required vocabulary subset."""


@dataclass(frozen=True)
class ParseFailure:
    """First violation found while parsing a token sequence against a schema."""

    reason: str
    position: int


@dataclass(frozen=True)
class Vocabulary:
    """Immutable unified vocabulary V = V_I (instructions) + V_A (annotations)."""

    tokens: tuple[str, ...]
    instruction_ids: frozenset[int]
    annotation_ids: frozenset[int]

    def __post_init__(self):
        object.__setattr__(
            self, "_token_to_id", {t: i for i, t in enumerate(self.tokens)}
        )
        # Output-head order: annotation ids ascending; the model's logits
        # index over this list.
        object.__setattr__(
            self, "annotation_id_list", tuple(sorted(self.annotation_ids))
        )
        object.__setattr__(
            self,
            "annotation_local_index",
            {g: i for i, g in enumerate(self.annotation_id_list)},
        )

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self._token_to_id[PAD_TOKEN]

    @property
    def eos_id(self) -> int:
        return self._token_to_id[EOS_TOKEN]

    def id_of(self, token: str) -> int:
        try:
            return self._token_to_id[token]
        except KeyError:
            raise OutOfVocabularyError(f"unknown token {token!r}") from None

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def marker_id(self, schema_tag_name: str) -> int:
        return self.id_of("<" + schema_tag_name.lower() + ">")

    @property
    def n_annotation(self) -> int:
        return len(self.annotation_id_list)


def build_vocab(schemas, records=()) -> Vocabulary:
    """Build the unified vocabulary from task schemas (and optional records).

    Order is deterministic: ``<pad>``, ``<eos>``, instruction words in
    first-seen order over schemas, then per schema each tag's marker token
    followed by its categories' words in category order.  Records cannot
    introduce new words (their categories come from the schemas) but are
    verified to be covered.
    """
    schemas = list(schemas)
    if not schemas or all(not s.instruction_text for s in schemas):
        raise TokenizerError("need at least one task schema with instruction text")

    tokens: list[str] = [PAD_TOKEN, EOS_TOKEN]
    index: dict[str, int] = {PAD_TOKEN: 0, EOS_TOKEN: 1}
    instruction_ids = {0}
    annotation_ids = {1}

    def add(token: str) -> int:
        if token not in index:
            index[token] = len(tokens)
            tokens.append(token)
        return index[token]

    for schema in schemas:
        for word in schema.instruction_text.split():
            instruction_ids.add(add(word))
    for schema in schemas:
        for tag in schema.tags:
            annotation_ids.add(add(tag.marker))
            for category in tag.categories:
                for word in category.split():
                    annotation_ids.add(add(word))

    for rec in records:
        for value in rec.tags.tag_values.values():
            for word in value.split():
                if word not in index:
                    raise TokenizerError(
                        f"record category word {word!r} not covered by any schema"
                    )

    return Vocabulary(
        tokens=tuple(tokens),
        instruction_ids=frozenset(instruction_ids),
        annotation_ids=frozenset(annotation_ids),
    )


def encode_instruction(vocab: Vocabulary, text: str, m_slots: int) -> list[int]:
    """Encode an instruction as exactly ``m_slots`` ids, right-padded."""
    words = text.split()
    if len(words) > m_slots:
        raise TokenizerError(
            f"instruction has {len(words)} words, more than {m_slots} slots"
        )
    ids = []
    for word in words:
        tid = vocab.id_of(word)
        if tid not in vocab.instruction_ids:
            raise OutOfVocabularyError(f"word {word!r} not in instruction vocabulary")
        ids.append(tid)
    ids.extend([vocab.pad_id] * (m_slots - len(ids)))
    return ids


def encode_tags(
    vocab: Vocabulary,
    annotation: ComponentAnnotation,
    registry: TaxonomyRegistry | None = None,
) -> list[int]:
    """Serialize an annotation: per tag in schema order, marker then category
    words; terminated with ``<eos>``."""
    reg = registry or default_registry
    violations = validate_annotation(annotation, reg)
    if violations:
        raise TokenizerError("invalid annotation: " + "; ".join(violations))
    schema = reg.schema_for_task(annotation.task_id)
    ids: list[int] = []
    for tag in schema.tags:
        ids.append(vocab.id_of(tag.marker))
        for word in annotation.tag_values[tag.name].split():
            ids.append(vocab.id_of(word))
    ids.append(vocab.eos_id)
    return ids


def _is_special(vocab: Vocabulary, tid: int) -> bool:
    return tid == vocab.eos_id or vocab.tokens[tid].startswith("<")


def decode_tags(
    vocab: Vocabulary,
    ids,
    task_id: int,
    registry: TaxonomyRegistry | None = None,
    span: tuple[float, float] = (0.0, 1.0),
    source: str = "ai",
) -> ComponentAnnotation | ParseFailure:
    """Parse a token sequence against a task schema.

    Returns the annotation on exact conformance, else a :class:`ParseFailure`
    naming the first violation.  Failure is a value, not an exception: free
    (unconstrained) decoding uses this to measure schema validity.
    """
    reg = registry or default_registry
    schema = reg.schema_for_task(task_id)
    ids = list(ids)
    pos = 0
    values: dict[str, str] = {}
    for tag in schema.tags:
        if pos >= len(ids):
            return ParseFailure("unterminated", pos)
        marker = vocab.id_of(tag.marker)
        if ids[pos] != marker:
            token = vocab.tokens[ids[pos]] if ids[pos] < len(vocab.tokens) else "?"
            if token.startswith("<") and token != EOS_TOKEN:
                return ParseFailure(
                    f"tag order: expected {tag.marker}, found {token}", pos
                )
            return ParseFailure(f"missing marker {tag.marker}", pos)
        pos += 1
        words = []
        while pos < len(ids) and not _is_special(vocab, ids[pos]):
            words.append(vocab.tokens[ids[pos]])
            pos += 1
        category = " ".join(words)
        if category not in tag.categories:
            return ParseFailure(
                f"unknown category {category!r} for tag {tag.name}", pos
            )
        values[tag.name] = category
    if pos >= len(ids):
        return ParseFailure("unterminated", pos)
    if ids[pos] != vocab.eos_id:
        return ParseFailure("missing <eos>", pos)
    if pos != len(ids) - 1:
        return ParseFailure("trailing tokens after <eos>", pos + 1)
    return ComponentAnnotation(
        task_id=task_id, tag_values=values, span=span, source=source
    )


def max_sequence_length(schema: TaskSchema) -> int:
    """Longest serialization (markers + category words + eos) of a schema."""
    total = 1  # <eos>
    for tag in schema.tags:
        total += 1 + max(len(c.split()) for c in tag.categories)
    return total


def save_vocab(vocab: Vocabulary, path) -> None:
    """Write the vocabulary file: header then ``id <TAB> word <TAB> flags``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(VOCAB_HEADER + "\n")
        for i, token in enumerate(vocab.tokens):
            flags = ""
            if i in vocab.instruction_ids:
                flags += "I"
            if i in vocab.annotation_ids:
                flags += "A"
            fh.write(f"{i}\t{token}\t{flags}\n")


def load_vocab(path) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != VOCAB_HEADER:
            raise TokenizerError(f"bad vocabulary header {header!r}")
        tokens: list[str] = []
        instruction_ids = set()
        annotation_ids = set()
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            tid_s, token, flags = line.split("\t")
            tid = int(tid_s)
            if tid != len(tokens):
                raise TokenizerError(f"line {lineno}: non-dense token id {tid}")
            tokens.append(token)
            if "I" in flags:
                instruction_ids.add(tid)
            if "A" in flags:
                annotation_ids.add(tid)
    return Vocabulary(
        tokens=tuple(tokens),
        instruction_ids=frozenset(instruction_ids),
        annotation_ids=frozenset(annotation_ids),
    )
