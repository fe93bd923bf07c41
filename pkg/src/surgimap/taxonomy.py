"""Task, tag, and category definitions for surgical component labelling.

Four built-in tasks cover the label space (ids 1-4): macro-activity
(specialty / procedure / step), micro-activity (action / arm / instrument),
proficiency (phase / proficiency), and context (anatomy / extent of stitch /
directionality).  Custom taxonomies for external datasets are registered
under ids >= 5 and never mutate the built-ins.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field

__all__ = [
    "TagKind",
    "TaskSchema",
    "ComponentAnnotation",
    "TaxonomyError",
    "UnknownTaskError",
    "TaxonomyRegistry",
    "default_registry",
    "schema_for_task",
    "validate_annotation",
    "register_custom_taxonomy",
    "normalize_category",
    "BUILTIN_CATEGORY_TOTAL",
]

BUILTIN_CATEGORY_TOTAL = 104

# First custom task id; built-ins occupy 1-4.
CUSTOM_TASK_ID_START = 5


class TaxonomyError(ValueError):
    """Invalid taxonomy definition or annotation input."""


class UnknownTaskError(KeyError):
    """Lookup of a task id that was never registered."""


def normalize_category(name: str) -> str:
    """Normalize a category name: lowercase, single spaces, ASCII hyphens.

    En-dashes in co-occurrence names (e.g. "bipolar forceps–cautery hook")
    become plain hyphens so serialized files round-trip byte-identically.
    """
    name = name.replace("–", "-").replace("—", "-")
    name = re.sub(r"\s+", " ", name.strip())
    return name.lower()


@dataclass(frozen=True)
class TagKind:
    """One component tag (e.g. Action) and its ordered category list."""

    name: str
    categories: tuple[str, ...]

    def __post_init__(self):
        cats = tuple(normalize_category(c) for c in self.categories)
        object.__setattr__(self, "categories", cats)
        if len(set(cats)) != len(cats):
            raise TaxonomyError(f"duplicate category in tag {self.name!r}")
        if not cats:
            raise TaxonomyError(f"tag {self.name!r} has no categories")

    @property
    def marker(self) -> str:
        """Marker token surface form, e.g. ``<action>``."""
        return "<" + self.name.lower() + ">"


@dataclass(frozen=True)
class TaskSchema:
    """A task: ordered tags plus the instruction that selects it.

    Tag order is fixed and defines serialization order for encoded tag
    sequences.
    """

    task_id: int
    task_name: str
    tags: tuple[TagKind, ...]
    instruction_text: str

    def tag(self, name: str) -> TagKind:
        for t in self.tags:
            if t.name == name:
                return t
        raise TaxonomyError(f"task {self.task_id} has no tag {name!r}")

    def tag_names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.tags)


@dataclass
class ComponentAnnotation:
    """A single annotated clip span for one task.

    ``tag_values`` maps tag name -> category (normalized); ``confidence``
    optionally maps tag name -> probability of the chosen category.
    """

    task_id: int
    tag_values: dict[str, str]
    span: tuple[float, float]
    source: str = "manual"
    confidence: dict[str, float] | None = None

    def __post_init__(self):
        self.tag_values = {k: normalize_category(v) for k, v in self.tag_values.items()}


_SPECIALTIES = (
    "Bariatric", "Cardiac", "Colorectal", "General", "Gynecology",
    "Hepatobiliary", "Thoracic", "Urology",
)

_PROCEDURES = (
    "Gastric Bypass", "Atrial Closure", "IMA Harvest", "Mitral Stitching",
    "Right Colectomy", "Total Mesorectal Excision",
    "Laparoscopic Cholecystectomy", "Laparoscopic Hernia", "Endometriosis",
    "Hysterectomy", "Myomectomy", "Pancreaticoduodenectomy",
    "Right Middle Lobectomy", "Right Upper Lobectomy", "Segmentectomy",
    "Prostatectomy",
)

_STEPS = ("Suturing", "Dissection")

_ACTIONS = (
    "Assistant", "Cold Cut", "Cautery", "Extraction", "Fluorescence",
    "Hot Cut", "Hook", "Idle", "Clip", "Camera Move", "Mesh", "Push/Peel",
    "Retraction", "Spread", "Sponge", "Stapler", "Tube", "Tug", "Other",
)

_ARMS = ("Left", "Right", "Both")

_INSTRUMENTS = (
    "Bipolar Dissector", "Bipolar Forceps", "Bipolar Forceps–Cautery Hook",
    "Bipolar Forceps–Monopolar Scissors", "Bipolar Forceps–Vessel Sealer",
    "Bipolar Grasper", "Bipolar Grasper–Monopolar Scissors",
    "Cadiere Forceps", "Cadiere Forceps–Bipolar Grasper", "Cautery Spatula",
    "Cautery Hook", "Clip Applier", "Clipper", "Fenestrated Forceps",
    "Fenestrated Grasper", "Fenestrated Grasper–Bipolar Grasper", "Grasper",
    "Hook Monopolar", "Maryland Grasper", "Monopolar Scissors",
    "Needle Driver", "Prograsp Forceps", "Scissors", "Shears", "Stapler",
    "Suction", "Vessel Sealer",
)

_PHASES = ("Needle Handling", "Driving", "Withdrawal")

_PROFICIENCIES = ("Low", "High")

_ANATOMIES = (
    "Bile Duct", "Bile Duct–Small Intestine", "Bladder",
    "Bladder–Urethra", "Colon", "Left Atrium", "Mitral Annulus",
    "Pancreas", "Pancreas–Small Intestine", "Peritoneum",
    "Small Intestine", "Small Intestine–Bile Duct",
    "Small Intestine–Stomach", "Stomach", "Stomach–Small Intestine",
    "Urethra", "Uterus", "Vagina",
)

_EXTENTS = ("Single", "Double", "Surface")

_DIRECTIONALITIES = ("In", "Out", "Both")


def _builtin_schemas() -> dict[int, TaskSchema]:
    return {
        1: TaskSchema(
            task_id=1,
            task_name="macro-activity",
            tags=(
                TagKind("Specialty", _SPECIALTIES),
                TagKind("Procedure", _PROCEDURES),
                TagKind("Step", _STEPS),
            ),
            instruction_text="map macro activity",
        ),
        2: TaskSchema(
            task_id=2,
            task_name="micro-activity",
            tags=(
                TagKind("Action", _ACTIONS),
                TagKind("Arm", _ARMS),
                TagKind("Instrument", _INSTRUMENTS),
            ),
            instruction_text="map micro activity",
        ),
        3: TaskSchema(
            task_id=3,
            task_name="proficiency",
            tags=(
                TagKind("Phase", _PHASES),
                TagKind("Proficiency", _PROFICIENCIES),
            ),
            instruction_text="map suturing proficiency",
        ),
        4: TaskSchema(
            task_id=4,
            task_name="context",
            tags=(
                TagKind("Anatomy", _ANATOMIES),
                TagKind("ExtentOfStitch", _EXTENTS),
                TagKind("Directionality", _DIRECTIONALITIES),
            ),
            instruction_text="map suturing context",
        ),
    }


@dataclass
class TaxonomyRegistry:
    """Holds built-in task schemas plus any registered custom taxonomies.

    Schemas are immutable once registered; registration is serialized by a
    lock so the registry is safe for concurrent readers.
    """

    _schemas: dict[int, TaskSchema] = field(default_factory=_builtin_schemas)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def schema_for_task(self, task_id: int) -> TaskSchema:
        try:
            return self._schemas[task_id]
        except KeyError:
            raise UnknownTaskError(f"unknown task id {task_id}") from None

    def task_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self._schemas))

    def schemas(self) -> tuple[TaskSchema, ...]:
        return tuple(self._schemas[i] for i in self.task_ids())

    def register_custom_taxonomy(
        self,
        task_name: str,
        tags: list[tuple[str, list[str]]],
        instruction_text: str | None = None,
    ) -> int:
        """Register a new taxonomy and return its task id (>= 5).

        Each tag needs >= 2 categories; tag names and category names must
        be unique within the definition.
        """
        if not tags:
            raise TaxonomyError("taxonomy needs at least one tag")
        tag_names = [name for name, _ in tags]
        if len(set(tag_names)) != len(tag_names):
            raise TaxonomyError("duplicate tag name in taxonomy definition")
        kinds = []
        for name, cats in tags:
            if len(cats) < 2:
                raise TaxonomyError(f"tag {name!r} needs at least 2 categories")
            kinds.append(TagKind(name, tuple(cats)))
        with self._lock:
            task_id = max(self._schemas, default=0) + 1
            task_id = max(task_id, CUSTOM_TASK_ID_START)
            schema = TaskSchema(
                task_id=task_id,
                task_name=task_name,
                tags=tuple(kinds),
                instruction_text=instruction_text or f"map {task_name}",
            )
            self._schemas[task_id] = schema
        return task_id

    def load_taxonomy_file(self, path) -> list[int]:
        """Load custom taxonomies from a tab-separated definition file.

        One record per tag: ``task_id <TAB> tag_name <TAB> categories``
        (comma-separated).  Lines starting with ``#`` are ignored.  Tags
        sharing a file-local task id form one taxonomy; returned ids are
        the freshly assigned registry ids in file order.
        """
        groups: dict[str, list[tuple[str, list[str]]]] = {}
        order: list[str] = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise TaxonomyError(
                        f"{path}: line {lineno}: expected 3 tab-separated fields"
                    )
                file_id, tag_name, cats = parts
                categories = [c.strip() for c in cats.split(",") if c.strip()]
                if not categories:
                    raise TaxonomyError(f"{path}: line {lineno}: empty category list")
                if file_id not in groups:
                    groups[file_id] = []
                    order.append(file_id)
                groups[file_id].append((tag_name, categories))
        return [
            self.register_custom_taxonomy(task_name=f"custom-{fid}", tags=groups[fid])
            for fid in order
        ]


def validate_annotation(
    annotation: ComponentAnnotation, registry: TaxonomyRegistry | None = None
) -> list[str]:
    """Check an annotation against its task schema.

    Returns a list of violation strings; an empty list means the annotation
    is valid.  Violations are data, not exceptions.
    """
    reg = registry or default_registry
    violations: list[str] = []
    try:
        schema = reg.schema_for_task(annotation.task_id)
    except UnknownTaskError:
        return [f"unknown task id {annotation.task_id}"]
    for tag in schema.tags:
        if tag.name not in annotation.tag_values:
            violations.append(f"missing tag {tag.name}")
            continue
        value = annotation.tag_values[tag.name]
        if value not in tag.categories:
            violations.append(f"unknown category {value!r} for tag {tag.name}")
    for name in annotation.tag_values:
        if name not in schema.tag_names():
            violations.append(f"unexpected tag {name}")
    start, end = annotation.span
    if not (start >= 0 and start < end):
        violations.append("empty span" if start == end else f"bad span ({start}, {end})")
    if annotation.source not in ("manual", "ai"):
        violations.append(f"bad source {annotation.source!r}")
    if annotation.confidence is not None:
        for name, p in annotation.confidence.items():
            if not (0.0 <= p <= 1.0):
                violations.append(f"confidence for {name} outside [0,1]")
    return violations


default_registry = TaxonomyRegistry()


def schema_for_task(task_id: int) -> TaskSchema:
    """Module-level lookup against the default registry."""
    return default_registry.schema_for_task(task_id)


def register_custom_taxonomy(
    task_name: str,
    tags: list[tuple[str, list[str]]],
    instruction_text: str | None = None,
) -> int:
    """Module-level registration against the default registry."""
    return default_registry.register_custom_taxonomy(task_name, tags, instruction_text)
