"""Clip-feature provision.

The upstream video encoder is frozen, so this module treats it as a pure
feature source: cube-chunking geometry and mean pooling describe how a clip
embedding is formed, and two read-only providers supply embeddings either
from precomputed HSAF files or from the synthetic generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import ClipRecord, SynthSpec, generate_synthetic, read_hsaf
from .taxonomy import TaxonomyRegistry, default_registry

__all__ = [
    "VideoClipShape",
    "EncoderGeometry",
    "GeometryError",
    "ProviderError",
    "cube_count",
    "pool_embedding",
    "HsafProvider",
    "SyntheticProvider",
    "make_provider",
]


class GeometryError(ValueError):
    """Clip shape not divisible by the cube shape."""


class ProviderError(LookupError):
    """Feature reference could not be resolved."""


@dataclass(frozen=True)
class VideoClipShape:
    """Raw clip dimensions: frames, channels, height, width."""

    frames: int
    channels: int
    height: int
    width: int

    def __post_init__(self):
        if min(self.frames, self.channels, self.height, self.width) <= 0:
            raise GeometryError("all clip dimensions must be positive")


@dataclass(frozen=True)
class EncoderGeometry:
    """Cube shape used to chunk a clip, plus the embedding dimension."""

    cube_frames: int
    cube_height: int
    cube_width: int
    embed_dim: int


def cube_count(shape: VideoClipShape, geometry: EncoderGeometry) -> tuple[int, int, int, int]:
    """Number of cubes along time/height/width and their product.

    The clip must divide exactly along every axis.
    """
    for axis, size, cube in (
        ("frames", shape.frames, geometry.cube_frames),
        ("height", shape.height, geometry.cube_height),
        ("width", shape.width, geometry.cube_width),
    ):
        if size % cube != 0:
            raise GeometryError(f"{axis}={size} not divisible by cube {cube}")
    m_t = shape.frames // geometry.cube_frames
    m_h = shape.height // geometry.cube_height
    m_w = shape.width // geometry.cube_width
    return m_t, m_h, m_w, m_t * m_h * m_w


def pool_embedding(cube_embeddings: np.ndarray) -> np.ndarray:
    """Mean across the cube axis of an M x D embedding matrix."""
    arr = np.asarray(cube_embeddings, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise GeometryError("expected a nonempty M x D matrix")
    return arr.mean(axis=0)


class HsafProvider:
    """Read-only provider backed by precomputed HSAF feature files.

    Feature files are loaded once and cached; repeated lookups return
    bit-identical rows (frozen-encoder contract).
    """

    def __init__(self, base_dir="."):
        self.base_dir = base_dir
        self._cache: dict[str, np.ndarray] = {}

    def _matrix(self, feature_file: str) -> np.ndarray:
        if feature_file not in self._cache:
            import os

            path = os.path.join(self.base_dir, feature_file)
            if not os.path.exists(path):
                raise ProviderError(f"feature file not found: {path}")
            self._cache[feature_file] = read_hsaf(path)
        return self._cache[feature_file]

    def embedding(self, clip: ClipRecord) -> np.ndarray:
        matrix = self._matrix(clip.feature_file)
        if not 0 <= clip.feature_index < matrix.shape[0]:
            raise ProviderError(
                f"feature index {clip.feature_index} out of range "
                f"(file has {matrix.shape[0]} rows)"
            )
        return matrix[clip.feature_index].astype(float)

    @property
    def dim(self) -> int | None:
        for m in self._cache.values():
            return m.shape[1]
        return None


class SyntheticProvider:
    """Provider that regenerates synthetic features deterministically.

    Holds the generator output in memory; queries for the same clip always
    return identical vectors.
    """

    def __init__(self, spec: SynthSpec, registry: TaxonomyRegistry | None = None):
        self.spec = spec
        _, self._features = generate_synthetic(spec, registry=registry or default_registry)

    def embedding(self, clip: ClipRecord) -> np.ndarray:
        if not 0 <= clip.feature_index < self._features.shape[0]:
            raise ProviderError(f"feature index {clip.feature_index} out of range")
        return self._features[clip.feature_index].copy()

    @property
    def dim(self) -> int:
        return self.spec.feature_dim


def make_provider(kind: str, **kwargs):
    """Provider selection by configuration key: ``hsaf`` or ``synthetic``."""
    if kind == "hsaf":
        return HsafProvider(**kwargs)
    if kind == "synthetic":
        return SyntheticProvider(**kwargs)
    raise ProviderError(f"unknown provider kind {kind!r}")
