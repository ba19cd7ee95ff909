"""Deterministic text embeddings and cosine similarity.

Texts are embedded by feature-hashing word unigrams and character
n-grams into a fixed-dimension vector, then L2-normalizing. The scheme
needs no external model, is reproducible bit-for-bit across processes,
and gives higher cosine to texts sharing operators, arguments, or
surface vocabulary.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DataError

_WORD_RE = re.compile(r"[0-9a-z]+")


@dataclass(frozen=True)
class EmbedderConfig:
    """Configuration of the hashing embedder.

    The config is serialized into graph and encoder files so that saved
    artifacts are self-describing.
    """

    dimension: int = 256
    seed: int = 0
    ngram_min: int = 3
    ngram_max: int = 5

    def __post_init__(self) -> None:
        if self.dimension < 8:
            raise ConfigError(f"embedder dimension must be >= 8, got {self.dimension}")
        if self.ngram_min < 1 or self.ngram_min > self.ngram_max:
            raise ConfigError(
                f"invalid ngram range ({self.ngram_min}, {self.ngram_max})"
            )

    def to_json(self) -> dict:
        return {
            "dimension": self.dimension,
            "seed": self.seed,
            "ngram_min": self.ngram_min,
            "ngram_max": self.ngram_max,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EmbedderConfig":
        return cls(
            dimension=int(doc["dimension"]),
            seed=int(doc["seed"]),
            ngram_min=int(doc["ngram_min"]),
            ngram_max=int(doc["ngram_max"]),
        )


@dataclass(frozen=True)
class EmbeddingVector:
    """Unit-norm float32 vector; ``valid`` is False only for empty text."""

    values: np.ndarray
    valid: bool = True

    def __post_init__(self) -> None:
        self.values.setflags(write=False)

    @property
    def dimension(self) -> int:
        return int(self.values.shape[0])


def _hash_feature(token: str, seed: int, dimension: int) -> tuple[int, float]:
    """Map a feature to (bucket, sign). Signed hashing keeps collisions unbiased."""
    digest = hashlib.blake2b(
        token.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little", signed=True)
    ).digest()
    value = int.from_bytes(digest, "little")
    return value % dimension, 1.0 if value & (1 << 63) else -1.0


def _normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def _features(text: str, config: EmbedderConfig) -> list[str]:
    normalized = _normalize_text(text)
    feats = [f"w:{w}" for w in _WORD_RE.findall(normalized)]
    for n in range(config.ngram_min, config.ngram_max + 1):
        feats.extend(
            f"c{n}:{normalized[i:i + n]}" for i in range(len(normalized) - n + 1)
        )
    return feats


@lru_cache(maxsize=65536)
def _embed_cached(text: str, config: EmbedderConfig) -> EmbeddingVector:
    accum = np.zeros(config.dimension, dtype=np.float64)
    feats = _features(text, config)
    if not feats:
        return EmbeddingVector(accum.astype(np.float32), valid=False)
    for feat in feats:
        bucket, sign = _hash_feature(feat, config.seed, config.dimension)
        accum[bucket] += sign
    norm = float(np.linalg.norm(accum))
    if norm == 0.0:
        return EmbeddingVector(accum.astype(np.float32), valid=False)
    return EmbeddingVector((accum / norm).astype(np.float32), valid=True)


def embed_text(text: str, config: EmbedderConfig) -> EmbeddingVector:
    """Embed ``text`` deterministically; empty text yields an invalid zero vector."""
    return _embed_cached(text, config)


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine similarity in [-1, 1]; 0 whenever either vector is invalid.

    Inputs need not be unit norm (task centroids are plain means); the
    magnitudes are divided out here. Identical arrays compare as exactly
    1.0 so that threshold tests at delta = 1.0 behave.
    """
    if a.dimension != b.dimension:
        raise ConfigError(
            f"cosine of mismatched dimensions {a.dimension} and {b.dimension}"
        )
    if not a.valid or not b.valid:
        return 0.0
    if np.array_equal(a.values, b.values):
        return 1.0
    av = a.values.astype(np.float64)
    bv = b.values.astype(np.float64)
    denom = float(np.linalg.norm(av)) * float(np.linalg.norm(bv))
    if denom == 0.0:
        return 0.0
    return float(np.clip(np.dot(av, bv) / denom, -1.0, 1.0))


def task_centroid(questions: list[EmbeddingVector]) -> EmbeddingVector:
    """Arithmetic mean of the given vectors, not re-normalized."""
    if not questions:
        raise DataError("task_centroid of an empty question list")
    dim = questions[0].dimension
    for vec in questions:
        if vec.dimension != dim:
            raise ConfigError("task_centroid over mixed dimensions")
    mean = np.mean([q.values.astype(np.float64) for q in questions], axis=0)
    return EmbeddingVector(mean.astype(np.float32), valid=any(q.valid for q in questions))
