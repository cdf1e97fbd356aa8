"""Embedding value types, cosine similarity, and NormInt8 quantization.

NormInt8 stores a vector as its L2 norm (float32) plus signed 8-bit codes of
its unit direction, ``codes[i] = round(127 * v[i] / ||v||)``. The code range is
symmetric [-127, 127] (-128 is never produced) so negating a vector negates its
codes. Rounding is half-away-from-zero, fixed so index files are bit-exact
across rebuilds.

All types are immutable after construction and all operations are pure.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NonFinite

# One quantization step of the unit direction, i.e. 1 code unit.
QUANT_STEP = 1.0 / 127.0


class SimilarityKind(enum.Enum):
    """Which relationship a similarity evaluation measures."""

    USER_USER = "user_user"
    USER_AD = "user_ad"


@dataclass(frozen=True)
class SourceId:
    """Identity of an embedding source: unique id, display name, dimension."""

    id: int
    name: str
    dimension: int

    def __post_init__(self) -> None:
        if self.id < 0:
            raise ValueError(f"source id must be >= 0, got {self.id}")
        if self.dimension < 1:
            raise ValueError(f"source dimension must be >= 1, got {self.dimension}")


@dataclass(frozen=True)
class QuantizedEmbedding:
    """NormInt8-quantized vector: float32 norm plus int8 direction codes."""

    norm: float
    codes: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        codes = np.asarray(self.codes, dtype=np.int8)
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "norm", float(self.norm))
        if self.norm < 0 or not math.isfinite(self.norm):
            raise NonFinite(f"quantized norm must be finite and >= 0, got {self.norm}")

    @property
    def dim(self) -> int:
        return int(self.codes.shape[0])


def as_embedding(values, *, name: str = "embedding") -> np.ndarray:
    """Validate and return a 1-D float32 embedding array.

    Raises NonFinite if any component is NaN or infinite.
    """
    v = np.asarray(values, dtype=np.float32)
    if v.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFinite(f"{name} contains NaN or Inf")
    return v


def _check_same_dim(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[0] != b.shape[0]:
        raise DimensionMismatch(
            f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}"
        )


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two embeddings, in [-1, 1].

    A zero-norm operand yields 0.0 rather than an error: history gaps produce
    all-zero daily embeddings and must not poison retrieval.
    """
    av = as_embedding(a, name="a").astype(np.float64)
    bv = as_embedding(b, name="b").astype(np.float64)
    _check_same_dim(av, bv)
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        return 0.0
    sim = float(np.dot(av, bv)) / (na * nb)
    return min(1.0, max(-1.0, sim))


def quantize_batch(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quantize each row of ``matrix``; returns (norms float32, codes int8).

    Zero rows map to norm 0 with all-zero codes and round-trip exactly.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFinite("matrix contains NaN or Inf")
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    safe = np.where(norms > 0.0, norms, 1.0)
    scaled = 127.0 * m / safe[:, None]
    # Round half away from zero; ties like 76.5 move outward deterministically.
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    codes = np.clip(rounded, -127, 127).astype(np.int8)
    codes[norms == 0.0] = 0
    return norms.astype(np.float32), codes


def quantize_norm_int8(v) -> QuantizedEmbedding:
    """Quantize one embedding with NormInt8."""
    vv = as_embedding(v, name="v")
    norms, codes = quantize_batch(vv[None, :])
    return QuantizedEmbedding(norm=float(norms[0]), codes=codes[0])


def dequantize_batch(norms: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quantize_batch`: float32 matrix ``norm * codes / 127``."""
    n = np.asarray(norms, dtype=np.float32)
    c = np.asarray(codes, dtype=np.int8)
    return (n[:, None] * c.astype(np.float32)) / np.float32(127.0)


def dequantize(q: QuantizedEmbedding) -> np.ndarray:
    """Reconstruct the float32 embedding ``q.norm * q.codes / 127``."""
    return dequantize_batch(np.asarray([q.norm]), q.codes[None, :])[0]


def code_norm(codes: np.ndarray) -> float:
    """L2 norm of an int8 code vector, computed exactly in integers first."""
    c = np.asarray(codes, dtype=np.int64)
    return math.sqrt(float(np.dot(c, c)))


def quantized_cosine(a: QuantizedEmbedding, b: QuantizedEmbedding) -> float:
    """Cosine similarity evaluated on integer codes.

    The stored norms cancel out of the cosine, so the value reduces to the
    cosine of the two code vectors: an exact integer dot product with a single
    scalar division. Matches ``cosine_similarity(dequantize(a), dequantize(b))``
    to within 1e-6.
    """
    if a.dim != b.dim:
        raise DimensionMismatch(f"dimension mismatch: {a.dim} vs {b.dim}")
    na = code_norm(a.codes)
    nb = code_norm(b.codes)
    if na == 0.0 or nb == 0.0:
        return 0.0
    ip = float(np.dot(a.codes.astype(np.int64), b.codes.astype(np.int64)))
    sim = ip / (na * nb)
    return min(1.0, max(-1.0, sim))
