"""Shared vector math: embeddings, the [0,1] cosine distance, modality weights.

Everything here is a pure function over immutable inputs. Loss and gradient
arithmetic elsewhere runs in float64; these helpers follow the same rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Modality keys in the fixed concatenation order used by the fusion stage:
# point cloud, image views, structure, relationships, attributes.
MODALITY_KEYS = ("P", "I", "S", "R", "A")

NORM_EPS = 1e-12


class ZeroNormError(ValueError):
    """A vector with (near-)zero L2 norm reached a cosine operation.

    Zero embeddings indicate an upstream bug and are never silently clamped.
    """


@dataclass
class Embedding:
    """Fixed-length real vector with an optional unit-norm flag."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size == 0:
            raise ValueError("embedding values must be a non-empty 1-d vector")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("embedding contains non-finite entries")
        if self.normalized:
            norm = float(np.linalg.norm(self.values))
            if abs(norm - 1.0) > 1e-6:
                raise ValueError(f"normalized flag set but L2 norm is {norm:.9g}")

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass
class ModalityWeights:
    """Trainable per-modality logits and the derived simplex weights."""

    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 1:
            raise ValueError("modality logits must be a 1-d vector")

    @property
    def weights(self) -> np.ndarray:
        return modality_softmax(self)


def _vector(x) -> np.ndarray:
    if isinstance(x, Embedding):
        return x.values
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("expected a 1-d vector")
    return v


def cosine_distance(a, b) -> float:
    """Cosine distance normalized to [0,1]: (1 - cos(a, b)) / 2.

    Symmetric, zero for colinear vectors, one for antipodal vectors.
    Raises on dimension mismatch and on zero-norm inputs.
    """
    va, vb = _vector(a), _vector(b)
    if va.shape[0] != vb.shape[0]:
        raise ValueError(f"dimension mismatch: {va.shape[0]} vs {vb.shape[0]}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise ZeroNormError("cosine distance of a zero-norm vector is undefined")
    cos = float(np.dot(va, vb)) / (na * nb)
    d = 0.5 * (1.0 - cos)
    # cos may overshoot [-1, 1] by a few ulp; clip to keep the contract tight
    return min(max(d, 0.0), 1.0)


def l2_normalize(a) -> Embedding:
    """Scale a vector to unit L2 norm; direction is preserved."""
    v = _vector(a)
    norm = float(np.linalg.norm(v))
    if norm <= NORM_EPS:
        raise ZeroNormError("cannot normalize a zero-norm vector")
    return Embedding(v / norm, normalized=True)


def modality_softmax(logits) -> np.ndarray:
    """Softmax over modality logits; positive entries summing to 1."""
    z = np.asarray(getattr(logits, "logits", logits), dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("logits must be a non-empty 1-d vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite modality logit")
    shifted = z - z.max()
    w = np.exp(shifted)
    return w / w.sum()
