"""Feature vectors, temporal pooling and pluggable embedders."""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from sture.errors import ContractViolation, DimensionError
from sture.geometry import BoundingBox

logger = logging.getLogger(__name__)

# a FeatureVector is a 1-D float64 array of length D
FeatureVector = np.ndarray


@dataclass
class Detection:
    """A detection as seen by the tracker."""

    index: int
    frame: int
    box: BoundingBox
    confidence: float = 1.0
    identity: int = -1


@dataclass
class SequenceFeature:
    per_frame: np.ndarray
    pooled: FeatureVector


def tap_pool(per_frame) -> FeatureVector:
    """Temporal average pooling over the frame axis."""
    stack = np.asarray(per_frame, dtype=np.float64)
    if stack.ndim != 2 or stack.shape[0] == 0:
        raise ContractViolation(f"tap_pool needs T >= 1 frames, got shape {stack.shape}")
    return stack.mean(axis=0)


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=-1, keepdims=True)


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def attention_weights(frames: np.ndarray) -> np.ndarray:
    """Row-softmax of scaled dot products; works on (T, D) or (N, T, D)."""
    dim = frames.shape[-1]
    scores = np.matmul(frames, _swap(frames)) / np.sqrt(dim)
    return _softmax_rows(scores)


def temporal_attention_pool(per_frame) -> np.ndarray:
    """Dot-product self attention over frames with a residual connection.

    Accepts (T, D) or a batch (N, T, D); the shape is preserved.
    """
    frames = np.asarray(per_frame, dtype=np.float64)
    if frames.ndim < 2 or frames.shape[-2] == 0:
        raise ContractViolation(f"temporal_attention_pool needs T >= 1 frames, got shape {frames.shape}")
    return np.matmul(attention_weights(frames), frames) + frames


def temporal_attention_backward(frames: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of ``temporal_attention_pool`` with respect to its input."""
    dim = frames.shape[-1]
    weights = attention_weights(frames)
    grad = grad_out + np.matmul(_swap(weights), grad_out)
    grad_weights = np.matmul(grad_out, _swap(frames))
    grad_scores = weights * (grad_weights - (grad_weights * weights).sum(axis=-1, keepdims=True))
    grad += np.matmul(grad_scores + _swap(grad_scores), frames) / np.sqrt(dim)
    return grad


def pool_sequence(per_frame, attention: bool = True) -> FeatureVector:
    frames = np.asarray(per_frame, dtype=np.float64)
    if attention:
        frames = temporal_attention_pool(frames)
    return tap_pool(frames)


class Embedder(ABC):
    """Maps a detection to a D-dimensional feature."""

    dim: int

    @abstractmethod
    def embed(self, detection: Detection) -> FeatureVector:
        ...


class FileEmbedder(Embedder):
    """Rows of a precomputed EMB1 matrix, indexed by detection order."""

    def __init__(self, matrix: np.ndarray):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.dim = self.matrix.shape[1]

    def embed(self, detection: Detection) -> FeatureVector:
        if not 0 <= detection.index < self.matrix.shape[0]:
            raise DimensionError(
                f"Detection index {detection.index} outside embedding matrix with {self.matrix.shape[0]} rows"
            )
        return self.matrix[detection.index].copy()


class OracleEmbedder(Embedder):
    """One-hot identity code plus seeded Gaussian noise."""

    def __init__(self, identity_count: int, dim: int, noise: float = 0.0, seed: int = 0):
        if identity_count > dim:
            raise DimensionError(f"{identity_count} identities do not fit one-hot codes of dimension {dim}")
        self.identity_count = identity_count
        self.dim = dim
        self.noise = noise
        self.seed = seed

    def embed(self, detection: Detection) -> FeatureVector:
        vector = np.zeros(self.dim)
        if 0 <= detection.identity < self.identity_count:
            vector[detection.identity] = 1.0
        if self.noise > 0:
            rng = np.random.default_rng([self.seed, detection.index])
            vector += self.noise * rng.standard_normal(self.dim)
        return vector


def embed_detection(embedder: Embedder, detection: Detection, dim: Optional[int] = None) -> FeatureVector:
    vector = embedder.embed(detection)
    expected = embedder.dim if dim is None else dim
    if vector.shape != (expected,):
        raise DimensionError(f"Embedding has shape {vector.shape}, run configuration expects D={expected}")
    return vector


def embed_sequence(embedder: Embedder, frames: Sequence[Detection], attention: bool = True) -> SequenceFeature:
    """Per-frame embeddings, attention pooling, then TAP."""
    if not frames:
        raise ContractViolation("embed_sequence needs at least one frame")
    per_frame = np.stack([embed_detection(embedder, det) for det in frames])
    return SequenceFeature(per_frame=per_frame, pooled=pool_sequence(per_frame, attention))
