"""Gating, affinity scoring and assignment of drifting tracks to detections."""
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from sture.errors import ContractViolation, DimensionError
from sture.features import pool_sequence
from sture.geometry import BoundingBox, iou

logger = logging.getLogger(__name__)

MATCHING_METHODS = ("greedy", "hungarian")


@dataclass
class Candidate:
    """A detection admitted by a drifting track's gate."""

    index: int
    box: BoundingBox
    embedding: Optional[np.ndarray]
    gate_distance: float


@dataclass
class AffinityTable:
    """Affinities between drifting tracks (rows) and detections (columns).

    Pairs that did not pass the row's gate hold 0.0.
    """

    track_ids: List[int]
    detection_indices: List[int]
    values: np.ndarray

    @classmethod
    def empty(cls) -> "AffinityTable":
        return cls([], [], np.zeros((0, 0)))

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.track_ids), len(self.detection_indices))
        if not np.isfinite(self.values).all():
            raise ContractViolation("Affinity table holds non-finite entries")


def gate_candidates(predicted_box: BoundingBox, boxes: Sequence[BoundingBox], tracked_boxes: Sequence[BoundingBox],
                    tau_d: float, tau_o: float, embeddings: Optional[Sequence[np.ndarray]] = None,
                    indices: Optional[Sequence[int]] = None) -> List[Candidate]:
    """Detections near the predicted center that no tracked object overlaps above ``tau_o``.

    The distance limit is ``tau_d`` times the diagonal of the predicted box.
    """
    px, py = predicted_box.center
    limit = tau_d * predicted_box.diagonal
    candidates = []
    for position, box in enumerate(boxes):
        cx, cy = box.center
        distance = math.hypot(cx - px, cy - py)
        if distance > limit:
            continue
        if any(iou(box, other) > tau_o for other in tracked_boxes):
            continue
        index = indices[position] if indices is not None else position
        embedding = embeddings[position] if embeddings is not None else None
        candidates.append(Candidate(index, box, embedding, distance))
    return candidates


class AffinityScorer(ABC):
    """Scores a candidate embedding against a track's embedding history."""

    def __init__(self, T: int, attention: bool = True):
        self.T = T
        self.attention = attention

    def pooled_history(self, history: Sequence[np.ndarray]) -> np.ndarray:
        if len(history) == 0:
            raise ContractViolation("Cannot score against an empty embedding history")
        recent = np.stack(list(history)[-self.T:])
        return pool_sequence(recent, self.attention)

    @abstractmethod
    def score(self, history: Sequence[np.ndarray], candidate: np.ndarray) -> float:
        ...


class HeadScorer(AffinityScorer):
    """Match probability from a trained affinity head."""

    def __init__(self, head, T: int, attention: bool = True):
        super().__init__(T, attention)
        self.head = head

    def score(self, history: Sequence[np.ndarray], candidate: np.ndarray) -> float:
        pooled = self.pooled_history(history)
        return float(self.head.match_probability(pooled, np.asarray(candidate, dtype=np.float64))[0])


class CosineScorer(AffinityScorer):
    """Cosine similarity of the pooled history and the candidate, clipped to [0, 1]."""

    def score(self, history: Sequence[np.ndarray], candidate: np.ndarray) -> float:
        pooled = self.pooled_history(history)
        candidate = np.asarray(candidate, dtype=np.float64)
        if pooled.shape != candidate.shape:
            raise DimensionError(f"History has D={pooled.shape[-1]}, candidate has D={candidate.shape[-1]}")
        norm = np.linalg.norm(pooled) * np.linalg.norm(candidate)
        if norm == 0:
            return 0.0
        return float(np.clip(pooled @ candidate / norm, 0.0, 1.0))


def score_affinity(history: Sequence[np.ndarray], candidate: np.ndarray, scorer: AffinityScorer) -> float:
    return scorer.score(history, candidate)


def build_table(histories: Dict[int, Sequence[np.ndarray]], gated: Dict[int, List[Candidate]],
                scorer: AffinityScorer) -> AffinityTable:
    """Score every gated (track, candidate) pair."""
    columns = sorted({c.index for candidates in gated.values() for c in candidates})
    if not columns:
        return AffinityTable.empty()
    track_ids = sorted(gated)
    position = {index: j for j, index in enumerate(columns)}
    values = np.zeros((len(track_ids), len(columns)))
    for i, track_id in enumerate(track_ids):
        for candidate in gated[track_id]:
            values[i, position[candidate.index]] = score_affinity(histories[track_id], candidate.embedding, scorer)
    return AffinityTable(track_ids, columns, values)


def assign(table: AffinityTable, tau_a: float, method: str = "greedy") -> Dict[int, int]:
    """Map track id -> detection index for pairs with affinity >= ``tau_a``."""
    if method == "hungarian":
        return _assign_hungarian(table, tau_a)
    if method != "greedy":
        raise ContractViolation(f"Unknown matching method '{method}', expected one of {MATCHING_METHODS}")
    entries = []
    for i, track_id in enumerate(table.track_ids):
        for j, det_index in enumerate(table.detection_indices):
            value = table.values[i, j]
            if value >= tau_a:
                entries.append((-value, track_id, det_index))
    entries.sort()
    matches: Dict[int, int] = {}
    taken = set()
    for _, track_id, det_index in entries:
        if track_id in matches or det_index in taken:
            continue
        matches[track_id] = det_index
        taken.add(det_index)
    return matches


def _assign_hungarian(table: AffinityTable, tau_a: float) -> Dict[int, int]:
    if table.values.size == 0:
        return {}
    valid = table.values >= tau_a
    # invalid pairs cost more than any feasible assignment can save
    cost = np.where(valid, -table.values, float(table.values.size + 1))
    rows, cols = linear_sum_assignment(cost)
    return {
        table.track_ids[r]: table.detection_indices[c]
        for r, c in zip(rows, cols)
        if valid[r, c]
    }
