"""Mutual representation objective: cross, modality and similarity losses.

Every loss has a companion ``*_backward`` returning the exact gradient with
respect to its array inputs, used by the trainer's reverse pass.
"""
from typing import Tuple

import numpy as np

from sture.errors import ContractViolation, DimensionError


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distances between the rows of ``a`` and ``b``."""
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"Feature dimensions differ: {a.shape[-1]} vs {b.shape[-1]}")
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def distance_backward(a: np.ndarray, b: np.ndarray, dist: np.ndarray, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of sum(grad * dist) with respect to ``a`` and ``b``.

    Zero distances get a zero subgradient.
    """
    safe = np.where(dist > 0, dist, 1.0)
    weights = np.where(dist > 0, grad / safe, 0.0)
    grad_a = weights.sum(axis=1)[:, None] * a - weights @ b
    grad_b = weights.sum(axis=0)[:, None] * b - weights.T @ a
    return grad_a, grad_b


def seq_cross_matrix(pooled: np.ndarray, T: int) -> np.ndarray:
    """(N*T, N*T) matrix whose (i, j) tile is filled with |f_Si - f_Sj|."""
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.ndim != 2 or pooled.shape[0] < 1:
        raise ContractViolation(f"seq_cross_matrix needs N >= 1 pooled features, got shape {pooled.shape}")
    distances = pairwise_distances(pooled, pooled)
    return np.kron(distances, np.ones((T, T)))


def seq_cross_backward(pooled: np.ndarray, T: int, grad_matrix: np.ndarray) -> np.ndarray:
    n = pooled.shape[0]
    grad_tiles = grad_matrix.reshape(n, T, n, T).sum(axis=(1, 3))
    distances = pairwise_distances(pooled, pooled)
    grad_a, grad_b = distance_backward(pooled, pooled, distances, grad_tiles)
    return grad_a + grad_b


def det_cross_matrix(flat: np.ndarray) -> np.ndarray:
    """(N*T, N*T) matrix of distances between detection features."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.ndim != 2 or flat.shape[0] < 1:
        raise ContractViolation(f"det_cross_matrix needs at least one feature, got shape {flat.shape}")
    return pairwise_distances(flat, flat)


def det_cross_backward(flat: np.ndarray, grad_matrix: np.ndarray) -> np.ndarray:
    distances = pairwise_distances(flat, flat)
    grad_a, grad_b = distance_backward(flat, flat, distances, grad_matrix)
    return grad_a + grad_b


def _cross_scale(shape: Tuple[int, int], rms: bool) -> float:
    cells = shape[0] * shape[1]
    return 1.0 / np.sqrt(cells) if rms else 1.0 / cells


def cross_loss(m_seq: np.ndarray, m_det: np.ndarray, rms: bool = False) -> float:
    """Scaled Frobenius distance between the two cross-sample matrices.

    The default scale is 1/(G*H) outside the root; ``rms`` uses 1/sqrt(G*H).
    """
    if m_seq.shape != m_det.shape:
        raise DimensionError(f"Cross matrices differ in shape: {m_seq.shape} vs {m_det.shape}")
    diff = m_seq - m_det
    return float(_cross_scale(diff.shape, rms) * np.sqrt((diff * diff).sum()))


def cross_loss_backward(m_seq: np.ndarray, m_det: np.ndarray, rms: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    diff = m_seq - m_det
    norm = np.sqrt((diff * diff).sum())
    if norm == 0:
        zeros = np.zeros_like(diff)
        return zeros, zeros.copy()
    grad = _cross_scale(diff.shape, rms) * diff / norm
    return grad, -grad


def triplet_hinge(hardest_positive, hardest_negative, margin: float):
    return np.maximum(0.0, hardest_positive - hardest_negative + margin)


def _hardest(dist: np.ndarray, positive: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row index of the farthest positive and the nearest negative."""
    if not (~positive).any(axis=1).all():
        raise ContractViolation(
            "Every anchor needs a negative: sample at least 2 identities per batch (P >= 2)"
        )
    pos_idx = np.argmax(np.where(positive, dist, -np.inf), axis=1)
    neg_idx = np.argmin(np.where(positive, np.inf, dist), axis=1)
    return pos_idx, neg_idx


def _check_batch(pooled: np.ndarray, flat: np.ndarray, seq_labels: np.ndarray, det_labels: np.ndarray) -> None:
    if pooled.shape[1] != flat.shape[1]:
        raise DimensionError(f"Sequence and detection features differ in D: {pooled.shape[1]} vs {flat.shape[1]}")
    if len(seq_labels) != pooled.shape[0] or len(det_labels) != flat.shape[0]:
        raise ContractViolation("Labels must align with feature rows")
    if len(np.unique(seq_labels)) < 2:
        raise ContractViolation(
            "Modality loss needs at least 2 identities in the batch (sample P >= 2 identities)"
        )


class _ModalityBlocks:
    """The four hardest-mining blocks shared by the loss and its gradient."""

    def __init__(self, pooled, flat, seq_labels, det_labels, margin):
        self.pooled = np.asarray(pooled, dtype=np.float64)
        self.flat = np.asarray(flat, dtype=np.float64)
        seq_labels = np.asarray(seq_labels)
        det_labels = np.asarray(det_labels)
        _check_batch(self.pooled, self.flat, seq_labels, det_labels)
        self.margin = margin
        self.anchors = self.pooled.shape[0] + self.flat.shape[0]

        self.e_sd = pairwise_distances(self.pooled, self.flat)
        self.e_ss = pairwise_distances(self.pooled, self.pooled)
        self.e_dd = pairwise_distances(self.flat, self.flat)
        same_sd = seq_labels[:, None] == det_labels[None, :]
        same_ss = seq_labels[:, None] == seq_labels[None, :]
        same_dd = det_labels[:, None] == det_labels[None, :]

        # (distance matrix, positive mask) per direction
        self.blocks = {
            "seq_det": (self.e_sd, same_sd),
            "det_seq": (self.e_sd.T, same_sd.T),
            "seq_seq": (self.e_ss, same_ss),
            "det_det": (self.e_dd, same_dd),
        }
        self.mined = {}
        for name, (dist, positive) in self.blocks.items():
            pos_idx, neg_idx = _hardest(dist, positive)
            rows = np.arange(dist.shape[0])
            hinge = triplet_hinge(dist[rows, pos_idx], dist[rows, neg_idx], margin)
            self.mined[name] = (pos_idx, neg_idx, hinge)

    def term(self, *names: str) -> float:
        return float(sum(self.mined[name][2].sum() for name in names) / self.anchors)

    def grad_block(self, name: str) -> np.ndarray:
        dist, _ = self.blocks[name]
        pos_idx, neg_idx, hinge = self.mined[name]
        active = (hinge > 0).astype(np.float64) / self.anchors
        rows = np.arange(dist.shape[0])
        grad = np.zeros_like(dist)
        np.add.at(grad, (rows, pos_idx), active)
        np.add.at(grad, (rows, neg_idx), -active)
        return grad


def modality_terms(pooled, flat, seq_labels, det_labels, margin: float = 0.3) -> Tuple[float, float]:
    """(L_cross, L_within), each averaged over all N + N*T anchors."""
    blocks = _ModalityBlocks(pooled, flat, seq_labels, det_labels, margin)
    return blocks.term("seq_det", "det_seq"), blocks.term("seq_seq", "det_det")


def modality_loss(pooled, flat, seq_labels, det_labels, margin: float = 0.3) -> float:
    l_cross, l_within = modality_terms(pooled, flat, seq_labels, det_labels, margin)
    return l_cross + l_within


def modality_loss_backward(pooled, flat, seq_labels, det_labels, margin: float = 0.3) -> Tuple[np.ndarray, np.ndarray]:
    blocks = _ModalityBlocks(pooled, flat, seq_labels, det_labels, margin)
    grad_sd = blocks.grad_block("seq_det") + blocks.grad_block("det_seq").T
    g_pooled, g_flat = distance_backward(blocks.pooled, blocks.flat, blocks.e_sd, grad_sd)
    g_a, g_b = distance_backward(blocks.pooled, blocks.pooled, blocks.e_ss, blocks.grad_block("seq_seq"))
    g_pooled += g_a + g_b
    g_a, g_b = distance_backward(blocks.flat, blocks.flat, blocks.e_dd, blocks.grad_block("det_det"))
    g_flat += g_a + g_b
    return g_pooled, g_flat


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> None:
    if logits.ndim != 2 or logits.shape[0] != len(labels):
        raise ContractViolation(f"Logits of shape {logits.shape} do not align with {len(labels)} labels")
    if len(labels) and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractViolation(f"Label out of range for {logits.shape[1]} classes")


def similarity_loss(logits: np.ndarray, labels) -> float:
    """Mean cross entropy of the true class."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_labels(logits, labels)
    log_probs = _log_softmax(logits)
    return float(-log_probs[np.arange(len(labels)), labels].mean())


def similarity_loss_backward(logits: np.ndarray, labels) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    grad = np.exp(_log_softmax(logits))
    grad[np.arange(len(labels)), labels] -= 1.0
    return grad / len(labels)


def total_loss(l_c: float, l_m: float, l_s: float) -> float:
    return l_c + l_m + l_s
