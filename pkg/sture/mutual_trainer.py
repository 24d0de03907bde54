"""Desk-scale mutual representation trainer.

Two toy perceptron encoders (detection and sequence), an affinity head and
an optional identity classifier are trained with the cross, modality and
similarity losses. Gradients are computed by hand in reverse mode; the
sequence branch can be shielded from the cross loss (selective
back-propagation).
"""
import copy
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from sture.config import DatasetSpec, TrainConfig
from sture.errors import ContractViolation, DimensionError, DivergenceError, ParseError, SamplingError
from sture.features import temporal_attention_backward, temporal_attention_pool
from sture import sture_loss

logger = logging.getLogger(__name__)

LOSS_TERMS = ("cross", "modality", "similarity")


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class Perceptron:
    """Fully connected layers with rectifiers between them and a linear output."""

    def __init__(self, sizes: Sequence[int], rng: Optional[np.random.Generator] = None):
        self.sizes = [int(s) for s in sizes]
        self.params: Dict[str, np.ndarray] = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if rng is None:
                weight = np.zeros((fan_in, fan_out))
            else:
                weight = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            self.params[f"W{i}"] = weight
            self.params[f"b{i}"] = np.zeros(fan_out)

    @property
    def layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, inputs: np.ndarray) -> Tuple[np.ndarray, list]:
        cache = []
        hidden = inputs
        for i in range(self.layers):
            pre = hidden @ self.params[f"W{i}"] + self.params[f"b{i}"]
            cache.append((hidden, pre))
            hidden = np.maximum(pre, 0.0) if i < self.layers - 1 else pre
        return hidden, cache

    def backward(self, cache: list, grad_out: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        """Parameter gradients and the gradient with respect to the input."""
        grads = {}
        grad = grad_out
        for i in reversed(range(self.layers)):
            hidden, pre = cache[i]
            if i < self.layers - 1:
                grad = grad * (pre > 0)
            grads[f"W{i}"] = hidden.T @ grad
            grads[f"b{i}"] = grad.sum(axis=0)
            grad = grad @ self.params[f"W{i}"].T
        return grads, grad

    def encode(self, inputs: np.ndarray) -> np.ndarray:
        return self.forward(np.asarray(inputs, dtype=np.float64))[0]


class ToyEncoder(Perceptron):
    """input -> hidden (rectified) -> D."""

    def __init__(self, input_dim: int, hidden: int, dim: int, rng: Optional[np.random.Generator] = None):
        super().__init__((input_dim, hidden, dim), rng)


class SequenceEncoder:
    """Shared per-frame encoder, temporal attention, then temporal average pooling."""

    def __init__(self, frame_encoder: ToyEncoder, attention: bool = True):
        self.frame_encoder = frame_encoder
        self.attention = attention

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return self.frame_encoder.params

    @property
    def output_dim(self) -> int:
        return self.frame_encoder.output_dim

    def forward(self, sequences: np.ndarray):
        n, t, width = sequences.shape
        flat, frame_cache = self.frame_encoder.forward(sequences.reshape(n * t, width))
        frames = flat.reshape(n, t, -1)
        attended = temporal_attention_pool(frames) if self.attention else frames
        return attended.mean(axis=1), (frames, frame_cache)

    def backward(self, cache, grad_pooled: np.ndarray) -> Dict[str, np.ndarray]:
        frames, frame_cache = cache
        n, t, dim = frames.shape
        grad_frames = np.repeat(grad_pooled[:, None, :] / t, t, axis=1)
        if self.attention:
            grad_frames = temporal_attention_backward(frames, grad_frames)
        grads, _ = self.frame_encoder.backward(frame_cache, grad_frames.reshape(n * t, dim))
        return grads

    def encode(self, sequences: np.ndarray) -> np.ndarray:
        return self.forward(np.asarray(sequences, dtype=np.float64))[0]


class AffinityHead(Perceptron):
    """Match / non-match classifier over [f_S, d] concatenations.

    Layer input widths are 2D, 2D/16 and 32 (4096, 256, 32 at D=2048).
    """

    def __init__(self, dim: int, rng: Optional[np.random.Generator] = None):
        super().__init__(self.widths(dim), rng)
        self.dim = dim

    @staticmethod
    def widths(dim: int) -> Tuple[int, int, int, int]:
        return (2 * dim, max(1, (2 * dim) // 16), 32, 2)

    def match_probability(self, pooled: np.ndarray, candidates: np.ndarray) -> np.ndarray:
        """Softmax probability of the match class for each (pooled, candidate) row pair."""
        pooled = np.atleast_2d(pooled)
        candidates = np.atleast_2d(candidates)
        if pooled.shape[1] != self.dim or candidates.shape[1] != self.dim:
            raise DimensionError(
                f"Affinity head expects D={self.dim}, got {pooled.shape[1]} and {candidates.shape[1]}"
            )
        logits = self.encode(np.concatenate([pooled, candidates], axis=1))
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        return probs[:, 1]


class MutualModel:
    """Detection encoder, sequence encoder and classifier heads."""

    def __init__(self, det_encoder: ToyEncoder, seq_encoder: SequenceEncoder, head: AffinityHead,
                 id_head: Optional[Perceptron] = None):
        self.det_encoder = det_encoder
        self.seq_encoder = seq_encoder
        self.head = head
        self.id_head = id_head

    @classmethod
    def initialize(cls, input_dim: int, config: TrainConfig, identity_count: int,
                   rng: np.random.Generator) -> "MutualModel":
        det_encoder = ToyEncoder(input_dim, config.hidden, config.D, rng)
        seq_encoder = SequenceEncoder(ToyEncoder(input_dim, config.hidden, config.D, rng), config.attention)
        if config.attention:
            # the residual doubles the pooled output; start on the detection scale
            seq_encoder.params["W1"] *= 0.5
        head = AffinityHead(config.D, rng)
        id_head = Perceptron((config.D, identity_count), rng) if config.identity_loss else None
        return cls(det_encoder, seq_encoder, head, id_head)

    @property
    def input_dim(self) -> int:
        return self.det_encoder.input_dim

    @property
    def dim(self) -> int:
        return self.det_encoder.output_dim

    def groups(self) -> Dict[str, Dict[str, np.ndarray]]:
        groups = {"det": self.det_encoder.params, "seq": self.seq_encoder.params, "head": self.head.params}
        if self.id_head is not None:
            groups["id"] = self.id_head.params
        return groups

    def parameters(self) -> Dict[str, np.ndarray]:
        """Flat view ``group.name -> array``; arrays are shared, not copied."""
        return {f"{group}.{name}": array for group, params in self.groups().items() for name, array in params.items()}

    def copy(self) -> "MutualModel":
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass
class Tracklet:
    identity: int
    frames: np.ndarray


@dataclass
class TrackletDataset:
    tracklets: List[Tracklet]
    input_dim: int

    @property
    def identities(self) -> List[int]:
        return sorted({t.identity for t in self.tracklets})

    def by_identity(self) -> Dict[int, List[Tracklet]]:
        groups: Dict[int, List[Tracklet]] = {}
        for tracklet in self.tracklets:
            groups.setdefault(tracklet.identity, []).append(tracklet)
        return groups


_SPLIT_STREAMS = {"train": 1, "probe": 2}


def generate_dataset(spec: DatasetSpec, split: str = "train") -> TrackletDataset:
    """Synthetic tracklets: identity signal in the first dims, clutter in the rest."""
    prototypes = np.random.default_rng([spec.seed, 0]).standard_normal((spec.identities, spec.signal_dim))
    prototypes *= spec.separation
    rng = np.random.default_rng([spec.seed, _SPLIT_STREAMS[split]])
    tracklets = []
    for identity in range(spec.identities):
        for _ in range(spec.sequences):
            length = int(rng.integers(spec.min_frames, spec.frames + 1))
            frames = np.empty((length, spec.input_dim))
            frames[:, :spec.signal_dim] = prototypes[identity] + spec.noise * rng.standard_normal((length, spec.signal_dim))
            frames[:, spec.signal_dim:] = spec.clutter * rng.standard_normal((length, spec.input_dim - spec.signal_dim))
            tracklets.append(Tracklet(identity, frames))
    return TrackletDataset(tracklets, spec.input_dim)


@dataclass
class SampledBatch:
    """P identities x Q sequences x T frames, plus the flattened detection view."""

    sequences: np.ndarray
    detections: np.ndarray
    seq_labels: np.ndarray
    det_labels: np.ndarray
    pairs: np.ndarray
    P: int
    Q: int
    T: int
    substituted: Optional[np.ndarray] = None

    @property
    def N(self) -> int:
        return self.sequences.shape[0]


def fit_length(frames: np.ndarray, T: int, M: int, rng: np.random.Generator) -> np.ndarray:
    """T frames from the M most recent; short histories are padded by uniform resampling."""
    preserved = frames[-M:]
    count = preserved.shape[0]
    if count >= T:
        start = int(rng.integers(0, count - T + 1))
        return preserved[start:start + T]
    extra = rng.integers(0, count, size=T - count)
    index = np.sort(np.concatenate([np.arange(count), extra]))
    return preserved[index]


def build_pairs(seq_labels: np.ndarray, det_labels: np.ndarray, T: int, rng: np.random.Generator) -> np.ndarray:
    """(sequence, detection, match) rows: own detections vs. as many other-identity ones."""
    rows = []
    for n, label in enumerate(seq_labels):
        own = np.arange(n * T, (n + 1) * T)
        others = np.flatnonzero(det_labels != label)
        negatives = rng.choice(others, size=T, replace=len(others) < T)
        rows.extend((n, int(d), 1) for d in own)
        rows.extend((n, int(d), 0) for d in negatives)
    return np.array(rows, dtype=np.int64)


def sample_batch(dataset: TrackletDataset, P: int, Q: int, T: int, M: int,
                 rng: np.random.Generator) -> SampledBatch:
    groups = dataset.by_identity()
    identities = dataset.identities
    if len(identities) < 2:
        raise SamplingError(f"Need at least 2 identities to sample negatives, dataset has {len(identities)}")
    chosen = rng.choice(identities, size=min(P, len(identities)), replace=False)
    sequences, labels = [], []
    for identity in chosen:
        pool = groups[int(identity)]
        for _ in range(Q):
            tracklet = pool[int(rng.integers(len(pool)))]
            sequences.append(fit_length(tracklet.frames, T, M, rng))
            labels.append(int(identity))
    sequences = np.stack(sequences)
    seq_labels = np.array(labels, dtype=np.int64)
    det_labels = np.repeat(seq_labels, T)
    detections = sequences.reshape(-1, sequences.shape[-1]).copy()
    pairs = build_pairs(seq_labels, det_labels, T, rng)
    return SampledBatch(sequences, detections, seq_labels, det_labels, pairs, len(chosen), Q, T,
                        np.zeros(sequences.shape[:2], dtype=bool))


def augment(batch: SampledBatch, dataset: TrackletDataset, noise_rate: float,
            rng: np.random.Generator) -> SampledBatch:
    """Replace sequence slots by detections of other identities; labels are kept."""
    mask = rng.random(batch.sequences.shape[:2]) < noise_rate
    if not mask.any():
        return batch
    groups = dataset.by_identity()
    sequences = batch.sequences.copy()
    for n, t in zip(*np.nonzero(mask)):
        others = [i for i in groups if i != batch.seq_labels[n]]
        pool = groups[others[int(rng.integers(len(others)))]]
        tracklet = pool[int(rng.integers(len(pool)))]
        sequences[n, t] = tracklet.frames[int(rng.integers(tracklet.frames.shape[0]))]
    return SampledBatch(sequences, batch.detections, batch.seq_labels, batch.det_labels, batch.pairs,
                        batch.P, batch.Q, batch.T, batch.substituted | mask)


# ---------------------------------------------------------------------------
# Losses and gradients
# ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    cross: float
    modality: float
    similarity: float

    @property
    def total(self) -> float:
        return sture_loss.total_loss(self.cross, self.modality, self.similarity)

    def finite(self) -> bool:
        return bool(np.isfinite([self.cross, self.modality, self.similarity]).all())


@dataclass
class Intermediates:
    model: MutualModel
    batch: SampledBatch
    config: TrainConfig
    det_feats: np.ndarray
    det_cache: list
    pooled: np.ndarray
    seq_cache: tuple
    m_seq: np.ndarray
    m_det: np.ndarray
    head_cache: list
    logits: np.ndarray
    id_cache: Optional[list] = None
    id_logits: Optional[np.ndarray] = None


def forward_losses(batch: SampledBatch, model: MutualModel, config: TrainConfig) -> Tuple[LossBreakdown, Intermediates]:
    det_feats, det_cache = model.det_encoder.forward(batch.detections)
    pooled, seq_cache = model.seq_encoder.forward(batch.sequences)

    m_seq = sture_loss.seq_cross_matrix(pooled, batch.T)
    m_det = sture_loss.det_cross_matrix(det_feats)
    l_c = sture_loss.cross_loss(m_seq, m_det, rms=config.rms_cross_loss)
    l_m = sture_loss.modality_loss(pooled, det_feats, batch.seq_labels, batch.det_labels, config.margin)

    pair_inputs = np.concatenate([pooled[batch.pairs[:, 0]], det_feats[batch.pairs[:, 1]]], axis=1)
    logits, head_cache = model.head.forward(pair_inputs)
    l_s = sture_loss.similarity_loss(logits, batch.pairs[:, 2])

    inter = Intermediates(model, batch, config, det_feats, det_cache, pooled, seq_cache, m_seq, m_det,
                          head_cache, logits)
    if model.id_head is not None:
        id_logits, id_cache = model.id_head.forward(np.concatenate([pooled, det_feats]))
        l_s += sture_loss.similarity_loss(id_logits, np.concatenate([batch.seq_labels, batch.det_labels]))
        inter.id_logits, inter.id_cache = id_logits, id_cache
    return LossBreakdown(l_c, l_m, l_s), inter


def backward(inter: Intermediates, selective: bool = True,
             terms: Iterable[str] = LOSS_TERMS) -> Dict[str, np.ndarray]:
    """Reverse pass; with ``selective`` the cross loss never reaches the sequence encoder."""
    terms = set(terms)
    model, batch, config = inter.model, inter.batch, inter.config
    dim = inter.pooled.shape[1]
    g_pooled = np.zeros_like(inter.pooled)
    g_flat = np.zeros_like(inter.det_feats)
    grads = {f"head.{k}": np.zeros_like(v) for k, v in model.head.params.items()}
    if model.id_head is not None:
        grads.update({f"id.{k}": np.zeros_like(v) for k, v in model.id_head.params.items()})

    if "modality" in terms:
        gm_pooled, gm_flat = sture_loss.modality_loss_backward(
            inter.pooled, inter.det_feats, batch.seq_labels, batch.det_labels, config.margin)
        g_pooled += gm_pooled
        g_flat += gm_flat

    if "similarity" in terms:
        d_logits = sture_loss.similarity_loss_backward(inter.logits, batch.pairs[:, 2])
        head_grads, d_inputs = model.head.backward(inter.head_cache, d_logits)
        grads.update({f"head.{k}": v for k, v in head_grads.items()})
        np.add.at(g_pooled, batch.pairs[:, 0], d_inputs[:, :dim])
        np.add.at(g_flat, batch.pairs[:, 1], d_inputs[:, dim:])
        if model.id_head is not None:
            labels = np.concatenate([batch.seq_labels, batch.det_labels])
            d_id = sture_loss.similarity_loss_backward(inter.id_logits, labels)
            id_grads, d_feats = model.id_head.backward(inter.id_cache, d_id)
            grads.update({f"id.{k}": v for k, v in id_grads.items()})
            g_pooled += d_feats[:batch.N]
            g_flat += d_feats[batch.N:]

    if "cross" in terms:
        g_mseq, g_mdet = sture_loss.cross_loss_backward(inter.m_seq, inter.m_det, rms=config.rms_cross_loss)
        g_flat += sture_loss.det_cross_backward(inter.det_feats, g_mdet)
        if not selective:
            g_pooled += sture_loss.seq_cross_backward(inter.pooled, batch.T, g_mseq)

    det_grads, _ = model.det_encoder.backward(inter.det_cache, g_flat)
    seq_grads = model.seq_encoder.backward(inter.seq_cache, g_pooled)
    grads.update({f"det.{k}": v for k, v in det_grads.items()})
    grads.update({f"seq.{k}": v for k, v in seq_grads.items()})
    return grads


def objective(batch: SampledBatch, model: MutualModel, config: TrainConfig,
              terms: Iterable[str] = LOSS_TERMS) -> float:
    """Sum of the selected loss terms."""
    losses, _ = forward_losses(batch, model, config)
    return sum(getattr(losses, term) for term in terms)


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive moment estimation over a flat parameter dictionary."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name in sorted(params):
            grad = grads[name]
            m = self.m.setdefault(name, np.zeros_like(grad))
            v = self.v.setdefault(name, np.zeros_like(grad))
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            params[name] -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


@dataclass
class EpochTelemetry:
    epoch: int
    cross: float
    modality: float
    similarity: float

    @property
    def total(self) -> float:
        return self.cross + self.modality + self.similarity

    def row(self) -> List[str]:
        return [str(self.epoch)] + [repr(float(v)) for v in (self.cross, self.modality, self.similarity, self.total)]


TELEMETRY_HEADER = ["epoch", "L_C", "L_M", "L_S", "total"]


@dataclass
class TrainState:
    model: MutualModel
    optimizer: Adam
    config: TrainConfig
    epoch: int = 0
    telemetry: List[EpochTelemetry] = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.config.seed


def initial_state(dataset: TrackletDataset, config: TrainConfig) -> Tuple[TrainState, np.random.Generator]:
    rng = np.random.default_rng(config.seed)
    model = MutualModel.initialize(dataset.input_dim, config, len(dataset.identities), rng)
    optimizer = Adam(config.lr, config.beta1, config.beta2, config.eps)
    return TrainState(model, optimizer, config), rng


def train(dataset: TrackletDataset, config: TrainConfig,
          on_epoch: Optional[Callable[[EpochTelemetry], None]] = None) -> TrainState:
    """Adam over sampled, augmented batches; raises DivergenceError on a non-finite loss."""
    state, rng = initial_state(dataset, config)
    logger.info(
        f"Training on {len(dataset.tracklets)} tracklets / {len(dataset.identities)} identities: "
        f"{config.epochs} epochs x {config.iterations} iterations, batch {config.batch_size}"
    )
    # parameters that produced the most recent finite loss
    last_good = state.model.copy()
    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(3)
        for _ in range(config.iterations):
            batch = sample_batch(dataset, config.P, config.Q, config.T, config.M, rng)
            batch = augment(batch, dataset, config.noise_rate, rng)
            losses, inter = forward_losses(batch, state.model, config)
            if not losses.finite():
                raise DivergenceError(
                    f"Non-finite loss at epoch {epoch}: L_C={losses.cross} L_M={losses.modality} "
                    f"L_S={losses.similarity}",
                    last_good=TrainState(last_good, state.optimizer, config, epoch - 1, list(state.telemetry)),
                )
            last_good = state.model.copy()
            grads = backward(inter, selective=config.selective)
            state.optimizer.step(state.model.parameters(), grads)
            sums += (losses.cross, losses.modality, losses.similarity)
        sums /= config.iterations
        row = EpochTelemetry(epoch, *map(float, sums))
        state.telemetry.append(row)
        state.epoch = epoch
        logger.info(
            f"epoch {epoch}: L_C={row.cross:.5f} L_M={row.modality:.5f} L_S={row.similarity:.5f} "
            f"total={row.total:.5f}"
        )
        if on_epoch is not None:
            on_epoch(row)
    return state


# ---------------------------------------------------------------------------
# Retrieval and export
# ---------------------------------------------------------------------------

def _gallery(probe: TrackletDataset, T: int, M: int, gallery_noise: float, seed: int, draw: int) -> np.ndarray:
    """One T-frame history per identity; slots are swapped for other identities' frames at ``gallery_noise``."""
    rng = np.random.default_rng([seed, 7, draw])
    groups = probe.by_identity()
    identities = probe.identities
    gallery = np.stack([fit_length(groups[i][0].frames, T, M, rng) for i in identities])
    for n, identity in enumerate(identities):
        for t in range(T):
            if rng.random() < gallery_noise:
                other = identities[(n + 1 + int(rng.integers(len(identities) - 1))) % len(identities)]
                frames = groups[other][0].frames
                gallery[n, t] = frames[int(rng.integers(frames.shape[0]))]
    return gallery


def retrieval_accuracy(model: Optional[MutualModel], probe: TrackletDataset, T: int = 8, M: int = 100,
                       gallery_noise: float = 0.1, seed: int = 0, rounds: int = 5) -> float:
    """Detection-to-sequence top-1 accuracy averaged over ``rounds`` gallery draws.

    Queries are the frames of each identity's second probe tracklet; ``model=None``
    scores the raw features.
    """
    groups = probe.by_identity()
    identities = probe.identities
    if any(len(groups[i]) < 2 for i in identities):
        raise SamplingError("Retrieval needs at least 2 probe tracklets per identity")
    if rounds < 1:
        raise ContractViolation(f"Retrieval needs at least one gallery draw, got rounds={rounds}")
    if model is not None and model.input_dim != probe.input_dim:
        raise DimensionError(f"Model input dim {model.input_dim} != dataset input dim {probe.input_dim}")
    gallery_labels = np.array(identities)
    queries = np.concatenate([groups[i][1].frames for i in identities])
    query_labels = np.concatenate([np.full(groups[i][1].frames.shape[0], i) for i in identities])
    query_feats = queries if model is None else model.det_encoder.encode(queries)

    hits = []
    for draw in range(rounds):
        gallery = _gallery(probe, T, M, gallery_noise, seed, draw)
        gallery_feats = gallery.mean(axis=1) if model is None else model.seq_encoder.encode(gallery)
        nearest = sture_loss.pairwise_distances(query_feats, gallery_feats).argmin(axis=1)
        hits.append(gallery_labels[nearest] == query_labels)
    return float(np.mean(hits))


@dataclass
class ExportRow:
    identity: int
    split: str
    index: int
    vector: np.ndarray


def export_embeddings(model: MutualModel, dataset: TrackletDataset, T: int, M: int = 100,
                      seed: int = 0) -> List[ExportRow]:
    """One row per detection and per pooled sequence, ordered by (identity, split, index)."""
    if model.input_dim != dataset.input_dim:
        raise DimensionError(f"Checkpoint input dim {model.input_dim} != dataset input dim {dataset.input_dim}")
    rng = np.random.default_rng(seed)
    rows = []
    for identity, tracklets in sorted(dataset.by_identity().items()):
        frames = np.concatenate([t.frames for t in tracklets])
        for i, vector in enumerate(model.det_encoder.encode(frames)):
            rows.append(ExportRow(identity, "detection", i, vector))
        sequences = np.stack([fit_length(t.frames, T, M, rng) for t in tracklets])
        for i, vector in enumerate(model.seq_encoder.encode(sequences)):
            rows.append(ExportRow(identity, "sequence", i, vector))
    return rows


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"STU1"
CHECKPOINT_VERSION = 1
_U32 = struct.Struct("<I")


def save_checkpoint(model: MutualModel, path: Union[str, Path]) -> None:
    """STU1: magic, version, dims, flags, then named little-endian float32 tensors."""
    identity_count = model.id_head.output_dim if model.id_head is not None else 0
    flags = (1 if model.seq_encoder.attention else 0) | (2 if model.id_head is not None else 0)
    hidden = model.det_encoder.sizes[1]
    parts = [CHECKPOINT_MAGIC]
    parts += [_U32.pack(v) for v in (CHECKPOINT_VERSION, model.input_dim, hidden, model.dim, flags, identity_count)]
    params = model.parameters()
    parts.append(_U32.pack(len(params)))
    for name in sorted(params):
        array = params[name]
        encoded = name.encode("utf-8")
        parts += [_U32.pack(len(encoded)), encoded, _U32.pack(array.ndim)]
        parts += [_U32.pack(d) for d in array.shape]
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: Union[str, Path]) -> MutualModel:
    data = Path(path).read_bytes()
    offset = 0

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(data):
            raise ParseError(str(path), 0, "truncated checkpoint")
        chunk = data[offset:offset + size]
        offset += size
        return chunk

    def u32() -> int:
        return _U32.unpack(take(4))[0]

    if take(4) != CHECKPOINT_MAGIC:
        raise ParseError(str(path), 0, "not an STU1 checkpoint")
    version = u32()
    if version != CHECKPOINT_VERSION:
        raise ParseError(str(path), 0, f"unsupported checkpoint version {version}")
    input_dim, hidden, dim, flags, identity_count = (u32() for _ in range(5))
    config = TrainConfig(hidden=hidden, D=dim, attention=bool(flags & 1), identity_loss=bool(flags & 2))
    model = MutualModel.initialize(input_dim, config, max(identity_count, 1), np.random.default_rng(0))
    params = model.parameters()
    for _ in range(u32()):
        name = take(u32()).decode("utf-8")
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        if name not in params or params[name].shape != shape:
            raise ParseError(str(path), 0, f"unexpected tensor {name} with shape {shape}")
        params[name][...] = values
    return model
