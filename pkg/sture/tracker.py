"""The per-frame online tracking loop.

Each tracked object is followed by a single-object tracker. When its score
or mean overlap drops, the track drifts: it coasts on its velocity and is
offered gated detections through the associator until it is recovered or
retired.
"""
import itertools
import logging
import time
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Deque, Dict, Iterator, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from sture import mot_io
from sture.associator import AffinityScorer, assign, build_table, gate_candidates
from sture.config import TrackerConfig
from sture.errors import AlignmentError, ContractViolation, UsageError
from sture.features import Detection, Embedder, FileEmbedder, embed_detection
from sture.geometry import BoundingBox, MotionState, iou, mean_overlap, overlap_indicator
from sture.metrics import MetricsReport, evaluate
from sture.mot_io import DetectionRecord, SequenceInfo

logger = logging.getLogger(__name__)

ImageSize = Optional[Tuple[float, float]]

SEQINFO = "seqinfo.ini"
DET_FILE = Path("det") / "det.txt"
EMB_FILE = Path("det") / "det.emb"
GT_FILE = Path("gt") / "gt.txt"


class TrackState(Enum):
    TRACKED = "tracked"
    DRIFTING = "drifting"
    TERMINATED = "terminated"


_TRANSITIONS = {
    TrackState.TRACKED: {TrackState.TRACKED, TrackState.DRIFTING},
    TrackState.DRIFTING: {TrackState.DRIFTING, TrackState.TRACKED, TrackState.TERMINATED},
    TrackState.TERMINATED: {TrackState.TERMINATED},
}


@dataclass
class Track:
    id: int
    box: BoundingBox
    motion: MotionState
    embeddings: Deque[np.ndarray]
    overlaps: Deque[int]
    state: TrackState = TrackState.TRACKED
    drift_age: int = 0
    pending_count: int = 0

    @property
    def live(self) -> bool:
        return self.state is not TrackState.TERMINATED

    def transition(self, state: TrackState) -> None:
        if state not in _TRANSITIONS[self.state]:
            raise ContractViolation(f"Track {self.id}: illegal transition {self.state.value} -> {state.value}")
        self.state = state


@dataclass
class PendingChain:
    """Unconfirmed detections linked frame to frame by IoU."""

    detections: List[Detection]
    embeddings: List[np.ndarray]

    @property
    def box(self) -> BoundingBox:
        return self.detections[-1].box

    def __len__(self) -> int:
        return len(self.detections)


@dataclass
class FrameWorld:
    """Everything the tracker sees in one frame."""

    frame: int
    detections: List[Detection]
    embeddings: np.ndarray
    gt: Dict[int, BoundingBox] = field(default_factory=dict)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if len(self.detections) and self.embeddings.shape[0] != len(self.detections):
            raise AlignmentError(
                f"Frame {self.frame}: {len(self.detections)} detections but {self.embeddings.shape[0]} embeddings"
            )
        self._rows = {det.index: row for row, det in enumerate(self.detections)}

    @property
    def boxes(self) -> List[BoundingBox]:
        return [det.box for det in self.detections]

    def embedding_of(self, detection: Detection) -> np.ndarray:
        return self.embeddings[self._rows[detection.index]]


@dataclass
class FrameOutput:
    frame: int
    records: List[DetectionRecord]
    tracked: int = 0
    drifting: int = 0
    births: int = 0
    recoveries: int = 0
    terminations: int = 0

    def row(self) -> List[int]:
        return [self.frame, self.tracked, self.drifting, self.births, self.recoveries, self.terminations]


TELEMETRY_HEADER = ["frame", "tracked", "drifting", "births", "recoveries", "terminations"]


class SingleObjectTracker(ABC):
    """Follows one target: previous box + frame context -> (box, score in [0, 1])."""

    @abstractmethod
    def step(self, track: Track, world: FrameWorld, claimed: Set[int]) -> Tuple[BoundingBox, float]:
        ...

    def reset(self, track: Track) -> None:
        """Called when a drifting track is recovered."""


class ConstantVelocitySOT(SingleObjectTracker):
    """Predict with the track velocity and snap to the best-overlapping free detection."""

    def step(self, track: Track, world: FrameWorld, claimed: Set[int]) -> Tuple[BoundingBox, float]:
        predicted = track.box.centered_at(track.motion.predict())
        best, best_iou = None, 0.0
        for det in world.detections:
            if det.index in claimed:
                continue
            overlap = iou(predicted, det.box)
            if overlap > best_iou:
                best, best_iou = det, overlap
        if best is None:
            return predicted, 0.0
        return best.box, best_iou


class OracleSOT(SingleObjectTracker):
    """Reads ground truth: score 1 while the followed identity is visible, 0 otherwise."""

    def __init__(self, min_iou: float = 0.5):
        self.min_iou = min_iou
        self.identities: Dict[int, int] = {}

    def _resolve(self, box: BoundingBox, gt: Dict[int, BoundingBox]) -> Optional[int]:
        best, best_iou = None, self.min_iou
        for identity, gt_box in sorted(gt.items()):
            overlap = iou(box, gt_box)
            if overlap >= best_iou:
                best, best_iou = identity, overlap
        return best

    def step(self, track: Track, world: FrameWorld, claimed: Set[int]) -> Tuple[BoundingBox, float]:
        identity = self.identities.get(track.id)
        if identity is None:
            identity = self._resolve(track.box, world.gt)
            if identity is not None:
                self.identities[track.id] = identity
        if identity is None or identity not in world.gt:
            return track.box.centered_at(track.motion.predict()), 0.0
        return world.gt[identity], 1.0

    def reset(self, track: Track) -> None:
        self.identities.pop(track.id, None)


def emit_record(frame: int, track_id: int, box: BoundingBox, image_size: ImageSize) -> Optional[DetectionRecord]:
    """Result record with the box clamped to the image; None when nothing is visible."""
    if image_size is not None:
        box = box.clamped(*image_size)
        if box is None:
            return None
    return DetectionRecord.from_box(frame, track_id, box, 1.0)


@dataclass
class SpawnResult:
    tracks: List[Track]
    pending: List[PendingChain]
    backfill: List[DetectionRecord]


def _confirm(chain: PendingChain, track_id: int, config: TrackerConfig) -> Track:
    motion = MotionState(config.L)
    motion.observe_all(det.box.center for det in chain.detections)
    return Track(
        id=track_id,
        box=chain.box,
        motion=motion,
        embeddings=deque(chain.embeddings, maxlen=config.M),
        overlaps=deque([1] * len(chain), maxlen=config.I),
        pending_count=len(chain),
    )


def spawn_tracks(potential: Sequence[Detection], world: FrameWorld, pending: Sequence[PendingChain],
                 config: TrackerConfig, ids: Iterator[int], image_size: ImageSize = None) -> SpawnResult:
    """Extend pending chains with this frame's potential objects and confirm long enough ones.

    A chain that finds no detection with IoU >= tau_o in this frame is dropped.
    """
    used: Set[int] = set()
    chains: List[PendingChain] = []
    for chain in pending:
        best, best_iou = None, config.tau_o
        for det in potential:
            if det.index in used:
                continue
            overlap = iou(chain.box, det.box)
            if overlap >= best_iou:
                best, best_iou = det, overlap
        if best is None:
            logger.debug(f"Frame {world.frame}: pending chain of {len(chain)} broken")
            continue
        used.add(best.index)
        chain.detections.append(best)
        chain.embeddings.append(world.embedding_of(best))
        chains.append(chain)
    for det in potential:
        if det.index not in used:
            chains.append(PendingChain([det], [world.embedding_of(det)]))

    result = SpawnResult([], [], [])
    for chain in chains:
        if len(chain) < config.tau_i:
            result.pending.append(chain)
            continue
        track = _confirm(chain, next(ids), config)
        result.tracks.append(track)
        for det in chain.detections[:-1]:
            record = emit_record(det.frame, track.id, det.box, image_size)
            if record is not None:
                result.backfill.append(record)
        logger.debug(f"Frame {world.frame}: track {track.id} confirmed after {len(chain)} frames")
    return result


def retire_tracks(tracks: Sequence[Track], config: TrackerConfig, image_size: ImageSize = None) -> List[Track]:
    """Terminate drifting tracks that drifted over tau_t frames or left the image."""
    terminated = []
    for track in tracks:
        if track.state is not TrackState.DRIFTING:
            continue
        out_of_view = image_size is not None and track.box.outside(*image_size)
        if track.drift_age > config.tau_t or out_of_view:
            track.transition(TrackState.TERMINATED)
            terminated.append(track)
    return terminated


class OnlineTracker:
    """Track state across frames of one sequence."""

    def __init__(self, config: TrackerConfig, scorer: AffinityScorer, sot: Optional[SingleObjectTracker] = None,
                 image_size: ImageSize = None):
        self.config = config
        self.scorer = scorer
        self.sot = sot or ConstantVelocitySOT()
        self.image_size = image_size
        self.tracks: List[Track] = []
        self.pending: List[PendingChain] = []
        self._ids = itertools.count(1)

    def with_state(self, state: TrackState) -> List[Track]:
        return [t for t in self.tracks if t.state is state]

    def _claim_best(self, box: BoundingBox, world: FrameWorld, claimed: Set[int]) -> Optional[Detection]:
        best, best_iou = None, self.config.tau_o
        for det in world.detections:
            if det.index in claimed:
                continue
            overlap = iou(box, det.box)
            if overlap >= best_iou:
                best, best_iou = det, overlap
        if best is not None:
            claimed.add(best.index)
        return best

    def _follow(self, track: Track, box: BoundingBox, world: FrameWorld, claimed: Set[int]) -> None:
        track.box = box
        track.motion.observe(box.center)
        det = self._claim_best(box, world, claimed)
        if det is not None:
            track.embeddings.append(world.embedding_of(det))

    def _associate(self, drifting: List[Track], world: FrameWorld, claimed: Set[int]) -> List[Track]:
        if not drifting:
            return []
        cfg = self.config
        free = [det for det in world.detections if det.index not in claimed]
        tracked_boxes = [t.box for t in self.with_state(TrackState.TRACKED)]
        gated = {
            track.id: gate_candidates(
                track.box, [d.box for d in free], tracked_boxes, cfg.tau_d, cfg.tau_o,
                embeddings=[world.embedding_of(d) for d in free], indices=[d.index for d in free],
            )
            for track in drifting
        }
        histories = {track.id: track.embeddings for track in drifting}
        matches = assign(build_table(histories, gated, self.scorer), cfg.tau_a, cfg.matching)
        detections = {det.index: det for det in free}
        recovered = []
        for track in drifting:
            if track.id not in matches:
                track.drift_age += 1
                continue
            det = detections[matches[track.id]]
            claimed.add(det.index)
            track.transition(TrackState.TRACKED)
            track.box = det.box
            track.motion.correct(det.box.center)
            track.embeddings.append(world.embedding_of(det))
            track.overlaps.clear()
            track.overlaps.append(1)
            track.drift_age = 0
            self.sot.reset(track)
            recovered.append(track)
            logger.debug(f"Frame {world.frame}: track {track.id} recovered on detection {det.index}")
        return recovered

    def step_frame(self, world: FrameWorld) -> FrameOutput:
        cfg = self.config
        claimed: Set[int] = set()
        just_drifted = set()

        for track in self.with_state(TrackState.TRACKED):
            box, score = self.sot.step(track, world, claimed)
            track.overlaps.append(overlap_indicator(box, world.boxes, cfg.tau_o))
            if score > cfg.tau_s and mean_overlap(track.overlaps) > cfg.tau_o:
                self._follow(track, box, world, claimed)
                continue
            track.transition(TrackState.DRIFTING)
            track.drift_age = 0
            track.box = track.box.centered_at(track.motion.coast())
            just_drifted.add(track.id)
            logger.debug(f"Frame {world.frame}: track {track.id} drifting (score {score:.3f})")

        drifting = self.with_state(TrackState.DRIFTING)
        for track in drifting:
            if track.id not in just_drifted:
                track.box = track.box.centered_at(track.motion.coast())
        recovered = self._associate(drifting, world, claimed)
        terminated = retire_tracks(self.tracks, cfg, self.image_size)
        for track in terminated:
            logger.debug(f"Frame {world.frame}: track {track.id} terminated after {track.drift_age} drifting frames")

        tracked_boxes = [t.box for t in self.with_state(TrackState.TRACKED)]
        potential = [
            det for det in world.detections
            if det.index not in claimed and all(iou(det.box, b) < cfg.tau_o for b in tracked_boxes)
        ]
        spawned = spawn_tracks(potential, world, self.pending, cfg, self._ids, self.image_size)
        self.pending = spawned.pending
        self.tracks.extend(spawned.tracks)

        records = list(spawned.backfill)
        for track in self.with_state(TrackState.TRACKED):
            record = emit_record(world.frame, track.id, track.box, self.image_size)
            if record is not None:
                records.append(record)
        return FrameOutput(
            frame=world.frame,
            records=records,
            tracked=len(self.with_state(TrackState.TRACKED)),
            drifting=len(self.with_state(TrackState.DRIFTING)),
            births=len(spawned.tracks),
            recoveries=len(recovered),
            terminations=len(terminated),
        )


@dataclass
class SequenceInputs:
    """A MOTChallenge sequence directory loaded into memory."""

    info: SequenceInfo
    detections: List[DetectionRecord]
    embeddings: Optional[np.ndarray] = None
    gt: Optional[List[DetectionRecord]] = None

    @classmethod
    def from_dir(cls, seq_dir: Union[str, Path], embeddings: Optional[Union[str, Path]] = None) -> "SequenceInputs":
        seq_dir = Path(seq_dir)
        for required in (seq_dir / SEQINFO, seq_dir / DET_FILE):
            if not required.is_file():
                raise UsageError(
                    f"Missing {required}; a sequence directory holds {SEQINFO}, {DET_FILE}, "
                    f"optional {GT_FILE} and optional {EMB_FILE}"
                )
        info = mot_io.read_seqinfo(seq_dir / SEQINFO)
        detections = mot_io.parse_detections(seq_dir / DET_FILE)
        emb_path = Path(embeddings) if embeddings is not None else seq_dir / EMB_FILE
        if embeddings is not None and not emb_path.is_file():
            raise UsageError(f"Embedding file {emb_path} does not exist")
        matrix = mot_io.read_embeddings(emb_path) if emb_path.is_file() else None
        gt_path = seq_dir / GT_FILE
        gt = mot_io.parse_detections(gt_path) if gt_path.is_file() else None
        return cls(info, detections, matrix, gt)

    @property
    def evaluation_gt(self) -> Optional[List[DetectionRecord]]:
        """Ground truth without the records flagged as ignored (confidence 0)."""
        if self.gt is None:
            return None
        return [r for r in self.gt if r.confidence != 0]

    def gt_identities(self) -> Dict[int, int]:
        """Dense 0-based index for each ground-truth id, in id order."""
        return {track_id: i for i, track_id in enumerate(sorted({r.track_id for r in self.evaluation_gt or []}))}


@dataclass
class SequenceResult:
    name: str
    records: List[DetectionRecord]
    frames: List[FrameOutput]
    report: Optional[MetricsReport] = None
    elapsed: Optional[float] = None

    @property
    def track_ids(self) -> List[int]:
        return sorted({r.track_id for r in self.records})


def _frame_gt(inputs: SequenceInputs) -> Dict[int, Dict[int, BoundingBox]]:
    dense = inputs.gt_identities()
    frames: Dict[int, Dict[int, BoundingBox]] = {}
    for record in inputs.evaluation_gt or []:
        frames.setdefault(record.frame, {})[dense[record.track_id]] = record.box
    return frames


def _build_detections(inputs: SequenceInputs, gt_frames: Dict[int, Dict[int, BoundingBox]]) -> List[Detection]:
    detections = []
    for index, record in enumerate(inputs.detections):
        identity, best_iou = -1, 0.5
        for gt_identity, gt_box in sorted(gt_frames.get(record.frame, {}).items()):
            overlap = iou(record.box, gt_box)
            if overlap >= best_iou:
                identity, best_iou = gt_identity, overlap
        detections.append(Detection(index, record.frame, record.box, record.confidence, identity))
    return detections


def run_sequence(inputs: SequenceInputs, config: TrackerConfig, scorer: AffinityScorer,
                 sot: Optional[SingleObjectTracker] = None, embedder: Optional[Embedder] = None,
                 out_path: Optional[Union[str, Path]] = None, timing: bool = False) -> SequenceResult:
    """Track one sequence frame by frame; evaluate against ground truth when present."""
    info = inputs.info
    if inputs.embeddings is not None and inputs.embeddings.shape[0] != len(inputs.detections):
        raise AlignmentError(
            f"{info.name}: {inputs.embeddings.shape[0]} embeddings for {len(inputs.detections)} detections"
        )
    if embedder is None and inputs.embeddings is not None:
        embedder = FileEmbedder(inputs.embeddings)
    if embedder is None and inputs.detections:
        raise UsageError(f"{info.name}: no embeddings available; pass --embeddings or --oracle-embedder")

    gt_frames = _frame_gt(inputs)
    by_frame: Dict[int, List[Detection]] = {}
    for det in _build_detections(inputs, gt_frames):
        if det.frame > info.seq_length:
            logger.warning(f"{info.name}: detection {det.index} at frame {det.frame} beyond seqLength {info.seq_length}")
            continue
        by_frame.setdefault(det.frame, []).append(det)

    tracker = OnlineTracker(config, scorer, sot, (info.img_width, info.img_height))
    outputs: List[FrameOutput] = []
    records: List[DetectionRecord] = []
    started = time.perf_counter()
    for frame in range(1, info.seq_length + 1):
        detections = by_frame.get(frame, [])
        vectors = [embed_detection(embedder, det, config.D) for det in detections]
        embeddings = np.stack(vectors) if vectors else np.zeros((0, config.D))
        output = tracker.step_frame(FrameWorld(frame, detections, embeddings, gt_frames.get(frame, {})))
        outputs.append(output)
        records.extend(output.records)
    elapsed = time.perf_counter() - started if timing else None

    records.sort(key=lambda r: (r.frame, r.track_id))
    if out_path is not None:
        mot_io.write_results(records, out_path)
    report = None
    if inputs.gt is not None:
        report = evaluate(inputs.evaluation_gt, records, name=info.name, frames=info.seq_length, elapsed=elapsed)
    logger.info(
        f"{info.name}: {info.seq_length} frames, {len(inputs.detections)} detections, "
        f"{len({r.track_id for r in records})} tracks"
    )
    return SequenceResult(info.name, records, outputs, report, elapsed)
