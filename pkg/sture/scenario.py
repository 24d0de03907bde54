"""Synthetic MOTChallenge sequences with scripted occlusions."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from sture import mot_io
from sture.config import ScenarioSpec
from sture.features import Detection, OracleEmbedder
from sture.geometry import BoundingBox
from sture.mot_io import DetectionRecord, SequenceInfo
from sture.tracker import DET_FILE, EMB_FILE, GT_FILE, SEQINFO

logger = logging.getLogger(__name__)

LANE_MARGIN = 10.0


@dataclass
class Scenario:
    info: SequenceInfo
    detections: List[DetectionRecord]
    gt: List[DetectionRecord]
    embeddings: np.ndarray
    occlusions: Dict[int, Tuple[int, int]] = field(default_factory=dict)


def occlusion_window(spec: ScenarioSpec, identity: int) -> Optional[Tuple[int, int]]:
    """First and last hidden frame of an identity, staggered by two frames per identity."""
    if spec.occlusion == 0:
        return None
    start = max(2, spec.frames // 3) + 2 * identity
    start = min(start, spec.frames - spec.occlusion)
    return start, start + spec.occlusion - 1


def identity_box(spec: ScenarioSpec, identity: int, frame: int) -> BoundingBox:
    """Straight-line motion to the right; identities take lanes top to bottom."""
    spacing = spec.box_height * 1.4
    lanes = max(1, int((spec.height - spec.box_height - LANE_MARGIN) // spacing) + 1)
    lane, column = identity % lanes, identity // lanes
    speed = spec.speed * (1.0 + 0.5 * identity / max(1, spec.identities - 1))
    left = LANE_MARGIN + column * (2 * spec.box_width + 1.5 * spec.speed * spec.frames) + speed * (frame - 1)
    top = LANE_MARGIN + lane * spacing
    return BoundingBox(left, top, spec.box_width, spec.box_height)


def build_scenario(spec: ScenarioSpec, name: str = "synthetic") -> Scenario:
    info = SequenceInfo(name, spec.frame_rate, spec.frames, spec.width, spec.height)
    embedder = OracleEmbedder(spec.identities, spec.dim, spec.noise, spec.seed)
    occlusions = {k + 1: w for k in range(spec.identities) if (w := occlusion_window(spec, k)) is not None}
    detections, gt, vectors = [], [], []
    for frame in range(1, spec.frames + 1):
        for identity in range(spec.identities):
            window = occlusions.get(identity + 1)
            if window is not None and window[0] <= frame <= window[1]:
                continue
            box = identity_box(spec, identity, frame).clamped(spec.width, spec.height)
            if box is None:
                continue
            vectors.append(embedder.embed(Detection(len(detections), frame, box, identity=identity)))
            detections.append(DetectionRecord.from_box(frame, -1, box, 1.0))
            gt.append(DetectionRecord.from_box(frame, identity + 1, box, 1.0))
    embeddings = np.stack(vectors) if vectors else np.zeros((0, spec.dim))
    return Scenario(info, detections, gt, embeddings, occlusions)


def write_scenario(scenario: Scenario, out_dir: Union[str, Path]) -> Path:
    """Lay the scenario out as a sequence directory."""
    out_dir = Path(out_dir)
    (out_dir / DET_FILE).parent.mkdir(parents=True, exist_ok=True)
    (out_dir / GT_FILE).parent.mkdir(parents=True, exist_ok=True)
    mot_io.write_seqinfo(scenario.info, out_dir / SEQINFO)
    mot_io.write_detections(scenario.detections, out_dir / DET_FILE)
    mot_io.write_detections(scenario.gt, out_dir / GT_FILE)
    if scenario.detections:
        mot_io.write_embeddings(scenario.embeddings, out_dir / EMB_FILE)
    logger.info(
        f"Wrote scenario '{scenario.info.name}' to {out_dir}: {len(scenario.detections)} detections, "
        f"{len(scenario.occlusions)} occlusions"
    )
    return out_dir
