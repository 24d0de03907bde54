"""CLEAR-MOT and identity metrics.

Correspondences need IoU >= 0.5. Matches from the previous frame are kept
when still valid; the remaining pairs are resolved by a minimum-cost
assignment on 1 - IoU.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from sture.errors import ValidationError
from sture.geometry import iou, iou_matrix
from sture.mot_io import DetectionRecord, format_real, group_by_frame

logger = logging.getLogger(__name__)

IOU_THRESHOLD = 0.5
MOSTLY_TRACKED = 0.8
MOSTLY_LOST = 0.2

REPORT_COLUMNS = ["Sequence", "MOTA", "MOTP", "IDF1", "IDR", "IDP", "FP", "FN", "MT", "ML", "IDS", "Frag", "Hz"]


@dataclass
class FrameMatch:
    frame: int
    pairs: List[Tuple[int, int, float]]
    false_positives: List[int]
    misses: List[int]


@dataclass
class FrameMatching:
    """Per-frame correspondences between ground truth ids and hypothesis ids."""

    frames: List[FrameMatch]
    switches: int = 0

    @property
    def num_gt(self) -> int:
        return sum(len(f.pairs) + len(f.misses) for f in self.frames)

    @property
    def num_matches(self) -> int:
        return sum(len(f.pairs) for f in self.frames)

    @property
    def num_fp(self) -> int:
        return sum(len(f.false_positives) for f in self.frames)

    @property
    def num_fn(self) -> int:
        return sum(len(f.misses) for f in self.frames)


def _assign(gt: Sequence[DetectionRecord], hyp: Sequence[DetectionRecord]) -> List[Tuple[int, int]]:
    """Minimum 1 - IoU assignment restricted to pairs with IoU >= 0.5 (positions into the inputs)."""
    if not gt or not hyp:
        return []
    overlaps = iou_matrix([r.box for r in gt], [r.box for r in hyp])
    valid = overlaps >= IOU_THRESHOLD
    if not valid.any():
        return []
    # invalid pairs cost more than all valid ones combined
    cost = np.where(valid, 1.0 - overlaps, float(overlaps.size + 1))
    rows, cols = linear_sum_assignment(cost)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if valid[r, c]]


def _by_id(records: Sequence[DetectionRecord], frame: int, kind: str) -> Dict[int, DetectionRecord]:
    by_id: Dict[int, DetectionRecord] = {}
    for record in records:
        if record.track_id in by_id:
            raise ValidationError(f"{kind} has two boxes for id {record.track_id} in frame {frame}")
        by_id[record.track_id] = record
    return by_id


def match_frames(gt: Iterable[DetectionRecord], hyp: Iterable[DetectionRecord]) -> FrameMatching:
    gt_frames = group_by_frame(gt)
    hyp_frames = group_by_frame(hyp)
    last_match: Dict[int, int] = {}
    frames = []
    switches = 0
    for frame in sorted(set(gt_frames) | set(hyp_frames)):
        gts = _by_id(gt_frames.get(frame, []), frame, "ground truth")
        hyps = _by_id(hyp_frames.get(frame, []), frame, "result")
        pairs: List[Tuple[int, int, float]] = []

        for gt_id in sorted(gts):
            hyp_id = last_match.get(gt_id)
            if hyp_id is None or hyp_id not in hyps or any(p[1] == hyp_id for p in pairs):
                continue
            overlap = iou(gts[gt_id].box, hyps[hyp_id].box)
            if overlap >= IOU_THRESHOLD:
                pairs.append((gt_id, hyp_id, overlap))

        free_gt = [g for g in sorted(gts) if all(p[0] != g for p in pairs)]
        free_hyp = [h for h in sorted(hyps) if all(p[1] != h for p in pairs)]
        for r, c in _assign([gts[g] for g in free_gt], [hyps[h] for h in free_hyp]):
            gt_id, hyp_id = free_gt[r], free_hyp[c]
            if gt_id in last_match and last_match[gt_id] != hyp_id:
                switches += 1
            pairs.append((gt_id, hyp_id, iou(gts[gt_id].box, hyps[hyp_id].box)))

        for gt_id, hyp_id, _ in pairs:
            last_match[gt_id] = hyp_id
        matched_gt = {p[0] for p in pairs}
        matched_hyp = {p[1] for p in pairs}
        frames.append(FrameMatch(
            frame=frame,
            pairs=sorted(pairs),
            false_positives=[h for h in sorted(hyps) if h not in matched_hyp],
            misses=[g for g in sorted(gts) if g not in matched_gt],
        ))
    return FrameMatching(frames, switches)


@dataclass
class ClearMot:
    mota: Optional[float]
    motp: Optional[float]
    fp: int
    fn: int
    ids: int
    frag: int
    mt: Optional[float]
    ml: Optional[float]
    num_gt: int = 0
    num_matches: int = 0
    iou_sum: float = 0.0
    trajectories: int = 0
    mt_count: int = 0
    ml_count: int = 0


def clear_mot(matching: FrameMatching) -> ClearMot:
    # per gt id: hit/miss flags over the frames where it is present
    coverage: Dict[int, List[bool]] = {}
    for frame in matching.frames:
        for gt_id, _, _ in frame.pairs:
            coverage.setdefault(gt_id, []).append(True)
        for gt_id in frame.misses:
            coverage.setdefault(gt_id, []).append(False)

    frag = 0
    for flags in coverage.values():
        seen_hit = False
        for previous, current in zip([False] + flags[:-1], flags):
            if current and not previous and seen_hit:
                frag += 1
            seen_hit = seen_hit or current

    ratios = [sum(flags) / len(flags) for flags in coverage.values()]
    mt_count = sum(1 for r in ratios if r >= MOSTLY_TRACKED)
    ml_count = sum(1 for r in ratios if r <= MOSTLY_LOST)
    iou_sum = float(sum(p[2] for f in matching.frames for p in f.pairs))
    return _clear_from_counts(
        num_gt=matching.num_gt, num_matches=matching.num_matches, iou_sum=iou_sum,
        fp=matching.num_fp, fn=matching.num_fn, ids=matching.switches, frag=frag,
        trajectories=len(coverage), mt_count=mt_count, ml_count=ml_count,
    )


def _clear_from_counts(num_gt, num_matches, iou_sum, fp, fn, ids, frag, trajectories, mt_count, ml_count) -> ClearMot:
    mota = 1.0 - (fp + fn + ids) / num_gt if num_gt else None
    motp = iou_sum / num_matches if num_matches else None
    mt = 100.0 * mt_count / trajectories if trajectories else None
    ml = 100.0 * ml_count / trajectories if trajectories else None
    return ClearMot(mota, motp, fp, fn, ids, frag, mt, ml, num_gt, num_matches, iou_sum, trajectories, mt_count, ml_count)


@dataclass
class IdentityScores:
    idf1: Optional[float]
    idr: Optional[float]
    idp: Optional[float]
    idtp: int = 0
    idfp: int = 0
    idfn: int = 0


def _identity_from_counts(idtp: int, idfp: int, idfn: int) -> IdentityScores:
    idp = idtp / (idtp + idfp) if idtp + idfp else None
    idr = idtp / (idtp + idfn) if idtp + idfn else None
    idf1 = 2 * idtp / (2 * idtp + idfp + idfn) if idtp + idfp + idfn else None
    return IdentityScores(idf1, idr, idp, idtp, idfp, idfn)


def id_metrics(gt: Iterable[DetectionRecord], hyp: Iterable[DetectionRecord]) -> IdentityScores:
    """Global one-to-one trajectory matching that maximizes identity true positives."""
    gt = list(gt)
    hyp = list(hyp)
    gt_ids = sorted({r.track_id for r in gt})
    hyp_ids = sorted({r.track_id for r in hyp})
    overlap_counts = np.zeros((len(gt_ids), len(hyp_ids)))
    gt_index = {g: i for i, g in enumerate(gt_ids)}
    hyp_index = {h: j for j, h in enumerate(hyp_ids)}
    hyp_frames = group_by_frame(hyp)
    for frame, gts in group_by_frame(gt).items():
        hyps = hyp_frames.get(frame, [])
        if not hyps:
            continue
        valid = iou_matrix([r.box for r in gts], [r.box for r in hyps]) >= IOU_THRESHOLD
        for i, j in zip(*np.nonzero(valid)):
            overlap_counts[gt_index[gts[i].track_id], hyp_index[hyps[j].track_id]] += 1

    idtp = 0
    if overlap_counts.size:
        rows, cols = linear_sum_assignment(-overlap_counts)
        idtp = int(overlap_counts[rows, cols].sum())
    return _identity_from_counts(idtp, len(hyp) - idtp, len(gt) - idtp)


@dataclass
class MetricsReport:
    """Evaluation of one sequence, or the aggregate of several."""

    name: str
    mota: Optional[float]
    motp: Optional[float]
    idf1: Optional[float]
    idr: Optional[float]
    idp: Optional[float]
    fp: int
    fn: int
    ids: int
    frag: int
    mt: Optional[float]
    ml: Optional[float]
    hz: Optional[float] = None
    # raw counts kept for aggregation
    num_gt: int = 0
    num_matches: int = 0
    iou_sum: float = 0.0
    idtp: int = 0
    idfp: int = 0
    idfn: int = 0
    trajectories: int = 0
    mt_count: int = 0
    ml_count: int = 0
    frames: int = 0
    elapsed: Optional[float] = field(default=None, repr=False)

    def values(self) -> Dict[str, object]:
        return {
            "Sequence": self.name, "MOTA": self.mota, "MOTP": self.motp, "IDF1": self.idf1, "IDR": self.idr,
            "IDP": self.idp, "FP": self.fp, "FN": self.fn, "MT": self.mt, "ML": self.ml, "IDS": self.ids,
            "Frag": self.frag, "Hz": self.hz,
        }


def _report(name: str, clear: ClearMot, ident: IdentityScores, frames: int, elapsed: Optional[float]) -> MetricsReport:
    hz = frames / elapsed if elapsed else None
    return MetricsReport(
        name=name, mota=clear.mota, motp=clear.motp, idf1=ident.idf1, idr=ident.idr, idp=ident.idp,
        fp=clear.fp, fn=clear.fn, ids=clear.ids, frag=clear.frag, mt=clear.mt, ml=clear.ml, hz=hz,
        num_gt=clear.num_gt, num_matches=clear.num_matches, iou_sum=clear.iou_sum,
        idtp=ident.idtp, idfp=ident.idfp, idfn=ident.idfn, trajectories=clear.trajectories,
        mt_count=clear.mt_count, ml_count=clear.ml_count, frames=frames, elapsed=elapsed,
    )


def evaluate(gt: Iterable[DetectionRecord], hyp: Iterable[DetectionRecord], name: str = "sequence",
             frames: int = 0, elapsed: Optional[float] = None) -> MetricsReport:
    gt = list(gt)
    hyp = list(hyp)
    if gt and hyp:
        gt_range = (min(r.frame for r in gt), max(r.frame for r in gt))
        hyp_range = (min(r.frame for r in hyp), max(r.frame for r in hyp))
        if hyp_range[0] < gt_range[0] or hyp_range[1] > gt_range[1]:
            logger.warning(f"{name}: result frames {hyp_range} fall outside ground-truth frames {gt_range}")
    report = _report(name, clear_mot(match_frames(gt, hyp)), id_metrics(gt, hyp), frames, elapsed)
    if report.mota is None:
        logger.warning(f"{name}: no ground-truth boxes, MOTA is undefined")
    return report


def aggregate(reports: Sequence[MetricsReport], name: str = "OVERALL") -> MetricsReport:
    """Combine sequences by summing their underlying counts."""
    clear = _clear_from_counts(
        num_gt=sum(r.num_gt for r in reports), num_matches=sum(r.num_matches for r in reports),
        iou_sum=sum(r.iou_sum for r in reports), fp=sum(r.fp for r in reports), fn=sum(r.fn for r in reports),
        ids=sum(r.ids for r in reports), frag=sum(r.frag for r in reports),
        trajectories=sum(r.trajectories for r in reports), mt_count=sum(r.mt_count for r in reports),
        ml_count=sum(r.ml_count for r in reports),
    )
    ident = _identity_from_counts(sum(r.idtp for r in reports), sum(r.idfp for r in reports),
                                  sum(r.idfn for r in reports))
    timed = reports and all(r.elapsed for r in reports)
    elapsed = sum(r.elapsed for r in reports) if timed else None
    return _report(name, clear, ident, sum(r.frames for r in reports), elapsed)


def format_value(column: str, value) -> str:
    if value is None:
        return "-"
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if column == "Hz":
        return f"{value:.1f}"
    return format_real(float(value))


def report_rows(reports: Sequence[MetricsReport]) -> List[List[str]]:
    return [[format_value(c, r.values()[c]) for c in REPORT_COLUMNS] for r in reports]
