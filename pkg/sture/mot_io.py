"""Reading and writing of MOTChallenge files, EMB1 sidecars and run configuration.

Formats:
- det/gt/result CSV: ``frame,id,bb_left,bb_top,bb_width,bb_height,conf,x,y,z``
- seqinfo INI: ``[Sequence]`` with name, frameRate, seqLength, imWidth, imHeight
- EMB1: magic ``EMB1``, uint32 count, uint32 dim, count*dim float32, little-endian
"""
import configparser
import logging
import struct
from dataclasses import dataclass
from itertools import groupby
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np

from sture.config import DatasetSpec, TrackerConfig, TrainConfig
from sture.errors import ConfigError, ContractViolation, ParseError, ValidationError
from sture.geometry import BoundingBox

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

EMB_MAGIC = b"EMB1"
_EMB_HEADER = struct.Struct("<4sII")

TRACKER_SECTION = "tracker"
TRAIN_SECTION = "train"
DATASET_SECTION = "dataset"


@dataclass
class DetectionRecord:
    """One line of a det, gt or result file."""

    frame: int
    track_id: int
    bb_left: float
    bb_top: float
    bb_width: float
    bb_height: float
    confidence: float
    world_x: float = -1.0
    world_y: float = -1.0
    world_z: float = -1.0

    @property
    def box(self) -> BoundingBox:
        return BoundingBox(self.bb_left, self.bb_top, self.bb_width, self.bb_height)

    @classmethod
    def from_box(cls, frame: int, track_id: int, box: BoundingBox, confidence: float = 1.0) -> "DetectionRecord":
        return cls(frame, track_id, box.left, box.top, box.width, box.height, confidence)


@dataclass
class SequenceInfo:
    """Contents of a seqinfo.ini file."""

    name: str
    frame_rate: float
    seq_length: int
    img_width: int
    img_height: int

    def __post_init__(self):
        if self.seq_length < 1:
            raise ValidationError(f"Sequence '{self.name}' needs seqLength >= 1, got {self.seq_length}")
        if self.frame_rate <= 0:
            raise ValidationError(f"Sequence '{self.name}' needs a positive frameRate, got {self.frame_rate}")


def format_real(value: float) -> str:
    """Up to six decimals with trailing zeros trimmed."""
    text = f"{value:.6f}".rstrip("0").rstrip(".")
    if text in ("-0", ""):
        return "0"
    return text


def _integral(text: str) -> int:
    value = float(text)
    if not value.is_integer():
        raise ValueError(f"expected an integer, got '{text}'")
    return int(value)


def parse_detections(path: PathLike) -> List[DetectionRecord]:
    """Parse a MOTChallenge CSV, sorted by frame with input order kept inside a frame."""
    path = Path(path)
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) < 7:
                raise ParseError(str(path), line_no, f"expected at least 7 fields, got {len(parts)}")
            try:
                frame = _integral(parts[0])
                track_id = _integral(parts[1])
                reals = [float(p) for p in parts[2:10]]
            except ValueError as e:
                raise ParseError(str(path), line_no, f"bad number ({e})")
            reals += [-1.0] * (8 - len(reals))
            record = DetectionRecord(frame, track_id, *reals)
            if record.frame < 1:
                raise ValidationError(f"{path}:{line_no}: frame must be >= 1, got {record.frame}")
            if not (record.bb_width > 0 and record.bb_height > 0):
                raise ValidationError(
                    f"{path}:{line_no}: record (frame {frame}, id {track_id}) has non-positive "
                    f"size {record.bb_width}x{record.bb_height}"
                )
            records.append(record)
    records.sort(key=lambda r: r.frame)
    return records


def format_record(record: DetectionRecord) -> str:
    reals = (
        record.bb_left, record.bb_top, record.bb_width, record.bb_height, record.confidence,
        record.world_x, record.world_y, record.world_z,
    )
    return ",".join([str(record.frame), str(record.track_id)] + [format_real(v) for v in reals])


def write_results(tracks: Iterable[DetectionRecord], path: PathLike) -> None:
    """Write tracker output ordered by (frame, id)."""
    records = list(tracks)
    for record in records:
        if record.track_id < 1:
            raise ContractViolation(
                f"Result record at frame {record.frame} has unassigned id {record.track_id}"
            )
    records.sort(key=lambda r: (r.frame, r.track_id))
    write_detections(records, path)


def write_detections(records: Iterable[DetectionRecord], path: PathLike) -> None:
    """Write records in the given order (det and gt files)."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(format_record(record) + "\n")


def group_by_frame(records: Iterable[DetectionRecord]) -> Dict[int, List[DetectionRecord]]:
    ordered = sorted(records, key=lambda r: r.frame)
    return {frame: list(group) for frame, group in groupby(ordered, key=lambda r: r.frame)}


def read_embeddings(path: PathLike) -> np.ndarray:
    """Decode an EMB1 file into a (count, dim) float64 matrix."""
    data = Path(path).read_bytes()
    if len(data) < _EMB_HEADER.size:
        raise ParseError(str(path), 0, "truncated header")
    magic, count, dim = _EMB_HEADER.unpack_from(data)
    if magic != EMB_MAGIC:
        raise ParseError(str(path), 0, f"magic mismatch: expected {EMB_MAGIC!r}, got {magic!r}")
    if count == 0:
        raise ParseError(str(path), 0, "empty embedding file")
    if dim == 0:
        raise ParseError(str(path), 0, "embedding dimension is zero")
    expected = count * dim * 4
    payload = data[_EMB_HEADER.size:]
    if len(payload) < expected:
        raise ParseError(str(path), 0, f"truncated payload: expected {expected} bytes, got {len(payload)}")
    matrix = np.frombuffer(payload, dtype="<f4", count=count * dim).reshape(count, dim)
    return matrix.astype(np.float64)


def write_embeddings(matrix: np.ndarray, path: PathLike) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] == 0 or matrix.shape[1] == 0:
        raise ContractViolation(f"Embedding matrix must be non-empty 2-D, got shape {matrix.shape}")
    count, dim = matrix.shape
    with open(path, "wb") as f:
        f.write(_EMB_HEADER.pack(EMB_MAGIC, count, dim))
        f.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_seqinfo(path: PathLike) -> SequenceInfo:
    parser = configparser.ConfigParser()
    if not parser.read(path, encoding="utf-8"):
        raise ParseError(str(path), 0, "cannot read seqinfo")
    if not parser.has_section("Sequence"):
        raise ParseError(str(path), 0, "missing [Sequence] section")
    section = parser["Sequence"]
    try:
        return SequenceInfo(
            name=section.get("name", Path(path).parent.name),
            frame_rate=section.getfloat("frameRate"),
            seq_length=section.getint("seqLength"),
            img_width=section.getint("imWidth"),
            img_height=section.getint("imHeight"),
        )
    except (TypeError, ValueError) as e:
        raise ParseError(str(path), 0, f"bad [Sequence] value ({e})")


def write_seqinfo(info: SequenceInfo, path: PathLike) -> None:
    lines = [
        "[Sequence]",
        f"name={info.name}",
        f"frameRate={format_real(info.frame_rate)}",
        f"seqLength={info.seq_length}",
        f"imWidth={info.img_width}",
        f"imHeight={info.img_height}",
        "",
    ]
    Path(path).write_text("\n".join(lines), encoding="utf-8")


def _read_ini(path: Optional[PathLike], default_section: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(default_section="__defaults__", strict=False)
    parser.optionxform = str
    if path is None:
        return parser
    if not Path(path).is_file():
        raise ConfigError(f"Config file {path} not found")
    text = Path(path).read_text(encoding="utf-8")
    try:
        parser.read_string(f"[{default_section}]\n" + text, source=str(path))
    except configparser.Error as e:
        raise ConfigError(f"Cannot parse config {path}: {e}")
    return parser


def _section(parser: configparser.ConfigParser, name: str) -> Dict[str, str]:
    return dict(parser[name]) if parser.has_section(name) else {}


def load_config(path: Optional[PathLike], frame_rate: float = 30.0, **overrides) -> TrackerConfig:
    """Tracker thresholds from INI text; unset keys take the frame-rate defaults."""
    parser = _read_ini(path, TRACKER_SECTION)
    for section in parser.sections():
        if section not in (TRACKER_SECTION, TRAIN_SECTION, DATASET_SECTION):
            raise ConfigError(f"Unknown config section [{section}]")
    values: Dict[str, object] = _section(parser, TRACKER_SECTION)
    values.update({k: v for k, v in overrides.items() if v is not None})
    config = TrackerConfig.for_frame_rate(frame_rate, **values)
    logger.debug(f"Tracker config: {config.to_dict()}")
    return config


def load_train_config(path: Optional[PathLike], **overrides) -> TrainConfig:
    """Training settings from the ``[train]`` section; T, D, M and seed may sit at top level."""
    parser = _read_ini(path, TRACKER_SECTION)
    shared = _section(parser, TRACKER_SECTION)
    values: Dict[str, object] = {k: shared[k] for k in ("T", "D", "M", "seed") if k in shared}
    values.update(_section(parser, TRAIN_SECTION))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_mapping(values)


def load_dataset_spec(path: PathLike) -> DatasetSpec:
    parser = _read_ini(path, DATASET_SECTION)
    values = _section(parser, DATASET_SECTION)
    return DatasetSpec.from_mapping(values)
