"""Annotation data model, per-frame XML I/O, tracklets, corpus validation and splits.

A corpus on disk is a directory with one sub-directory per video::

    <root>/<video_id>/meta.json                       # fps, frame size
    <root>/<video_id>/annotations/<video_id>_frame_<index>.xml
    <root>/<video_id>/frames/frame_<index:06d>.png    # optional decoded frames
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_FPS = 24
ANNOTATION_DIR = "annotations"
FRAME_DIR = "frames"
META_FILE = "meta.json"


class AnnotationError(ValueError):
    """Base class for annotation parse/validation failures."""


class AnnotationParseError(AnnotationError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class AnnotationValidationError(AnnotationError):
    pass


class BehaviourLabel(str, Enum):
    """The nine core behaviours. Canonical index is the (alphabetical) definition order."""

    CAMERA_INTERACTION = "camera_interaction"
    CLIMBING_DOWN = "climbing_down"
    CLIMBING_UP = "climbing_up"
    HANGING = "hanging"
    RUNNING = "running"
    SITTING = "sitting"
    SITTING_ON_BACK = "sitting_on_back"
    STANDING = "standing"
    WALKING = "walking"

    @property
    def index(self) -> int:
        return _LABEL_INDEX[self]

    @classmethod
    def from_index(cls, index: int) -> "BehaviourLabel":
        return BEHAVIOURS[index]

    @classmethod
    def parse(cls, text: str) -> "BehaviourLabel":
        try:
            return cls(text.strip())
        except ValueError:
            raise AnnotationValidationError(f"unknown behaviour label {text.strip()!r}") from None


BEHAVIOURS: tuple[BehaviourLabel, ...] = tuple(BehaviourLabel)
_LABEL_INDEX = {label: i for i, label in enumerate(BEHAVIOURS)}
CLASS_NAMES: tuple[str, ...] = tuple(b.value for b in BEHAVIOURS)
NUM_CLASSES = len(BEHAVIOURS)


@dataclass(frozen=True)
class BoundingBox:
    xmin: int
    ymin: int
    xmax: int
    ymax: int

    def __post_init__(self):
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise AnnotationValidationError(f"inverted or empty bbox {self.as_tuple()}")
        if self.xmin < 0 or self.ymin < 0:
            raise AnnotationValidationError(f"negative bbox coordinate {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)

    @property
    def width(self) -> int:
        return self.xmax - self.xmin

    @property
    def height(self) -> int:
        return self.ymax - self.ymin

    def fits(self, width: int, height: int) -> bool:
        return self.xmax <= width and self.ymax <= height


@dataclass(frozen=True)
class ApeInstance:
    ape_id: int
    behaviour: BehaviourLabel
    bbox: BoundingBox

    def __post_init__(self):
        if self.ape_id < 0:
            raise AnnotationValidationError(f"negative ape id {self.ape_id}")


@dataclass
class FrameAnnotation:
    video_id: str
    frame_index: int
    instances: list[ApeInstance] = field(default_factory=list)

    def duplicate_ids(self) -> list[int]:
        counts = Counter(inst.ape_id for inst in self.instances)
        return sorted(i for i, c in counts.items() if c > 1)


@dataclass
class VideoAnnotation:
    video_id: str
    frames: list[FrameAnnotation]
    fps: float = DEFAULT_FPS
    width: int | None = None
    height: int | None = None

    @property
    def num_frames(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class TrackletEntry:
    frame_index: int
    behaviour: BehaviourLabel
    bbox: BoundingBox


@dataclass
class Tracklet:
    video_id: str
    ape_id: int
    entries: list[TrackletEntry]

    def __len__(self) -> int:
        return len(self.entries)

    def frame_indices(self) -> list[int]:
        return [e.frame_index for e in self.entries]


@dataclass(frozen=True)
class CorpusSplit:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    seed: int

    def to_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSplit":
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]), int(d["seed"]))


# --------------------------------------------------------------------------- XML


def annotation_filename(video_id: str, frame_index: int) -> str:
    return f"{video_id}_frame_{frame_index}.xml"


def _byte_offset(document: bytes, line: int, column: int) -> int:
    lines = document.split(b"\n")
    return sum(len(lines[i]) + 1 for i in range(min(line - 1, len(lines)))) + column


def _child_text(elem: ET.Element, tag: str) -> str:
    child = elem.find(tag)
    if child is None or child.text is None:
        raise AnnotationValidationError(f"<{elem.tag}> is missing <{tag}>")
    return child.text.strip()


def _child_int(elem: ET.Element, tag: str) -> int:
    text = _child_text(elem, tag)
    try:
        return int(text)
    except ValueError:
        raise AnnotationValidationError(f"<{tag}> is not an integer: {text!r}") from None


def parse_frame_annotation(xml_document: bytes | str) -> FrameAnnotation:
    """Parse one per-frame annotation document.

    Raises AnnotationParseError (with the byte offset) for malformed XML and
    AnnotationValidationError for schema or label violations.
    """
    if isinstance(xml_document, str):
        xml_document = xml_document.encode("utf-8")
    try:
        root = ET.fromstring(xml_document)
    except ET.ParseError as exc:
        line, column = exc.position
        raise AnnotationParseError(f"malformed annotation XML: {exc}",
                                   _byte_offset(xml_document, line, column)) from None
    if root.tag != "annotation":
        raise AnnotationValidationError(f"root element must be <annotation>, got <{root.tag}>")
    video_id = _child_text(root, "video")
    frame_index = _child_int(root, "frame")
    if frame_index < 0:
        raise AnnotationValidationError(f"negative frame index {frame_index}")
    instances = []
    for obj in root.findall("object"):
        box = obj.find("bndbox")
        if box is None:
            raise AnnotationValidationError("<object> is missing <bndbox>")
        bbox = BoundingBox(*(_child_int(box, t) for t in ("xmin", "ymin", "xmax", "ymax")))
        instances.append(ApeInstance(
            ape_id=_child_int(obj, "id"),
            behaviour=BehaviourLabel.parse(_child_text(obj, "behaviour")),
            bbox=bbox,
        ))
    return FrameAnnotation(video_id, frame_index, instances)


def serialize_frame_annotation(frame: FrameAnnotation) -> bytes:
    root = ET.Element("annotation")
    ET.SubElement(root, "video").text = frame.video_id
    ET.SubElement(root, "frame").text = str(frame.frame_index)
    for inst in frame.instances:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "id").text = str(inst.ape_id)
        ET.SubElement(obj, "behaviour").text = inst.behaviour.value
        box = ET.SubElement(obj, "bndbox")
        for tag, value in zip(("xmin", "ymin", "xmax", "ymax"), inst.bbox.as_tuple()):
            ET.SubElement(box, tag).text = str(value)
    ET.indent(root, space="  ")
    return ET.tostring(root, encoding="utf-8") + b"\n"


# ---------------------------------------------------------------------- tracklets


def build_tracklets(video: VideoAnnotation) -> list[Tracklet]:
    """One tracklet per ape id, ordered by id; frame gaps are kept as index jumps."""
    entries: dict[int, list[TrackletEntry]] = {}
    for frame in sorted(video.frames, key=lambda f: f.frame_index):
        for inst in frame.instances:
            entries.setdefault(inst.ape_id, []).append(
                TrackletEntry(frame.frame_index, inst.behaviour, inst.bbox))
    return [Tracklet(video.video_id, ape_id, entries[ape_id]) for ape_id in sorted(entries)]


# ------------------------------------------------------------------ corpus on disk


def write_video(root: str | Path, video: VideoAnnotation) -> Path:
    vdir = Path(root) / video.video_id
    adir = vdir / ANNOTATION_DIR
    adir.mkdir(parents=True, exist_ok=True)
    meta = {"video_id": video.video_id, "fps": video.fps, "width": video.width,
            "height": video.height, "num_frames": video.num_frames}
    (vdir / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for frame in video.frames:
        (adir / annotation_filename(video.video_id, frame.frame_index)).write_bytes(
            serialize_frame_annotation(frame))
    return vdir


def _frame_index_from_name(path: Path) -> int:
    return int(path.stem.rsplit("_frame_", 1)[1])


def _read_meta(vdir: Path) -> dict:
    meta_path = vdir / META_FILE
    return json.loads(meta_path.read_text()) if meta_path.exists() else {}


def _frame_size_from_images(vdir: Path) -> tuple[int, int] | None:
    frames = sorted((vdir / FRAME_DIR).glob("frame_*.png"))
    if not frames:
        return None
    from PIL import Image

    with Image.open(frames[0]) as im:
        return im.size


def load_video(vdir: str | Path) -> VideoAnnotation:
    """Load a video's annotations; frames are sorted but not checked for gaps."""
    vdir = Path(vdir)
    meta = _read_meta(vdir)
    frames = [parse_frame_annotation(p.read_bytes()) for p in (vdir / ANNOTATION_DIR).glob("*.xml")]
    frames.sort(key=lambda f: f.frame_index)
    width, height = meta.get("width"), meta.get("height")
    if width is None or height is None:
        size = _frame_size_from_images(vdir)
        if size is not None:
            width, height = size
    return VideoAnnotation(meta.get("video_id", vdir.name), frames, meta.get("fps", DEFAULT_FPS),
                           width, height)


def list_videos(root: str | Path) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus root not found: {root}")
    return sorted(p.name for p in root.iterdir() if (p / ANNOTATION_DIR).is_dir())


def load_corpus(root: str | Path, video_ids: Iterable[str] | None = None) -> dict[str, VideoAnnotation]:
    root = Path(root)
    ids = list_videos(root) if video_ids is None else list(video_ids)
    return {vid: load_video(root / vid) for vid in ids}


# ---------------------------------------------------------------------- validation


@dataclass
class Violation:
    kind: str  # duplicate-id | frame-gap | bbox | parse | label | video-mismatch | duplicate-frame
    video_id: str
    frame_index: int | None
    detail: str

    def __str__(self) -> str:
        where = self.video_id if self.frame_index is None else f"{self.video_id}#{self.frame_index}"
        return f"{self.kind}\t{where}\t{self.detail}"


@dataclass
class VideoStats:
    video_id: str
    num_frames: int
    num_instances: int


@dataclass
class ValidationReport:
    videos: list[VideoStats] = field(default_factory=list)
    behaviour_histogram: dict[str, int] = field(default_factory=lambda: {c: 0 for c in CLASS_NAMES})
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "videos": [asdict(v) for v in self.videos],
            "behaviour_histogram": dict(self.behaviour_histogram),
            "violations": [asdict(v) for v in self.violations],
        }

    def to_text(self) -> str:
        lines = [f"video\t{v.video_id}\tframes={v.num_frames}\tinstances={v.num_instances}"
                 for v in self.videos]
        lines += [f"behaviour\t{name}\t{count}" for name, count in self.behaviour_histogram.items()]
        lines += [f"violation\t{v}" for v in self.violations]
        lines.append(f"summary\tvideos={len(self.videos)}\tviolations={len(self.violations)}")
        return "\n".join(lines) + "\n"

    def write(self, path_stem: str | Path) -> None:
        path_stem = Path(path_stem)
        path_stem.with_suffix(".txt").write_text(self.to_text())
        path_stem.with_suffix(".json").write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def validate_corpus(root: str | Path) -> ValidationReport:
    """Check every video of a corpus and collect all violations instead of failing fast."""
    root = Path(root)
    report = ValidationReport()
    for vid in list_videos(root):
        vdir = root / vid
        meta = _read_meta(vdir)
        size = (meta.get("width"), meta.get("height"))
        if None in size:
            size = _frame_size_from_images(vdir) or (None, None)
        frames: dict[int, FrameAnnotation] = {}
        for path in sorted((vdir / ANNOTATION_DIR).glob("*.xml")):
            try:
                frame = parse_frame_annotation(path.read_bytes())
            except AnnotationParseError as exc:
                report.violations.append(Violation("parse", vid, None, f"{path.name}: {exc}"))
                continue
            except AnnotationValidationError as exc:
                kind = "label" if "behaviour label" in str(exc) else "bbox" if "bbox" in str(exc) else "parse"
                report.violations.append(Violation(kind, vid, None, f"{path.name}: {exc}"))
                continue
            if frame.video_id != vid:
                report.violations.append(Violation("video-mismatch", vid, frame.frame_index,
                                                   f"{path.name} names video {frame.video_id!r}"))
            if frame.frame_index in frames:
                report.violations.append(Violation("duplicate-frame", vid, frame.frame_index, path.name))
                continue
            frames[frame.frame_index] = frame
        n_instances = 0
        for idx in sorted(frames):
            frame = frames[idx]
            n_instances += len(frame.instances)
            for dup in frame.duplicate_ids():
                report.violations.append(Violation("duplicate-id", vid, idx, f"ape id {dup} repeated"))
            for inst in frame.instances:
                report.behaviour_histogram[inst.behaviour.value] += 1
                if size[0] is not None and not inst.bbox.fits(*size):
                    report.violations.append(Violation(
                        "bbox", vid, idx, f"ape {inst.ape_id} bbox {inst.bbox.as_tuple()} exceeds "
                                          f"frame {size[0]}x{size[1]}"))
        present = set(frames)
        if present:
            for missing in sorted(set(range(max(present) + 1)) - present):
                report.violations.append(Violation("frame-gap", vid, missing, "annotation missing"))
        report.videos.append(VideoStats(vid, len(frames), n_instances))
    return report


# --------------------------------------------------------------------------- splits


def _largest_remainder(total: int, ratio: Sequence[float]) -> list[int]:
    weight = float(sum(ratio))
    quotas = [total * r / weight for r in ratio]
    sizes = [int(np.floor(q)) for q in quotas]
    short = total - sum(sizes)
    # stable: ties go to the earlier part
    order = sorted(range(len(ratio)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:short]:
        sizes[i] += 1
    return sizes


def split_corpus(video_ids: Iterable[str], ratio: Sequence[float] = (400, 25, 75),
                 seed: int = 0) -> CorpusSplit:
    """Deterministic train/val/test split with largest-remainder rounding of the ratio."""
    ids = sorted(set(video_ids))
    if not ids:
        raise ValueError("cannot split an empty set of videos")
    if len(ratio) != 3 or any(r < 0 for r in ratio) or sum(ratio) <= 0:
        raise ValueError(f"ratio must be three non-negative parts, got {ratio}")
    if len(ids) < sum(1 for r in ratio if r > 0):
        raise ValueError(f"{len(ids)} videos cannot fill {len(ratio)} split parts")
    sizes = _largest_remainder(len(ids), ratio)
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    a, b = sizes[0], sizes[0] + sizes[1]
    return CorpusSplit(tuple(sorted(shuffled[:a])), tuple(sorted(shuffled[a:b])),
                       tuple(sorted(shuffled[b:])), seed)
