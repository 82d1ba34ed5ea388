"""Turning tracklets into fixed-length sequence samples, cropping them, and balanced batching."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import cv2
import numpy as np

from .annotations import (
    BEHAVIOURS,
    FRAME_DIR,
    BehaviourLabel,
    BoundingBox,
    Tracklet,
    VideoAnnotation,
    build_tracklets,
)

# ImageNet statistics; applied inside the model so checkpoints carry them.
RGB_MEAN = (0.485, 0.456, 0.406)
RGB_STD = (0.229, 0.224, 0.225)


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    sequence_length: int = 20
    sampling_stride: int = 20
    duration_threshold: int = 72
    crop_size: int = 224

    def __post_init__(self):
        for name in ("sequence_length", "sampling_stride", "duration_threshold", "crop_size"):
            if getattr(self, name) <= 0:
                raise SamplingError(f"{name} must be positive")
        if self.sequence_length > self.duration_threshold:
            raise SamplingError("sequence_length must not exceed duration_threshold")


@dataclass(frozen=True)
class BehaviourRun:
    video_id: str
    ape_id: int
    behaviour: BehaviourLabel
    start_frame: int
    end_frame: int  # inclusive
    bboxes: tuple[BoundingBox, ...]

    @property
    def length(self) -> int:
        return self.end_frame - self.start_frame + 1


@dataclass(frozen=True)
class SequenceSample:
    video_id: str
    ape_id: int
    start_frame: int
    sequence_length: int
    label: BehaviourLabel
    bboxes: tuple[BoundingBox, ...]

    @property
    def end_frame(self) -> int:
        return self.start_frame + self.sequence_length - 1

    @property
    def key(self) -> str:
        return f"{self.video_id}/{self.ape_id}/{self.start_frame}"

    def to_record(self) -> dict:
        return {
            "video_id": self.video_id,
            "ape_id": self.ape_id,
            "start_frame": self.start_frame,
            "sequence_length": self.sequence_length,
            "label": self.label.value,
            "bboxes": [list(b.as_tuple()) for b in self.bboxes],
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "SequenceSample":
        return cls(rec["video_id"], int(rec["ape_id"]), int(rec["start_frame"]),
                   int(rec["sequence_length"]), BehaviourLabel(rec["label"]),
                   tuple(BoundingBox(*b) for b in rec["bboxes"]))


def find_behaviour_runs(tracklet: Tracklet, threshold: int = 72) -> list[BehaviourRun]:
    """Maximal constant-behaviour runs of consecutive frames with length >= threshold.

    A run ends at a behaviour change or at a gap in the tracklet's frame indices.
    """
    runs = []
    entries = tracklet.entries
    start = 0
    for i in range(1, len(entries) + 1):
        if (i < len(entries)
                and entries[i].behaviour == entries[start].behaviour
                and entries[i].frame_index == entries[i - 1].frame_index + 1):
            continue
        if i - start >= threshold:
            seg = entries[start:i]
            runs.append(BehaviourRun(tracklet.video_id, tracklet.ape_id, seg[0].behaviour,
                                     seg[0].frame_index, seg[-1].frame_index,
                                     tuple(e.bbox for e in seg)))
        start = i
    return runs


def extract_sequences(run: BehaviourRun, cfg: SamplerConfig) -> list[SequenceSample]:
    """Windows aligned to the run start; trailing partial windows are dropped."""
    if run.length < cfg.duration_threshold:
        raise SamplingError(f"run of {run.length} frames is below the {cfg.duration_threshold}-frame threshold")
    n = cfg.sequence_length
    return [
        SequenceSample(run.video_id, run.ape_id, run.start_frame + off, n, run.behaviour,
                       run.bboxes[off:off + n])
        for off in range(0, run.length - n + 1, cfg.sampling_stride)
    ]


def plan_samples(videos: Iterable[VideoAnnotation], cfg: SamplerConfig) -> list[SequenceSample]:
    """All qualifying samples of the given videos, in (video, ape, frame) order."""
    samples = []
    for video in sorted(videos, key=lambda v: v.video_id):
        for tracklet in build_tracklets(video):
            for run in find_behaviour_runs(tracklet, cfg.duration_threshold):
                samples.extend(extract_sequences(run, cfg))
    return samples


def save_manifest(path: str | Path, samples: Sequence[SequenceSample], cfg: SamplerConfig) -> None:
    """JSON-lines manifest: a header line with the sampler config, then one sample per line."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"sampler_config": asdict(cfg), "num_samples": len(samples)}) + "\n")
        for s in samples:
            fh.write(json.dumps(s.to_record()) + "\n")


def load_manifest(path: str | Path) -> tuple[list[SequenceSample], SamplerConfig]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        samples = [SequenceSample.from_record(json.loads(line)) for line in fh if line.strip()]
    return samples, SamplerConfig(**header["sampler_config"])


# ------------------------------------------------------------------ materialisation


class FrameSource:
    """Reads decoded RGB frames (H, W, 3) uint8 from ``<root>/<video_id>/frames``."""

    def __init__(self, root: str | Path, cache_videos: int = 8):
        self.root = Path(root)
        self._load = lru_cache(maxsize=cache_videos * 256)(self._read)

    def path(self, video_id: str, frame_index: int) -> Path:
        return self.root / video_id / FRAME_DIR / f"frame_{frame_index:06d}.png"

    def _read(self, video_id: str, frame_index: int) -> np.ndarray:
        path = self.path(video_id, frame_index)
        img = cv2.imread(str(path), cv2.IMREAD_COLOR)
        if img is None:
            raise FileNotFoundError(f"missing frame image {path}")
        return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)

    def load(self, video_id: str, frame_index: int) -> np.ndarray:
        return self._load(video_id, frame_index)

    def has(self, video_id: str, frame_index: int) -> bool:
        return self.path(video_id, frame_index).exists()

    def num_frames(self, video_id: str) -> int:
        return len(list((self.root / video_id / FRAME_DIR).glob("frame_*.png")))


def crop_resize(image: np.ndarray, bbox: BoundingBox, size: int) -> np.ndarray:
    """Crop to ``bbox`` clamped to the image, then resize to ``size`` x ``size`` (aspect not kept)."""
    h, w = image.shape[:2]
    x0 = min(max(bbox.xmin, 0), w - 1)
    y0 = min(max(bbox.ymin, 0), h - 1)
    x1 = min(max(bbox.xmax, x0 + 1), w)
    y1 = min(max(bbox.ymax, y0 + 1), h)
    patch = image[y0:y1, x0:x1]
    interp = cv2.INTER_AREA if patch.shape[0] > size and patch.shape[1] > size else cv2.INTER_LINEAR
    return cv2.resize(patch, (size, size), interpolation=interp)


@dataclass
class CropMetadata:
    frame_indices: list[int]
    bboxes: list[tuple[int, int, int, int]]
    crop_size: int
    channel_order: str = "RGB"
    value_range: tuple[float, float] = (0.0, 1.0)
    mean: tuple[float, ...] = RGB_MEAN
    std: tuple[float, ...] = RGB_STD
    extra: dict = field(default_factory=dict)


def materialize(sample: SequenceSample, frames: FrameSource, cfg: SamplerConfig,
                as_uint8: bool = False) -> tuple[np.ndarray, CropMetadata]:
    """RGB crops for a sample, shape (n, crop, crop, 3), float32 in [0, 1] (or raw uint8)."""
    crops = []
    for i, bbox in enumerate(sample.bboxes):
        crops.append(crop_resize(frames.load(sample.video_id, sample.start_frame + i), bbox, cfg.crop_size))
    seq = np.stack(crops)
    meta = CropMetadata(list(range(sample.start_frame, sample.end_frame + 1)),
                        [b.as_tuple() for b in sample.bboxes], cfg.crop_size)
    if as_uint8:
        return seq, meta
    return seq.astype(np.float32) / 255.0, meta


# ------------------------------------------------------------------ balanced batches


class BalancedBatchSampler:
    """Yields index batches holding exactly ``batch_size // num_classes`` samples of every class.

    The largest class is visited once per epoch; smaller classes are drawn from
    back-to-back reshuffled passes, i.e. oversampled with replacement.
    """

    def __init__(self, labels: Sequence[int], batch_size: int = 9, seed: int = 0,
                 classes: Sequence[int] | None = None):
        self.labels = np.asarray(labels, dtype=np.int64)
        self.classes = list(range(len(BEHAVIOURS))) if classes is None else sorted(set(classes))
        missing = [c for c in self.classes if not np.any(self.labels == c)]
        if missing:
            names = ", ".join(BEHAVIOURS[c].value if c < len(BEHAVIOURS) else str(c) for c in missing)
            raise SamplingError(f"balanced sampling needs every class; no samples for: {names}")
        if batch_size % len(self.classes):
            raise SamplingError(f"batch_size {batch_size} is not divisible by {len(self.classes)} classes")
        stray = sorted(set(self.labels.tolist()) - set(self.classes))
        if stray:
            raise SamplingError(f"labels outside the balanced class set: {stray}")
        self.batch_size = batch_size
        self.per_class = batch_size // len(self.classes)
        self.seed = seed
        self.epoch = 0
        self._by_class = [np.flatnonzero(self.labels == c) for c in self.classes]

    def __len__(self) -> int:
        biggest = max(len(ix) for ix in self._by_class)
        return math.ceil(biggest * len(self.classes) / self.batch_size)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __iter__(self) -> Iterator[list[int]]:
        rng = np.random.default_rng([self.seed, self.epoch])
        n_batches = len(self)
        need = n_batches * self.per_class
        streams = []
        for ix in self._by_class:
            passes = math.ceil(need / len(ix))
            streams.append(np.concatenate([rng.permutation(ix) for _ in range(passes)])[:need])
        for b in range(n_batches):
            sl = slice(b * self.per_class, (b + 1) * self.per_class)
            batch = np.concatenate([s[sl] for s in streams])
            yield rng.permutation(batch).tolist()


def balanced_batches(samples: Sequence[SequenceSample], batch_size: int = 9, seed: int = 0,
                     classes: Sequence[BehaviourLabel] | None = None,
                     epoch: int = 0) -> Iterator[list[SequenceSample]]:
    """One epoch of class-balanced batches of samples."""
    sampler = BalancedBatchSampler([s.label.index for s in samples], batch_size, seed,
                                   None if classes is None else [c.index for c in classes])
    sampler.set_epoch(epoch)
    for batch in sampler:
        yield [samples[i] for i in batch]


class ShuffledBatchSampler:
    """Plain shuffled batches, the unbalanced alternative."""

    def __init__(self, n: int, batch_size: int, seed: int = 0):
        self.n, self.batch_size, self.seed, self.epoch = n, batch_size, seed, 0

    def __len__(self) -> int:
        return math.ceil(self.n / self.batch_size)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __iter__(self) -> Iterator[list[int]]:
        perm = np.random.default_rng([self.seed, self.epoch]).permutation(self.n)
        for b in range(len(self)):
            yield perm[b * self.batch_size:(b + 1) * self.batch_size].tolist()
