"""Dense optical flow, greyscale magnitude encoding and the per-frame flow cache."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .sampling import FrameSource, SamplerConfig, SequenceSample, crop_resize

FLOW_ALGORITHM = "farneback"


@dataclass(frozen=True)
class FarnebackParams:
    pyr_scale: float = 0.5
    levels: int = 3
    winsize: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.2


@dataclass(frozen=True)
class FlowEncodingConfig:
    clip_magnitude: float = 20.0
    encoding: str = "greyscale-magnitude"
    algorithm: str = FLOW_ALGORITHM
    params: FarnebackParams = field(default_factory=FarnebackParams)

    def __post_init__(self):
        if self.clip_magnitude <= 0:
            raise ValueError("clip_magnitude must be positive")
        if self.encoding != "greyscale-magnitude":
            raise ValueError(f"unsupported flow encoding {self.encoding!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FlowEncodingConfig":
        d = dict(d)
        d["params"] = FarnebackParams(**d.get("params", {}))
        return cls(**d)


def _grey(frame: np.ndarray) -> np.ndarray:
    if frame.ndim == 2:
        return frame
    return cv2.cvtColor(frame, cv2.COLOR_RGB2GRAY)


def compute_dense_flow(frame_t: np.ndarray, frame_t1: np.ndarray,
                       params: FarnebackParams = FarnebackParams()) -> np.ndarray:
    """Per-pixel (dx, dy) from ``frame_t`` to ``frame_t1``, shape (H, W, 2) float32."""
    if frame_t.shape[:2] != frame_t1.shape[:2]:
        raise ValueError(f"frame size mismatch: {frame_t.shape[:2]} vs {frame_t1.shape[:2]}")
    flow = cv2.calcOpticalFlowFarneback(
        _grey(frame_t), _grey(frame_t1), None, params.pyr_scale, params.levels, params.winsize,
        params.iterations, params.poly_n, params.poly_sigma, 0)
    return np.nan_to_num(flow, nan=0.0, posinf=0.0, neginf=0.0)


def encode_flow_greyscale(flow: np.ndarray, cfg: FlowEncodingConfig = FlowEncodingConfig()) -> np.ndarray:
    """Clipped flow magnitude scaled to [0, 1], shape (H, W) float32. Direction is discarded."""
    mag = np.hypot(flow[..., 0], flow[..., 1])
    return (np.minimum(mag, cfg.clip_magnitude) / cfg.clip_magnitude).astype(np.float32)


def to_uint8(encoded: np.ndarray) -> np.ndarray:
    return np.round(encoded * 255.0).astype(np.uint8)


class FlowCache:
    """Encoded flow frames stored as ``<root>/<video_id>/<frame_index>.png``.

    Each video directory carries ``flow_meta.json`` with the algorithm and
    parameters; a mismatch invalidates that video's cached frames.
    """

    META = "flow_meta.json"

    def __init__(self, root: str | Path | None, frames: FrameSource,
                 cfg: FlowEncodingConfig = FlowEncodingConfig(), max_memory: int = 8192):
        self.max_memory = max_memory
        self.root = Path(root) if root is not None else None
        self.frames = frames
        self.cfg = cfg
        self._checked: set[str] = set()
        self._memory: dict[tuple[str, int], np.ndarray] = {}
        self.hits = 0
        self.misses = 0

    def _vdir(self, video_id: str) -> Path:
        return self.root / video_id

    def _ensure_meta(self, video_id: str) -> None:
        if self.root is None or video_id in self._checked:
            return
        vdir = self._vdir(video_id)
        vdir.mkdir(parents=True, exist_ok=True)
        meta_path = vdir / self.META
        want = self.cfg.to_dict()
        if meta_path.exists() and json.loads(meta_path.read_text()) != want:
            for stale in vdir.glob("*.png"):
                stale.unlink()
        if not meta_path.exists() or json.loads(meta_path.read_text()) != want:
            _atomic_write(meta_path, (json.dumps(want, indent=2, sort_keys=True) + "\n").encode())
        self._checked.add(video_id)

    def source_pair(self, video_id: str, frame_index: int) -> tuple[int, int]:
        """Frames used for flow at ``frame_index``; the final frame reuses the previous pair."""
        if self.frames.has(video_id, frame_index + 1):
            return frame_index, frame_index + 1
        if frame_index == 0:
            raise FileNotFoundError(f"video {video_id} has a single frame; flow undefined")
        return frame_index - 1, frame_index

    def _remember(self, key: tuple[str, int], img: np.ndarray) -> None:
        if len(self._memory) >= self.max_memory:
            self._memory.pop(next(iter(self._memory)))
        self._memory[key] = img

    def get(self, video_id: str, frame_index: int) -> np.ndarray:
        """Full-frame encoded flow as uint8 (H, W)."""
        key = (video_id, frame_index)
        if key in self._memory:
            self.hits += 1
            return self._memory[key]
        self._ensure_meta(video_id)
        path = None if self.root is None else self._vdir(video_id) / f"{frame_index}.png"
        if path is not None and path.exists():
            img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
            if img is not None:
                self.hits += 1
                self._remember(key, img)
                return img
        self.misses += 1
        a, b = self.source_pair(video_id, frame_index)
        flow = compute_dense_flow(self.frames.load(video_id, a), self.frames.load(video_id, b),
                                  self.cfg.params)
        img = to_uint8(encode_flow_greyscale(flow, self.cfg))
        if path is not None:
            ok, buf = cv2.imencode(".png", img)
            if not ok:
                raise OSError(f"could not encode flow frame {video_id}#{frame_index}")
            _atomic_write(path, buf.tobytes())
        self._remember(key, img)
        return img

    def clear_memory(self) -> None:
        self._memory.clear()

    def warm(self, video_id: str, num_frames: int | None = None) -> int:
        n = self.frames.num_frames(video_id) if num_frames is None else num_frames
        for i in range(n):
            self.get(video_id, i)
        return n


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def flow_for_sample(sample: SequenceSample, cache: FlowCache, cfg: SamplerConfig,
                    as_uint8: bool = False) -> np.ndarray:
    """Encoded flow crops aligned with the RGB crops, shape (n, crop, crop, 1)."""
    crops = [crop_resize(cache.get(sample.video_id, sample.start_frame + i), bbox, cfg.crop_size)
             for i, bbox in enumerate(sample.bboxes)]
    seq = np.stack(crops)[..., None]
    if as_uint8:
        return seq
    return seq.astype(np.float32) / 255.0
