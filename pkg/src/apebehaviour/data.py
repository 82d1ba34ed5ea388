"""Corpus access and in-memory sample materialisation for training and evaluation."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .annotations import VideoAnnotation, list_videos, load_video
from .flow import FlowCache, FlowEncodingConfig, flow_for_sample
from .sampling import FrameSource, SamplerConfig, SequenceSample, materialize, plan_samples

FLOW_CACHE_ENV = "APEBEHAVIOUR_FLOW_CACHE"


class Corpus:
    """A corpus directory with lazily loaded annotations, frames and flow cache.

    The flow cache lives in ``flow_cache``, else ``$APEBEHAVIOUR_FLOW_CACHE/<corpus name>``,
    else ``<root>/.flowcache``.
    """

    def __init__(self, root: str | Path, flow_cache: str | Path | None = None,
                 flow_cfg: FlowEncodingConfig = FlowEncodingConfig()):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"corpus not found: {self.root}")
        if flow_cache is None:
            env = os.environ.get(FLOW_CACHE_ENV)
            flow_cache = Path(env) / self.root.name if env else self.root / ".flowcache"
        self.frames = FrameSource(self.root)
        self.flow_cfg = flow_cfg
        self.flow = FlowCache(flow_cache, self.frames, flow_cfg)
        self._videos: dict[str, VideoAnnotation] = {}

    @property
    def video_ids(self) -> list[str]:
        return list_videos(self.root)

    def video(self, video_id: str) -> VideoAnnotation:
        if video_id not in self._videos:
            self._videos[video_id] = load_video(self.root / video_id)
        return self._videos[video_id]

    def videos(self, ids: Iterable[str] | None = None) -> list[VideoAnnotation]:
        return [self.video(v) for v in (self.video_ids if ids is None else ids)]

    def samples(self, cfg: SamplerConfig, ids: Iterable[str] | None = None) -> list[SequenceSample]:
        return plan_samples(self.videos(ids), cfg)


class SampleStore:
    """Materialised (rgb, flow) uint8 crops per sample, computed once and kept in memory."""

    def __init__(self, corpus: Corpus, cfg: SamplerConfig):
        self.corpus = corpus
        self.cfg = cfg
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def get(self, sample: SequenceSample) -> tuple[np.ndarray, np.ndarray]:
        item = self._cache.get(sample.key)
        if item is None:
            rgb, _ = materialize(sample, self.corpus.frames, self.cfg, as_uint8=True)
            flow = flow_for_sample(sample, self.corpus.flow, self.cfg, as_uint8=True)
            item = self._cache[sample.key] = (rgb, flow)
        return item

    def batch(self, samples: Sequence[SequenceSample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(rgb (B,T,3,H,W), flow (B,T,1,H,W), labels (B,)) with pixel values in [0, 1]."""
        pairs = [self.get(s) for s in samples]
        rgb = torch.from_numpy(np.stack([p[0] for p in pairs])).permute(0, 1, 4, 2, 3).float().div_(255.0)
        flow = torch.from_numpy(np.stack([p[1] for p in pairs])).permute(0, 1, 4, 2, 3).float().div_(255.0)
        labels = torch.tensor([s.label.index for s in samples], dtype=torch.long)
        return rgb, flow, labels

    def clear(self) -> None:
        self._cache.clear()
