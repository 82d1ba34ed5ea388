"""Focal loss, the SGD setup and the training loop with checkpointing."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .annotations import CLASS_NAMES, CorpusSplit, split_corpus
from .data import Corpus, SampleStore
from .flow import FlowEncodingConfig
from .model import ModelConfig, TwoStreamNet, build_model
from .sampling import BalancedBatchSampler, SamplerConfig, SequenceSample, ShuffledBatchSampler

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: "Checkpoint | None"):
        super().__init__(message)
        self.checkpoint = checkpoint


class CheckpointMismatch(ValueError):
    pass


# ----------------------------------------------------------------------------- loss


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, alpha: float = 1.0,
               gamma: float = 1.0) -> torch.Tensor:
    """Mean of -alpha * (1 - p_t)^gamma * log(p_t) with p_t the true-class softmax probability."""
    if targets.numel() and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise ValueError(f"targets must lie in [0, {logits.shape[-1]})")
    log_pt = F.log_softmax(logits, dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    pt = log_pt.exp()
    weight = (1.0 - pt).clamp_min(0.0) ** gamma if gamma else torch.ones_like(pt)
    return (-alpha * weight * log_pt).mean()


class FocalLoss(nn.Module):
    def __init__(self, alpha: float = 1.0, gamma: float = 1.0):
        super().__init__()
        self.alpha, self.gamma = alpha, gamma

    def forward(self, logits, targets):
        return focal_loss(logits, targets, self.alpha, self.gamma)


# --------------------------------------------------------------------------- config


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.01
    batch_size: int = 9
    loss: Literal["focal", "cross_entropy"] = "focal"
    focal_alpha: float = 1.0
    focal_gamma: float = 1.0
    balanced: bool = True
    epochs: int = 30
    seed: int = 0
    split_ratio: tuple[float, float, float] = (400, 25, 75)
    target_train_top1: float | None = None  # stop once running train Top-1 reaches this

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")
        if self.loss not in ("focal", "cross_entropy"):
            raise ValueError(f"unknown loss {self.loss!r}")

    def criterion(self) -> nn.Module:
        if self.loss == "focal":
            return FocalLoss(self.focal_alpha, self.focal_gamma)
        return nn.CrossEntropyLoss()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "split_ratio" in d:
            d["split_ratio"] = tuple(d["split_ratio"])
        return cls(**d)


def build_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    """SGD with L2 weight decay on weights only; biases and norm parameters are not decayed."""
    decay, plain = [], []
    for p in model.parameters():
        if p.requires_grad:
            (decay if p.dim() > 1 else plain).append(p)
    return torch.optim.SGD([
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": plain, "weight_decay": 0.0},
    ], lr=cfg.learning_rate, momentum=cfg.momentum)


# ----------------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    model_config: ModelConfig
    sampler_config: SamplerConfig
    train_config: TrainConfig
    flow_config: FlowEncodingConfig
    state_dict: dict
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    class_order: list[str] = field(default_factory=lambda: list(CLASS_NAMES))
    split: CorpusSplit | None = None
    optimizer_state: dict | None = None
    rng_state: dict | None = None
    weights_source: str = "random"
    version: int = CHECKPOINT_VERSION

    def build(self) -> TwoStreamNet:
        model = TwoStreamNet(self.model_config)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": ckpt.version,
        "model_config": ckpt.model_config.to_dict(),
        "sampler_config": asdict(ckpt.sampler_config),
        "train_config": ckpt.train_config.to_dict(),
        "flow_config": ckpt.flow_config.to_dict(),
        "class_order": list(ckpt.class_order),
        "state_dict": ckpt.state_dict,
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "split": ckpt.split.to_dict() if ckpt.split else None,
        "optimizer_state": ckpt.optimizer_state,
        "rng_state": ckpt.rng_state,
        "weights_source": ckpt.weights_source,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, model_config: ModelConfig | None = None,
                    class_order: Sequence[str] | None = None) -> Checkpoint:
    """Load a checkpoint, refusing it if it disagrees with the expected config or classes."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"unsupported checkpoint version {payload.get('version')}")
    stored = ModelConfig.from_dict(payload["model_config"])
    if model_config is not None and stored != model_config:
        diff = {k: (v, getattr(model_config, k)) for k, v in stored.to_dict().items()
                if getattr(model_config, k) != (tuple(v) if isinstance(v, list) else v)}
        raise CheckpointMismatch(f"model config mismatch (stored, expected): {diff}")
    expected_order = list(CLASS_NAMES) if class_order is None else list(class_order)
    if list(payload["class_order"]) != expected_order:
        raise CheckpointMismatch(f"class order mismatch: {payload['class_order']}")
    return Checkpoint(
        model_config=stored,
        sampler_config=SamplerConfig(**payload["sampler_config"]),
        train_config=TrainConfig.from_dict(payload["train_config"]),
        flow_config=FlowEncodingConfig.from_dict(payload["flow_config"]),
        state_dict=payload["state_dict"],
        epoch=payload["epoch"],
        history=payload["history"],
        class_order=list(payload["class_order"]),
        split=CorpusSplit.from_dict(payload["split"]) if payload["split"] else None,
        optimizer_state=payload["optimizer_state"],
        rng_state=payload["rng_state"],
        weights_source=payload.get("weights_source", "random"),
    )


# ------------------------------------------------------------------------- training


@torch.no_grad()
def predict_logits(model: nn.Module, store: SampleStore, samples: Sequence[SequenceSample],
                   batch_size: int = 18) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(samples), batch_size):
        rgb, flow, _ = store.batch(samples[i:i + batch_size])
        out.append(model(rgb, flow).numpy())
    if not out:
        return np.zeros((0, len(CLASS_NAMES)), dtype=np.float32)
    return np.concatenate(out)


def _rng_state() -> dict:
    return {"torch": torch.get_rng_state()}


@dataclass
class FitResult:
    best: Checkpoint
    last: Checkpoint
    history: list[dict]

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def fit(corpus: Corpus, sampler_cfg: SamplerConfig, model_cfg: ModelConfig, train_cfg: TrainConfig,
        split: CorpusSplit | None = None, out_dir: str | Path | None = None,
        resume: Checkpoint | None = None, backbone_weights: dict | None = None,
        log_path: str | Path | None = None, store: SampleStore | None = None) -> FitResult:
    """Train a model; keeps the best-validation checkpoint (the last one when there is no val set).

    With ``out_dir`` the checkpoints are written to ``best.pt`` / ``last.pt`` and
    one JSON line per epoch to ``history.jsonl``.
    """
    if model_cfg.sequence_length != sampler_cfg.sequence_length:
        model_cfg = replace(model_cfg, sequence_length=sampler_cfg.sequence_length)
    if split is None:
        split = split_corpus(corpus.video_ids, train_cfg.split_ratio, train_cfg.seed)
    store = store or SampleStore(corpus, sampler_cfg)
    train_samples = corpus.samples(sampler_cfg, split.train)
    val_samples = corpus.samples(sampler_cfg, split.val)
    if not train_samples:
        raise ValueError("no qualifying training samples in the training split")
    labels = [s.label.index for s in train_samples]
    if train_cfg.balanced:
        sampler = BalancedBatchSampler(labels, train_cfg.batch_size, train_cfg.seed,
                                       classes=sorted(set(labels)) if len(set(labels)) < model_cfg.num_classes
                                       and train_cfg.batch_size % len(set(labels)) == 0 else None)
    else:
        sampler = ShuffledBatchSampler(len(train_samples), train_cfg.batch_size, train_cfg.seed)

    torch.manual_seed(train_cfg.seed)
    if resume is None:
        from .pretrain import weights_source

        model = build_model(model_cfg, sampler_cfg.crop_size, backbone_weights)
        source = (weights_source(sampler_cfg.crop_size) if backbone_weights is None else "supplied") \
            if model_cfg.pretrained_backbone else "random"
    else:
        if resume.model_config != model_cfg:
            raise CheckpointMismatch("resume checkpoint has a different model config")
        model = resume.build()
        source = resume.weights_source
    optimizer = build_optimizer(model, train_cfg)
    criterion = train_cfg.criterion()
    history: list[dict] = []
    start_epoch = 1
    if resume is not None:
        if resume.optimizer_state:
            optimizer.load_state_dict(resume.optimizer_state)
        if resume.rng_state:
            torch.set_rng_state(resume.rng_state["torch"])
        history = list(resume.history)
        start_epoch = resume.epoch + 1

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint(model_cfg, sampler_cfg, train_cfg, corpus.flow_cfg,
                          {k: v.detach().clone() for k, v in model.state_dict().items()},
                          epoch, [dict(h) for h in history], split=split,
                          optimizer_state=_clone_state(optimizer.state_dict()), rng_state=_rng_state(),
                          weights_source=source)

    last_good = resume or snapshot(0)
    best, best_val = last_good, -1.0
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = open(log_path, "a") if log_path else None
    if out_dir is not None and log_fh is None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "history.jsonl", "a")
    try:
        for epoch in range(start_epoch, train_cfg.epochs + 1):
            t0 = time.perf_counter()
            model.train()
            sampler.set_epoch(epoch)
            total_loss, correct, seen = 0.0, 0, 0
            for batch_idx in sampler:
                rgb, flow, y = store.batch([train_samples[i] for i in batch_idx])
                logits = model(rgb, flow)
                loss = criterion(logits, y)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_good)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total_loss += loss.item() * len(y)
                correct += (logits.argmax(1) == y).sum().item()
                seen += len(y)
            val_top1 = None
            if val_samples:
                logits = predict_logits(model, store, val_samples)
                val_top1 = float(np.mean(logits.argmax(1) == np.array([s.label.index for s in val_samples])))
            row = {"epoch": epoch, "loss": total_loss / seen, "train_top1": correct / seen,
                   "val_top1": val_top1, "seconds": round(time.perf_counter() - t0, 3)}
            history.append(row)
            log.info("epoch %d loss %.4f train %.3f val %s", epoch, row["loss"], row["train_top1"], val_top1)
            if log_fh:
                log_fh.write(json.dumps(row) + "\n")
                log_fh.flush()
            last_good = snapshot(epoch)
            # ties go to the later epoch; without a val set the last epoch is kept
            if val_top1 is None or val_top1 >= best_val:
                best, best_val = last_good, (val_top1 if val_top1 is not None else best_val)
            if out_dir is not None:
                save_checkpoint(out_dir / "last.pt", last_good)
                if best is last_good:
                    save_checkpoint(out_dir / "best.pt", best)
            if train_cfg.target_train_top1 is not None and row["train_top1"] >= train_cfg.target_train_top1:
                break
    finally:
        if log_fh:
            log_fh.close()
    return FitResult(best, last_good, history)


def _clone_state(state):
    if isinstance(state, torch.Tensor):
        return state.detach().clone()
    if isinstance(state, dict):
        return {k: _clone_state(v) for k, v in state.items()}
    if isinstance(state, list):
        return [_clone_state(v) for v in state]
    return state
