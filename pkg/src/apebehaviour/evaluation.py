"""Top-k metrics, evaluation reports, k-fold cross-validation and prediction skims."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .annotations import CLASS_NAMES, NUM_CLASSES, VideoAnnotation
from .data import Corpus, SampleStore
from .sampling import SequenceSample
from .training import Checkpoint, TrainConfig, fit, predict_logits

log = logging.getLogger(__name__)


class EmptyEvaluation(ValueError):
    pass


def rank_classes(logits: np.ndarray) -> np.ndarray:
    """Class indices by descending score; equal scores rank the lower class index first."""
    logits = np.asarray(logits)
    return np.argsort(-logits, axis=-1, kind="stable")


def topk_accuracy(logits: np.ndarray, targets: Sequence[int], k: int) -> float:
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or len(logits) == 0:
        raise ValueError("topk_accuracy needs a non-empty (m, classes) score matrix")
    if not 1 <= k <= logits.shape[1]:
        raise ValueError(f"k must lie in [1, {logits.shape[1]}]")
    topk = rank_classes(logits)[:, :k]
    return float(np.mean(np.any(topk == targets[:, None], axis=1)))


@dataclass
class SamplePrediction:
    sample_id: str
    video_id: str
    ape_id: int
    start_frame: int
    sequence_length: int
    truth: str
    ranked: list[str]

    @property
    def predicted(self) -> str:
        return self.ranked[0]


@dataclass
class EvalReport:
    top1: float
    top3: float
    confusion: np.ndarray  # rows = truth, cols = prediction, canonical class order
    records: list[SamplePrediction] = field(default_factory=list)

    @property
    def count(self) -> int:
        return int(self.confusion.sum())

    @property
    def per_class_recall(self) -> dict[str, float | None]:
        rows = self.confusion.sum(1)
        return {name: (float(self.confusion[i, i] / rows[i]) if rows[i] else None)
                for i, name in enumerate(CLASS_NAMES)}

    @property
    def macro_top1(self) -> float:
        vals = [v for v in self.per_class_recall.values() if v is not None]
        return float(np.mean(vals)) if vals else 0.0

    def macro_topk(self, k: int) -> float:
        by_class: dict[str, list[bool]] = {}
        for r in self.records:
            by_class.setdefault(r.truth, []).append(r.truth in r.ranked[:k])
        return float(np.mean([np.mean(v) for v in by_class.values()])) if by_class else 0.0

    def to_dict(self) -> dict:
        return {
            "top1": self.top1, "top3": self.top3,
            "macro_top1": self.macro_top1, "macro_top3": self.macro_topk(3),
            "count": self.count, "classes": list(CLASS_NAMES),
            "confusion": self.confusion.tolist(),
            "per_class_recall": self.per_class_recall,
            "records": [vars(r) for r in self.records],
        }

    def write(self, path_stem: str | Path, title: str = "Results") -> None:
        path_stem = Path(path_stem)
        path_stem.parent.mkdir(parents=True, exist_ok=True)
        path_stem.with_suffix(".json").write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        path_stem.with_suffix(".txt").write_text(format_table({title: self}))


def format_table(reports: dict[str, "EvalReport"]) -> str:
    """Plain-text table with one row per model: Top-1 and Top-3 in percent."""
    width = max(10, *(len(k) for k in reports))
    lines = [f"{'Model':<{width}} | {'Top1 Accuracy':>13} | {'Top3 Accuracy':>13}",
             f"{'-' * width}-+-{'-' * 13}-+-{'-' * 13}"]
    for name, r in reports.items():
        lines.append(f"{name:<{width}} | {100 * r.top1:>12.2f}% | {100 * r.top3:>12.2f}%")
    return "\n".join(lines) + "\n"


def build_report(logits: np.ndarray, samples: Sequence[SequenceSample]) -> EvalReport:
    if len(samples) == 0:
        raise EmptyEvaluation("no qualifying samples to evaluate")
    targets = np.array([s.label.index for s in samples])
    ranked = rank_classes(logits)
    confusion = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(confusion, (targets, ranked[:, 0]), 1)
    records = [SamplePrediction(s.key, s.video_id, s.ape_id, s.start_frame, s.sequence_length,
                                s.label.value, [CLASS_NAMES[j] for j in ranked[i]])
               for i, s in enumerate(samples)]
    records.sort(key=lambda r: (r.video_id, r.ape_id, r.start_frame))
    return EvalReport(topk_accuracy(logits, targets, 1), topk_accuracy(logits, targets, 3), confusion, records)


def evaluate(checkpoint: Checkpoint, corpus: Corpus, video_ids: Sequence[str],
             store: SampleStore | None = None) -> EvalReport:
    """Score every qualifying sample of the given videos with the checkpoint's model."""
    cfg = checkpoint.sampler_config
    samples = corpus.samples(cfg, sorted(video_ids))
    if not samples:
        raise EmptyEvaluation(f"no qualifying samples in {len(video_ids)} videos")
    store = store or SampleStore(corpus, cfg)
    model = checkpoint.build()
    return build_report(predict_logits(model, store, samples), samples)


def split_videos(checkpoint: Checkpoint, split: str) -> tuple[str, ...]:
    if checkpoint.split is None:
        raise ValueError("checkpoint carries no corpus split")
    return getattr(checkpoint.split, split)


# ------------------------------------------------------------------ cross-validation


@dataclass(frozen=True)
class FoldSpec:
    index: int
    train: tuple[str, ...]
    test: tuple[str, ...]


def kfold_splits(video_ids: Sequence[str], k: int = 4, seed: int = 0) -> list[FoldSpec]:
    """Shuffle once, cut into k near-equal test folds; each train set is the complement."""
    ids = sorted(set(video_ids))
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(ids) < k:
        raise ValueError(f"{len(ids)} videos cannot form {k} folds")
    perm = np.random.default_rng(seed).permutation(len(ids))
    chunks = np.array_split(perm, k)
    folds = []
    for i, chunk in enumerate(chunks):
        test = {ids[j] for j in chunk}
        folds.append(FoldSpec(i, tuple(v for v in ids if v not in test), tuple(sorted(test))))
    return folds


@dataclass
class CrossValResult:
    folds: list[FoldSpec]
    reports: list[EvalReport]
    histories: list[list[dict]]

    @property
    def mean_top1(self) -> float:
        return float(np.mean([r.top1 for r in self.reports]))

    @property
    def mean_top3(self) -> float:
        return float(np.mean([r.top3 for r in self.reports]))

    def table(self) -> str:
        rows = {f"fold {f.index}": r for f, r in zip(self.folds, self.reports)}
        mean = EvalReport(self.mean_top1, self.mean_top3, sum(r.confusion for r in self.reports))
        rows["mean"] = mean
        return format_table(rows)

    def to_dict(self) -> dict:
        return {
            "folds": [{"index": f.index, "train": list(f.train), "test": list(f.test),
                       "report": r.to_dict(), "history": h}
                      for f, r, h in zip(self.folds, self.reports, self.histories)],
            "mean_top1": self.mean_top1,
            "mean_top3": self.mean_top3,
        }


def cross_validate(corpus: Corpus, sampler_cfg, model_cfg, train_cfg: TrainConfig, k: int = 4,
                   seed: int = 0, out_dir: str | Path | None = None,
                   backbone_weights: dict | None = None) -> CrossValResult:
    """Train one model per fold on the complement of its test videos (no val set) and evaluate it."""
    from .annotations import CorpusSplit

    folds = kfold_splits(corpus.video_ids, k, seed)
    store = SampleStore(corpus, sampler_cfg)
    reports, histories = [], []
    for fold in folds:
        split = CorpusSplit(fold.train, (), fold.test, seed)
        fold_dir = None if out_dir is None else Path(out_dir) / f"fold{fold.index}"
        result = fit(corpus, sampler_cfg, model_cfg, train_cfg, split=split, out_dir=fold_dir,
                     backbone_weights=backbone_weights, store=store)
        report = evaluate(result.best, corpus, fold.test, store)
        log.info("fold %d: top1 %.3f top3 %.3f", fold.index, report.top1, report.top3)
        if fold_dir is not None:
            report.write(fold_dir / "report", f"fold {fold.index}")
        reports.append(report)
        histories.append(result.history)
    return CrossValResult(folds, reports, histories)


# ------------------------------------------------------------------------- skims

NEUTRAL = (255, 255, 255)
WRONG = (255, 0, 0)  # RGB


@dataclass(frozen=True)
class FramePrediction:
    ape_id: int
    start_frame: int
    end_frame: int
    predicted: str


def predictions_by_frame(records: Sequence[SamplePrediction], video_id: str) -> dict[tuple[int, int], str]:
    """(frame, ape_id) -> predicted behaviour for every frame a sample covers."""
    out = {}
    for r in records:
        if r.video_id != video_id:
            continue
        for f in range(r.start_frame, r.start_frame + r.sequence_length):
            out[(f, r.ape_id)] = r.predicted
    return out


def skim_label(ape_id: int, predicted: str, truth: str) -> str:
    if predicted == truth:
        return f"{ape_id}: {predicted}"
    return f"{ape_id}: {predicted} (true: {truth})"


def draw_prediction(img: np.ndarray, bbox, ape_id: int, predicted: str, truth: str) -> np.ndarray:
    """Box plus top-left label on an RGB image (in place); red marks a wrong prediction."""
    colour = NEUTRAL if predicted == truth else WRONG
    x0, y0, x1, y1 = bbox.as_tuple()
    cv2.rectangle(img, (x0, y0), (x1 - 1, y1 - 1), colour, 1)
    text = skim_label(ape_id, predicted, truth)
    scale = 0.35
    (tw, th), base = cv2.getTextSize(text, cv2.FONT_HERSHEY_SIMPLEX, scale, 1)
    ty = max(th + 1, y0 - 2)
    cv2.rectangle(img, (x0, ty - th - 1), (x0 + tw + 1, ty + base - 1), colour, -1)
    cv2.putText(img, text, (x0 + 1, ty - 1), cv2.FONT_HERSHEY_SIMPLEX, scale, (0, 0, 0), 1, cv2.LINE_AA)
    return img


@dataclass
class SkimResult:
    frames_written: list[Path]
    warnings: list[str]
    labels: dict[int, list[str]]  # frame index -> labels drawn


def render_skim(video: VideoAnnotation, predictions: dict[tuple[int, int], str], frames,
                out_dir: str | Path, video_file: bool = False) -> SkimResult:
    """Write ``out_dir/<video_id>/frame_%06d.png`` with predictions drawn over each ape.

    Apes without a prediction are not drawn; frames that fail to decode are skipped
    with a warning.
    """
    target = Path(out_dir) / video.video_id
    target.mkdir(parents=True, exist_ok=True)
    written, warnings, labels = [], [], {}
    writer = None
    for frame in video.frames:
        try:
            img = frames.load(video.video_id, frame.frame_index).copy()
        except (FileNotFoundError, OSError) as exc:
            warnings.append(f"frame {frame.frame_index}: {exc}")
            continue
        drawn = []
        for inst in frame.instances:
            pred = predictions.get((frame.frame_index, inst.ape_id))
            if pred is None:
                continue
            draw_prediction(img, inst.bbox, inst.ape_id, pred, inst.behaviour.value)
            drawn.append(skim_label(inst.ape_id, pred, inst.behaviour.value))
        labels[frame.frame_index] = drawn
        path = target / f"frame_{frame.frame_index:06d}.png"
        cv2.imwrite(str(path), cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
        written.append(path)
        if video_file:
            if writer is None:
                h, w = img.shape[:2]
                writer = cv2.VideoWriter(str(target / f"{video.video_id}.avi"),
                                         cv2.VideoWriter_fourcc(*"MJPG"), float(video.fps), (w, h))
            writer.write(cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
    if writer is not None:
        writer.release()
    return SkimResult(written, warnings, labels)
