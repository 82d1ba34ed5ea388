"""Procedural camera-trap videos with scripted subjects and ground-truth annotations.

Each behaviour has its own silhouette and motion pattern:

    walking             quadruped, slow horizontal drift
    running             stretched quadruped, fast horizontal drift
    climbing_up/down    upright on a tree trunk, vertical drift (same sprite; only the
                        direction of travel differs, so the cue is temporal)
    hanging             suspended from a branch, slight sway
    sitting             compact, static
    standing            upright, static, arm jitter
    camera_interaction  large face-on head growing toward the camera
    sitting_on_back     small child sprite riding a walking adult

The background darkens from top to bottom, so vertical travel shows up as a
brightness trend in the subject's crop.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .annotations import (
    BEHAVIOURS,
    FRAME_DIR,
    ApeInstance,
    BehaviourLabel,
    BoundingBox,
    FrameAnnotation,
    VideoAnnotation,
    write_video,
)

B = BehaviourLabel
MANIFEST = "generator_manifest.json"
SHIFT = 4  # sub-pixel bits for cv2 drawing
_ONE = 1 << SHIFT
SAMPLED_SPAN = 20  # default sequence length and stride


@dataclass(frozen=True)
class MotionParams:
    walk_speed: float = 1.0
    run_speed: float = 2.6
    climb_speed: float = 1.1
    growth: float = 0.7  # camera_interaction scale gain over a segment
    sway: float = 1.5


@dataclass
class GenConfig:
    num_videos: int = 50
    frames_per_video: int = 96
    fps: int = 24
    width: int = 224
    height: int = 160
    subjects_per_video: int | tuple[int, int] = 1
    segment_frames: int = 96
    min_segment_frames: int = 72
    scripts: list[list[list[tuple[str, int]]]] | None = None  # per video, per subject
    motion: MotionParams = field(default_factory=MotionParams)
    sensor_noise: float = 2.0
    seed: int = 7

    def __post_init__(self):
        if isinstance(self.subjects_per_video, list):
            self.subjects_per_video = tuple(self.subjects_per_video)
        if isinstance(self.motion, dict):
            self.motion = MotionParams(**self.motion)
        lo, hi = self.subject_range
        if not 0 <= lo <= hi <= 8:
            raise ValueError("subjects per video must lie in 0..8")
        if self.segment_frames < self.min_segment_frames:
            raise ValueError(f"segments must last at least {self.min_segment_frames} frames")
        if self.scripts is not None:
            for video in self.scripts:
                if len(video) > 8:
                    raise ValueError("at most 8 scripted subjects per video")
                for subject in video:
                    for behaviour, duration in subject:
                        B(behaviour)
                        if duration < self.min_segment_frames:
                            raise ValueError(f"scripted {behaviour} lasts {duration} < "
                                             f"{self.min_segment_frames} frames")

    @property
    def subject_range(self) -> tuple[int, int]:
        s = self.subjects_per_video
        return (s, s) if isinstance(s, int) else (int(s[0]), int(s[1]))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        if d.get("scripts") is not None:
            d["scripts"] = [[[tuple(seg) for seg in subj] for subj in vid] for vid in d["scripts"]]
        return cls(**d)


# ------------------------------------------------------------------------ sprites
#
# Sprites are lists of primitives in local units with the anchor at the feet
# (y grows downward, negative is up). Units are scaled by the subject size.


def _quadruped(phase: float, running: bool) -> list[tuple]:
    if running:
        body = ("ellipse", 0, -12, 15, 5, -6)
        head = ("circle", 17, -13, 5)
        swing, hips = 7.0, (-10, 9)
    else:
        body = ("ellipse", 0, -14, 12, 6, 0)
        head = ("circle", 13, -17, 5)
        swing, hips = 3.5, (-8, 8)
    parts = [body, head]
    for k, hx in enumerate(hips):
        for side in (0, 1):
            off = swing * math.sin(phase + math.pi * ((k + side) % 2))
            parts.append(("line", hx, -10, hx + off, 0, 3))
    return parts


def _standing(phase: float) -> list[tuple]:
    jit = 2.5 * math.sin(phase)
    return [
        ("ellipse", 0, -21, 6, 11, 0), ("circle", 0, -36, 5),
        ("line", -3, -11, -4, 0, 3), ("line", 3, -11, 4, 0, 3),
        ("line", -5, -28, -10 - jit, -15, 3), ("line", 5, -28, 10 + jit, -15, 3),
    ]


def _sitting(phase: float) -> list[tuple]:
    breathe = 0.6 * math.sin(phase)
    return [
        ("ellipse", 0, -10, 9, 9 + breathe, 0), ("circle", 0, -24, 5),
        ("line", -6, -2, 11, -2, 4), ("line", -7, -13, 7, -6, 3),
    ]


def _climbing(phase: float) -> list[tuple]:
    reach = 2.0 * math.sin(phase)
    return [
        ("ellipse", 0, -21, 6, 11, 0), ("circle", 0, -35, 5),
        ("line", -5, -29, -5, -44 - reach, 3), ("line", 5, -29, 5, -44 + reach, 3),
        ("line", -4, -12, -8, -4 + reach, 3), ("line", 4, -12, 8, -4 - reach, 3),
    ]


def _hanging(phase: float) -> list[tuple]:
    # anchor at the grip point on the branch; the body hangs below (positive y)
    kick = 2.0 * math.sin(phase)
    return [
        ("line", -4, 0, -5, 12, 3), ("line", 4, 0, 5, 12, 3),
        ("circle", 0, 13, 5), ("ellipse", 0, 27, 6, 10, 0),
        ("line", -3, 36, -5 - kick, 45, 3), ("line", 3, 36, 5 + kick, 45, 3),
    ]


def _face(phase: float) -> list[tuple]:
    return [
        ("ellipse", 0, -10, 15, 10, 0), ("circle", 0, -28, 12),
        ("face", 0, -28, 12),
    ]


def _bounds(parts: list[tuple]) -> tuple[float, float, float, float]:
    xs, ys = [], []
    for p in parts:
        kind = p[0]
        if kind == "ellipse":
            _, cx, cy, ax, ay, _ = p
            r = max(ax, ay) if p[5] else None
            ax, ay = (r, r) if r else (ax, ay)
            xs += [cx - ax, cx + ax]
            ys += [cy - ay, cy + ay]
        elif kind in ("circle", "face"):
            _, cx, cy, r = p
            xs += [cx - r, cx + r]
            ys += [cy - r, cy + r]
        elif kind == "line":
            _, x1, y1, x2, y2, t = p
            xs += [x1 - t / 2, x2 - t / 2, x1 + t / 2, x2 + t / 2]
            ys += [y1 - t / 2, y2 - t / 2, y1 + t / 2, y2 + t / 2]
    return min(xs), min(ys), max(xs), max(ys)


def _fx(v: float) -> int:
    return int(round(v * _ONE))


def _draw(img: np.ndarray, parts: list[tuple], x: float, y: float, scale: float, facing: int,
          colour: tuple[int, int, int]) -> tuple[float, float, float, float]:
    """Draw a sprite; returns its bounds in image coordinates."""
    def pt(lx, ly):
        return (_fx(x + facing * lx * scale), _fx(y + ly * scale))

    face_col = tuple(min(255, c + 110) for c in colour)
    for p in parts:
        kind = p[0]
        if kind == "ellipse":
            _, cx, cy, ax, ay, ang = p
            cv2.ellipse(img, pt(cx, cy), (_fx(ax * scale), _fx(ay * scale)), facing * ang, 0, 360,
                        colour, -1, cv2.LINE_AA, SHIFT)
        elif kind == "circle":
            _, cx, cy, r = p
            cv2.circle(img, pt(cx, cy), _fx(r * scale), colour, -1, cv2.LINE_AA, SHIFT)
        elif kind == "line":
            _, x1, y1, x2, y2, t = p
            cv2.line(img, pt(x1, y1), pt(x2, y2), colour, max(1, int(round(t * scale))), cv2.LINE_AA, SHIFT)
        elif kind == "face":
            _, cx, cy, r = p
            cv2.ellipse(img, pt(cx, cy + r * 0.45), (_fx(r * 0.6 * scale), _fx(r * 0.4 * scale)), 0, 0, 360,
                        face_col, -1, cv2.LINE_AA, SHIFT)
            for ex in (-0.4, 0.4):
                cv2.circle(img, pt(cx + ex * r, cy - 0.15 * r), _fx(0.18 * r * scale), (235, 235, 225), -1,
                           cv2.LINE_AA, SHIFT)
    x0, y0, x1, y1 = _bounds(parts)
    xs = sorted((x + facing * x0 * scale, x + facing * x1 * scale))
    return xs[0], y + y0 * scale, xs[1], y + y1 * scale


# ----------------------------------------------------------------------- subjects


@dataclass
class _Subject:
    ape_id: int
    script: list[tuple[B, int]]
    scale: float
    colour: tuple[int, int, int]
    phase0: float
    rng_seed: int
    carrier: "_Subject | None" = None
    # per-frame state filled by _simulate
    states: list[dict] = field(default_factory=list)

    def behaviour_at(self, t: int) -> B:
        acc = 0
        for b, d in self.script:
            acc += d
            if t < acc:
                return b
        return self.script[-1][0]


def _segment_starts(script):
    acc, out = 0, []
    for b, d in script:
        out.append((acc, acc + d, b))
        acc += d
    return out


def _simulate(subj: _Subject, n_frames: int, cfg: GenConfig, ground: float) -> None:
    """Per-frame pose state: x, y (anchor), facing, scale, phase, extras for scenery."""
    rng = np.random.default_rng(subj.rng_seed)
    m = cfg.motion
    w, h = cfg.width, cfg.height
    s = subj.scale
    states: list[dict] = []
    for seg_start, seg_end, beh in _segment_starts(subj.script):
        dur = seg_end - seg_start
        facing = int(rng.choice([-1, 1]))
        if beh in (B.WALKING, B.RUNNING, B.SITTING, B.STANDING):
            x = float(rng.uniform(0.2 * w, 0.8 * w))
            y = ground
        elif beh in (B.CLIMBING_UP, B.CLIMBING_DOWN):
            x = float(rng.uniform(0.15 * w, 0.85 * w))
            # Both directions pass through the same heights during the frames a 20/20 sampler
            # covers, so only the order of the frames tells up from down.
            top, bottom = 46 * s + 4, ground
            covered = dur - (dur - SAMPLED_SPAN) % SAMPLED_SPAN if dur >= SAMPLED_SPAN else dur
            tail = dur - covered
            speed = min(m.climb_speed, (bottom - top) / (dur - 1 + tail))
            lo_min, lo_max = top + tail * speed, bottom - (dur - 1) * speed
            lo = float(rng.uniform(lo_min, lo_max)) if lo_max > lo_min else lo_min
            y = lo + (covered - 1) * speed if beh == B.CLIMBING_UP else lo
        elif beh == B.HANGING:
            x = float(rng.uniform(0.2 * w, 0.8 * w))
            y = float(rng.uniform(8, 0.25 * h))
        elif beh == B.CAMERA_INTERACTION:
            x = float(rng.uniform(0.35 * w, 0.65 * w))
            y = float(rng.uniform(0.75 * h, 0.85 * h))
        else:  # sitting_on_back: position follows the carrier
            x, y = 0.0, 0.0
        for k in range(dur):
            t = seg_start + k
            phase = subj.phase0 + t * {B.RUNNING: 0.9, B.WALKING: 0.35, B.STANDING: 0.5,
                                       B.CLIMBING_UP: 0.3, B.CLIMBING_DOWN: 0.3, B.HANGING: 0.2,
                                       B.SITTING: 0.15}.get(beh, 0.2)
            st = {"behaviour": beh, "facing": facing, "phase": phase, "scale": s, "x": x, "y": y}
            if beh in (B.WALKING, B.RUNNING):
                speed = m.walk_speed if beh == B.WALKING else m.run_speed
                x += facing * speed
                margin = 18 * s
                if x < margin or x > w - margin:
                    facing = -facing
                    x = min(max(x, margin), w - margin)
            elif beh in (B.CLIMBING_UP, B.CLIMBING_DOWN):
                st["trunk"] = True
                y += -speed if beh == B.CLIMBING_UP else speed
            elif beh == B.HANGING:
                st["branch"] = True
                st["x"] = x + m.sway * math.sin(0.12 * t)
            elif beh == B.CAMERA_INTERACTION:
                st["scale"] = s * (1.0 + m.growth * k / max(1, dur - 1))
            elif beh == B.SITTING_ON_BACK:
                c = subj.carrier.states[t]
                cs = c["scale"]
                st["x"] = c["x"] - c["facing"] * 2 * cs
                st["y"] = c["y"] - 19 * cs
                st["facing"] = c["facing"]
                st["scale"] = 0.55 * cs
            states.append(st)
    subj.states = states[:n_frames]


def _sprite(beh: B, phase: float) -> list[tuple]:
    if beh == B.WALKING:
        return _quadruped(phase, running=False)
    if beh == B.RUNNING:
        return _quadruped(phase, running=True)
    if beh == B.STANDING:
        return _standing(phase)
    if beh in (B.SITTING, B.SITTING_ON_BACK):
        return _sitting(phase)
    if beh in (B.CLIMBING_UP, B.CLIMBING_DOWN):
        return _climbing(phase)
    if beh == B.HANGING:
        return _hanging(phase)
    return _face(phase)


# ---------------------------------------------------------------------- scheduling


def _auto_scripts(cfg: GenConfig) -> list[list[list[tuple[B, int]]]]:
    """Balanced behaviour assignment: behaviours are dealt from reshuffled decks of nine."""
    rng = np.random.default_rng([cfg.seed, 1_000_003])
    lo, hi = cfg.subject_range
    counts = rng.integers(lo, hi + 1, cfg.num_videos)
    n_segments = max(1, cfg.frames_per_video // cfg.segment_frames)
    deck: list[B] = []
    scripts = []
    for n in counts:
        video = []
        for _ in range(n):
            script = []
            for _ in range(n_segments):
                if not deck:
                    deck = [BEHAVIOURS[i] for i in rng.permutation(len(BEHAVIOURS))]
                script.append((deck.pop(), cfg.segment_frames))
            last_b, last_d = script[-1]
            script[-1] = (last_b, last_d + cfg.frames_per_video - n_segments * cfg.segment_frames)
            video.append(script)
        scripts.append(video)
    return scripts


def _background(rng: np.random.Generator, w: int, h: int) -> tuple[np.ndarray, float]:
    tint = np.array([0.55, 0.75, 0.45]) + rng.uniform(-0.08, 0.08, 3)
    base = np.full((h, w, 1), 150.0) * tint[None, None, :]
    low = cv2.resize(rng.normal(0, 1, (h // 16 + 2, w // 16 + 2, 3)).astype(np.float32), (w, h),
                     interpolation=cv2.INTER_CUBIC)
    fine = rng.normal(0, 6, (h, w, 3))
    img = np.clip(base + 9 * low + fine, 0, 255).astype(np.uint8)
    ground = float(h - rng.uniform(6, 14))
    return img, ground


def _canopy_light(rng: np.random.Generator, h: int) -> np.ndarray:
    """Row gains: brighter towards the canopy, with a per-video exposure so absolute level says little."""
    exposure = rng.uniform(0.75, 1.25)
    ys = np.linspace(0.0, 1.0, h)
    return (exposure * (1.6 - 1.2 * ys))[:, None, None]


BARK = np.array([125, 92, 62], dtype=np.float64)


def _draw_trunk(img: np.ndarray, tx: int, half_width: int = 10, band: int = 16) -> None:
    """Bark with dark rings every ``band`` rows."""
    h, w = img.shape[:2]
    x0, x1 = max(0, tx - half_width), min(w, tx + half_width + 1)
    shade = np.where(np.arange(h) % band < 3, 0.45, 1.0)
    img[:, x0:x1] = (shade[:, None, None] * BARK[None, None, :]).astype(np.uint8)


def _render_video(cfg: GenConfig, index: int, script: list[list[tuple[B, int]]]):
    rng = np.random.default_rng([cfg.seed, index])
    w, h, n = cfg.width, cfg.height, cfg.frames_per_video
    bg, ground = _background(rng, w, h)
    light = _canopy_light(rng, h)
    subjects: list[_Subject] = []
    next_id = 0
    for subj_script in script:
        need_carrier = any(b == B.SITTING_ON_BACK for b, _ in subj_script)
        carrier = None
        if need_carrier:
            # the adult carrying the child walks for the child's whole script
            carrier = _Subject(next_id, [(B.WALKING, sum(d for _, d in subj_script))],
                               float(rng.uniform(1.1, 1.3)), _ape_colour(rng), float(rng.uniform(0, 6.28)),
                               int(rng.integers(2**31)))
            subjects.append(carrier)
            next_id += 1
        subj = _Subject(next_id, list(subj_script), float(rng.uniform(0.85, 1.15)), _ape_colour(rng),
                        float(rng.uniform(0, 6.28)), int(rng.integers(2**31)), carrier)
        subjects.append(subj)
        next_id += 1
    for subj in subjects:
        if subj.carrier is None:
            _simulate(subj, n, cfg, ground)
    for subj in subjects:
        if subj.carrier is not None:
            _simulate(subj, n, cfg, ground)
    video_id = f"vid{index:03d}"
    noise_rng = np.random.default_rng([cfg.seed, index, 17])
    frames_img, frames_ann = [], []
    for t in range(n):
        img = bg.copy()
        for subj in subjects:  # scenery first so no subject is hidden behind another's tree
            st = subj.states[t] if t < len(subj.states) else None
            if st is None:
                continue
            if st.get("trunk"):
                _draw_trunk(img, int(round(st["x"])))
            if st.get("branch"):
                by = int(round(st["y"]))
                cv2.line(img, (0, by), (w, by + 3), (125, 92, 62), 5, cv2.LINE_AA)
        instances = []
        for subj in subjects:
            if t >= len(subj.states):
                continue
            st = subj.states[t]
            parts = _sprite(st["behaviour"], st["phase"])
            x0, y0, x1, y1 = _draw(img, parts, st["x"], st["y"], st["scale"], st["facing"], subj.colour)
            bbox = _clip_box(x0 - 2, y0 - 2, x1 + 2, y1 + 2, w, h)
            if bbox is not None:
                instances.append(ApeInstance(subj.ape_id, st["behaviour"], bbox))
        lit = img * light
        if cfg.sensor_noise > 0:
            lit += noise_rng.normal(0, cfg.sensor_noise, img.shape)
        img = np.clip(lit, 0, 255).astype(np.uint8)
        frames_img.append(img)
        frames_ann.append(FrameAnnotation(video_id, t, instances))
    return VideoAnnotation(video_id, frames_ann, cfg.fps, w, h), frames_img


def _ape_colour(rng: np.random.Generator) -> tuple[int, int, int]:
    v = int(rng.integers(18, 42))
    return (v + int(rng.integers(0, 12)), v + int(rng.integers(0, 8)), v)


def _clip_box(x0, y0, x1, y1, w, h) -> BoundingBox | None:
    xa, ya = max(0, int(math.floor(x0))), max(0, int(math.floor(y0)))
    xb, yb = min(w, int(math.ceil(x1))), min(h, int(math.ceil(y1)))
    if xb - xa < 2 or yb - ya < 2:
        return None
    return BoundingBox(xa, ya, xb, yb)


def generate(cfg: GenConfig, out_dir: str | Path, video_indices: Sequence[int] | None = None) -> list[str]:
    """Write frames, per-frame XML annotations and a manifest; returns the video ids."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scripts = cfg.scripts if cfg.scripts is not None else _auto_scripts(cfg)
    if len(scripts) < cfg.num_videos:
        raise ValueError(f"{len(scripts)} scripts for {cfg.num_videos} videos")
    scripts = [[[(B(b), int(d)) for b, d in subj] for subj in vid] for vid in scripts]
    ids = []
    for i in (range(cfg.num_videos) if video_indices is None else video_indices):
        video, images = _render_video(cfg, i, scripts[i])
        vdir = write_video(out, video)
        fdir = vdir / FRAME_DIR
        fdir.mkdir(exist_ok=True)
        for t, img in enumerate(images):
            if not cv2.imwrite(str(fdir / f"frame_{t:06d}.png"), cv2.cvtColor(img, cv2.COLOR_RGB2BGR)):
                raise OSError(f"could not write frame {t} of {video.video_id}")
        ids.append(video.video_id)
    manifest = {"generator": "apebehaviour.synthetic", "config": cfg.to_dict(),
                "scripts": [[[(b.value, d) for b, d in subj] for subj in vid] for vid in scripts],
                "videos": [f"vid{i:03d}" for i in range(cfg.num_videos)]}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return ids


def corpus_digest(root: str | Path) -> str:
    """SHA-256 over every file below ``root`` (relative path + bytes), in sorted order."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()
