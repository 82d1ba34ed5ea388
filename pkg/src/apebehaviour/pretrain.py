"""Backbone initialisation weights.

Lookup order for ``backbone_weights``:

1. ``$APEBEHAVIOUR_IMAGENET_WEIGHTS`` pointing at a torchvision ``resnet18`` state dict;
2. torchvision's own hub cache (``resnet18-f37072fd.pth``) if it was downloaded before;
3. a locally pretrained trunk: ResNet-18 trained to classify procedurally drawn
   shapes on cluttered backgrounds, cached under the package cache root.

Option 3 exists for offline machines. It is a generic still-image task that
never sees behaviour data.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn as nn
import torchvision

log = logging.getLogger(__name__)

IMAGENET_ENV = "APEBEHAVIOUR_IMAGENET_WEIGHTS"
CACHE_ENV = "APEBEHAVIOUR_CACHE"
TORCHVISION_FILE = "resnet18-f37072fd.pth"

SHAPES = ("disc", "square", "triangle", "ring", "cross", "hbar", "vbar", "hellipse",
          "vellipse", "diamond", "chevron", "two_discs")


def cache_root() -> Path:
    root = os.environ.get(CACHE_ENV)
    return Path(root) if root else Path.home() / ".cache" / "apebehaviour"


def _imagenet_file() -> Path | None:
    env = os.environ.get(IMAGENET_ENV)
    if env and Path(env).is_file():
        return Path(env)
    hub = Path(torch.hub.get_dir()) / "checkpoints" / TORCHVISION_FILE
    return hub if hub.is_file() else None


def weights_source(crop_size: int) -> str:
    path = _imagenet_file()
    if path is not None:
        return f"imagenet:{path}"
    return f"synthetic-shapes:{crop_size}"


def backbone_weights(crop_size: int = 224, seed: int = 0) -> dict:
    """A torchvision-layout ResNet-18 state dict to initialise both streams."""
    path = _imagenet_file()
    if path is not None:
        return torch.load(path, map_location="cpu", weights_only=True)
    target = cache_root() / "backbones" / f"resnet18_shapes_{crop_size}_s{seed}.pt"
    if target.is_file():
        return torch.load(target, map_location="cpu", weights_only=True)
    log.info("no ImageNet weights found; pretraining a ResNet-18 on synthetic shapes (%dpx)", crop_size)
    state = pretrain_on_shapes(crop_size, seed=seed)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_suffix(".tmp")
    torch.save(state, tmp)
    os.replace(tmp, target)
    return state


def draw_shape_image(rng: np.random.Generator, shape: int, size: int) -> np.ndarray:
    """One RGB uint8 image of ``SHAPES[shape]`` over a textured, cluttered background."""
    s = 64
    base = rng.integers(40, 200, size=3)
    grad = np.linspace(-40, 40, s)[:, None, None] * rng.uniform(-1, 1, size=(1, 1, 3))
    img = np.clip(base + grad + rng.normal(0, 12, (s, s, 3)), 0, 255).astype(np.uint8)
    for _ in range(rng.integers(0, 4)):
        c = tuple(int(v) for v in rng.integers(0, 256, 3))
        p1 = tuple(int(v) for v in rng.integers(0, s, 2))
        p2 = tuple(int(v) for v in rng.integers(0, s, 2))
        cv2.line(img, p1, p2, c, int(rng.integers(1, 3)), cv2.LINE_AA)
    colour = tuple(int(v) for v in (255 - base + rng.integers(-40, 40, 3)).clip(0, 255))
    cx, cy = (int(v) for v in rng.integers(22, 42, 2))
    r = int(rng.integers(11, 19))
    name = SHAPES[shape]
    if name == "disc":
        cv2.circle(img, (cx, cy), r, colour, -1, cv2.LINE_AA)
    elif name == "square":
        cv2.rectangle(img, (cx - r, cy - r), (cx + r, cy + r), colour, -1)
    elif name == "triangle":
        pts = np.array([[cx, cy - r], [cx - r, cy + r], [cx + r, cy + r]], np.int32)
        cv2.fillPoly(img, [pts], colour, cv2.LINE_AA)
    elif name == "ring":
        cv2.circle(img, (cx, cy), r, colour, max(2, r // 3), cv2.LINE_AA)
    elif name == "cross":
        t = max(2, r // 3)
        cv2.rectangle(img, (cx - r, cy - t), (cx + r, cy + t), colour, -1)
        cv2.rectangle(img, (cx - t, cy - r), (cx + t, cy + r), colour, -1)
    elif name == "hbar":
        cv2.rectangle(img, (cx - r, cy - r // 4), (cx + r, cy + r // 4), colour, -1)
    elif name == "vbar":
        cv2.rectangle(img, (cx - r // 4, cy - r), (cx + r // 4, cy + r), colour, -1)
    elif name == "hellipse":
        cv2.ellipse(img, (cx, cy), (r, r // 2), 0, 0, 360, colour, -1, cv2.LINE_AA)
    elif name == "vellipse":
        cv2.ellipse(img, (cx, cy), (r // 2, r), 0, 0, 360, colour, -1, cv2.LINE_AA)
    elif name == "diamond":
        pts = np.array([[cx, cy - r], [cx + r, cy], [cx, cy + r], [cx - r, cy]], np.int32)
        cv2.fillPoly(img, [pts], colour, cv2.LINE_AA)
    elif name == "chevron":
        pts = np.array([[cx - r, cy - r // 2], [cx, cy + r // 2], [cx + r, cy - r // 2]], np.int32)
        cv2.polylines(img, [pts], False, colour, max(2, r // 3), cv2.LINE_AA)
    else:
        cv2.circle(img, (cx - r // 2, cy), r // 2, colour, -1, cv2.LINE_AA)
        cv2.circle(img, (cx + r // 2 + 2, cy), r // 2, colour, -1, cv2.LINE_AA)
    if rng.random() < 0.5:
        img = img[:, ::-1]
    return cv2.resize(np.ascontiguousarray(img), (size, size), interpolation=cv2.INTER_AREA)


def shapes_batch(rng: np.random.Generator, n: int, size: int) -> tuple[torch.Tensor, torch.Tensor]:
    labels = rng.integers(0, len(SHAPES), n)
    imgs = np.stack([draw_shape_image(rng, int(k), size) for k in labels])
    x = torch.from_numpy(imgs).permute(0, 3, 1, 2).float().div_(255.0)
    mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
    return (x - mean) / std, torch.from_numpy(labels)


def pretrain_on_shapes(crop_size: int, steps: int = 400, batch_size: int = 64, lr: float = 0.05,
                       seed: int = 0) -> dict:
    """Train a ResNet-18 on the shapes task; returns its torchvision-layout state dict."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    net = torchvision.models.resnet18(weights=None, num_classes=len(SHAPES))
    opt = torch.optim.SGD(net.parameters(), lr=lr, momentum=0.9, weight_decay=1e-4)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps)
    loss_fn = nn.CrossEntropyLoss()
    net.train()
    correct = 0
    for step in range(steps):
        x, y = shapes_batch(rng, batch_size, crop_size)
        out = net(x)
        loss = loss_fn(out, y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step >= steps - 50:
            correct += (out.argmax(1) == y).sum().item()
    log.info("shapes pretraining: final-50-step accuracy %.3f", correct / (50 * batch_size))
    return {k: v.detach().clone() for k, v in net.state_dict().items()}
