import math

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from apebehaviour.annotations import CLASS_NAMES
from apebehaviour.data import Corpus, SampleStore
from apebehaviour.model import ModelConfig, TwoStreamNet
from apebehaviour.training import (
    Checkpoint,
    CheckpointMismatch,
    TrainConfig,
    build_optimizer,
    fit,
    focal_loss,
    load_checkpoint,
    predict_logits,
    save_checkpoint,
)

from .conftest import TINY_SAMPLER

TINY_MODEL = ModelConfig(sequence_length=4, pretrained_backbone=False)
TINY_TRAIN = TrainConfig(learning_rate=1e-3, batch_size=4, balanced=False, epochs=2, seed=1)


def test_focal_reduces_to_cross_entropy():
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    for _ in range(1000):
        n = int(torch.randint(1, 17, (1,), generator=g))
        logits = torch.randn(n, 9, generator=g, dtype=torch.float64) * 4
        y = torch.randint(0, 9, (n,), generator=g)
        worst = max(worst, abs(focal_loss(logits, y, 1.0, 0.0).item() - F.cross_entropy(logits, y).item()))
    assert worst <= 1e-6


def test_focal_half_probability_value():
    logits = torch.zeros(1, 2, dtype=torch.float64)
    value = focal_loss(logits, torch.tensor([0]), 1.0, 1.0).item()
    assert abs(value - 0.5 * math.log(2)) <= 1e-7


def test_focal_nonnegative_and_monotone():
    rng = np.random.default_rng(0)
    logits = torch.tensor(rng.normal(0, 3, (200, 9)))
    y = torch.tensor(rng.integers(0, 9, 200))
    per_gamma = [focal_loss(logits, y, 1.0, g).item() for g in (0.0, 0.5, 1.0, 2.0, 5.0)]
    assert all(v >= 0 for v in per_gamma)
    assert all(a >= b for a, b in zip(per_gamma, per_gamma[1:]))
    # with one sample, the loss falls as the true-class logit rises
    values = [focal_loss(torch.tensor([[z, 0.0, 0.0]]), torch.tensor([0])).item() for z in np.linspace(-5, 5, 21)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_focal_alpha_scales():
    logits, y = torch.randn(5, 9), torch.randint(0, 9, (5,))
    assert torch.isclose(focal_loss(logits, y, 0.25, 2.0), 0.25 * focal_loss(logits, y, 1.0, 2.0))


def test_focal_bad_target():
    with pytest.raises(ValueError):
        focal_loss(torch.zeros(2, 9), torch.tensor([0, 9]))


def test_weight_decay_step():
    torch.manual_seed(0)
    layer = nn.Linear(4, 3).double()
    w0, b0 = layer.weight.detach().clone(), layer.bias.detach().clone()
    cfg = TrainConfig()
    opt = build_optimizer(layer, cfg)
    layer.weight.grad = torch.zeros_like(layer.weight)
    layer.bias.grad = torch.zeros_like(layer.bias)
    opt.step()
    factor = 1 - cfg.learning_rate * cfg.weight_decay
    assert torch.allclose(layer.weight, w0 * factor, rtol=0, atol=1e-12)
    assert torch.equal(layer.bias, b0)


def test_default_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.momentum, cfg.weight_decay, cfg.batch_size) == (1e-4, 0.9, 0.01, 9)
    assert (cfg.loss, cfg.focal_alpha, cfg.focal_gamma, cfg.balanced) == ("focal", 1.0, 1.0, True)


# ---------------------------------------------------------------- checkpoints


def _checkpoint(model_cfg=TINY_MODEL) -> Checkpoint:
    from apebehaviour.flow import FlowEncodingConfig

    torch.manual_seed(0)
    model = TwoStreamNet(model_cfg)
    return Checkpoint(model_cfg, TINY_SAMPLER, TINY_TRAIN, FlowEncodingConfig(), model.state_dict(), epoch=3)


def test_checkpoint_round_trip(tmp_path):
    ckpt = _checkpoint()
    save_checkpoint(tmp_path / "c.pt", ckpt)
    loaded = load_checkpoint(tmp_path / "c.pt", TINY_MODEL)
    assert loaded.epoch == 3 and loaded.class_order == list(CLASS_NAMES)
    assert loaded.sampler_config == TINY_SAMPLER and loaded.train_config == TINY_TRAIN
    x, f = torch.rand(2, 4, 3, 16, 16), torch.rand(2, 4, 1, 16, 16)
    with torch.no_grad():
        assert torch.equal(ckpt.build()(x, f), loaded.build()(x, f))


def test_checkpoint_config_mismatch(tmp_path):
    save_checkpoint(tmp_path / "c.pt", _checkpoint())
    with pytest.raises(CheckpointMismatch, match="classifier_hidden"):
        load_checkpoint(tmp_path / "c.pt", ModelConfig(sequence_length=4, pretrained_backbone=False,
                                                       classifier_hidden=128))


def test_checkpoint_class_order_mismatch(tmp_path):
    save_checkpoint(tmp_path / "c.pt", _checkpoint())
    with pytest.raises(CheckpointMismatch, match="class order"):
        load_checkpoint(tmp_path / "c.pt", class_order=list(reversed(CLASS_NAMES)))


# ------------------------------------------------------------------- training


@pytest.fixture(scope="module")
def corpus(tiny_corpus):
    return Corpus(tiny_corpus)


def _same_state(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_fit_writes_outputs_and_is_deterministic(corpus, tmp_path):
    store = SampleStore(corpus, TINY_SAMPLER)
    first = fit(corpus, TINY_SAMPLER, TINY_MODEL, TINY_TRAIN, out_dir=tmp_path / "a", store=store)
    second = fit(corpus, TINY_SAMPLER, TINY_MODEL, TINY_TRAIN, out_dir=tmp_path / "b", store=store)
    assert [h["epoch"] for h in first.history] == [1, 2]
    assert set(first.history[0]) >= {"loss", "train_top1", "val_top1"}
    for name in ("best.pt", "last.pt", "history.jsonl"):
        assert (tmp_path / "a" / name).exists()
    assert _same_state(first.last.state_dict, second.last.state_dict)
    assert [h["loss"] for h in first.history] == [h["loss"] for h in second.history]


def test_resume_matches_uninterrupted_run(corpus, tmp_path):
    store = SampleStore(corpus, TINY_SAMPLER)
    straight = fit(corpus, TINY_SAMPLER, TINY_MODEL, TINY_TRAIN, store=store)
    from dataclasses import replace

    half = fit(corpus, TINY_SAMPLER, TINY_MODEL, replace(TINY_TRAIN, epochs=1), out_dir=tmp_path, store=store)
    assert half.last.epoch == 1
    resumed_from = load_checkpoint(tmp_path / "last.pt", TINY_MODEL)
    resumed = fit(corpus, TINY_SAMPLER, TINY_MODEL, TINY_TRAIN, resume=resumed_from, store=store)
    assert [h["epoch"] for h in resumed.history] == [1, 2]
    assert _same_state(straight.last.state_dict, resumed.last.state_dict)


def test_target_accuracy_stops_early(corpus):
    from dataclasses import replace

    res = fit(corpus, TINY_SAMPLER, TINY_MODEL, replace(TINY_TRAIN, epochs=5, target_train_top1=0.0))
    assert res.epochs_run == 1


def test_eval_logits_deterministic(corpus):
    store = SampleStore(corpus, TINY_SAMPLER)
    samples = corpus.samples(TINY_SAMPLER)[:6]
    model = _checkpoint().build()
    assert np.array_equal(predict_logits(model, store, samples), predict_logits(model, store, samples))
