from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apebehaviour.annotations import BEHAVIOURS, BehaviourLabel, BoundingBox, Tracklet, TrackletEntry
from apebehaviour.sampling import (
    BalancedBatchSampler,
    SamplerConfig,
    SamplingError,
    SequenceSample,
    balanced_batches,
    crop_resize,
    extract_sequences,
    find_behaviour_runs,
    load_manifest,
    save_manifest,
)

from .oracles import brute_force_windows, random_tracklet

W, S, R, SIT = (BehaviourLabel.WALKING, BehaviourLabel.SITTING, BehaviourLabel.RUNNING,
                BehaviourLabel.SITTING)


def make_tracklet(segments, start=0):
    """segments: list of (behaviour, length) or ('gap', length)."""
    entries, t = [], start
    for beh, n in segments:
        if beh == "gap":
            t += n
            continue
        for _ in range(n):
            entries.append(TrackletEntry(t, beh, BoundingBox(t % 7, 0, t % 7 + 10, 10)))
            t += 1
    return Tracklet("v", 0, entries)


def test_single_long_run():
    runs = find_behaviour_runs(make_tracklet([(SIT, 100)]), 72)
    assert [(r.behaviour, r.length) for r in runs] == [(SIT, 100)]


def test_short_run_filtered():
    runs = find_behaviour_runs(make_tracklet([(W, 71), (SIT, 80)]), 72)
    assert [(r.behaviour, r.start_frame, r.length) for r in runs] == [(SIT, 71, 80)]


def test_gap_breaks_run():
    assert find_behaviour_runs(make_tracklet([(W, 41), ("gap", 5), (W, 39)]), 72) == []


@pytest.mark.parametrize("length, expected", [(72, [0, 20, 40]), (80, [0, 20, 40, 60])])
def test_window_arithmetic(length, expected):
    (run,) = find_behaviour_runs(make_tracklet([(W, length)], start=5), 72)
    samples = extract_sequences(run, SamplerConfig())
    assert [s.start_frame - 5 for s in samples] == expected
    assert all(s.sequence_length == 20 and len(s.bboxes) == 20 for s in samples)


def test_exact_fit_with_lowered_threshold():
    cfg = SamplerConfig(20, 20, 20)
    (run,) = find_behaviour_runs(make_tracklet([(W, 20)]), cfg.duration_threshold)
    assert len(extract_sequences(run, cfg)) == 1


def test_below_threshold_run_is_contract_error():
    (run,) = find_behaviour_runs(make_tracklet([(W, 30)]), 20)
    with pytest.raises(SamplingError):
        extract_sequences(run, SamplerConfig())


def test_config_invariants():
    with pytest.raises(SamplingError):
        SamplerConfig(sequence_length=80)
    with pytest.raises(SamplingError):
        SamplerConfig(sampling_stride=0)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([(20, 20, 72), (5, 3, 10), (10, 10, 10), (7, 12, 30)]))
def test_matches_brute_force(seed, params):
    cfg = SamplerConfig(*params)
    tracklet = random_tracklet(np.random.default_rng(seed))
    got = [(s.start_frame, s.label) for run in find_behaviour_runs(tracklet, cfg.duration_threshold)
           for s in extract_sequences(run, cfg)]
    assert got == brute_force_windows(tracklet, cfg)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_consecutive_samples_share_no_frames(seed):
    cfg = SamplerConfig()
    tracklet = random_tracklet(np.random.default_rng(seed))
    for run in find_behaviour_runs(tracklet, cfg.duration_threshold):
        samples = extract_sequences(run, cfg)
        for a, b in zip(samples, samples[1:]):
            assert a.end_frame < b.start_frame
        for s in samples:
            assert run.start_frame <= s.start_frame and s.end_frame <= run.end_frame


def test_manifest_round_trip(tmp_path):
    (run,) = find_behaviour_runs(make_tracklet([(W, 80)]), 72)
    samples = extract_sequences(run, SamplerConfig())
    save_manifest(tmp_path / "m.jsonl", samples, SamplerConfig())
    loaded, cfg = load_manifest(tmp_path / "m.jsonl")
    assert loaded == samples and cfg == SamplerConfig()


# ------------------------------------------------------------------ cropping


def test_crop_shape_and_clamping():
    img = np.arange(60 * 80 * 3, dtype=np.uint8).reshape(60, 80, 3)
    assert crop_resize(img, BoundingBox(10, 10, 40, 30), 224).shape == (224, 224, 3)
    # box running past the right/bottom border is clamped, not an error
    border = crop_resize(img, BoundingBox(70, 50, 120, 90), 32)
    assert border.shape == (32, 32, 3)
    assert np.array_equal(border, crop_resize(img, BoundingBox(70, 50, 80, 60), 32))


def test_degenerate_box_upsampled():
    img = np.zeros((20, 20, 3), np.uint8)
    img[5, 5] = 200
    patch = crop_resize(img, BoundingBox(5, 5, 6, 6), 16)
    assert patch.shape == (16, 16, 3) and (patch == 200).all()


# ------------------------------------------------------------ balanced batches


def _fake(labels):
    return [SequenceSample("v", i, 0, 20, BEHAVIOURS[c], ()) for i, c in enumerate(labels)]


def test_one_per_class_with_batch_nine():
    rng = np.random.default_rng(0)
    labels = list(range(9)) + list(rng.integers(0, 9, 200))
    for batch in balanced_batches(_fake(labels), 9, seed=1):
        assert sorted(s.label.index for s in batch) == list(range(9))


def test_minority_oversampled():
    labels = [W.index] * 100 + [R.index] * 2
    samples = _fake(labels)
    batches = list(balanced_batches(samples, 2, seed=0, classes=[W, R]))
    assert len(batches) == 100
    counts = Counter(s.ape_id for b in batches for s in b if s.label is R)
    assert sorted(counts.values()) == [50, 50]
    walking = Counter(s.ape_id for b in batches for s in b if s.label is W)
    assert len(walking) == 100 and set(walking.values()) == {1}


def test_batch_not_divisible():
    with pytest.raises(SamplingError, match="not divisible"):
        BalancedBatchSampler(list(range(9)), batch_size=10)


def test_missing_class_named():
    with pytest.raises(SamplingError, match="hanging"):
        BalancedBatchSampler([0, 1, 2, 4, 5, 6, 7, 8], batch_size=9)


def test_epoch_length_and_determinism():
    labels = [0] * 30 + list(range(1, 9)) * 2
    sampler = BalancedBatchSampler(labels, 9, seed=5)
    assert len(sampler) == 30
    first = list(sampler)
    again = list(BalancedBatchSampler(labels, 9, seed=5))
    assert first == again
    sampler.set_epoch(1)
    assert list(sampler) != first
