import pytest

from apebehaviour.sampling import SamplerConfig
from apebehaviour.synthetic import GenConfig, generate

TINY_SAMPLER = SamplerConfig(sequence_length=4, sampling_stride=4, duration_threshold=8, crop_size=16)


def tiny_gen_config(**kw) -> GenConfig:
    base = dict(num_videos=9, frames_per_video=24, segment_frames=24, min_segment_frames=8,
                width=112, height=96, seed=3)
    base.update(kw)
    return GenConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Nine short videos, one behaviour each, small enough to train on in seconds."""
    root = tmp_path_factory.mktemp("tiny") / "corpus"
    generate(tiny_gen_config(), root)
    return root


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
