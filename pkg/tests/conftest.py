import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mecd.annotations import VideoSample, Vocabulary, attach_features, vocabulary_texts
from mecd.synth import SynthConfig, generate_dataset

settings.register_profile(
    "repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


def make_sample(n=5, vid="v0", seed=0, feature_dim=4, frames_per_event=3, cot=None, existence=None):
    """A small valid sample with frames attached."""
    rng = np.random.default_rng(seed)
    words = "the dog enters room a cat jumps over fence someone opens door".split()
    sentences = [" ".join(rng.choice(words, size=rng.integers(3, 8))) for _ in range(n)]
    t = n * frames_per_event
    sample = VideoSample(
        video_id=vid,
        duration=float(t),
        timestamps=[(float(i * frames_per_event), float((i + 1) * frames_per_event)) for i in range(n)],
        sentences=sentences,
        relation=[int(x) for x in rng.integers(0, 2, size=n - 1)],
        cot=cot or [],
        existence=existence or [],
    )
    feats = rng.standard_normal((t, feature_dim)).astype(np.float32)
    return attach_features(sample, feats)


@pytest.fixture(scope="session")
def tiny_synth():
    cfg = SynthConfig(num_videos=24, test_videos=8, seed=7)
    return generate_dataset(cfg)


@pytest.fixture(scope="session")
def tiny_samples(tiny_synth):
    return [attach_features(v.sample, v.features) for v in tiny_synth.train + tiny_synth.test]


@pytest.fixture(scope="session")
def tiny_vocab(tiny_samples):
    return Vocabulary.build(vocabulary_texts(tiny_samples))


def pytest_terminal_summary(terminalreporter):
    from trained import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
