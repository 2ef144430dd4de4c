import numpy as np
import pytest
import torch

from dccomix.codec import RvqConfig, train_mini_rvq
from dccomix.config import ModelConfig
from dccomix.data import generate_synthetic_corpus, read_manifest, read_wav
from dccomix.data.corpus import resolve_audio


def tiny_model_config(**overrides) -> ModelConfig:
    """A few-thousand-parameter synthesizer that still has every submodule."""
    base = dict(
        speakers=["spk0", "spk1"],
        hidden_channels=16,
        inter_channels=16,
        filter_channels=32,
        text_layers=1,
        posterior_layers=2,
        flow_steps=2,
        flow_layers=1,
        sdp_filter=16,
        sdp_flows=2,
        upsample_initial=32,
        speaker_dim=8,
        style_dim=16,
        refenc_blocks=2,
        gst_filters=[8, 8, 16],
    )
    base.update(overrides)
    return ModelConfig(**base).validate()


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """2 x 2 x 2 x 3 synthetic corpus (24 items)."""
    out = tmp_path_factory.mktemp("tiny_corpus")
    generate_synthetic_corpus(out, 2, 2, 2, 3, seed=0)
    return out


@pytest.fixture(scope="session")
def tiny_waveforms(tiny_corpus):
    manifest = tiny_corpus / "manifest.tsv"
    return [read_wav(resolve_audio(manifest, r)) for r in read_manifest(manifest)]


@pytest.fixture(scope="session")
def fast_codec(tiny_waveforms):
    return train_mini_rvq(tiny_waveforms, RvqConfig(iterations=20))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    yield


# -- acceptance summary -------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
