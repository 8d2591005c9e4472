import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from eeg2text.data import SynthConfig, synth_corpus  # noqa: E402
from eeg2text.models import ModelConfig  # noqa: E402
from eeg2text.training import normalize_corpus  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus():
    """8 sentences over a 12-word vocabulary, 105 canonical channels."""
    return normalize_corpus(synth_corpus(SynthConfig(n_sentences=8, vocab_size=12, seed=3, sentence_length=(3, 5))))


@pytest.fixture(scope="session")
def tiny_cfg(small_corpus):
    return ModelConfig(vocab_size=len(small_corpus.vocabulary), channel_labels=small_corpus.channel_labels,
                       d_model=16, n_heads=2, n_encoder_layers=1, n_decoder_layers=1, n_global_layers=1,
                       max_text_len=12)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and getattr(mod, "RESULTS", None):
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
