"""EEG-to-text decoding: convolutional-transformer encoders, masked pre-training and text generation."""

from eeg2text.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from eeg2text.data import (
    Corpus, EEGRecording, Sentence, SynthConfig, Vocabulary, load_corpus, save_corpus, synth_corpus,
)
from eeg2text.evaluation import MetricsReport, bleu_n, evaluate, rouge1
from eeg2text.masking import MaskSpec, apply_mask, make_mask
from eeg2text.models import EEG2Text, ModelConfig, Pretrainer
from eeg2text.regions import ChannelPartition, default_partition
from eeg2text.training import TrainConfig, finetune, pretrain

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "ChannelPartition", "Corpus", "EEG2Text", "EEGRecording", "MaskSpec", "MetricsReport",
    "ModelConfig", "Pretrainer", "Sentence", "SynthConfig", "TrainConfig", "Vocabulary", "apply_mask",
    "bleu_n", "default_partition", "evaluate", "finetune", "load_checkpoint", "load_corpus", "make_mask",
    "pretrain", "rouge1", "save_checkpoint", "save_corpus", "synth_corpus",
]
